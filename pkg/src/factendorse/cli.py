"""Command-line entry points: run, sweep, report.

``run`` executes one method over a dataset and writes per-query run records
plus a metrics report under the output directory. ``sweep`` repeats a run
across one axis (alpha, n, m, or k) sharing a response cache, so unchanged
stages replay instead of recomputing. ``report`` rebuilds a report from
records already on disk; every reported number is recomputable that way.

Exit codes: 0 success, 1 partial failure, 2 configuration error,
3 backend unreachable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import ALL, PipelineConfig, RunRecord, TaskKind
from .evalharness import (
    Example,
    MetricsReport,
    ExampleMetrics,
    OracleJudge,
    ParseError,
    answer_recall,
    judge_facts,
    load_dataset,
    sample_examples,
)
from .baselines import extract_final_answer, normalize_number
from .gateway import (
    BackendSpec,
    Gateway,
    HttpBackend,
    ResponseCache,
    ScriptedBackend,
    TransportError,
)
from .pipeline import METHODS, Runner
from .prompts import PromptCatalog, load_catalog

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_UNREACHABLE = 3

SWEEP_AXES = ("alpha", "n", "m", "k")


class ConfigError(Exception):
    """Bad flags, bad config file, or unusable input files."""


@dataclasses.dataclass
class RunManifest:
    """Everything needed to reproduce or resume a run."""

    run_id: str
    method: str
    dataset: str
    task_kind: TaskKind
    backend: BackendSpec
    config: PipelineConfig
    out_dir: str
    strict: bool = False
    judge_bank: Optional[str] = None
    sample_size: Optional[int] = None
    catalog_path: Optional[str] = None
    statuses: dict = dataclasses.field(default_factory=dict)

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id

    def record_path(self, query_id: str) -> Path:
        return self.run_dir() / f"{query_id}.jsonl"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "method": self.method,
            "dataset": self.dataset,
            "task_kind": self.task_kind.value,
            "backend": self.backend.to_dict(),
            "config": self.config.to_dict(),
            "out_dir": self.out_dir,
            "strict": self.strict,
            "judge_bank": self.judge_bank,
            "sample_size": self.sample_size,
            "catalog_path": self.catalog_path,
            "statuses": dict(self.statuses),
        }

    def save(self) -> None:
        self.run_dir().mkdir(parents=True, exist_ok=True)
        path = self.run_dir() / "manifest.json"
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunManifest":
        return cls(
            run_id=d["run_id"],
            method=d["method"],
            dataset=d["dataset"],
            task_kind=TaskKind(d["task_kind"]),
            backend=BackendSpec.from_dict(d["backend"]),
            config=PipelineConfig.from_dict(d["config"]),
            out_dir=d["out_dir"],
            strict=d.get("strict", False),
            judge_bank=d.get("judge_bank"),
            sample_size=d.get("sample_size"),
            catalog_path=d.get("catalog_path"),
            statuses=dict(d.get("statuses", {})),
        )

    @classmethod
    def load(cls, run_dir: str) -> "RunManifest":
        path = Path(run_dir) / "manifest.json"
        if not path.exists():
            raise ConfigError(f"no manifest.json in {run_dir}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def build_backend_spec(
    backend: str, model: Optional[str], auth_env: Optional[str]
) -> BackendSpec:
    if backend.startswith(("http://", "https://")):
        if not model:
            raise ConfigError("an HTTP backend needs --model")
        return BackendSpec(
            kind="http", endpoint=backend, model=model, auth_env=auth_env
        )
    if not Path(backend).exists():
        raise ConfigError(f"scripted backend file not found: {backend}")
    return BackendSpec(kind="scripted", script_path=backend)


def build_gateway(manifest: RunManifest, cache_path: Optional[str]) -> Gateway:
    spec = manifest.backend
    if spec.kind == "scripted":
        if not Path(spec.script_path).exists():
            raise ConfigError(f"scripted backend file not found: {spec.script_path}")
        backend: Any = ScriptedBackend.from_file(spec.script_path)
        backend.model_id = spec.model_id()
    else:
        backend = HttpBackend(spec, top_p=manifest.config.top_p)
    cache = ResponseCache(cache_path)
    return Gateway(backend, cache=cache, max_inflight=manifest.config.max_inflight)


def load_judge_bank(path: Optional[str]) -> Optional[dict]:
    if path is None:
        return None
    try:
        bank = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read judge bank {path}: {exc}") from exc
    if not isinstance(bank, dict):
        raise ConfigError(f"judge bank {path} must map example ids to fact lists")
    return {str(k): [str(f) for f in v] for k, v in bank.items()}


def metrics_for_record(
    record: RunRecord, task_kind: TaskKind, judge_bank: Optional[dict]
) -> ExampleMetrics:
    """Recompute one example's metrics from its persisted record alone."""
    fact_acc = None
    if judge_bank is not None and record.query.id in judge_bank:
        judge = OracleJudge(judge_bank[record.query.id])
        fact_acc = judge_facts(list(record.final_facts), judge)
    ans_rec = None
    acc = None
    if task_kind is TaskKind.SHORT_QA and record.gold:
        ans_rec = answer_recall(record.final_response, list(record.gold))
    if task_kind is TaskKind.MATH and record.gold is not None:
        extraction = extract_final_answer(record.final_response, TaskKind.MATH)
        acc = (
            extraction.answer is not None
            and extraction.answer == normalize_number(str(record.gold))
        )
    return ExampleMetrics(
        example_id=record.query.id,
        fact_acc=fact_acc,
        n_fact=len(record.final_facts),
        ans_rec=ans_rec,
        acc=acc,
    )


def build_report(
    records: Sequence[RunRecord],
    method: str,
    task_kind: TaskKind,
    judge_bank: Optional[dict],
    errors: Optional[Mapping[str, str]] = None,
) -> MetricsReport:
    per_example = [metrics_for_record(r, task_kind, judge_bank) for r in records]
    for example_id, message in sorted((errors or {}).items()):
        per_example.append(ExampleMetrics(example_id=example_id, error=message))
    per_example.sort(key=lambda m: m.example_id)
    return MetricsReport.build(method, task_kind, per_example)


def load_run_records(run_dir: Path) -> list:
    records = []
    for path in sorted(run_dir.glob("*.jsonl")):
        line = path.read_text(encoding="utf-8").strip()
        if not line:
            continue
        records.append(RunRecord.from_json_line(line.splitlines()[-1]))
    return records


def execute_run(
    manifest: RunManifest,
    gateway: Optional[Gateway] = None,
    catalog: Optional[PromptCatalog] = None,
) -> tuple:
    """Run every pending example; returns (report, errors by example id).

    Examples whose record file already exists are skipped, which is what
    makes an interrupted run resumable. The report always covers every
    record present on disk, not just this invocation's work.
    """
    try:
        examples = load_dataset(manifest.dataset, manifest.task_kind)
    except (OSError, ParseError) as exc:
        raise ConfigError(str(exc)) from exc
    if manifest.sample_size is not None:
        examples = sample_examples(
            examples, manifest.sample_size, manifest.config.seed
        )
    judge_bank = load_judge_bank(manifest.judge_bank)
    if gateway is None:
        cache_path = str(Path(manifest.out_dir) / "cache.jsonl")
        gateway = build_gateway(manifest, cache_path)
    if catalog is None:
        catalog = load_catalog(manifest.catalog_path)

    runner = Runner(
        gateway=gateway,
        catalog=catalog,
        config=manifest.config,
        run_id=manifest.run_id,
    )
    manifest.run_dir().mkdir(parents=True, exist_ok=True)

    pending = []
    for example in examples:
        if manifest.record_path(example.id).exists():
            manifest.statuses[example.id] = "done"
        else:
            pending.append(example)

    def run_one(example: Example) -> Optional[str]:
        record = runner.run_query(
            example.to_query(), manifest.method, gold=example.gold
        )
        record_path = manifest.record_path(example.id)
        tmp_path = record_path.with_suffix(".tmp")
        tmp_path.write_text(record.to_json_line() + "\n", encoding="utf-8")
        tmp_path.replace(record_path)
        return None

    errors: dict = {}
    if manifest.strict:
        # Sequential so the first failure can actually stop the run.
        for example in pending:
            try:
                run_one(example)
                manifest.statuses[example.id] = "done"
            except Exception as exc:
                errors[example.id] = f"{type(exc).__name__}: {exc}"
                manifest.statuses[example.id] = f"error: {exc}"
                logger.error("example %s failed: %s", example.id, exc)
                break
    elif pending:
        # The gateway's semaphore caps aggregate backend calls; this pool
        # only overlaps per-example bookkeeping.
        from concurrent.futures import ThreadPoolExecutor

        def safe(example: Example) -> Optional[str]:
            try:
                run_one(example)
                return None
            except Exception as exc:
                logger.error("example %s failed: %s", example.id, exc)
                return f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=min(4, len(pending))) as pool:
            outcomes = list(pool.map(safe, pending))
        for example, outcome in zip(pending, outcomes):
            if outcome is None:
                manifest.statuses[example.id] = "done"
            else:
                errors[example.id] = outcome
                manifest.statuses[example.id] = f"error: {outcome}"

    records = load_run_records(manifest.run_dir())
    report = build_report(
        records, manifest.method, manifest.task_kind, judge_bank, errors
    )
    run_dir = manifest.run_dir()
    (run_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (run_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    manifest.save()
    return report, errors


def run_exit_code(report: MetricsReport, errors: Mapping[str, str]) -> int:
    if not errors:
        return EXIT_OK
    completed = report.n_examples - len(errors)
    if completed <= 0 and all(
        message.startswith("TransportError") for message in errors.values()
    ):
        return EXIT_UNREACHABLE
    return EXIT_PARTIAL


def _sweep_value(axis: str, raw: str) -> Any:
    raw = raw.strip()
    if axis == "alpha":
        return float(raw)
    if axis == "k":
        return ALL if raw.lower() == ALL else int(raw)
    return int(raw)


def sweep_config(config: PipelineConfig, axis: str, value: Any) -> PipelineConfig:
    if axis == "alpha":
        return dataclasses.replace(config, alpha=value)
    if axis == "n":
        m = config.m_candidates
        if m is not None and m > value:
            m = value
        return dataclasses.replace(config, n_candidates=value, m_candidates=m)
    if axis == "m":
        return dataclasses.replace(config, m_candidates=value)
    if axis == "k":
        return dataclasses.replace(config, context_k=value)
    raise ConfigError(f"unknown sweep axis {axis!r}")


def execute_sweep(
    base_manifest: RunManifest, axis: str, values: Sequence[Any]
) -> tuple:
    """Run the method once per axis value, sharing one gateway and cache.

    Stages whose inputs do not change across values replay from the cache.
    Returns (rows, combined errors); each row pairs the axis value with the
    run's metric summary.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cache_path = str(Path(base_manifest.out_dir) / "cache.jsonl")
    gateway = build_gateway(base_manifest, cache_path)
    catalog = load_catalog(base_manifest.catalog_path)

    rows = []
    all_errors: dict = {}
    for value in values:
        try:
            config = sweep_config(base_manifest.config, axis, value)
        except ValueError as exc:
            raise ConfigError(f"{axis}={value}: {exc}") from exc
        sub = dataclasses.replace(
            base_manifest,
            run_id=f"{base_manifest.run_id}-{axis}-{value}",
            config=config,
            statuses={},
        )
        report, errors = execute_run(sub, gateway=gateway, catalog=catalog)
        rows.append({"value": value, "run_id": sub.run_id, **report.summary()})
        for example_id, message in errors.items():
            all_errors[f"{sub.run_id}/{example_id}"] = message

    sweep_dir = Path(base_manifest.out_dir) / f"{base_manifest.run_id}-sweep-{axis}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    payload = {"axis": axis, "rows": rows}
    (sweep_dir / "sweep.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (sweep_dir / "sweep.txt").write_text(
        sweep_table_text(axis, rows) + "\n", encoding="utf-8"
    )
    return rows, all_errors


def sweep_table_text(axis: str, rows: Sequence[Mapping[str, Any]]) -> str:
    def fmt(value: Any) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    header = f"{axis:<10}{'examples':>10}{'fact_acc':>10}{'n_fact':>10}{'ans_rec':>10}{'acc':>10}"
    lines = [header]
    for row in rows:
        lines.append(
            f"{fmt(row['value']):<10}"
            f"{row['n_examples']:>10}"
            f"{fmt(row['fact_acc']):>10}"
            f"{fmt(row['n_fact']):>10}"
            f"{fmt(row['ans_rec']):>10}"
            f"{fmt(row['acc']):>10}"
        )
    return "\n".join(lines)


_DEFAULTS = {
    "task": "longform",
    "n": 10,
    "k": "3",
    "alpha": 0.8,
    "m": None,
    "temperature": 1.0,
    "seed": 0,
    "out": "out",
    "strict": False,
    "max_inflight": 8,
    "model": None,
    "auth_env": None,
    "judge_bank": None,
    "sample": None,
    "run_id": None,
    "catalog": None,
    "max_tokens": 1024,
}


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a table of settings")
    return data


def _setting(args: argparse.Namespace, file_config: Mapping[str, Any], key: str) -> Any:
    """Flag value if given, else config-file value, else built-in default."""
    from_args = getattr(args, key.replace("-", "_"), None)
    if from_args is not None:
        return from_args
    if key in file_config:
        return file_config[key]
    return _DEFAULTS.get(key)


def _parse_context_k(raw: Any) -> Any:
    if isinstance(raw, int):
        return raw
    text = str(raw).strip().lower()
    if text == ALL:
        return ALL
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"--k must be a positive integer or 'all', got {raw!r}")


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    file_config = _load_config_file(getattr(args, "config", None))

    def setting(key: str) -> Any:
        return _setting(args, file_config, key)

    method = setting("method")
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {', '.join(METHODS)}")
    dataset = setting("dataset")
    if not dataset:
        raise ConfigError("--dataset is required")
    if not Path(dataset).exists():
        raise ConfigError(f"dataset file not found: {dataset}")
    task_raw = setting("task")
    try:
        task_kind = TaskKind(task_raw)
    except ValueError:
        raise ConfigError(f"--task must be one of longform, short_qa, math")
    backend_raw = setting("backend")
    if not backend_raw:
        raise ConfigError("--backend is required (URL or script file path)")
    backend = build_backend_spec(backend_raw, setting("model"), setting("auth_env"))
    try:
        config = PipelineConfig(
            n_candidates=int(setting("n")),
            context_k=_parse_context_k(setting("k")),
            alpha=float(setting("alpha")),
            m_candidates=(int(setting("m")) if setting("m") is not None else None),
            temperature=float(setting("temperature")),
            seed=int(setting("seed")),
            max_inflight=int(setting("max_inflight")),
            max_tokens=int(setting("max_tokens")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run_id = setting("run_id")
    if not run_id:
        digest = hashlib.sha256(
            json.dumps(
                {
                    "method": method,
                    "dataset": dataset,
                    "task": task_kind.value,
                    "config": config.to_dict(),
                },
                sort_keys=True,
            ).encode("utf-8")
        ).hexdigest()[:8]
        run_id = f"{method}-{digest}"
    sample_size = setting("sample")
    return RunManifest(
        run_id=run_id,
        method=method,
        dataset=dataset,
        task_kind=task_kind,
        backend=backend,
        config=config,
        out_dir=str(setting("out")),
        strict=bool(setting("strict")),
        judge_bank=setting("judge_bank"),
        sample_size=(int(sample_size) if sample_size is not None else None),
        catalog_path=setting("catalog"),
    )


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    parser.add_argument("--dataset", help="dataset file path")
    parser.add_argument("--task", help="longform, short_qa, or math")
    parser.add_argument(
        "--backend",
        help="http(s) endpoint base URL, or path to a scripted-backend rules file",
    )
    parser.add_argument("--model", help="model name for HTTP backends")
    parser.add_argument(
        "--auth-env", help="environment variable holding the bearer token"
    )
    parser.add_argument("--n", type=int, help="number of sampled candidates")
    parser.add_argument("--k", help="facts of context per verification, or 'all'")
    parser.add_argument("--alpha", type=float, help="endorsement score threshold")
    parser.add_argument("--m", type=int, help="use only the first m candidates")
    parser.add_argument("--temperature", type=float, help="sampling temperature")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--max-tokens", type=int, help="completion token cap")
    parser.add_argument("--out", help="output directory (default: out)")
    parser.add_argument(
        "--strict", action="store_true", default=None, help="abort on first failure"
    )
    parser.add_argument(
        "--max-inflight", type=int, help="max concurrent backend calls"
    )
    parser.add_argument("--config", help="TOML settings file; flags override it")
    parser.add_argument("--judge-bank", help="JSON file of reference facts per example")
    parser.add_argument("--sample", type=int, help="evaluate a seeded subset this big")
    parser.add_argument("--run-id", help="override the derived run id")
    parser.add_argument("--catalog", help="alternate prompt catalog file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factendorse",
        description="Cross-sample fact endorsement pipeline and baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one method over a dataset")
    _add_run_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="repeat a run across one axis")
    _add_run_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, help="alpha, n, m, or k")
    sweep_p.add_argument(
        "--values", required=True, help="comma-separated axis values"
    )

    report_p = sub.add_parser(
        "report", help="rebuild a report from persisted run records"
    )
    report_p.add_argument("--run-dir", required=True, help="directory with records")
    report_p.add_argument("--judge-bank", help="JSON file of reference facts")

    return parser


def cmd_run(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    report, errors = execute_run(manifest)
    print(report.to_text())
    if errors:
        print(f"\n{len(errors)} example(s) failed:", file=sys.stderr)
        for example_id, message in sorted(errors.items()):
            print(f"  {example_id}: {message}", file=sys.stderr)
    return run_exit_code(report, errors)


def cmd_sweep(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    values = [_sweep_value(args.axis, v) for v in args.values.split(",") if v.strip()]
    rows, errors = execute_sweep(manifest, args.axis, values)
    print(sweep_table_text(args.axis, rows))
    if errors:
        print(f"\n{len(errors)} example run(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    manifest = RunManifest.load(args.run_dir)
    judge_bank = load_judge_bank(args.judge_bank or manifest.judge_bank)
    records = load_run_records(Path(args.run_dir))
    report = build_report(records, manifest.method, manifest.task_kind, judge_bank)
    (Path(args.run_dir) / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (Path(args.run_dir) / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"error: backend unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    sys.exit(main())
