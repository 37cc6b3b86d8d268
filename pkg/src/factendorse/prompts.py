"""Plain-text prompt catalog: named templates with {placeholder} slots.

Templates live in a text file so they can be inspected and swapped without
touching code. The bundled catalog ships as package data; ``load_catalog``
reads any file in the same format.
"""

from __future__ import annotations

import re
from importlib import resources
from typing import Mapping

_HEADER_RE = re.compile(r"^\[([a-z0-9_]+)\]\s*$")
_PLACEHOLDER_RE = re.compile(r"\{([a-z0-9_]+)\}")


class PromptError(Exception):
    """Unknown template name or a placeholder left unfilled."""


def parse_catalog(text: str) -> dict:
    """Parse catalog text into {name: template body}.

    A body keeps its internal newlines; leading and trailing blank lines are
    trimmed. Anything before the first header is ignored, which is where
    file-level comments go.
    """
    templates: dict = {}
    name = None
    body: list = []

    def flush() -> None:
        if name is None:
            return
        joined = "\n".join(body).strip("\n")
        templates[name] = joined

    for line in text.splitlines():
        m = _HEADER_RE.match(line)
        if m:
            flush()
            name = m.group(1)
            body = []
            if name in templates:
                raise PromptError(f"duplicate template name: {name}")
        elif name is not None:
            body.append(line)
    flush()
    return templates


class PromptCatalog:
    def __init__(self, templates: Mapping[str, str]):
        self._templates = dict(templates)

    def names(self) -> list:
        return sorted(self._templates)

    def template(self, name: str) -> str:
        try:
            return self._templates[name]
        except KeyError:
            raise PromptError(f"no template named {name!r}") from None

    def render(self, name: str, /, **fields: str) -> str:
        """Substitute every {placeholder} in the named template.

        Substitution is verbatim (no escaping), and a placeholder without a
        matching field is an error rather than silently kept.
        """
        template = self.template(name)
        missing: list = []

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in fields:
                missing.append(key)
                return m.group(0)
            return str(fields[key])

        rendered = _PLACEHOLDER_RE.sub(sub, template)
        if missing:
            raise PromptError(
                f"template {name!r} is missing fields: {sorted(set(missing))}"
            )
        return rendered


def load_catalog(path: str | None = None) -> PromptCatalog:
    """Load a catalog file, or the bundled default when no path is given."""
    if path is None:
        text = (
            resources.files("factendorse")
            .joinpath("data/prompt_catalog.txt")
            .read_text(encoding="utf-8")
        )
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    templates = parse_catalog(text)
    if not templates:
        raise PromptError("catalog contains no templates")
    return PromptCatalog(templates)
