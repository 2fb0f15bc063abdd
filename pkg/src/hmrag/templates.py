"""Prompt template loading and rendering.

Templates ship as plain-text files under ``hmrag/prompts/`` and use
``{name}`` placeholders. A config-supplied directory can override any
template by filename, and individual templates can be overridden by path.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .errors import ConfigError

TEMPLATE_NAMES = (
    "judge_intent",
    "decompose",
    "refine_caption",
    "extract_graph",
    "keywords",
    "vector_header",
    "graph_answer",
    "web_answer",
    "summarize",
    "refine_lightweight",
    "refine_expert",
    "final_refine",
)

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


def render(template: str, **fields) -> str:
    """Substitute {name} placeholders in a single pass.

    Field values are never re-scanned, so user content containing braces
    cannot inject further substitutions.
    """

    def _sub(match):
        key = match.group(1)
        return str(fields[key]) if key in fields else match.group(0)

    return _PLACEHOLDER.sub(_sub, template)


class TemplateSet:
    """Named prompt templates with optional per-file overrides."""

    def __init__(self, overrides_dir: str | Path | None = None,
                 file_overrides: dict[str, str] | None = None):
        self._overrides_dir = Path(overrides_dir) if overrides_dir else None
        self._file_overrides = dict(file_overrides or {})
        self._cache: dict[str, str] = {}

    def text(self, name: str) -> str:
        if name not in TEMPLATE_NAMES:
            raise ConfigError(f"unknown template {name!r}")
        if name not in self._cache:
            self._cache[name] = self._load(name)
        return self._cache[name]

    def _load(self, name: str) -> str:
        override = self._file_overrides.get(name)
        if override:
            return Path(override).read_text(encoding="utf-8")
        if self._overrides_dir is not None:
            candidate = self._overrides_dir / f"{name}.txt"
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        return (
            resources.files("hmrag").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
        )

    def render(self, name: str, **fields) -> str:
        return render(self.text(name), **fields)
