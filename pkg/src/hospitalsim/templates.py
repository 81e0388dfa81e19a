"""Named prompt templates.

Every prompt the package sends is rendered from a `<stage>.txt` file with
named `{placeholder}` fields. A default set ships with the package; a config
may point at an overriding directory.
"""

from __future__ import annotations

from pathlib import Path

from .errors import TemplateMissingError


class TemplateSet:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._cache: dict[str, str] = {}

    def raw(self, stage: str) -> str:
        if stage not in self._cache:
            path = self.directory / f"{stage}.txt"
            if not path.exists():
                raise TemplateMissingError(f"template {stage!r} not found at {path}")
            self._cache[stage] = path.read_text(encoding="utf-8")
        return self._cache[stage]

    def render(self, stage: str, **fields: str) -> str:
        try:
            return self.raw(stage).format(**fields)
        except KeyError as exc:
            raise TemplateMissingError(
                f"template {stage!r} references unknown placeholder {exc}"
            ) from exc


def default_template_dir() -> Path:
    return Path(__file__).parent / "templates"


def default_templates() -> TemplateSet:
    return TemplateSet(default_template_dir())
