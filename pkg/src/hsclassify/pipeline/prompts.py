"""Versioned prompt templates (``prompts/<version>/<call>.{system,user}.txt``)."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template


def _render(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, indent=2, ensure_ascii=False)


class PromptSet:
    def __init__(self, version: str = "v1", root: str | Path | None = None):
        self.version = version
        if root is None:
            self._dir = resources.files("hsclassify") / "prompts" / version
        else:
            self._dir = Path(root) / version
        if not self._dir.is_dir():
            raise FileNotFoundError(f"no prompt templates for version {version!r}")

    def _template(self, call: str, part: str) -> Template:
        return Template((self._dir / f"{call}.{part}.txt").read_text(encoding="utf-8"))

    def render(self, call: str, **values) -> tuple[str, str]:
        """System and user prompt for ``call``; every placeholder must be supplied."""
        rendered = {k: _render(v) for k, v in values.items()}
        system = self._template(call, "system").safe_substitute(rendered)
        user = self._template(call, "user").substitute(rendered)
        return system, user


@lru_cache(maxsize=None)
def default_prompts(version: str = "v1") -> PromptSet:
    return PromptSet(version)
