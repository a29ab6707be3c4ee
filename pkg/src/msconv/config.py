"""JSON run configuration with ``model``, ``train`` and ``data`` sections.

Unknown sections or keys are rejected with the line and column where they
appear.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .networks import ModelConfig
from .pipeline import DatasetSpec, TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec}


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, col: int | None = None):
        self.source, self.line, self.col = source, line, col
        where = f"{source}:{line}:{col}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec | None = None

    def to_dict(self) -> dict:
        d = {"model": self.model.to_dict(), "train": self.train.to_dict()}
        if self.data is not None:
            d["data"] = {f.name: getattr(self.data, f.name) for f in fields(DatasetSpec)}
        return d


def _locate(text: str, key: str, after: int = 0) -> tuple[int, int, int]:
    m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, after)
    if m is None:
        return 0, None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    return m.end(), line, col


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, source, e.lineno, e.colno) from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", source, 1, 1)
    for name in doc:
        if name not in SECTIONS:
            _, line, col = _locate(text, name)
            raise ConfigError(f"unknown section {name!r}", source, line, col)
    out = {}
    for name, cls in SECTIONS.items():
        body = doc.get(name)
        if body is None:
            continue
        start, sline, scol = _locate(text, name)
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object", source, sline, scol)
        known = {f.name for f in fields(cls)}
        for key in body:
            if key not in known:
                _, line, col = _locate(text, key, start)
                raise ConfigError(f"unknown key {name}.{key}", source, line, col)
        try:
            out[name] = cls(**body)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"section {name!r}: {e}", source, sline, scol) from None
    return RunConfig(out.get("model", ModelConfig()), out.get("train", TrainConfig()), out.get("data"))


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(str(e), str(p)) from None
    return parse_config(text, str(p))


def default_config_text() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2)
