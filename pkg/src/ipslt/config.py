"""Run configuration: one JSON document bundling model, training, beam and task settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .data import SyntheticTaskSpec
from .decoding import BeamConfig
from .errors import FormatError, UsageError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "beam": BeamConfig, "task": SyntheticTaskSpec}


def _section_from_dict(cls, values, section):
    if not isinstance(values, dict):
        raise UsageError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config key {section}.{unknown[0]}")
    return cls(**values)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    seed: int = 0
    paths: dict = field(default_factory=lambda: {"data": None, "out": None})

    def __post_init__(self):
        self.sync()

    def sync(self):
        """Keep the model's vocabulary and frame width in line with the task."""
        self.model = replace(self.model, vocab_size=self.task.vocab_size,
                             frame_dim=self.task.frame_dim)
        return self

    def to_dict(self):
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["seed"] = self.seed
        out["paths"] = dict(self.paths)
        return out

    @classmethod
    def from_dict(cls, values):
        unknown = sorted(set(values) - set(SECTIONS) - {"seed", "paths"})
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]}")
        kwargs = {name: _section_from_dict(SECTIONS[name], values[name], name)
                  for name in SECTIONS if name in values}
        if "paths" in values:
            paths = values["paths"]
            bad = sorted(set(paths) - {"data", "out"})
            if bad:
                raise UsageError(f"unknown config key paths.{bad[0]}")
            kwargs["paths"] = {"data": None, "out": None, **paths}
        if "seed" in values:
            kwargs["seed"] = int(values["seed"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc.msg}", exc.lineno) from None
        return cls.from_dict(values)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, assignments):
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        values = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise UsageError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.split(".")
            target = values
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise UsageError(f"unknown config key {key}")
                target = target[part]
            if parts[-1] not in target:
                raise UsageError(f"unknown config key {key}")
            target[parts[-1]] = value
        return RunConfig.from_dict(values)


def first_mismatch(a, b, prefix="", ignore=()):
    """Dotted name of the first differing key between two nested dicts, or None."""
    for key in sorted(set(a) | set(b)):
        name = f"{prefix}{key}"
        if name in ignore:
            continue
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            found = first_mismatch(va, vb, name + ".", ignore)
            if found:
                return found
        elif va != vb:
            return name
    return None
