"""Run configuration: one JSON document driving synth/pretrain/eval/ablate.

Schema (all sections optional except paths):

    {
      "train":    { TrainConfig fields, incl. nested "model": {...} },
      "paths":    { "corpus_dir": str, "out_dir": str, "prompt_file": str? },
      "ablation": { "loss": [[gca, tma], ...], "views": [int, ...],
                    "layers": [int, ...], "text_informing": [bool, ...] }
    }

Unknown keys are rejected by name at every level. Overrides use dotted
paths ("train.base_lr=0.002", "paths.out_dir=/tmp/run"); a bare key like
"tma_weight=0" is shorthand for the train section. Values parse as JSON
with a plain-string fallback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .training import TrainConfig

_SECTIONS = ("train", "paths", "ablation")


@dataclass
class AblationConfig:
    """Variant lists for each ablation axis."""

    loss: list[tuple[float, float]] = field(
        default_factory=lambda: [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
    views: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    layers: list[int] = field(default_factory=lambda: [1, 2, 3])
    text_informing: list[bool] = field(default_factory=lambda: [True, False])

    def __post_init__(self):
        self.loss = [tuple(float(w) for w in pair) for pair in self.loss]
        for pair in self.loss:
            if len(pair) != 2 or any(w < 0 for w in pair) or sum(pair) == 0:
                raise ConfigError(f"loss ablation entries must be [gca, tma] >= 0, got {pair}")
        if any(int(v) < 1 for v in self.views):
            raise ConfigError("views ablation entries must be >= 1")
        if any(int(l) < 1 for l in self.layers):
            raise ConfigError("layers ablation entries must be >= 1")
        self.views = [int(v) for v in self.views]
        self.layers = [int(l) for l in self.layers]
        self.text_informing = [bool(b) for b in self.text_informing]

    @classmethod
    def from_dict(cls, obj: dict) -> "AblationConfig":
        known = {"loss", "views", "layers", "text_informing"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown ablation config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return {"loss": [list(p) for p in self.loss], "views": self.views,
                "layers": self.layers, "text_informing": self.text_informing}


@dataclass
class RunConfig:
    train: TrainConfig
    corpus_dir: str
    out_dir: str
    prompt_file: str | None = None
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def manifest_path(self) -> Path:
        return Path(self.corpus_dir) / "manifest.jsonl"

    def to_dict(self) -> dict:
        paths = {"corpus_dir": self.corpus_dir, "out_dir": self.out_dir}
        if self.prompt_file is not None:
            paths["prompt_file"] = self.prompt_file
        return {"train": self.train.to_dict(), "paths": paths,
                "ablation": self.ablation.to_dict()}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        paths = obj.get("paths")
        if not isinstance(paths, dict):
            raise ConfigError("config must contain a 'paths' section")
        unknown_paths = set(paths) - {"corpus_dir", "out_dir", "prompt_file"}
        if unknown_paths:
            raise ConfigError(f"unknown path keys: {sorted(unknown_paths)}")
        for required in ("corpus_dir", "out_dir"):
            if required not in paths or not isinstance(paths[required], str):
                raise ConfigError(f"paths.{required} must be a string path")
        train = TrainConfig.from_dict(obj.get("train", {}))
        ablation = AblationConfig.from_dict(obj.get("ablation", {}))
        return cls(train=train, corpus_dir=paths["corpus_dir"], out_dir=paths["out_dir"],
                   prompt_file=paths.get("prompt_file"), ablation=ablation)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    segments = key.strip().split(".")
    if not all(segments):
        raise ConfigError(f"override key {key!r} has empty path segments")
    if segments[0] not in _SECTIONS:
        segments = ["train"] + segments
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return segments, value


def apply_overrides(doc: dict, overrides) -> dict:
    for text in overrides or []:
        segments, value = parse_override(text)
        node = doc
        for seg in segments[:-1]:
            nxt = node.setdefault(seg, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {'.'.join(segments)!r} descends into a scalar")
            node = nxt
        node[segments[-1]] = value
    return doc


def load_run_config(path, overrides=None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(apply_overrides(doc, overrides))


def write_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
