"""Run configuration: one JSON document holding everything a run needs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from cmlrain.errors import ConfigInvalid, MissingInput
from cmlrain.model import KINDS, ModelSpec
from cmlrain.pl_baseline import PLConfig
from cmlrain.preprocess import PreprocessConfig, proportional_bounds
from cmlrain.train import TrainConfig

SCHEMA_VERSION = 1

# small-scale synthetic profile: runs in about a minute per seed on one core
DESK_DAYS = 12
DESK_MODEL = dict(d_model=16, n_heads=4, n_encoder_layers=1, gru_hidden=8, gru_layers=1, dropout=0.1)
DESK_TRAIN = dict(lr=2e-3, epochs=10, batch_size=64)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    data_dir: str | None = None
    gauge_id: str | None = None  # None -> the only gauge in the data dir
    synthetic: bool = False
    synth_days: int = DESK_DAYS
    models: list[str] = field(default_factory=lambda: list(KINDS))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    pl: PLConfig = field(default_factory=PLConfig)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if not self.synthetic and not self.data_dir:
            raise ConfigInvalid("a data directory is required unless the run is synthetic")
        if self.synth_days < 3:
            raise ConfigInvalid("synth_days must be >= 3")
        unknown = [k for k in self.models if k not in KINDS]
        if unknown or not self.models:
            raise ConfigInvalid(f"models must be a non-empty subset of {list(KINDS)}, got {self.models}")
        self.model.validate()

    def spec_for(self, kind: str, n_features: int) -> ModelSpec:
        """Model spec for ``kind``, sized to the prepared dataset."""
        return self.model.replace(kind=kind, window_len=self.preprocess.window_len, n_features=n_features)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data_dir": self.data_dir,
            "gauge_id": self.gauge_id,
            "synthetic": self.synthetic,
            "synth_days": self.synth_days,
            "models": list(self.models),
            "preprocess": self.preprocess.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "pl": self.pl.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown run config fields: {sorted(unknown)}")
        try:
            if "preprocess" in d:
                d["preprocess"] = PreprocessConfig.from_dict(d["preprocess"])
            if "model" in d:
                d["model"] = ModelSpec.from_dict(d["model"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            if "pl" in d:
                d["pl"] = PLConfig.from_dict(d["pl"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigInvalid):
                raise
            raise ConfigInvalid(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(read_json(path))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def desk(cls, seed: int = 0, out_dir: str = "run", **overrides) -> "RunConfig":
        """Synthetic profile sized for a laptop: short record, small models, few epochs."""
        first = date(2015, 6, 1)
        days = overrides.pop("synth_days", DESK_DAYS)
        return cls(
            seed=seed,
            out_dir=out_dir,
            synthetic=True,
            synth_days=days,
            preprocess=PreprocessConfig(bounds=proportional_bounds(first, days)),
            model=ModelSpec(**DESK_MODEL, n_features=10),
            train=TrainConfig(seed=seed, **DESK_TRAIN),
            **overrides,
        )


def read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{p} must hold a JSON object")
    return data


def write_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def set_path(d: dict, dotted: str, value) -> None:
    """Override ``d["a"]["b"]`` given ``"a.b"``; used for ``--set key=value`` flags."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigInvalid(f"cannot override {dotted!r}: {k!r} is not a section")
        cur = nxt
    cur[keys[-1]] = value
