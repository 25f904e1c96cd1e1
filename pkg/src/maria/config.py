"""Run configuration: a JSON document validated in full before any side effects."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .evaluation import GridSpec
from .masking import OMEGA, SCENARIOS
from .model import FUSION_MODES, EncoderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULT_SYNTH = {
    "seed": 7,
    "n_samples": 500,
    "modality_widths": [4, 3],
    "class_count": 2,
    "signal": {"shift": 1.0},
}


@dataclass
class RunConfig:
    manifest: Path | None = None
    synth: dict | None = None
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    fusion: str = "intermediate"
    scenario: str = "all_missing"
    test_rate: float | str = OMEGA
    output_dir: Path = Path("maria_out")
    seed: int = 0
    workers: int = 1
    raw: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": {"manifest": str(self.manifest)} if self.manifest else {"synth": self.synth},
            "model": asdict(self.model),
            "train": asdict(self.train),
            "grid": _grid_dict(self.grid),
            "fusion": self.fusion,
            "scenario": self.scenario,
            "test_rate": self.test_rate,
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "workers": self.workers,
        }

    def hash(self) -> str:
        """Digest of the config as written in the file (before CLI overrides)."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


def _grid_dict(g: GridSpec) -> dict:
    out = {}
    for f in fields(g):
        v = getattr(g, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _build(cls, section: str, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def _check_rate(name: str, rate):
    if rate == OMEGA:
        return rate
    if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not 0 <= rate < 1:
        raise ConfigError(f"{name}: rate must be 'omega' or a number in [0, 1), got {rate!r}")
    return float(rate)


def parse_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    allowed = {"dataset", "model", "train", "grid", "fusion", "scenario", "test_rate",
               "output_dir", "seed", "workers"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    cfg = RunConfig(raw=doc)
    ds = doc.get("dataset", {"synth": {}})
    if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("manifest", "synth"):
        raise ConfigError("dataset: give exactly one of 'manifest' or 'synth'")
    if "manifest" in ds:
        path = Path(ds["manifest"])
        path = path if path.is_absolute() else base_dir / path
        if not path.exists():
            raise ConfigError(f"dataset.manifest: file not found: {path}")
        cfg.manifest = path
    else:
        cfg.synth = validate_synth(ds["synth"] or {})
    cfg.model = _build(EncoderConfig, "model", doc.get("model"))
    cfg.train = _build(TrainConfig, "train", doc.get("train"))
    grid = doc.get("grid")
    if grid is not None:
        for key in ("train_rates", "test_rates"):
            for r in grid.get(key, []):
                _check_rate(f"grid.{key}", r)
    cfg.grid = _build(GridSpec, "grid", grid)
    cfg.fusion = doc.get("fusion", cfg.fusion)
    if cfg.fusion not in FUSION_MODES:
        raise ConfigError(f"fusion: invalid value {cfg.fusion!r}; expected one of {list(FUSION_MODES)}")
    cfg.scenario = doc.get("scenario", cfg.scenario)
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario: invalid value {cfg.scenario!r}; expected one of {list(SCENARIOS)}")
    cfg.test_rate = _check_rate("test_rate", doc.get("test_rate", OMEGA))
    out = Path(doc.get("output_dir", "maria_out"))
    cfg.output_dir = out if out.is_absolute() else base_dir / out
    for key in ("seed", "workers"):
        v = doc.get(key, getattr(cfg, key))
        if isinstance(v, bool) or not isinstance(v, int) or v < (1 if key == "workers" else 0):
            raise ConfigError(f"{key}: expected a {'positive' if key == 'workers' else 'non-negative'} integer")
        setattr(cfg, key, v)
    return cfg


def validate_synth(spec: dict) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError("synth: expected an object")
    unknown = set(spec) - set(DEFAULT_SYNTH)
    if unknown:
        raise ConfigError(f"synth: unknown field(s) {sorted(unknown)}")
    out = {**DEFAULT_SYNTH, **spec}
    if not isinstance(out["n_samples"], int) or out["n_samples"] < 50:
        raise ConfigError(f"synth.n_samples: must be an integer >= 50, got {out['n_samples']!r}")
    widths = out["modality_widths"]
    if not isinstance(widths, list) or not widths or not all(isinstance(w, int) and w >= 1 for w in widths):
        raise ConfigError(f"synth.modality_widths: expected a list of positive integers, got {widths!r}")
    if not isinstance(out["class_count"], int) or out["class_count"] < 2:
        raise ConfigError("synth.class_count: must be an integer >= 2")
    if not isinstance(out["signal"], dict):
        raise ConfigError("synth.signal: expected an object")
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(doc, path.parent)
