"""Run configuration: desk-scale defaults plus the full-scale preset.

The desk profile is sized so every pipeline stage trains in minutes on a
CPU. The full-scale profile records the intended large-run hyperparameters
(512 registers at width 32, depth-12/768 encoder and extractor, depth-24
decoder and generator at width 1024) for when real compute is available;
nothing in this repository requires it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .ar import ARConfig
from .decoder import DecoderConfig
from .relational import ExtractorConfig, LossWeights, MiningConfig
from .tokenizer import EncoderConfig


@dataclass(frozen=True)
class RunConfig:
    n_classes: int = 4
    channels: int = 8
    height: int = 16
    width: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    ar: ARConfig = field(default_factory=ARConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mining: MiningConfig = field(default_factory=MiningConfig)
    batch_size: int = 16
    lr: float = 1e-3


FULL_SCALE = {
    "grid": {"channels": 16, "height": 32, "width": 32, "planes": 3},
    "encoder": {"patch_size": 2, "k": 512, "d_register": 32, "dim": 768,
                "depth": 12, "heads": 16},
    "decoder": {"dim": 1024, "depth": 24, "heads": 16, "T": 1000},
    "extractor": {"dim": 768, "depth": 12, "heads": 8, "n_tokens": 256},
    "ar": {"dim": 1024, "depth": 24, "heads": 16, "k": 128},
}


def _merge(cfg_cls, base, overrides: dict):
    valid = {f.name for f in fields(cfg_cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(f"unknown {cfg_cls.__name__} keys: {sorted(unknown)}")
    return replace(base, **overrides)


def load_config(path=None) -> RunConfig:
    """RunConfig from a JSON file of per-section overrides; None -> defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    raw = json.loads(Path(path).read_text())
    sections = {
        "encoder": (EncoderConfig, "encoder"),
        "decoder": (DecoderConfig, "decoder"),
        "extractor": (ExtractorConfig, "extractor"),
        "ar": (ARConfig, "ar"),
        "weights": (LossWeights, "weights"),
        "mining": (MiningConfig, "mining"),
    }
    updates = {}
    for key, val in raw.items():
        if key in sections:
            cls, attr = sections[key]
            updates[attr] = _merge(cls, getattr(cfg, attr), val)
        elif key in {"n_classes", "channels", "height", "width", "batch_size", "lr"}:
            updates[key] = val
        else:
            raise ValueError(f"unknown config section: {key}")
    return replace(cfg, **updates)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)
