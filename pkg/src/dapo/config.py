from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .encoders import EncoderConfig
from .prompts import INIT_STRATEGIES


@dataclass
class RunConfig:
    # encoders
    width: int = 64
    depth: int = 6
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    tap_layers: tuple[int, ...] = (2, 3, 4, 6)
    prefix_len: int = 4
    text_prefix_depth: int | None = None
    alpha: float = 0.1
    progressive: bool = True
    stem_channels: int = 8
    stem_pool: bool = True
    sort_channels: bool = True
    # prompts
    n_prompts: int = 10
    context_len: int = 5
    init: str = "clip_space"
    offset_mult: float = 5.0
    aggregation: str = "mean"
    tau_agg: float = 0.07
    # losses / inference
    lam: float = 4.0
    tau: float = 0.07
    focal_gamma: float = 2.0
    dice_eps: float = 1.0
    beta: float = 0.5
    # optimisation
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 5
    seed: int = 0
    # backbone pretraining
    pretrain_epochs: int = 20
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 32
    pretrain_temperature: float = 0.07
    pretrain_augment: bool = True
    pretrain_lock_image: bool = True
    # defect vocabulary the prompts are trained with
    train_defects: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if self.text_prefix_depth is None:
            self.text_prefix_depth = self.depth
        self.train_defects = list(self.train_defects)

    def validate(self) -> RunConfig:
        self.encoder_config()
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}")
        if self.aggregation not in ("mean", "attention"):
            raise ValueError("aggregation must be 'mean' or 'attention'")
        checks = {
            "n_prompts": self.n_prompts >= 1, "context_len": self.context_len >= 1, "lam": self.lam >= 0,
            "tau": self.tau > 0, "tau_agg": self.tau_agg > 0, "focal_gamma": self.focal_gamma >= 0,
            "dice_eps": self.dice_eps >= 0, "beta": 0 <= self.beta <= 1, "lr": self.lr > 0,
            "batch_size": self.batch_size >= 1, "epochs": self.epochs >= 0, "pretrain_epochs": self.pretrain_epochs >= 0,
            "pretrain_temperature": self.pretrain_temperature > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid config values: {', '.join(f'{k}={getattr(self, k)!r}' for k in bad)}")
        if 2 + self.context_len + 4 > 24:
            raise ValueError("context_len too long for the text context window")
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(width=self.width, depth=self.depth, heads=self.heads, patch_size=self.patch_size,
                             image_size=self.image_size, tap_layers=self.tap_layers, prefix_len=self.prefix_len,
                             text_prefix_depth=self.text_prefix_depth, alpha=self.alpha,
                             progressive=self.progressive, stem_channels=self.stem_channels, stem_pool=self.stem_pool,
                             sort_channels=self.sort_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)


def tiny_config(**overrides) -> RunConfig:
    """Two-layer, 8x8-pixel configuration used by the gradient check."""
    base = dict(width=8, depth=2, heads=2, patch_size=4, image_size=8, tap_layers=(1, 2), prefix_len=2,
                n_prompts=2, context_len=2, batch_size=2, train_defects=["scratch", "hole"])
    base.update(overrides)
    return RunConfig(**base)
