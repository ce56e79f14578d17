"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ConfigError, ModelConfig


@dataclass
class RunConfig:
    # model
    queries: int = 20
    hidden_dim: int = 64
    heads: int = 4
    layers: int = 6
    classes: int = 4
    height: int = 64
    width: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    ffn_dim: int = 128
    lambda_cls: float = 2.0
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    null_weight: float = 0.1
    use_pbca: bool = True
    use_cam: bool = True
    use_dconv: bool = True
    # data
    seed: int = 0
    count: int = 200
    eval_count: int = 20
    eval_seed_offset: int = 10_000
    eval_split: str = "heldout"
    # train
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 1
    weight_decay: float = 0.05
    # bench
    bench_spatial: tuple[int, ...] = (1024, 4096, 16384)
    bench_queries: tuple[int, ...] = (100,)
    bench_dims: tuple[int, ...] = (256,)
    bench_heads: int = 8
    bench_repeats: int = 20
    bench_warmup: int = 3
    # gradcheck
    tolerance: float = 1e-4
    out_dir: str = "runs"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_queries=self.queries,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            layers=self.layers,
            num_classes=self.classes,
            height=self.height,
            width=self.width,
            backbone_channels=self.backbone_channels,
            ffn_dim=self.ffn_dim,
            lambda_cls=self.lambda_cls,
            lambda_bce=self.lambda_bce,
            lambda_dice=self.lambda_dice,
            null_weight=self.null_weight,
            use_pbca=self.use_pbca,
            use_cam=self.use_cam,
            use_dconv=self.use_dconv,
        )

    def train_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.count)]

    def eval_seeds(self) -> list[int]:
        if self.eval_split == "train":
            return self.train_seeds()
        return [self.seed + self.eval_seed_offset + i for i in range(self.eval_count)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        out = dataclasses.replace(self, **changes)
        out.validate()
        return out

    def validate(self) -> None:
        if self.eval_split not in ("heldout", "train"):
            raise ConfigError(f"eval_split must be 'heldout' or 'train', got {self.eval_split!r}")
        if self.batch < 1 or self.steps < 0 or self.count < 1:
            raise ConfigError("batch and count must be positive and steps non-negative")
        self.model_config()


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _convert(key, defaults[key], value)
    return base.replace(**changes)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return parse_config(Path(path).read_text())
