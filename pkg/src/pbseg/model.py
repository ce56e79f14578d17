"""End-to-end mask-classification segmenter built from the pieces above."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, softmax

from . import tensor as T
from .attention import DecoderLayer, build_attention_mask, decide
from .nn import Conv2d, Linear, Module, param
from .pixel_decoder import FeaturePyramid, PixelDecoder
from .tensor import Tensor

STRIDES = (4, 8, 16, 32)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_queries: int = 20
    hidden_dim: int = 64
    heads: int = 4
    layers: int = 6
    num_classes: int = 4
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

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.validate()

    def validate(self) -> None:
        if self.layers % 3:
            raise ConfigError(f"layers must be a multiple of 3, got {self.layers}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.use_cam and self.hidden_dim < 4:
            raise ConfigError(f"hidden_dim {self.hidden_dim} too small for context modulation")
        if self.height % 32 or self.width % 32:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by 32")
        if len(self.backbone_channels) != 4:
            raise ConfigError(f"need 4 backbone widths, got {self.backbone_channels}")
        if self.num_classes < 1 or self.num_queries < 1:
            raise ConfigError("num_classes and num_queries must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MaskPrediction:
    class_logits: Tensor  # L x (C+1), last column is the null class
    mask_logits: Tensor  # L x h1 x w1

    def class_probs(self) -> np.ndarray:
        return softmax(self.class_logits.data, axis=-1)


class TinyBackbone(Module):
    """Four conv stages at strides 4, 8, 16, 32."""

    def __init__(self, rng: np.random.Generator, channels: tuple[int, ...]):
        c1, *rest = channels
        self.stem = [Conv2d(rng, 3, c1, stride=2), Conv2d(rng, c1, c1, stride=2), Conv2d(rng, c1, c1)]
        self.stages = []
        prev = c1
        for c in rest:
            self.stages.append([Conv2d(rng, prev, c, stride=2), Conv2d(rng, c, c)])
            prev = c

    def __call__(self, image: Tensor) -> list[Tensor]:
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ConfigError(f"backbone input {h}x{w} must be divisible by 32")
        x = image
        for conv in self.stem:
            x = T.relu(conv(x))
        feats = [x]
        for stage in self.stages:
            for conv in stage:
                x = T.relu(conv(x))
            feats.append(x)
        return feats


def tiny_backbone(image: Tensor, params: TinyBackbone) -> list[Tensor]:
    return params(image)


class PredictionHeads(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int):
        self.cls = Linear(rng, dim, num_classes + 1)
        # uniform class probabilities until trained; ties resolve to class 0
        self.cls.weight.data[...] = 0.0
        self.mask1 = Linear(rng, dim, dim)
        self.mask2 = Linear(rng, dim, dim)

    def __call__(self, queries: Tensor, r1: Tensor) -> MaskPrediction:
        return predict_heads(queries, r1, self)


def predict_heads(queries: Tensor, r1: Tensor, heads: PredictionHeads) -> MaskPrediction:
    """Class logits per query and mask logits as query-pixel inner products."""
    d, h, w = r1.shape
    if queries.shape[1] != d:
        raise T.ShapeError(f"heads: queries {queries.shape} vs features {r1.shape}")
    embed = heads.mask2(T.relu(heads.mask1(queries)))
    masks = (embed @ r1.reshape(d, h * w)).reshape(queries.shape[0], h, w)
    return MaskPrediction(heads.cls(queries), masks)


def scale_schedule(layers: int) -> list[int]:
    """Pyramid level (1-based) attended by each decoder layer: 4,3,2,4,3,2..."""
    return [4 - (i % 3) for i in range(layers)]


class PBSeg(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        D = config.hidden_dim
        self.backbone = TinyBackbone(rng, config.backbone_channels)
        self.pixel_decoder = PixelDecoder(
            rng, config.backbone_channels, D, use_cam=config.use_cam, use_dconv=config.use_dconv
        )
        self.queries = param(rng.normal(0.0, 1.0, size=(config.num_queries, D)))
        self.layers = [
            DecoderLayer(rng, D, config.heads, config.ffn_dim, use_pbca=config.use_pbca)
            for _ in range(config.layers)
        ]
        self.heads = PredictionHeads(rng, D, config.num_classes)

    def __call__(self, image: Tensor) -> list[MaskPrediction]:
        preds, _ = self.forward(image)
        return preds

    def forward(self, image: Tensor) -> tuple[list[MaskPrediction], FeaturePyramid]:
        pyramid = self.pixel_decoder(self.backbone(image))
        preds = decoder_stack(self.queries, pyramid, self.layers, self.heads)
        return preds, pyramid


def decoder_stack(
    queries: Tensor,
    pyramid: FeaturePyramid,
    layers: list[DecoderLayer],
    heads: PredictionHeads,
) -> list[MaskPrediction]:
    """Run the decoder, predicting before the first layer and after each one."""
    r1 = pyramid.levels[0]
    preds = [heads(queries, r1)]
    x = queries
    for layer, level in zip(layers, scale_schedule(len(layers))):
        feat = pyramid.levels[level - 1]
        prev = preds[-1].mask_logits.data
        N = decide(lambda: build_attention_mask(prev, feat.shape[1:]))
        x = layer(x, feat, N)
        preds.append(heads(x, r1))
    return preds


def semantic_inference(pred: MaskPrediction, upscale: int = STRIDES[0]) -> tuple[np.ndarray, np.ndarray]:
    """Label raster at mask resolution and its nearest upsampling by ``upscale``."""
    probs = pred.class_probs()[:, :-1]
    masks = expit(pred.mask_logits.data)
    L, h, w = masks.shape
    score = probs.T @ masks.reshape(L, h * w)
    raster = score.argmax(axis=0).reshape(h, w)
    full = np.repeat(np.repeat(raster, upscale, axis=0), upscale, axis=1)
    return raster, full
