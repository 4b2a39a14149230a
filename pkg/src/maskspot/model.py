"""The spotter: backbone, centreline head, position-aware attention and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backbone, decoder, pma
from . import tensor as T
from .backbone import BackboneConfig, conv_kernel
from .decoder import CharDictionary, DecoderConfig
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    S: int = 4
    L: int = 8
    dictionary: str = "desk"
    cma_mid: int = 32
    seg_head: bool = True
    seg_mid: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self) -> None:
        if self.S < 1 or self.L < 1:
            raise ConfigError(f"S and L must be >= 1 (got S={self.S}, L={self.L})")
        if not self.seg_head and self.S != 1:
            raise ConfigError("the centreline head can only be disabled with S=1")
        if self.cma_mid < 1 or self.seg_mid < 1:
            raise ConfigError("cma_mid and seg_mid must be >= 1")
        CharDictionary.named(self.dictionary)

    @property
    def single_instance(self) -> bool:
        return self.S == 1 and not self.seg_head


def seg_param_shapes(channels: int, mid: int) -> dict[str, tuple[int, ...]]:
    return {"seg.conv1.w": (mid, channels, 3, 3), "seg.conv1.b": (mid,),
            "seg.conv2.w": (1, mid, 1, 1), "seg.conv2.b": (1,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.backbone.out_channels
    shapes = dict(backbone.param_shapes(cfg.backbone))
    if cfg.seg_head:
        shapes.update(seg_param_shapes(c, cfg.seg_mid))
    shapes.update(pma.param_shapes(cfg.S, cfg.L, c, cfg.cma_mid))
    m = CharDictionary.named(cfg.dictionary).size
    shapes.update(decoder.param_shapes(cfg.decoder, c, m))
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c = cfg.backbone.out_channels
    out = backbone.init_params(cfg.backbone, rng)
    if cfg.seg_head:
        for name, shape in seg_param_shapes(c, cfg.seg_mid).items():
            out[name] = np.zeros(shape) if name.endswith(".b") else conv_kernel(rng, *shape[:3])
    out.update(pma.init_params(cfg.S, cfg.L, c, cfg.cma_mid, rng))
    m = CharDictionary.named(cfg.dictionary).size
    out.update(decoder.init_params(cfg.decoder, c, m, rng))
    return out


class Model:
    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        if set(values) != set(expected):
            missing = sorted(set(expected) - set(values))
            extra = sorted(set(values) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(values[name].shape) != shape:
                raise ConfigError(f"parameter {name} has shape {list(values[name].shape)}, "
                                  f"config implies {list(shape)}")
        self.cfg = cfg
        self.dictionary = CharDictionary.named(cfg.dictionary)
        self.params: dict[str, Tensor] = {
            name: T.parameter(np.array(values[name], dtype=np.float64), name=name)
            for name in expected
        }

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    @property
    def S(self) -> int:
        return self.cfg.S

    @property
    def L(self) -> int:
        return self.cfg.L

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ---------------------------------------------------------
    def features(self, image) -> Tensor:
        x = backbone.extract(image, self.params, self.cfg.backbone)
        x.name = "features"
        return x

    def seg_logits(self, x: Tensor) -> Tensor:
        if not self.cfg.seg_head:
            raise ConfigError("model has no centreline head")
        p = self.params
        h = T.relu(T.conv2d(x, p["seg.conv1.w"], p["seg.conv1.b"], padding=1))
        out = T.conv2d(h, p["seg.conv2.w"], p["seg.conv2.b"])
        out.name = "seg_logits"
        return out

    def ima_logits(self, x: Tensor) -> Tensor:
        out = pma.ima_forward(x, self.params["pma.ima.w"])
        out.name = "ima_logits"
        return out

    def cma_logits(self, x: Tensor, ima: Tensor, positive_grids: Sequence[int]) -> Tensor:
        out = pma.cma_forward(x, ima, self.params, positive_grids, self.L)
        out.name = "cma_logits"
        return out

    def recognize(self, x: Tensor, cma: Tensor) -> Tensor:
        seq = decoder.attention_fuse(cma, x, self.L, self.cfg.decoder.normalize_attention)
        seq.name = "x_seq"
        out = decoder.decode(seq, self.params, self.cfg.decoder)
        out.name = "char_logits"
        return out
