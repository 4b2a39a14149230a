"""Small convolutional feature extractor producing a stride-4 feature map.

Layout: two stride-2 3x3 stages, one stride-1 3x3 stage, then optional
residual dilated 3x3 stages that widen the receptive field without
further downsampling.  Two normalized coordinate channels can be appended
(before the third stage and to the output) so that later 1x1 position
kernels can tell grid cells apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

STRIDE = 4


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 32)
    context_dilations: tuple[int, ...] = (2, 4, 8)
    coord_channels: bool = True
    input_shift: float = 0.4
    input_scale: float = 3.0

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.context_dilations = tuple(int(d) for d in self.context_dilations)
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ConfigError("stage_channels needs three positive widths")
        if any(d < 1 for d in self.context_dilations):
            raise ConfigError("context_dilations must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")

    @property
    def extra_channels(self) -> int:
        return 2 if self.coord_channels else 0

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1] + self.extra_channels

    @property
    def stride(self) -> int:
        return STRIDE


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def conv_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    return glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    c1, c2, c3 = cfg.stage_channels
    shapes = {
        "backbone.conv1.w": (c1, cfg.in_channels, 3, 3), "backbone.conv1.b": (c1,),
        "backbone.conv2.w": (c2, c1, 3, 3), "backbone.conv2.b": (c2,),
        "backbone.conv3.w": (c3, c2 + cfg.extra_channels, 3, 3), "backbone.conv3.b": (c3,),
    }
    for i, _ in enumerate(cfg.context_dilations):
        shapes[f"backbone.ctx{i}.w"] = (c3, c3, 3, 3)
        shapes[f"backbone.ctx{i}.b"] = (c3,)
    return shapes


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        else:
            out[name] = conv_kernel(rng, shape[0], shape[1], shape[2])
    return out


def coord_map(h: int, w: int) -> np.ndarray:
    """[2, h, w]: x then y, each spanning [-1, 1]."""
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    return np.stack([np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))])


def check_image_shape(shape: tuple[int, ...], cfg: BackboneConfig) -> None:
    if len(shape) != 3 or shape[0] != cfg.in_channels:
        raise ConfigError(f"expected image [{cfg.in_channels}, H, W], got {list(shape)}")
    if shape[1] % STRIDE or shape[2] % STRIDE:
        raise ConfigError(f"image size {shape[1]}x{shape[2]} is not divisible by {STRIDE}")


def normalize_input(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    return (image - cfg.input_shift) * cfg.input_scale


def extract(image: Tensor | np.ndarray, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """[in_channels, H, W] image -> [C, H/4, W/4] features."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    check_image_shape(data.shape, cfg)
    x: Tensor = Tensor(normalize_input(data, cfg))
    x = T.relu(T.conv2d(x, params["backbone.conv1.w"], params["backbone.conv1.b"], stride=2, padding=1))
    x = T.relu(T.conv2d(x, params["backbone.conv2.w"], params["backbone.conv2.b"], stride=2, padding=1))
    coords = Tensor(coord_map(*x.shape[1:])) if cfg.coord_channels else None
    if coords is not None:
        x = T.concat([x, coords], axis=0)
    x = T.relu(T.conv2d(x, params["backbone.conv3.w"], params["backbone.conv3.b"], padding=1))
    for i, d in enumerate(cfg.context_dilations):
        y = T.relu(T.conv2d(x, params[f"backbone.ctx{i}.w"], params[f"backbone.ctx{i}.b"],
                            padding=d, dilation=d))
        x = y + x
    if coords is not None:
        x = T.concat([x, coords], axis=0)
    return x
