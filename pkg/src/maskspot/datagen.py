"""Synthetic glyph scenes with instance, character and centreline ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import font
from .errors import ConfigError, DataError
from .geometry import GeometryError, TextInstance, rasterize
from .imageio import read_image, write_pgm

MAX_ATTEMPTS = 100


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_len: int = 1
    max_len: int = 4
    alphabet: str = "0123456789"
    glyph_scale: int = 2
    max_rotation: float = 15.0
    curve_prob: float = 0.0
    min_radius: float = 40.0
    max_radius: float = 80.0
    noise: float = 0.05
    min_gap: int = 2
    distractors: int = 0
    scene_attempts: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height % 4 or self.width % 4:
            raise ConfigError(f"image size {self.height}x{self.width} must be divisible by 4")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("instance count range must satisfy 1 <= min <= max")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("transcript length range must satisfy 1 <= min <= max")
        for ch in self.alphabet:
            if ch not in font.GLYPHS:
                raise ConfigError(f"alphabet character {ch!r} has no glyph bitmap")
        if not self.alphabet:
            raise ConfigError("alphabet is empty")
        if self.scene_attempts < 1:
            raise ConfigError("scene_attempts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown datagen keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray
    instances: list[TextInstance] = field(default_factory=list)
    name: str = ""

    @property
    def has_char_boxes(self) -> bool:
        return all(inst.has_char_boxes for inst in self.instances)


@dataclass
class _Layout:
    """Maps text-local unit coordinates to image pixels."""

    n: int
    unit: float
    cx: float
    cy: float
    theta: float
    radius: float | None

    def __call__(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xc = (font.ADVANCE * self.n - 1) / 2.0
        yc = font.GLYPH_H / 2.0
        dx = (np.asarray(x, dtype=np.float64) - xc) * self.unit
        dy = (np.asarray(y, dtype=np.float64) - yc) * self.unit
        if self.radius is not None:
            r = self.radius
            phi = dx / r
            px = (r - dy) * np.sin(phi)
            py = -(r - dy) * np.cos(phi) + r
        else:
            px, py = dx, dy
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.cx + c * px - s * py, self.cy + s * px + c * py

    def points(self, xs: Sequence[float], ys: Sequence[float]) -> np.ndarray:
        px, py = self(np.asarray(xs), np.asarray(ys))
        return np.stack([px, py], axis=1)

    def polygon(self) -> np.ndarray:
        top, bot = -1.0, font.GLYPH_H + 1.0
        if self.radius is None:
            return self.points([-1.0, font.ADVANCE * self.n, font.ADVANCE * self.n, -1.0],
                               [top, top, bot, bot])
        xs = [-1.0] + [font.ADVANCE * i - 0.5 for i in range(1, self.n)] + [font.ADVANCE * self.n]
        return self.points(xs + xs[::-1], [top] * len(xs) + [bot] * len(xs))

    def char_box(self, i: int) -> np.ndarray:
        x0, x1 = font.ADVANCE * i - 0.5, font.ADVANCE * i + font.GLYPH_W + 0.5
        y0, y1 = -0.5, font.GLYPH_H + 0.5
        return self.points([x0, x1, x1, x0], [y0, y0, y1, y1])


def _render(coverage: np.ndarray, layout: _Layout, text: str, oversample: int = 8) -> None:
    h, w = coverage.shape
    sub = (np.arange(oversample) + 0.5) / oversample
    su, sv = np.meshgrid(sub, sub)
    su, sv = su.ravel(), sv.ravel()
    weight = (layout.unit / oversample) ** 2
    for i, ch in enumerate(text):
        rows, cols = np.nonzero(font.glyph(ch))
        lx = (font.ADVANCE * i + cols[:, None] + su[None, :]).ravel()
        ly = (rows[:, None] + sv[None, :]).ravel()
        px, py = layout(lx, ly)
        ix, iy = np.floor(px).astype(int), np.floor(py).astype(int)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        np.add.at(coverage, (iy[ok], ix[ok]), weight)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = np.zeros_like(mask)
            ys = slice(max(dy, 0), mask.shape[0] + min(dy, 0))
            yd = slice(max(-dy, 0), mask.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), mask.shape[1] + min(dx, 0))
            xd = slice(max(-dx, 0), mask.shape[1] + min(-dx, 0))
            shifted[ys, xs] = mask[yd, xd]
            out |= shifted
    return out


def _try_place(rng: np.random.Generator, cfg: SceneConfig, n: int,
               occupied: np.ndarray) -> _Layout | None:
    unit = float(cfg.glyph_scale)
    for _ in range(MAX_ATTEMPTS):
        theta = math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        radius = None
        if cfg.curve_prob > 0 and n > 1 and rng.random() < cfg.curve_prob:
            radius = float(rng.uniform(cfg.min_radius, cfg.max_radius)) * (1 if rng.random() < 0.5 else -1)
        cx = float(rng.uniform(0, cfg.width))
        cy = float(rng.uniform(0, cfg.height))
        layout = _Layout(n, unit, cx, cy, theta, radius)
        poly = layout.polygon()
        if (poly[:, 0].min() < 1 or poly[:, 1].min() < 1
                or poly[:, 0].max() > cfg.width - 1 or poly[:, 1].max() > cfg.height - 1):
            continue
        region = rasterize(poly, cfg.height, cfg.width, scale=1.0).bits
        if np.any(_dilate(region, cfg.min_gap) & occupied):
            continue
        occupied |= region
        return layout
    return None


def generate(config: SceneConfig, index: int) -> Sample:
    """Deterministic scene number ``index`` for ``config.seed``."""
    rng = np.random.default_rng([config.seed, index])
    target = int(rng.integers(config.min_instances, config.max_instances + 1))
    attempt = 0
    while True:
        occupied = np.zeros((config.height, config.width), dtype=bool)
        placed: list[tuple[_Layout, str]] = []
        for _ in range(target):
            n = int(rng.integers(config.min_len, config.max_len + 1))
            text = "".join(rng.choice(list(config.alphabet), size=n))
            layout = _try_place(rng, config, n, occupied)
            if layout is None:
                break
            placed.append((layout, text))
        if len(placed) == target:
            break
        attempt += 1
        if attempt < config.scene_attempts:
            continue  # fresh layout, same count
        if target == 1:
            raise DataError(f"cannot place a single instance in a "
                            f"{config.height}x{config.width} image; shorten max_len")
        target -= 1
        attempt = 0

    coverage = np.zeros((config.height, config.width))
    instances = []
    for iid, (layout, text) in enumerate(placed):
        _render(coverage, layout, text)
        instances.append(TextInstance(layout.polygon(), text,
                                      [layout.char_box(i) for i in range(len(text))], id=iid))
    coverage = np.clip(coverage, 0.0, 1.0)

    background = rng.uniform(0.0, 0.35)
    foreground = rng.uniform(0.65, 1.0)
    for _ in range(config.distractors):
        _stroke(rng, coverage, occupied, config)
    image = background + (foreground - background) * coverage
    image = image + rng.normal(0.0, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None], instances, name=f"img_{index:05d}")


def _stroke(rng: np.random.Generator, coverage: np.ndarray, occupied: np.ndarray,
            cfg: SceneConfig) -> None:
    """Short unannotated line segment kept clear of every text polygon."""
    blocked = _dilate(occupied, cfg.min_gap)
    for _ in range(MAX_ATTEMPTS):
        x0, y0 = rng.uniform(0, cfg.width), rng.uniform(0, cfg.height)
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(3, 8)
        t = np.linspace(0, length, int(length * 4) + 1)
        xs = np.floor(x0 + t * math.cos(ang)).astype(int)
        ys = np.floor(y0 + t * math.sin(ang)).astype(int)
        if xs.min() < 0 or ys.min() < 0 or xs.max() >= cfg.width or ys.max() >= cfg.height:
            continue
        if blocked[ys, xs].any():
            continue
        coverage[ys, xs] = 1.0
        return


def generate_many(config: SceneConfig, count: int, start: int = 0) -> list[Sample]:
    return [generate(config, start + i) for i in range(count)]


# --- serialisation -----------------------------------------------------------

def instance_to_json(inst: TextInstance) -> dict:
    d = {"polygon": inst.polygon.tolist(), "transcript": inst.transcript}
    if inst.char_boxes is not None:
        d["char_boxes"] = [b.tolist() for b in inst.char_boxes]
    return d


def instance_from_json(d: dict, iid: int) -> TextInstance:
    if "polygon" not in d or "transcript" not in d:
        raise DataError("instance needs 'polygon' and 'transcript'")
    return TextInstance(d["polygon"], str(d["transcript"]), d.get("char_boxes"), id=iid)


def export_samples(samples: Sequence[Sample], out_dir: str | Path,
                   annotations: str = "annotations.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ann_path = out / annotations
    with open(ann_path, "w") as fh:
        for s in samples:
            fname = f"{s.name}.pgm"
            write_pgm(out / fname, s.image[0])
            rec = {"image": fname, "instances": [instance_to_json(i) for i in s.instances]}
            fh.write(json.dumps(rec) + "\n")
    return ann_path


def iter_annotations(path: str | Path) -> Iterator[tuple[str, list[TextInstance]]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                instances = [instance_from_json(d, i) for i, d in enumerate(rec["instances"])]
                yield rec["image"], instances
            except (json.JSONDecodeError, KeyError, TypeError, GeometryError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def import_samples(data_dir: str | Path,
                   annotations: str = "annotations.jsonl") -> list[Sample]:
    root = Path(data_dir)
    samples = []
    for fname, instances in iter_annotations(root / annotations):
        img = read_image(root / fname)
        samples.append(Sample(img[None], instances, name=Path(fname).stem))
    return samples


def config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
