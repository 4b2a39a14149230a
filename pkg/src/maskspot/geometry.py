"""Text regions, rasterization, occupation ratios and grid matching.

Everything area-like is measured on boolean masks at feature-map
resolution, so the ratios used to pick training channels and the ratios
used for voting at inference time come from the same discretisation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

FEATURE_STRIDE = 4
DEFAULT_MU = 0.3


class GeometryError(DataError):
    """Raised for malformed polygons or instances."""


def as_polygon(points: Iterable[Sequence[float]]) -> np.ndarray:
    poly = np.asarray(list(points), dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2:
        raise GeometryError(f"polygon must be a list of (x, y) pairs, got shape {poly.shape}")
    return poly


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if abs(a) < 1e-12:
        return poly.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges touch."""
    n = len(poly)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a1, a2, poly[j], poly[(j + 1) % n]):
                return False
    return True


@dataclass
class TextInstance:
    polygon: np.ndarray
    transcript: str
    char_boxes: list[np.ndarray] | None = None
    id: int = 0

    def __post_init__(self) -> None:
        self.polygon = as_polygon(self.polygon)
        if len(self.polygon) < 3:
            raise GeometryError(
                f"instance {self.id}: polygon needs at least 3 vertices, got {len(self.polygon)}")
        if not is_simple(self.polygon):
            raise GeometryError(f"instance {self.id}: polygon is self-intersecting")
        if self.char_boxes is not None:
            self.char_boxes = [as_polygon(b) for b in self.char_boxes]
            if len(self.char_boxes) != len(self.transcript):
                raise GeometryError(
                    f"instance {self.id}: {len(self.char_boxes)} char boxes for "
                    f"transcript {self.transcript!r}")

    @property
    def has_char_boxes(self) -> bool:
        return self.char_boxes is not None


@dataclass
class RasterMask:
    height: int
    width: int
    bits: np.ndarray
    degenerate: bool = False

    @classmethod
    def empty(cls, height: int, width: int, degenerate: bool = False) -> "RasterMask":
        return cls(height, width, np.zeros((height, width), dtype=bool), degenerate)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __and__(self, other: "RasterMask") -> "RasterMask":
        _check_same_dims(self, other)
        return RasterMask(self.height, self.width, self.bits & other.bits)

    def __or__(self, other: "RasterMask") -> "RasterMask":
        _check_same_dims(self, other)
        return RasterMask(self.height, self.width, self.bits | other.bits)


def _check_same_dims(a: RasterMask, b: RasterMask) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise GeometryError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}")


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorised over query points."""
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    for x0, y0, x1, y1 in zip(xs, ys, xj, yj):
        if y0 == y1:
            continue
        straddles = (y0 > py) != (y1 > py)
        x_cross = (x1 - x0) * (py - y0) / (y1 - y0) + x0
        inside ^= straddles & (px < x_cross)
    return inside


def rasterize(polygon, feat_h: int, feat_w: int,
              scale: float = 1.0 / FEATURE_STRIDE) -> RasterMask:
    """Mask of pixels whose centre falls inside ``polygon * scale``."""
    poly = as_polygon(polygon) * scale
    if len(poly) < 3 or abs(polygon_area(poly)) < 1e-12:
        warnings.warn("degenerate polygon rasterized to an empty mask", RuntimeWarning,
                      stacklevel=2)
        return RasterMask.empty(feat_h, feat_w, degenerate=True)
    rows = np.arange(feat_h, dtype=np.float64) + 0.5
    cols = np.arange(feat_w, dtype=np.float64) + 0.5
    px, py = np.meshgrid(cols, rows)
    return RasterMask(feat_h, feat_w, points_in_polygon(px, py, poly))


def occupation_ratio(instance_mask: RasterMask, grid_cell: RasterMask) -> float:
    _check_same_dims(instance_mask, grid_cell)
    a_inst, a_cell = instance_mask.area, grid_cell.area
    if a_inst == 0 or a_cell == 0:
        return 0.0
    inter = int(np.count_nonzero(instance_mask.bits & grid_cell.bits))
    return max(inter / a_cell, inter / a_inst)


@dataclass(frozen=True)
class GridSpec:
    """S x S partition of a feat_h x feat_w plane, indexed row-major from 0."""

    S: int
    feat_h: int
    feat_w: int

    def __post_init__(self) -> None:
        if self.S < 1:
            raise GeometryError(f"grid size must be >= 1, got {self.S}")
        if self.S > min(self.feat_h, self.feat_w):
            raise GeometryError(
                f"S={self.S} exceeds feature plane {self.feat_h}x{self.feat_w}")

    @property
    def num_cells(self) -> int:
        return self.S * self.S

    def row_edges(self) -> np.ndarray:
        return (np.arange(self.S + 1) * self.feat_h) // self.S

    def col_edges(self) -> np.ndarray:
        return (np.arange(self.S + 1) * self.feat_w) // self.S

    def index(self, h: int, w: int) -> int:
        if not (0 <= h < self.S and 0 <= w < self.S):
            raise IndexError(f"grid cell ({h}, {w}) outside {self.S}x{self.S}")
        return h * self.S + w

    def cell(self, j: int) -> tuple[int, int]:
        if not 0 <= j < self.num_cells:
            raise IndexError(f"grid index {j} outside [0, {self.num_cells})")
        return divmod(j, self.S)

    def cell_bounds(self, j: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1), half-open."""
        h, w = self.cell(j)
        re, ce = self.row_edges(), self.col_edges()
        return int(re[h]), int(re[h + 1]), int(ce[w]), int(ce[w + 1])

    def cell_mask(self, j: int) -> RasterMask:
        r0, r1, c0, c1 = self.cell_bounds(j)
        m = RasterMask.empty(self.feat_h, self.feat_w)
        m.bits[r0:r1, c0:c1] = True
        return m

    def cell_areas(self) -> np.ndarray:
        dh = np.diff(self.row_edges())
        dw = np.diff(self.col_edges())
        return np.outer(dh, dw).reshape(-1)

    def intersections(self, mask: RasterMask) -> np.ndarray:
        """Per-cell popcount of ``mask``, shape [S*S]."""
        if (mask.height, mask.width) != (self.feat_h, self.feat_w):
            raise GeometryError("mask does not match grid plane")
        b = mask.bits.astype(np.int64)
        rows = np.add.reduceat(b, self.row_edges()[:-1], axis=0)
        both = np.add.reduceat(rows, self.col_edges()[:-1], axis=1)
        return both.reshape(-1)

    def occupation_ratios(self, mask: RasterMask) -> np.ndarray:
        """Occupation ratio of ``mask`` against every cell; same arithmetic as
        :func:`occupation_ratio`."""
        inter = self.intersections(mask)
        areas = self.cell_areas()
        a_inst = mask.area
        out = np.zeros(self.num_cells)
        if a_inst == 0:
            return out
        for j in range(self.num_cells):
            if areas[j] == 0:
                continue
            out[j] = max(int(inter[j]) / int(areas[j]), int(inter[j]) / a_inst)
        return out


@dataclass
class GridAssignment:
    owner: dict[int, int] = field(default_factory=dict)
    ratio: dict[int, float] = field(default_factory=dict)
    unmatched: list[int] = field(default_factory=list)

    @property
    def positive_grids(self) -> list[int]:
        return sorted(self.owner)


def assign_grids(masks: dict[int, RasterMask], grid: GridSpec,
                 mu: float = DEFAULT_MU) -> GridAssignment:
    """Give every cell to the instance with the largest occupation ratio above ``mu``.

    Equal ratios go to the smaller instance id.
    """
    if not 0.0 < mu <= 1.0:
        raise GeometryError(f"mu must lie in (0, 1], got {mu}")
    result = GridAssignment()
    claimed: set[int] = set()
    ratios = {iid: grid.occupation_ratios(m) for iid, m in masks.items()}
    for j in range(grid.num_cells):
        best_id, best_o = None, 0.0
        for iid in sorted(ratios):
            o = float(ratios[iid][j])
            if o > mu and (best_id is None or o > best_o):
                best_id, best_o = iid, o
        if best_id is not None:
            result.owner[j] = best_id
            result.ratio[j] = best_o
            claimed.add(best_id)
    for iid in sorted(masks):
        if not any(ratios[iid] > mu):
            result.unmatched.append(iid)
    return result


@dataclass(frozen=True)
class BandConfig:
    height_frac: float = 0.4
    end_inset: float = 0.2


def _split_chains(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Top and bottom chains (both in reading direction) or None when the
    polygon has no usable long axis."""
    n = len(poly)
    if n == 4:
        e01 = np.linalg.norm(poly[1] - poly[0])
        e12 = np.linalg.norm(poly[2] - poly[1])
        if e01 >= e12:
            return poly[[0, 1]], poly[[3, 2]]
        return poly[[1, 2]], poly[[0, 3]]
    if n >= 4 and n % 2 == 0:
        m = n // 2
        return poly[:m], poly[m:][::-1]
    return None


def _shrink_about_centroid(poly: np.ndarray, factor: float = 0.5) -> np.ndarray:
    c = polygon_centroid(poly)
    return c + factor * (poly - c)


def centerline_band(instance: TextInstance | np.ndarray,
                    config: BandConfig = BandConfig()) -> np.ndarray:
    """Shrunk band along the text's medial axis.

    Cross-axis extent is ``height_frac`` of the local text height and each end
    is pulled in by ``end_inset`` times the local height.
    """
    poly = instance.polygon if isinstance(instance, TextInstance) else as_polygon(instance)
    chains = _split_chains(poly)
    if chains is None:
        return _shrink_about_centroid(poly)
    top, bottom = chains
    mids = (top + bottom) / 2.0
    across = top - bottom
    heights = np.linalg.norm(across, axis=1)
    seg = np.linalg.norm(np.diff(mids, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    start = config.end_inset * heights[0]
    stop = total - config.end_inset * heights[-1]
    if total <= 0 or stop - start <= 1e-9:
        return _shrink_about_centroid(poly)

    def at(s: float) -> tuple[np.ndarray, np.ndarray]:
        i = int(np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(seg) - 1))
        t = 0.0 if seg[i] == 0 else (s - arc[i]) / seg[i]
        return mids[i] + t * (mids[i + 1] - mids[i]), across[i] + t * (across[i + 1] - across[i])

    keep = [i for i in range(len(mids)) if start < arc[i] < stop]
    m0, a0 = at(start)
    m1, a1 = at(stop)
    centre = [m0] + [mids[i] for i in keep] + [m1]
    half = [a0] + [across[i] for i in keep] + [a1]
    f = config.height_frac / 2.0
    upper = [c + f * a for c, a in zip(centre, half)]
    lower = [c - f * a for c, a in zip(centre, half)]
    return np.array(upper + lower[::-1])


def instance_band_masks(instances: Sequence[TextInstance], feat_h: int, feat_w: int,
                        band: BandConfig = BandConfig()) -> dict[int, RasterMask]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {inst.id: rasterize(centerline_band(inst, band), feat_h, feat_w)
                for inst in instances}


def match_grids(instances: Sequence[TextInstance], grid: GridSpec, mu: float = DEFAULT_MU,
                band: BandConfig = BandConfig()) -> GridAssignment:
    """Grid-to-instance assignment using the instances' centreline bands."""
    masks = instance_band_masks(instances, grid.feat_h, grid.feat_w, band)
    return assign_grids(masks, grid, mu)
