"""Prediction: centreline mask, connected regions, grid voting and overlays."""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import pma
from . import tensor as T
from .decoder import CharDictionary
from .geometry import GridSpec, RasterMask
from .model import Model

DEFAULT_MU_INFER = 0.05
DEFAULT_MIN_AREA = 2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return T.sigmoid(T.tensor(z)).data


def segment_centerline(seg_logits) -> np.ndarray:
    """Boolean [H, W] mask where sigmoid(logit) >= 0.5."""
    z = seg_logits.data if isinstance(seg_logits, T.Tensor) else np.asarray(seg_logits, dtype=float)
    if z.ndim == 3:
        z = z[0]
    return _sigmoid(z) >= 0.5


@dataclass
class Region:
    id: int
    pixels: list[tuple[int, int]]
    mask: RasterMask

    @property
    def area(self) -> int:
        return len(self.pixels)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) in feature pixels, x1/y1 exclusive."""
        rows = [p[0] for p in self.pixels]
        cols = [p[1] for p in self.pixels]
        return min(cols), min(rows), max(cols) + 1, max(rows) + 1


def connected_components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """All 4-connected components, ordered by their first pixel in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    out = []
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        seen[r0, c0] = True
        queue = deque([(int(r0), int(c0))])
        comp = []
        while queue:
            r, c = queue.popleft()
            comp.append((r, c))
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
        out.append(comp)
    return out


def connected_regions(mask: np.ndarray, min_area: int = DEFAULT_MIN_AREA) -> list[Region]:
    """Components with at least ``min_area`` pixels, ids in discovery order."""
    mask = np.asarray(mask, dtype=bool)
    regions = []
    for comp in connected_components(mask):
        if len(comp) < min_area:
            continue
        bits = np.zeros(mask.shape, dtype=bool)
        rows, cols = zip(*comp)
        bits[list(rows), list(cols)] = True
        regions.append(Region(len(regions), comp, RasterMask(mask.shape[0], mask.shape[1], bits)))
    return regions


@dataclass
class SpotResult:
    region_id: int
    transcript: str
    char_confidences: list[float]
    best_grid: tuple[int, int]
    region_bbox: tuple[int, int, int, int]
    contributing_grids: list[tuple[int, float]] = field(default_factory=list)
    stride: int = 4

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """Rough position in image pixels."""
        return tuple(v * self.stride for v in self.region_bbox)  # type: ignore[return-value]

    @property
    def confidence(self) -> float:
        if not self.char_confidences:
            return 0.0
        return float(np.mean(self.char_confidences))

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "transcript": self.transcript,
                "confidence": self.confidence, "best_grid": list(self.best_grid)}


def weighted_scores(weights: Sequence[float], probs: Sequence[np.ndarray]) -> np.ndarray:
    """sum_j w_j * probs_j, accumulated in the given order."""
    total = np.zeros_like(np.asarray(probs[0], dtype=np.float64))
    for w, p in zip(weights, probs):
        total = total + w * np.asarray(p, dtype=np.float64)
    return total


def vote(region: Region, grid: GridSpec, positive_grids: Sequence[int], probs: np.ndarray,
         dictionary: CharDictionary, mu_infer: float = DEFAULT_MU_INFER,
         stride: int = 4) -> SpotResult | None:
    """Occupation-weighted vote of the positive grids touching ``region``.

    ``probs`` is [N, L, M], row n belonging to ``positive_grids[n]``.  Returns
    None when no positive grid has ratio above ``mu_infer`` with the region.
    """
    ratios = grid.occupation_ratios(region.mask)
    row_of = {j: n for n, j in enumerate(positive_grids)}
    contrib = [(j, float(ratios[j])) for j in sorted(row_of) if ratios[j] > mu_infer]
    if not contrib:
        return None
    weights = [o for _, o in contrib]
    scores = weighted_scores(weights, [probs[row_of[j]] for j, _ in contrib])
    classes = np.argmax(scores, axis=1)
    norm = sum(weights)
    transcript = dictionary.text(classes)
    conf = [float(scores[k, classes[k]] / norm) for k in range(len(transcript))]
    best_j = max(contrib, key=lambda t: (t[1], -t[0]))[0]
    return SpotResult(region.id, transcript, conf, grid.cell(best_j), region.bbox, contrib, stride)


@dataclass
class SpotOutput:
    results: list[SpotResult]
    centerline: np.ndarray
    regions: list[Region]
    dropped: int = 0
    positive_grids: list[int] = field(default_factory=list)


def char_probs(model: Model, x: T.Tensor, ima: T.Tensor, positive: Sequence[int]) -> np.ndarray:
    cma = model.cma_logits(x, ima, positive)
    logits = model.recognize(x, cma)
    return T.softmax(logits, axis=-1).data


def spot(model: Model, image: np.ndarray, mu_infer: float = DEFAULT_MU_INFER,
         min_area: int = DEFAULT_MIN_AREA) -> SpotOutput:
    """Full pipeline for one [C, H, W] image."""
    if model.cfg.single_instance:
        res = single_instance_mode(model, image)
        fw, fh = res.region_bbox[2], res.region_bbox[3]
        return SpotOutput([res], np.ones((fh, fw), dtype=bool), [], 0, [0])
    with T.no_grad():
        x = model.features(image)
        mask = segment_centerline(model.seg_logits(x))
        regions = connected_regions(mask, min_area)
        grid = GridSpec(model.S, *mask.shape)
        positive = sorted({j for r in regions
                           for j in np.nonzero(grid.occupation_ratios(r.mask) > mu_infer)[0].tolist()})
        results: list[SpotResult] = []
        dropped = 0
        if positive:
            probs = char_probs(model, x, model.ima_logits(x), positive)
            for r in regions:
                res = vote(r, grid, positive, probs, model.dictionary, mu_infer,
                           model.cfg.backbone.stride)
                if res is None:
                    dropped += 1
                else:
                    results.append(res)
        else:
            dropped = len(regions)
    return SpotOutput(results, mask, regions, dropped, positive)


def single_instance_mode(model: Model, image: np.ndarray) -> SpotResult:
    """S=1 without the centreline head: decode grid 0 for the whole image."""
    if model.S != 1:
        raise T.UsageError("single-instance mode requires S=1")
    with T.no_grad():
        x = model.features(image)
        probs = char_probs(model, x, model.ima_logits(x), [0])[0]
    classes = np.argmax(probs, axis=1)
    transcript = model.dictionary.text(classes)
    conf = [float(probs[k, classes[k]]) for k in range(len(transcript))]
    fh, fw = x.shape[1:]
    return SpotResult(0, transcript, conf, (0, 0), (0, 0, fw, fh), [(0, 1.0)],
                      model.cfg.backbone.stride)


def spot_many(model: Model, images: Sequence[np.ndarray], mu_infer: float = DEFAULT_MU_INFER,
              min_area: int = DEFAULT_MIN_AREA, workers: int = 1) -> list[SpotOutput]:
    if workers <= 1:
        return [spot(model, im, mu_infer, min_area) for im in images]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda im: spot(model, im, mu_infer, min_area), images))


# --- visualisation -------------------------------------------------------------------

def cma_full_logits(model: Model, image: np.ndarray) -> np.ndarray:
    with T.no_grad():
        x = model.features(image)
        return pma.cma_full(x, model.ima_logits(x), model.params).data


def overlay_sum(cma_logits_full: np.ndarray, k: int, L: int) -> np.ndarray:
    """Sum over grids of sigmoid(attention) for character slot ``k``."""
    if not 0 <= k < L:
        raise T.UsageError(f"slot k={k} outside [0, {L})")
    rows = np.asarray(cma_logits_full, dtype=np.float64)[k::L]
    return _sigmoid(rows).sum(axis=0)


def cma_overlay(cma_logits_full: np.ndarray, k: int, L: int) -> np.ndarray:
    """uint8 heatmap: overlay_sum min-max scaled to [0, 255]; flat input gives zeros."""
    total = overlay_sum(cma_logits_full, k, L)
    lo, hi = total.min(), total.max()
    if hi - lo <= 0:
        return np.zeros(total.shape, dtype=np.uint8)
    return np.round((total - lo) / (hi - lo) * 255.0).astype(np.uint8)
