"""Position-aware mask attention.

Instance attention (IMA) gives each of the S*S grid cells its own 1x1
kernel; channel ``h*S + w`` should light up on the text sitting in cell
(h, w).  Character attention (CMA) widens that to ``S*S*L`` channels,
channel ``(h*S + w)*L + k`` carrying the k-th character of the same text.
Only the rows of positive grids are ever computed for CMA.

All indices here are 0-based.  The 1-based numbering used when talking
about grids as "the 9-th grid" is ``index + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import conv_kernel, glorot
from .errors import DataError
from .geometry import GridAssignment, TextInstance, rasterize
from .tensor import Tensor, UsageError


# --- channel arithmetic --------------------------------------------------------

def _check_range(name: str, value: int, upper: int) -> None:
    if not 0 <= value < upper:
        raise UsageError(f"{name}={value} outside [0, {upper})")


def grid_to_channel(h: int, w: int, S: int) -> int:
    _check_range("h", h, S)
    _check_range("w", w, S)
    return h * S + w


def channel_to_grid(j: int, S: int) -> tuple[int, int]:
    _check_range("grid channel", j, S * S)
    return divmod(j, S)


def char_channel(h: int, w: int, k: int, S: int, L: int) -> int:
    _check_range("k", k, L)
    return grid_to_channel(h, w, S) * L + k


def char_channel_to_slot(c: int, S: int, L: int) -> tuple[int, int, int]:
    _check_range("char channel", c, S * S * L)
    j, k = divmod(c, L)
    h, w = divmod(j, S)
    return h, w, k


def cma_rows(positive_grids: Sequence[int], L: int) -> list[int]:
    """CMA rows of the positive grids, grid-major: row n*L + k is slot k of grid n."""
    return [j * L + k for j in positive_grids for k in range(L)]


# --- parameters -----------------------------------------------------------------

def param_shapes(S: int, L: int, channels: int, cma_mid: int) -> dict[str, tuple[int, ...]]:
    g = S * S
    return {
        "pma.ima.w": (g, channels, 1, 1),
        "pma.cma1.w": (cma_mid, g + channels, 3, 3),
        "pma.cma1.b": (cma_mid,),
        "pma.cma2.w": (g * L, cma_mid, 3, 3),
        "pma.cma2.b": (g * L,),
    }


def init_params(S: int, L: int, channels: int, cma_mid: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(S, L, channels, cma_mid).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        elif name == "pma.ima.w":
            out[name] = glorot(rng, shape, channels, S * S)
        else:
            out[name] = conv_kernel(rng, shape[0], shape[1], shape[2])
    return out


# --- forward ---------------------------------------------------------------------

def ima_forward(x: Tensor, kernels: Tensor) -> Tensor:
    """[C, H, W] features -> [S*S, H, W] instance logits via per-grid 1x1 kernels."""
    return T.conv2d(x, kernels)


def cma_hidden(x: Tensor, ima_logits: Tensor, params: dict[str, Tensor]) -> Tensor:
    inp = T.concat([T.sigmoid(ima_logits), x], axis=0)
    return T.relu(T.conv2d(inp, params["pma.cma1.w"], params["pma.cma1.b"], padding=1))


def cma_forward(x: Tensor, ima_logits: Tensor, params: dict[str, Tensor],
                positive_grids: Sequence[int], L: int) -> Tensor:
    """[N*L, H, W] character logits for the positive grids only.

    The second convolution is linear in its kernels, so gathering kernel
    rows first gives the same rows as running the full head and slicing.
    """
    if not positive_grids:
        raise UsageError("cma_forward needs at least one positive grid")
    hidden = cma_hidden(x, ima_logits, params)
    rows = cma_rows(positive_grids, L)
    w = T.take(params["pma.cma2.w"], rows, axis=0)
    b = T.take(params["pma.cma2.b"], rows, axis=0)
    return T.conv2d(hidden, w, b, padding=1)


def cma_full(x: Tensor, ima_logits: Tensor, params: dict[str, Tensor]) -> Tensor:
    """All S*S*L character logits (visualization and reference checks)."""
    hidden = cma_hidden(x, ima_logits, params)
    return T.conv2d(hidden, params["pma.cma2.w"], params["pma.cma2.b"], padding=1)


# --- selection -------------------------------------------------------------------

def select_positive(source: GridAssignment | np.ndarray, mu: float | None = None) -> list[int]:
    """Ascending positive grid list.

    ``source`` is either a ground-truth :class:`GridAssignment` or an
    occupation-ratio matrix [regions, S*S] whose entries above ``mu`` count.
    """
    if isinstance(source, GridAssignment):
        return source.positive_grids
    ratios = np.atleast_2d(np.asarray(source, dtype=np.float64))
    if mu is None:
        raise UsageError("selecting from occupation ratios needs a threshold")
    return [int(j) for j in np.nonzero((ratios > mu).any(axis=0))[0]]


@dataclass
class AttentionBundle:
    ima_logits: Tensor
    positive_grids: list[int] = field(default_factory=list)
    owners: list[int] = field(default_factory=list)
    cma_logits: Tensor | None = None

    @property
    def N(self) -> int:
        return len(self.positive_grids)


# --- supervision targets -------------------------------------------------------------

def ima_targets(assignment: GridAssignment, band_masks: dict, num_grids: int,
                feat_h: int, feat_w: int) -> np.ndarray:
    """Channel j: band of the instance owning grid j, empty when unowned."""
    out = np.zeros((num_grids, feat_h, feat_w))
    for j, iid in assignment.owner.items():
        out[j] = band_masks[iid].bits
    return out


def cma_targets(instances: Sequence[TextInstance], assignment: GridAssignment, L: int,
                feat_h: int, feat_w: int) -> np.ndarray:
    """Row n*L + k: rasterized k-th char box of grid n's instance, empty past its length."""
    by_id = {inst.id: inst for inst in instances}
    grids = assignment.positive_grids
    out = np.zeros((len(grids) * L, feat_h, feat_w))
    for n, j in enumerate(grids):
        inst = by_id[assignment.owner[j]]
        if inst.char_boxes is None:
            raise DataError(f"instance {inst.id} ({inst.transcript!r}) has no char_boxes")
        for k, box in enumerate(inst.char_boxes[:L]):
            out[n * L + k] = rasterize(box, feat_h, feat_w).bits
    return out
