"""Losses, per-sample supervision targets and the SGD training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pma
from . import tensor as T
from .datagen import Sample
from .decoder import targets_from_transcript
from .errors import ConfigError, DataError, NumericError
from .geometry import BandConfig, GridSpec, assign_grids, instance_band_masks
from .model import Model
from .tensor import Tensor

DICE_EPS = 1e-4
LOG_HEADER = "# iter,loss_total,loss_cls,loss_I,loss_C,loss_recog"


# --- losses ------------------------------------------------------------------------

def dice_loss(pred_logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Mean over channels of 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    target = np.asarray(target, dtype=np.float64)
    if tuple(pred_logits.shape) != target.shape:
        raise T.ShapeError(f"dice: logits {pred_logits.shape} vs target {target.shape}")
    k = pred_logits.shape[0]
    p = T.sigmoid(T.reshape(pred_logits, (k, -1)))
    g = target.reshape(k, -1)
    num = T.tsum(p * g, axis=1) * 2.0 + eps
    den = T.tsum(p * p, axis=1) + ((g * g).sum(axis=1) + eps)
    return T.mean(1.0 - num / den)


def recog_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy averaged over all N*L positions, EOS padding included."""
    n, L, m = logits.shape
    targets = np.asarray(targets, dtype=np.intp).reshape(n * L)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= m:
        raise DataError(f"target class outside [0, {m})")
    logp = T.log_softmax(T.reshape(logits, (n * L, m)), axis=1)
    picked = T.getitem(logp, (np.arange(n * L), targets))
    return -T.mean(picked)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_finetune: float = 1.0

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda_finetune) < 0:
            raise ConfigError("loss weights must be >= 0")


PHASES = ("pretrain", "finetune")


def total_loss(phase: str, components: dict[str, Tensor | float],
               weights: LossWeights = LossWeights()) -> Tensor:
    """Pretrain: l1*cls + l2*I + l3*C + recog.  Finetune: lam*cls + recog.

    Missing components (no centreline head, no positive grid) count as 0.
    """
    def part(key):
        v = components.get(key)
        return 0.0 if v is None else v

    if phase == "pretrain":
        terms = [(weights.lambda1, part("cls")), (weights.lambda2, part("I")),
                 (weights.lambda3, part("C")), (1.0, part("recog"))]
    elif phase == "finetune":
        terms = [(weights.lambda_finetune, part("cls")), (1.0, part("recog"))]
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    total: Tensor | float = 0.0
    for w, v in terms:
        if isinstance(v, Tensor):
            total = v * w if isinstance(total, float) and total == 0.0 else total + v * w
        else:
            total = total + w * v
    return total if isinstance(total, Tensor) else T.tensor(total)


# --- targets -----------------------------------------------------------------------

@dataclass
class Targets:
    image: np.ndarray
    seg: np.ndarray
    ima: np.ndarray
    positive_grids: list[int]
    owners: list[int]
    cma: np.ndarray | None
    recog: np.ndarray


def prepare(sample: Sample, model: Model, mu: float, band: BandConfig = BandConfig()) -> Targets:
    cfg = model.cfg
    _, h, w = sample.image.shape
    fh, fw = h // cfg.backbone.stride, w // cfg.backbone.stride
    grid = GridSpec(cfg.S, fh, fw)
    masks = instance_band_masks(sample.instances, fh, fw, band)
    seg = np.zeros((1, fh, fw))
    for m in masks.values():
        seg[0] = np.maximum(seg[0], m.bits)
    if cfg.single_instance:
        if len(sample.instances) > 1:
            raise DataError(f"{sample.name}: single-instance mode needs at most one text per image")
        assignment = assign_grids({}, grid, mu)
        if sample.instances:
            inst = sample.instances[0]
            assignment.owner[0] = inst.id
            assignment.ratio[0] = 1.0
        positive = [0]
    else:
        assignment = assign_grids(masks, grid, mu)
        positive = assignment.positive_grids
    ima = pma.ima_targets(assignment, masks, cfg.S * cfg.S, fh, fw)
    by_id = {inst.id: inst for inst in sample.instances}
    owners = [assignment.owner.get(j, -1) for j in positive]
    recog = np.array([targets_from_transcript(by_id[o].transcript if o in by_id else "",
                                              model.dictionary, cfg.L) for o in owners],
                     dtype=np.intp).reshape(len(positive), cfg.L)
    cma = None
    if sample.has_char_boxes:
        cma = np.zeros((len(positive) * cfg.L, fh, fw))
        if assignment.owner:
            rows = pma.cma_targets(sample.instances, assignment, cfg.L, fh, fw)
            for n, j in enumerate(assignment.positive_grids):
                slot = positive.index(j)
                cma[slot * cfg.L:(slot + 1) * cfg.L] = rows[n * cfg.L:(n + 1) * cfg.L]
    return Targets(sample.image, seg, ima, positive, owners, cma, recog)


# --- forward / loss ------------------------------------------------------------------

def loss_components(model: Model, t: Targets) -> dict[str, Tensor | None]:
    x = model.features(t.image)
    out: dict[str, Tensor | None] = {"cls": None, "I": None, "C": None, "recog": None}
    if model.cfg.seg_head:
        out["cls"] = dice_loss(model.seg_logits(x), t.seg)
    ima = model.ima_logits(x)
    out["I"] = dice_loss(ima, t.ima)
    if t.positive_grids:
        cma = model.cma_logits(x, ima, t.positive_grids)
        if t.cma is not None:
            out["C"] = dice_loss(cma, t.cma)
        out["recog"] = recog_loss(model.recognize(x, cma), t.recog)
    for key, v in out.items():
        if v is not None:
            v.name = f"loss_{key}"
    return out


def first_non_finite(root: Tensor) -> str | None:
    """Describe the earliest-created tensor in ``root``'s graph holding NaN/Inf."""
    for node in T.tape_order(root):
        if not np.all(np.isfinite(node.data)):
            label = node.name or "<unnamed>"
            return f"{label} (op {node.op}, shape {list(node.shape)})"
    return None


# --- optimisation ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    phase: str = "pretrain"
    lr: float = 0.01
    decay_steps: tuple[int, ...] = (14000, 18000)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 1
    max_iters: int = 20000
    clip_norm: float | None = 5.0
    drop_aux_at: int | None = None
    num_samples: int = 2000
    eval_every: int = 0
    eval_samples: int = 200

    def __post_init__(self) -> None:
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ConfigError("decay_steps must be strictly increasing")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be > 0")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ConfigError("batch_size must be >= 1 and max_iters >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")

    def lr_at(self, it: int) -> float:
        drops = sum(1 for s in self.decay_steps if it >= s)
        return self.lr / self.decay_factor ** drops

    def phase_at(self, it: int) -> str:
        if self.drop_aux_at is not None and it >= self.drop_aux_at:
            return "finetune"
        return self.phase


@dataclass
class TrainState:
    iteration: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(model: Model, state: TrainState, lr: float, cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay folded into the gradient."""
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for n, p in model.params.items()}
    if cfg.clip_norm is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / (norm + 1e-12)
            grads = {n: g * scale for n, g in grads.items()}
    for name, p in model.params.items():
        g = grads[name] + cfg.weight_decay * p.data
        v = state.momentum.get(name)
        v = g if v is None else cfg.momentum * v + g
        state.momentum[name] = v
        p.data = p.data - lr * v


def sample_order(seed: int, n: int, it: int) -> int:
    """Training sample used at iteration ``it``: epoch-wise seeded permutations."""
    epoch, pos = divmod(it, n)
    return int(np.random.default_rng([seed, epoch]).permutation(n)[pos])


def format_log_line(it: int, total: float, parts: dict[str, float]) -> str:
    vals = [total] + [parts.get(k, 0.0) for k in ("cls", "I", "C", "recog")]
    return f"{it}," + ",".join(format(v, ".17g") for v in vals)


def check_pretrain_data(samples: Sequence[Sample]) -> None:
    for s in samples:
        if not s.has_char_boxes:
            raise DataError(f"{s.name or 'sample'}: pretrain phase needs char_boxes "
                            f"for every instance")


@dataclass
class TrainResult:
    state: TrainState
    losses: list[tuple[float, ...]]


def train(model: Model, samples: Sequence[Sample], cfg: TrainConfig,
          weights: LossWeights = LossWeights(), mu: float = 0.3,
          band: BandConfig = BandConfig(), seed: int = 0, log_path: str | Path | None = None,
          state: TrainState | None = None,
          on_eval: Callable[[Model, int], str] | None = None,
          targets: Sequence[Targets] | None = None) -> TrainResult:
    """Run SGD from ``state.iteration`` up to ``cfg.max_iters``.

    Appends one ``iter,loss_total,loss_cls,loss_I,loss_C,loss_recog`` line per
    iteration to ``log_path``; learning-rate changes and evaluations are
    recorded as ``#`` comment lines.
    """
    if not samples:
        raise DataError("training set is empty")
    if cfg.phase == "pretrain":
        check_pretrain_data(samples)
    if targets is None:
        targets = [prepare(s, model, mu, band) for s in samples]
    state = state or TrainState()
    log = open(log_path, "a") if log_path is not None else None
    losses: list[tuple[float, ...]] = []
    try:
        if log is not None and state.iteration == 0:
            log.write(LOG_HEADER + "\n")
        prev_lr = cfg.lr_at(state.iteration - 1) if state.iteration else None
        while state.iteration < cfg.max_iters:
            it = state.iteration
            lr = cfg.lr_at(it)
            phase = cfg.phase_at(it)
            if log is not None and lr != prev_lr:
                log.write(f"# lr={lr!r} from iter {it}\n")
            if log is not None and cfg.drop_aux_at == it:
                log.write(f"# phase={phase} from iter {it}\n")
            prev_lr = lr
            model.zero_grad()
            total_acc = 0.0
            parts_acc = {"cls": 0.0, "I": 0.0, "C": 0.0, "recog": 0.0}
            for b in range(cfg.batch_size):
                t = targets[sample_order(seed, len(targets), it * cfg.batch_size + b)]
                comps = loss_components(model, t)
                loss = total_loss(phase, comps, weights)
                if not np.isfinite(loss.data).all():
                    where = first_non_finite(loss) if loss.is_taped else "loss"
                    raise NumericError(f"non-finite loss at iteration {it}; first non-finite "
                                       f"tensor: {where}")
                if loss.is_taped:
                    T.backward(loss * (1.0 / cfg.batch_size) if cfg.batch_size > 1 else loss)
                total_acc += loss.item() / cfg.batch_size
                for k, v in comps.items():
                    if v is not None:
                        parts_acc[k] += v.item() / cfg.batch_size
            bad = T.check_finite({n: p.grad for n, p in model.params.items()})
            if bad is not None:
                raise NumericError(f"non-finite gradient for parameter {bad} at iteration {it}")
            sgd_step(model, state, lr, cfg)
            state.iteration = it + 1
            losses.append((total_acc, parts_acc["cls"], parts_acc["I"], parts_acc["C"],
                           parts_acc["recog"]))
            if log is not None:
                log.write(format_log_line(it, total_acc, parts_acc) + "\n")
            if on_eval is not None and cfg.eval_every and state.iteration % cfg.eval_every == 0:
                msg = on_eval(model, state.iteration)
                if log is not None and msg:
                    log.write(f"# eval iter={state.iteration} {msg}\n")
                    log.flush()
    finally:
        if log is not None:
            log.close()
    return TrainResult(state, losses)
