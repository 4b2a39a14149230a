"""Glue between configs, training, inference and evaluation."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .checkpoint import Checkpoint
from .config import RunConfig
from .datagen import Sample, generate_many
from .evalkit import EvalConfig, EvalReport, GroundTruth, Prediction, evaluate, normalize
from .inference import SpotOutput, single_instance_mode, spot
from .model import Model
from .training import Targets, TrainState, train


def fit(cfg: RunConfig, samples: Sequence[Sample], log_path: str | Path | None = None,
        resume: Checkpoint | None = None, model: Model | None = None,
        on_eval: Callable[[Model, int], str] | None = None,
        targets: Sequence[Targets] | None = None) -> tuple[Model, TrainState]:
    if resume is not None:
        model = resume.model()
        state = resume.train_state()
    else:
        model = model if model is not None else Model.create(cfg.model, cfg.seed)
        state = TrainState()
    result = train(model, samples, cfg.train, cfg.loss, cfg.mu, cfg.band, cfg.seed,
                   log_path, state, on_eval, targets)
    return model, result.state


def predictions(out: SpotOutput) -> list[Prediction]:
    return [Prediction(r.bbox, r.transcript) for r in out.results]


def ground_truth(sample: Sample) -> list[GroundTruth]:
    return [GroundTruth(inst.polygon, inst.transcript) for inst in sample.instances]


def evaluate_model(model: Model, samples: Sequence[Sample], cfg: RunConfig,
                   eval_cfg: EvalConfig | None = None) -> EvalReport:
    eval_cfg = eval_cfg or cfg.eval
    pairs = []
    for s in samples:
        out = spot(model, s.image, cfg.mu_infer, cfg.min_area)
        pairs.append((predictions(out), ground_truth(s)))
    return evaluate(pairs, eval_cfg)


def sequence_accuracy(model: Model, samples: Sequence[Sample], case_sensitive: bool = False) -> float:
    """Fraction of single-text images whose decoded transcript is exact."""
    if not samples:
        return 0.0
    hits = 0
    for s in samples:
        res = single_instance_mode(model, s.image)
        want = s.instances[0].transcript if s.instances else ""
        hits += normalize(res.transcript, case_sensitive) == normalize(want, case_sensitive)
    return hits / len(samples)


def held_out(cfg: RunConfig, count: int, offset: int = 1_000_000) -> list[Sample]:
    """Samples from the training generator at indices far past any training index."""
    return generate_many(cfg.datagen, count, start=offset)


def with_grid(cfg: RunConfig, S: int) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, S=S))
