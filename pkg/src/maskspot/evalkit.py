"""End-to-end and word-spotting metrics with relaxed IoU matching."""

from __future__ import annotations

import json
import string
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .geometry import as_polygon, rasterize

PROTOCOLS = ("end_to_end", "word_spotting")
LEXICON_MODES = ("none", "full")
UNREADABLE = "###"


@dataclass
class EvalConfig:
    iou_threshold: float = 0.1
    case_sensitive: bool = False
    protocols: tuple[str, ...] = PROTOCOLS
    lexicon: tuple[str, ...] | None = None
    lexicon_modes: tuple[str, ...] = ("none",)

    def __post_init__(self) -> None:
        self.protocols = tuple(self.protocols)
        self.lexicon_modes = tuple(self.lexicon_modes)
        if self.lexicon is not None:
            self.lexicon = tuple(self.lexicon)
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}; choose from {PROTOCOLS}")
        for m in self.lexicon_modes:
            if m not in LEXICON_MODES:
                raise ConfigError(f"unknown lexicon mode {m!r}; choose from {LEXICON_MODES}")
        if "full" in self.lexicon_modes and not self.lexicon:
            raise ConfigError("lexicon mode 'full' needs a non-empty lexicon")


@dataclass
class Prediction:
    bbox: tuple[float, float, float, float]
    transcript: str


@dataclass
class GroundTruth:
    polygon: np.ndarray
    transcript: str

    @property
    def unreadable(self) -> bool:
        return self.transcript == UNREADABLE


# --- text comparison -----------------------------------------------------------------

def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalize(text: str, case_sensitive: bool = False, strip_punct: bool = False) -> str:
    if strip_punct:
        text = text.strip(string.punctuation)
    return text if case_sensitive else text.lower()


def nearest_word(word: str, lexicon: Sequence[str]) -> str:
    """Lexicon entry with the smallest edit distance; ties -> lexicographically smallest."""
    if not lexicon:
        raise ConfigError("lexicon correction needs a non-empty lexicon")
    return min(lexicon, key=lambda w: (edit_distance(word, w), w))


def lexicon_correct(pred: str, gt: str, lexicon: Sequence[str] | None, mode: str = "none",
                    case_sensitive: bool = False) -> bool:
    """Whether ``pred`` counts as ``gt`` under the lexicon mode."""
    p = normalize(pred, case_sensitive)
    g = normalize(gt, case_sensitive)
    if mode == "none":
        return p == g
    if mode != "full":
        raise ConfigError(f"unknown lexicon mode {mode!r}")
    if not lexicon:
        raise ConfigError("lexicon mode 'full' needs a non-empty lexicon")
    words = sorted({normalize(w, case_sensitive) for w in lexicon})
    return nearest_word(p, words) == g


# --- geometry ---------------------------------------------------------------------------

def _canvas(pred: Prediction, gt: GroundTruth) -> tuple[int, int]:
    xs = [pred.bbox[0], pred.bbox[2], *gt.polygon[:, 0]]
    ys = [pred.bbox[1], pred.bbox[3], *gt.polygon[:, 1]]
    return int(np.ceil(max(ys))) + 1, int(np.ceil(max(xs))) + 1


def box_mask(bbox: Sequence[float], height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    poly = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    if x1 <= x0 or y1 <= y0:
        return np.zeros((height, width), dtype=bool)
    return rasterize(poly, height, width, scale=1.0).bits


def iou(pred: Prediction, gt: GroundTruth) -> float:
    """Pixel IoU of the predicted box and the GT polygon, both rasterized at image resolution."""
    h, w = _canvas(pred, gt)
    if min(gt.polygon[:, 0].min(), gt.polygon[:, 1].min(), pred.bbox[0], pred.bbox[1]) < 0:
        raise DataError("negative image coordinates")
    a = box_mask(pred.bbox, h, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        b = rasterize(gt.polygon, h, w, scale=1.0).bits
    union = int((a | b).sum())
    return 0.0 if union == 0 else int((a & b).sum()) / union


@dataclass
class Pairing:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    n_pred: int = 0
    n_gt: int = 0


def match_matrix(ious: np.ndarray, iou_threshold: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one pairing by descending IoU (ties: lower pred, then lower GT index)."""
    ious = np.asarray(ious, dtype=float)
    cand = [(float(ious[p, g]), p, g) for p in range(ious.shape[0]) for g in range(ious.shape[1])
            if ious[p, g] > iou_threshold]
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    out = []
    for v, p, g in cand:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        out.append((p, g, v))
    return out


def iou_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth]) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = iou(p, g)
    return m


def match(preds: Sequence[Prediction], gts: Sequence[GroundTruth],
          iou_threshold: float = 0.1) -> Pairing:
    return Pairing(match_matrix(iou_matrix(preds, gts), iou_threshold), len(preds), len(gts))


def fscore(correct: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_gt if n_gt else 0.0
    h = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, h


# --- per-image and dataset evaluation ----------------------------------------------------------

@dataclass
class Counts:
    correct: int = 0
    n_pred: int = 0
    n_gt: int = 0

    def add(self, other: "Counts") -> None:
        self.correct += other.correct
        self.n_pred += other.n_pred
        self.n_gt += other.n_gt

    @property
    def scores(self) -> tuple[float, float, float]:
        return fscore(self.correct, self.n_pred, self.n_gt)


def evaluate_image(preds: Sequence[Prediction], gts: Sequence[GroundTruth], cfg: EvalConfig,
                   protocol: str = "end_to_end", lexicon_mode: str = "none") -> Counts:
    strip = protocol == "word_spotting"
    if strip:
        preds = [p for p in preds if normalize(p.transcript, True, True)]
    pairing = match(preds, gts, cfg.iou_threshold)
    correct = 0
    ignored_preds = 0
    for p, g, _ in pairing.pairs:
        gt = gts[g]
        if strip and gt.unreadable:
            ignored_preds += 1
            continue
        pt = normalize(preds[p].transcript, True, strip)
        gtt = normalize(gt.transcript, True, strip)
        if lexicon_correct(pt, gtt, cfg.lexicon, lexicon_mode, cfg.case_sensitive):
            correct += 1
    n_gt = sum(1 for g in gts if not (strip and g.unreadable))
    return Counts(correct, len(preds) - ignored_preds, n_gt)


@dataclass
class EvalReport:
    rows: dict[tuple[str, str], Counts]

    def scores(self, protocol: str = "end_to_end", lexicon_mode: str = "none") -> tuple[float, float, float]:
        return self.rows[(protocol, lexicon_mode)].scores

    def hmean(self, protocol: str = "end_to_end", lexicon_mode: str = "none") -> float:
        return self.scores(protocol, lexicon_mode)[2]

    def table(self) -> str:
        lines = [f"{'protocol':<14} {'lexicon':<8} {'precision':>9} {'recall':>9} {'hmean':>9}"]
        for (proto, lex), c in self.rows.items():
            p, r, h = c.scores
            lines.append(f"{proto:<14} {lex:<8} {p:9.4f} {r:9.4f} {h:9.4f}")
        return "\n".join(lines)


def evaluate(pairs: Iterable[tuple[Sequence[Prediction], Sequence[GroundTruth]]],
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    pairs = list(pairs)
    rows = {}
    for proto in cfg.protocols:
        for mode in cfg.lexicon_modes:
            total = Counts()
            for preds, gts in pairs:
                total.add(evaluate_image(preds, gts, cfg, proto, mode))
            rows[(proto, mode)] = total
    return EvalReport(rows)


# --- files ---------------------------------------------------------------------------------

def _read_jsonl(path: Path) -> list[dict]:
    out = []
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def predictions_from_record(rec: dict) -> list[Prediction]:
    return [Prediction(tuple(float(v) for v in r["bbox"]), str(r["transcript"]))
            for r in rec.get("results", [])]


def ground_truth_from_record(rec: dict) -> list[GroundTruth]:
    return [GroundTruth(as_polygon(i["polygon"]), str(i["transcript"]))
            for i in rec.get("instances", [])]


def load_pairs(pred_path: str | Path, gt_path: str | Path
               ) -> list[tuple[list[Prediction], list[GroundTruth]]]:
    """Align prediction and annotation files by image name.

    Predicted images absent from the annotations count as false positives
    when the image file sits next to the annotations, otherwise error.
    """
    pred_path, gt_path = Path(pred_path), Path(gt_path)
    try:
        gt = {r["image"]: ground_truth_from_record(r) for r in _read_jsonl(gt_path)}
        pred = {r["image"]: predictions_from_record(r) for r in _read_jsonl(pred_path)}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed record: {exc}") from exc
    pairs = [(pred.get(name, []), gts) for name, gts in gt.items()]
    for name, preds in pred.items():
        if name in gt:
            continue
        if (gt_path.parent / name).exists():
            warnings.warn(f"{name} has predictions but no annotations; counted as false positives")
            pairs.append((preds, []))
        else:
            raise DataError(f"predicted image {name} is neither annotated nor present in "
                            f"{gt_path.parent}")
    return pairs
