"""Command-line interface: gen, train, spot, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint, config
from .datagen import export_samples, generate_many, import_samples
from .errors import DataError, MaskspotError
from .evalkit import EvalConfig, evaluate, load_pairs
from .experiments import fit, predictions
from .imageio import read_image, write_gray
from .inference import cma_full_logits, cma_overlay, spot

IMAGE_SUFFIXES = (".pgm", ".png")


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def cmd_gen(args) -> int:
    cfg = config.load(args.config)
    if args.count < 0:
        raise UsageExit("--count must be >= 0")
    samples = generate_many(cfg.datagen, args.count)
    path = export_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = config.load(args.config)
    samples = import_samples(args.data)
    resume = checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        cfg = resume.config if args.config is None else cfg
    if args.iters is not None:
        cfg.train.max_iters = args.iters
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    if resume is None and log_path.exists():
        log_path.unlink()
    model, state = fit(cfg, samples, log_path, resume)
    checkpoint.save(args.out, checkpoint.from_model(cfg, model, state))
    print(f"trained to iteration {state.iteration}; checkpoint {args.out}, log {log_path}")
    return 0


def list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_spot(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    cfg = ckpt.config
    model = ckpt.model()
    viz = Path(args.viz) if args.viz else None
    if viz is not None:
        viz.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for path in list_images(Path(args.images)):
            image = read_image(path)[None]
            out = spot(model, image, cfg.mu_infer, cfg.min_area)
            rec = {"image": path.name, "results": [r.to_json() for r in out.results]}
            fh.write(json.dumps(rec) + "\n")
            if viz is not None:
                full = cma_full_logits(model, image)
                for k in range(model.L):
                    write_gray(viz / f"{path.stem}_cma_k{k}.pgm", cma_overlay(full, k, model.L) / 255.0)
                write_gray(viz / f"{path.stem}_centerline.pgm", out.centerline.astype(np.float64))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = config.load(args.config)
    eval_cfg = cfg.eval
    if args.ablation:
        return _ablation(args, cfg, eval_cfg)
    if not args.pred:
        raise UsageExit("eval needs --pred (or --ablation with --images)")
    report = evaluate(load_pairs(args.pred, args.gt), eval_cfg)
    print(report.table())
    return 0


def _ablation(args, cfg, eval_cfg: EvalConfig) -> int:
    from .datagen import iter_annotations

    gt_path = Path(args.gt)
    records = list(iter_annotations(gt_path))
    rows = []
    for ck in args.ablation:
        c = checkpoint.load(ck)
        model = c.model()
        pairs = []
        for name, instances in records:
            image = read_image(gt_path.parent / name)[None]
            out = spot(model, image, c.config.mu_infer, c.config.min_area)
            from .experiments import GroundTruth

            pairs.append((predictions(out), [GroundTruth(i.polygon, i.transcript) for i in instances]))
        p, r, h = evaluate(pairs, eval_cfg).scores("end_to_end", "none")
        rows.append((c.config.model.S, p, r, h, ck))
    print(f"{'S':>3} {'precision':>9} {'recall':>9} {'hmean':>9}  checkpoint")
    for S, p, r, h, ck in sorted(rows):
        print(f"{S:>3} {p:9.4f} {r:9.4f} {h:9.4f}  {ck}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskspot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write synthetic samples")
    g.add_argument("--config")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="metrics log (default: <out>.log)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--iters", type=int, help="override train.max_iters")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("spot", help="run inference on a directory of images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--viz", help="directory for attention overlays and centreline masks")
    s.set_defaults(func=cmd_spot)

    e = sub.add_parser("eval", help="score predictions against annotations")
    e.add_argument("--pred")
    e.add_argument("--gt", required=True)
    e.add_argument("--config")
    e.add_argument("--ablation", nargs="+", metavar="CKPT",
                   help="spot the annotated images with each checkpoint and tabulate by S")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except MaskspotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
