"""Command-line interface: ``deeplk <command> [options]``.

Commands: synth, train, track, eval, gradcheck, costcurve. Options may also
come from a ``--config`` file of ``key = value`` lines (``#`` starts a
comment), using flag names with dashes or underscores. Explicit flags win
over the file, which wins over built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .evalkit import (DataError, SynthConfig, cost_curve, count_local_minima, load_results,
                      load_sequence, periodic_texture, read_groundtruth, success_curve,
                      synth_sequence, write_csv, write_results, write_sequence,
                      write_success_csv)
from .features import FeatureParams, Kind, SpecMismatchError, feature_init
from .iclk import DEFAULT_DAMPING_REL, SingularTemplateError
from .imaging import crop_resize
from .loss import LossError, gradient_check
from .tracker import TrackerConfig, default_alpha, track_sequence
from .training import (Checkpoint, CheckpointError, TrainConfig, TrainingError, load_checkpoint,
                       make_pair, save_checkpoint, train)
from .warp import Box, DegenerateWarpError, Family

log = logging.getLogger("deeplk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers

def parse_layers(text: str) -> list[tuple]:
    """``"3x1x8:relu,3x8x8:none"`` -> [(3, 1, 8, "relu"), (3, 8, 8, "none")]."""
    layers = []
    for chunk in text.split(","):
        shape, _, act = chunk.strip().partition(":")
        try:
            k, cin, cout = (int(v) for v in shape.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad layer spec {chunk!r}; expected KxCINxCOUT:act") from None
        layers.append((k, cin, cout, act or "relu"))
    return layers


def read_config(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config values as parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for '{parser.prog}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in raw.split()]
        else:
            # argparse runs string defaults through the action's type
            defaults[key] = raw
    parser.set_defaults(**defaults)


def _sequence_dirs(paths) -> list[Path]:
    """Expand each path to itself (if it holds frames/) or its sequence subdirs."""
    out = []
    for p in map(Path, paths):
        if (p / "frames").is_dir():
            out.append(p)
            continue
        subs = sorted(d for d in p.iterdir() if (d / "frames").is_dir()) if p.is_dir() else []
        if not subs:
            raise DataError(f"{p}: not a sequence directory and contains none")
        out.extend(subs)
    return out


def _load_theta(args) -> FeatureParams:
    if args.checkpoint:
        expected = None
        if args.layers:
            expected = feature_init(Kind.CONV, parse_layers(args.layers), 0).spec()
        return load_checkpoint(args.checkpoint, expected).theta
    return FeatureParams(Kind(args.features))


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _add_numerics(p):
    p.add_argument("--size", type=int, default=64, help="template side S in pixels")
    p.add_argument("--context", type=float, default=2.0, help="crop size relative to the box")
    p.add_argument("--damping", type=float, default=None,
                   help="absolute damping lambda (default: relative)")
    p.add_argument("--rel-damping", type=float, default=DEFAULT_DAMPING_REL,
                   help="lambda as a fraction of trace(W^T W)/dof")


def _add_features(p):
    p.add_argument("--checkpoint", default=None, help="trained feature checkpoint")
    p.add_argument("--features", choices=[k.value for k in Kind if k is not Kind.CONV],
                   default="identity", help="untrained extractor when no checkpoint is given")
    p.add_argument("--layers", default=None,
                   help="expected layer spec, e.g. 3x1x8:relu,3x8x8:none")


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    for i in range(args.count):
        cfg = SynthConfig(seed=args.seed + i, frames=args.frames, width=args.width,
                          height=args.height, box_w=args.box, box_h=args.box, b_x=args.b_x,
                          b_s=args.b_s, brightness_drift=args.brightness_drift, fps=args.fps)
        seq = synth_sequence(cfg)
        write_sequence(out / f"synth_{args.seed + i:04d}", seq)
        log.info("wrote %s (%d frames)", seq.name, len(seq))
    print(f"wrote {args.count} sequence(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    seqs = [load_sequence(d).load() for d in _sequence_dirs(args.data)]
    for s in seqs:
        if s.gt_boxes is None:
            raise DataError(f"{s.name}: training needs groundtruth.txt")
    cfg = TrainConfig(b_translation=args.b_x, b_scale=args.b_s, truncation=args.truncation,
                      samples_per_template=args.samples_per_template, epochs=args.epochs,
                      learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed,
                      damping=args.damping, rel_damping=args.rel_damping, size=args.size,
                      context=args.context, family=Family(args.family))
    if args.init:
        theta0 = load_checkpoint(args.init).theta
    else:
        layers = parse_layers(args.layers) if args.layers else None
        theta0 = feature_init(Kind.CONV, layers, args.seed, mean_subtract=args.mean_subtract)
    theta, hist = train(seqs, cfg, theta0)
    final = hist.epoch_loss[-1] if hist.epoch_loss else float("nan")
    save_checkpoint(args.out, Checkpoint(theta, cfg.to_dict(), cfg.epochs, final))
    for i, v in enumerate(hist.epoch_loss, 1):
        print(f"epoch {i} loss {v:.8f}")
    print(f"saved {args.out}")
    return EXIT_OK


def _track_one(job):
    seq_dir, theta, alpha, cfg, out_dir = job
    seq = load_sequence(seq_dir).load()
    res = track_sequence(seq, theta, alpha, cfg)
    path = Path(out_dir) / f"{seq.name}.txt"
    write_results(path, res.boxes, res.failures)
    return seq.name, sum(res.failures), float(np.mean(res.iterations[1:] or [0]))


def cmd_track(args) -> int:
    theta = _load_theta(args)
    cfg = TrackerConfig(size=args.size, context=args.context, damping=args.damping,
                        rel_damping=args.rel_damping)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    jobs = []
    for d in _sequence_dirs(args.sequence):
        if args.alpha is not None:
            alpha = args.alpha
        else:
            alpha = default_alpha(load_sequence(d).fps)
        jobs.append((d, theta, alpha, cfg, args.out))
    for name, failures, iters in _map(_track_one, jobs, args.jobs):
        print(f"{name}: failures={failures} mean_iterations={iters:.2f}")
    return EXIT_OK


def _eval_one(pair):
    results, gt = pair
    boxes, _ = load_results(results)
    gt_path = Path(gt)
    truth = read_groundtruth(gt_path / "groundtruth.txt" if gt_path.is_dir() else gt_path)
    return Path(results).stem, boxes, truth


def cmd_eval(args) -> int:
    if len(args.results) != len(args.gt):
        raise UsageError("--results and --gt need the same number of paths")
    all_pred, all_gt = [], []
    for name, pred, gt in _map(_eval_one, list(zip(args.results, args.gt)), args.jobs):
        curve = success_curve(pred, gt)
        print(f"{name}: auc={curve.auc:.4f} success@0.50={curve.success_50:.4f} "
              f"mean_iou={curve.mean_iou:.4f}")
        all_pred += pred
        all_gt += gt
    curve = success_curve(all_pred, all_gt)
    if len(args.results) > 1:
        print(f"overall: auc={curve.auc:.4f} success@0.50={curve.success_50:.4f} "
              f"mean_iou={curve.mean_iou:.4f}")
    if args.csv:
        write_success_csv(args.csv, curve)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    layers = parse_layers(args.layers) if args.layers else [(3, 1, 4, "relu")]
    theta = feature_init(Kind.CONV, layers, rng)
    family = Family(args.family)
    seq = synth_sequence(SynthConfig(seed=args.seed, frames=2, width=4 * args.size,
                                     height=4 * args.size, box_w=args.size / 2,
                                     box_h=args.size / 2))
    cfg = TrainConfig(size=args.size, family=family)
    sample = make_pair(seq.frame(0), seq.frame(1), seq.gt_boxes[0], cfg, rng,
                       gt_box_t1=seq.gt_boxes[1], sample_id=f"gradcheck-{args.seed}")
    report = gradient_check(theta, sample, family, args.damping, args.epsilon, args.tolerance,
                            max_coords=args.max_coords, seed=args.seed,
                            rel_damping=args.rel_damping)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_costcurve(args) -> int:
    theta = _load_theta(args)
    rng = np.random.default_rng(args.seed)
    side = int(args.box * args.context + 4 * args.range + 16)
    image = periodic_texture((side, side), args.period, rng)
    box = Box(side / 2, side / 2, args.box, args.box)
    template = crop_resize(image, box, args.context, args.size)
    shifts = np.arange(-args.range, args.range + args.step / 2, args.step)
    table = cost_curve(theta, template, image, box, shifts, context=args.context)
    write_csv(args.out, ["shift", "ssd"], table.tolist())
    print(f"local_minima={count_local_minima(table[:, 1])} points={len(table)}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deeplk", description="Deep-LK alignment, training and tracking.")
    parser.add_argument("--config", default=None, help="file of 'key = value' defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--box", type=float, default=32.0)
    p.add_argument("--b-x", type=float, default=0.06)
    p.add_argument("--b-s", type=float, default=1.0 / 30.0)
    p.add_argument("--brightness-drift", type=float, default=0.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train features, write a checkpoint")
    p.add_argument("--data", nargs="+", required=True, help="sequence dirs or their parents")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-template", type=int, default=2)
    p.add_argument("--b-x", type=float, default=0.06)
    p.add_argument("--b-s", type=float, default=1.0 / 30.0)
    p.add_argument("--truncation", type=float, default=0.3)
    p.add_argument("--family", choices=[f.value for f in Family],
                   default=Family.TRANSLATION_SCALE.value)
    p.add_argument("--layers", default=None, help="e.g. 3x1x8:relu,3x8x8:none")
    p.add_argument("--mean-subtract", action="store_true")
    p.add_argument("--init", default=None, help="start from this checkpoint")
    _add_numerics(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track sequences, write results")
    p.add_argument("--sequence", nargs="+", required=True)
    p.add_argument("--out", required=True, help="directory for <name>.txt results")
    p.add_argument("--alpha", type=float, default=None,
                   help="adaptation rate (default from the sequence fps)")
    p.add_argument("--jobs", type=int, default=1)
    _add_features(p)
    _add_numerics(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="success curve and AUC of results")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True, help="groundtruth files or sequence dirs")
    p.add_argument("--csv", default=None, help="write the pooled success curve here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=12)
    p.add_argument("--layers", default=None, help="default 3x1x4:relu")
    p.add_argument("--family", choices=[f.value for f in Family],
                   default=Family.TRANSLATION.value)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--rel-damping", type=float, default=DEFAULT_DAMPING_REL)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("costcurve", help="SSD along horizontal shifts on a periodic texture")
    p.add_argument("--out", required=True)
    p.add_argument("--period", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--box", type=float, default=32.0)
    p.add_argument("--range", type=float, default=8.0)
    p.add_argument("--step", type=float, default=0.5)
    _add_features(p)
    _add_numerics(p)
    p.set_defaults(func=cmd_costcurve)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.config:
            sp = _subparser(parser, args.command)
            _apply_config(sp, read_config(args.config))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, SpecMismatchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularTemplateError, LossError, TrainingError, DegenerateWarpError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
