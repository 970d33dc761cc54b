"""Command-line entry point: summarize, trace, gradcheck, train-toy, infer, bench, init-weights."""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from . import analysis, io
from .backbone import REPORTED_COMPLEXITY, HGpeModel, build_model, preset
from .gradcheck import OPS, run_suite
from .tensor import Tensor


def _config(args):
    cfg = io.load_config(args.config) if args.config else preset(args.variant)
    if getattr(args, "input_size", None):
        size = args.input_size
        cfg = cfg.replace(input_size=(size[0], size[-1]))
    return cfg.validate()


def _model_args(p, default="micro"):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--variant", default=default, help="S, T, N or micro (default %(default)s)")
    g.add_argument("--config", help="JSON model config file")


def _size_arg(p):
    p.add_argument("--input-size", type=int, nargs="+", metavar="N",
                   help="input H [W] (default: the config's)")


def cmd_summarize(args) -> int:
    cfg = _config(args)
    report = analysis.complexity_report(HGpeModel(cfg))
    print(report.render())
    ref = REPORTED_COMPLEXITY.get(cfg.variant)
    if ref is not None:
        target = ref[1] * 1e9
        best = min(analysis.CONVENTIONS, key=lambda c: abs(report.flops(c) - target))
        print(f"\nreported for {cfg.variant}: {ref[0]} M params / {ref[1]} G flops")
        print(f"counted (backbone): {report.backbone_params / 1e6:.3f} M params / "
              f"{report.flops(best) / 1e9:.3f} G flops [{best}, closer convention]")
    total = report.total_params if args.include_head else report.backbone_params
    print(f"\nparams ({'with head' if args.include_head else 'backbone'}): {total}")
    if args.records:
        with open(args.records, "w") as fh:
            fh.write(report.records())
    return 0


def cmd_trace(args) -> int:
    cfg = _config(args)
    print(analysis.shape_trace(HGpeModel(cfg), cfg.input_size, args.batch).render())
    return 0


def cmd_gradcheck(args) -> int:
    names = args.ops or None
    if names:
        unknown = [n for n in names if n not in OPS]
        if unknown:
            print(f"unknown ops: {', '.join(unknown)}", file=sys.stderr)
            return 2
    seeds = range(args.seed, args.seed + args.num_seeds)
    reports = run_suite(seeds, args.eps, args.tolerance, names)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_train_toy(args) -> int:
    from .train import TrainingDiverged, train_toy

    cfg = _config(args)
    fh = open(args.metrics, "w") if args.metrics else None
    try:
        result = train_toy(cfg, args.steps, args.seed, args.lr, args.batch_size,
                           optimizer=args.optimizer, log=fh)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    finally:
        if fh:
            fh.close()
    if result.losses:
        print(f"final loss {result.losses[-1]:.6f}")
    print(f"final train accuracy {result.final_accuracy:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    model = HGpeModel(cfg)
    io.load_weights(model, args.weights)
    x = io.preprocess(io.read_ppm(args.image), cfg.input_size)
    logits = model.forward(x, "infer").data[0]
    if not np.isfinite(logits).all():
        print("non-finite logits", file=sys.stderr)
        return 1
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    for k in np.argsort(-logits, kind="stable")[:5]:
        print(f"{k} {logits[k]:.6f} {probs[k]:.6f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    model = build_model(cfg, args.seed)
    macs = analysis.count_macs(model, cfg.input_size, include_head=True)
    h, w = cfg.input_size
    print(f"variant {cfg.variant} input {h}x{w} MACs {macs}")
    x = Tensor(np.random.default_rng(args.seed).standard_normal((1, 3, h, w)))
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        model.forward(x, "infer")
        times.append(time.perf_counter() - t0)
    sd = statistics.stdev(times) if len(times) > 1 else 0.0
    print(f"{len(times)} runs: mean {statistics.fmean(times) * 1e3:.2f} ms, "
          f"stddev {sd * 1e3:.2f} ms")
    return 0


def cmd_init_weights(args) -> int:
    cfg = _config(args)
    io.save_weights(build_model(cfg, args.seed), args.out)
    if args.save_config:
        io.save_config(cfg, args.save_config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="parameter and MAC report")
    _model_args(p, "S")
    _size_arg(p)
    p.add_argument("--include-head", action="store_true")
    p.add_argument("--records", help="write 'path params macs' lines to this file")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("trace", help="layer-by-layer shape listing")
    _model_args(p, "S")
    _size_arg(p)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--ops", nargs="*", help=f"subset of: {', '.join(OPS)}")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on the synthetic disk/square task")
    _model_args(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None,
                   help="minibatch size (default: the whole training set)")
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    p.add_argument("--metrics", help="per-step 'step loss accuracy' log")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="classify a P6 PPM image")
    _model_args(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time single-image inference")
    _model_args(p, "N")
    _size_arg(p)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-weights", help="write seeded random weights")
    _model_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--save-config", help="also write the config used")
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "input_size", None) and len(args.input_size) > 2:
        print("--input-size takes H or H W", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
