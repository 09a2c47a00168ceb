"""``replk`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import erf as erf_mod
from .conv import BACKENDS, ConvWeights
from .kernels import IMPLEMENTATION
from .model import (
    PRESETS,
    ArchSpec,
    ChecksumError,
    WeightFileError,
    build,
    count,
    forward,
    init_weights,
    load,
    reparam_model,
    save,
)
from .reparam import densify_dilated
from .tensor import Rng, Uniform

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
VERIFY_TOL = 1e-4


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _default_threads():
    raw = os.environ.get("RLK_THREADS", "1")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RLK_THREADS must be an integer, got {raw!r}") from None


def _echo(command, args):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["command"] = command
    cfg["kernels_impl"] = IMPLEMENTATION
    print("config: " + json.dumps(cfg, sort_keys=True, default=str), flush=True)


def _model_args(p, weights_help="weight container (.rlkw); random seeded init when omitted"):
    p.add_argument("--arch", help="ArchSpec JSON file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in ArchSpec")
    p.add_argument("--weights", help=weights_help)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=BACKENDS, default="blocked")


def _resolve_arch(args) -> ArchSpec | None:
    if args.arch and args.preset:
        raise UsageError("give either --arch or --preset, not both")
    if args.arch:
        try:
            return ArchSpec.load(args.arch)
        except FileNotFoundError:
            raise
        except (ValueError, TypeError) as e:
            raise UsageError(f"invalid ArchSpec {args.arch}: {e}") from None
    if args.preset:
        return PRESETS[args.preset]
    return None


def _resolve_model(args, fan_in=False):
    """(graph, weights) from --weights, else from --arch/--preset with seeded init."""
    arch = _resolve_arch(args)
    if args.weights:
        graph, weights = load(args.weights)
        if graph is None:
            if arch is None:
                raise UsageError(f"{args.weights} carries no graph; pass --arch or --preset")
            graph = build(arch)
        graph.check_weights(weights)
        return graph, weights
    if arch is None:
        raise UsageError("one of --arch, --preset or --weights is required")
    graph = build(arch)
    return graph, init_weights(graph, args.seed, fan_in=fan_in, random_bn=fan_in)


# --- subcommands -------------------------------------------------------------

def cmd_bench(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.reps < bench_mod.MIN_REPS:
        raise UsageError(f"--reps must be >= {bench_mod.MIN_REPS}")
    if args.warmup < bench_mod.MIN_WARMUP:
        raise UsageError(f"--warmup must be >= {bench_mod.MIN_WARMUP}")
    if args.backend not in BACKENDS + ("all",):
        raise UsageError(f"invalid backend {args.backend!r}")
    report = bench_mod.bench_stack(args.kernels, args.resolutions, channels=args.channels,
                                   layers=args.layers, backend=args.backend, reps=args.reps,
                                   threads=args.threads, batch=args.batch, warmup=args.warmup,
                                   tile=args.tile, seed=args.seed)
    print(report.grid())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            report.to_csv(fh)
        print(f"wrote {args.csv}")
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def _max_rel_error(a, b):
    return float(np.abs(a - b).max() / max(float(np.abs(a).max()), 1e-30))


def cmd_reparam(args):
    if args.verify < 0:
        raise UsageError("--verify must be >= 0")
    if not args.out and not args.check:
        raise UsageError("reparam needs --out or --check")
    graph, weights = _resolve_model(args, fan_in=True)
    if args.check:
        try:
            dgraph, dweights = load(args.check)
        except WeightFileError as e:
            raise VerificationError(str(e)) from None
        if dgraph is None:
            raise VerificationError(f"{args.check} carries no graph")
    else:
        dgraph, dweights = reparam_model(graph, weights)
        save(dgraph, dweights, args.out)
        print(f"wrote {args.out}: {dgraph.count_ops().get('bn', 0)} BN nodes, "
              f"{len(dgraph.nodes)} nodes")
    n_checks = args.verify if args.verify else (3 if args.check else 0)
    if n_checks:
        rng = Rng(args.seed + 1)
        worst = 0.0
        for _ in range(n_checks):
            x = rng.sample((1, graph.in_channels, args.input_size, args.input_size), Uniform(0.0, 1.0))
            err = _max_rel_error(forward(graph, weights, x, backend=args.backend),
                                 forward(dgraph, dweights, x, backend=args.backend))
            worst = max(worst, err)
        print(f"verify: inputs={n_checks} max_rel_error={worst:.3e} tol={VERIFY_TOL:.0e}")
        if not worst <= VERIFY_TOL:
            raise VerificationError(f"deploy model deviates: max relative error {worst:.3e}")
    return EXIT_OK


def cmd_erf(args):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if args.input_size < 1:
        raise UsageError("--input-size must be >= 1")
    thresholds = [t / 100.0 for t in args.thresholds]
    if any(not 0 < t <= 1 for t in thresholds):
        raise UsageError("--thresholds are percentages in (0, 100]")
    graph, weights = _resolve_model(args)
    if graph.has_head:
        graph = graph.without_head()
        print("note: classifier head removed, ERF is measured on the last feature map")
    if args.images:
        x = np.concatenate([erf_mod.read_image(p, graph.in_channels) for p in args.images])
    else:
        x = erf_mod.sample_inputs(args.samples, args.input_size, args.seed, graph.in_channels)
    emap = erf_mod.compute_erf(graph, weights, x, backend=args.backend)
    if args.heatmap:
        erf_mod.render_heatmap(emap, args.heatmap)
        print(f"wrote {args.heatmap}")
    if emap.degenerate:
        print("degenerate: contribution map is all zero; area ratios undefined")
        return EXIT_OK
    report = erf_mod.area_ratio(emap, thresholds, on=args.on)
    print(",".join(f"t={t * 100:g}%" for t, _, _ in report.rows))
    print(",".join(f"{r * 100:.2f}%" for _, _, r in report.rows))
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_flops(args):
    arch = _resolve_arch(args)
    if arch is None:
        raise UsageError("flops needs --arch or --preset")
    graph = build(arch)
    if args.deploy:
        graph, _ = reparam_model(graph, init_weights(graph, 0))
    params, macs = count(graph, args.resolution)
    print("params,macs,resolution")
    print(f"{params},{macs},{args.resolution}")
    print(f"params={params / 1e6:.1f}M macs={macs / 1e9:.1f}G (FLOPs counted as multiply-adds)")
    return EXIT_OK


def cmd_run(args):
    graph, weights = _resolve_model(args, fan_in=True)
    if args.input:
        x = erf_mod.read_image(args.input, graph.in_channels)
    else:
        x = Rng(args.seed + 1).sample((1, graph.in_channels, args.input_size, args.input_size),
                                      Uniform(0.0, 1.0))
    out = forward(graph, weights, x, backend=args.backend)
    scores = out.reshape(out.shape[0], -1)[0]
    top = np.argsort(-scores, kind="stable")[:args.top]
    print("rank,class,score")
    for rank, idx in enumerate(top, 1):
        print(f"{rank},{idx},{scores[idx]:.6g}")
    return EXIT_OK


def cmd_densify(args):
    if args.kernel < 1 or args.kernel % 2 == 0:
        raise UsageError("--kernel must be odd and positive")
    if args.dilation < 1:
        raise UsageError("--dilation must be >= 1")
    if args.weights:
        _, tensors = load(args.weights)
    else:
        tensors = {"weight": Rng(args.seed).sample((args.channels, 1, args.kernel, args.kernel),
                                                   Uniform(-1.0, 1.0))}
    out = {}
    for name, arr in tensors.items():
        if arr.ndim == 4 and arr.shape[-2:] == (args.kernel, args.kernel):
            arr = densify_dilated(ConvWeights(arr), args.dilation).weight
            print(f"{name}: {args.kernel}x{args.kernel} dilation {args.dilation} -> "
                  f"{arr.shape[-2]}x{arr.shape[-1]}")
        out[name] = arr
    save(None, out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="replk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bench", help="latency of stacked depth-wise convs")
    p.add_argument("--kernels", type=_int_list, default=list(bench_mod.DEFAULT_KERNELS))
    p.add_argument("--resolutions", type=_int_list, default=list(bench_mod.DEFAULT_RESOLUTIONS))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--backend", default="blocked", help="direct|blocked|fft|all")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--threads", type=int, default=None, help="default: $RLK_THREADS or 1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reparam", help="convert a model to deploy form")
    _model_args(p)
    p.add_argument("--out")
    p.add_argument("--verify", type=int, default=0, metavar="N")
    p.add_argument("--check", metavar="FUSED", help="verify an existing deploy-form file")
    p.add_argument("--input-size", type=int, default=64)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("erf", help="effective receptive field analysis")
    _model_args(p)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--images", nargs="+", help="PGM/PPM or .npy inputs instead of noise")
    p.add_argument("--thresholds", type=_float_list, default=[20, 30, 50, 99])
    p.add_argument("--on", choices=("raw", "log"), default="raw")
    p.add_argument("--heatmap")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("flops", help="parameter and multiply-add count")
    p.add_argument("--arch")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--deploy", action="store_true", help="count the re-parameterized form")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("run", help="classify one image")
    _model_args(p)
    p.add_argument("--input", help="PPM/PGM image or .npy array")
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("densify", help="expand dilated kernels into dense ones")
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--dilation", type=int, required=True)
    p.add_argument("--weights")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_densify)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 0) is None:
            args.threads = _default_threads()
        _echo(args.command, args)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (VerificationError, ChecksumError) as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as e:  # runtime: I/O, format, shape errors
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
