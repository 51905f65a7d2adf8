"""Command-line entry point: ``deform3d <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, checks, msdmsa, network, vten
from .bridge import LevelLayout
from .errors import ConfigError, DivergenceError, FormatError
from .posenc import build_pe
from .tensor import DTYPES

log = logging.getLogger("deform3d")

SLOPE_BANDS = {"msdmsa": (0.8, 1.3), "vanilla": (1.7, 2.3)}
MIN_WORKSPACE_RATIO = 10.0
TRACE_SCHEMA = "# deform3d-trace v1"


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace("x", ",").split(",") if v.strip()]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=sorted(DTYPES), default="f64")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (timings assume 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="deform3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    g.add_argument("--module", required=True,
                   help="tensor-core, " + ", ".join(checks.MODULES))
    g.add_argument("--dims", default=None, help="level dims for msdmsa/detrans, e.g. '2,3,3;1,2,2'")

    o = sub.add_parser("oracle", parents=[common], help="vectorized MS-DMSA vs loop oracle")
    o.add_argument("--instances", type=int, default=20)
    o.add_argument("--tol", type=float, default=1e-10)

    b = sub.add_parser("bench", parents=[common], help="time MS-DMSA against full attention")
    b.add_argument("--mechanism", choices=("msdmsa", "vanilla", "both"), default="both")
    b.add_argument("--n", type=_ints, default=[512, 1024, 2048, 4096])
    b.add_argument("--channels", type=int, default=96)
    b.add_argument("--heads", type=int, default=6)
    b.add_argument("--levels", type=int, default=3)
    b.add_argument("--points", type=int, default=4)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--check", action="store_true", help="exit 1 if slopes or workspace ratio fall outside bands")

    s = sub.add_parser("sweep", parents=[common], help="toy-network hyperparameter sweep")
    s.add_argument("--axis", required=True, choices=sorted(bench.SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma list, e.g. 1,2,4 or single,multi")
    s.add_argument("--config", default=None, help="base config file (key = value)")
    s.add_argument("--seeds", type=_ints, default=None, help="comma list; defaults to --seed")
    s.add_argument("--iterations", type=int, default=None)

    t = sub.add_parser("train-demo", parents=[common], help="train the toy network on a synthetic volume")
    t.add_argument("--config", default=None)

    pe = sub.add_parser("pe-dump", parents=[common], help="write a positional-encoding table")
    pe.add_argument("--dims", type=_ints, required=True)
    pe.add_argument("--channels", type=int, required=True)

    tn = sub.add_parser("tensor", parents=[common], help="inspect or convert .vten files")
    tn.add_argument("action", choices=("inspect", "convert"))
    tn.add_argument("file")
    tn.add_argument("--to", choices=sorted(DTYPES), default=None)
    return ap


# -- subcommands -----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.precision != "f64":
        log.warning("gradient checks always run in double precision")
    layout = LevelLayout.parse(args.dims) if args.dims else None
    report = checks.run(args.module, args.seed, layout)
    print(f"gradcheck module={args.module} seed={args.seed}")
    print(report.table())
    return 0 if report.passed else 1


def cmd_oracle(args) -> int:
    worst = 0.0
    for i, (seq, refs, p) in enumerate(checks.oracle_instances(args.seed, args.instances)):
        fast = msdmsa.msdmsa_forward(seq, refs, p)[0].tokens
        slow = msdmsa.msdmsa_oracle(seq, refs, p).tokens
        dev = float(np.abs(fast - slow).max())
        worst = max(worst, dev)
        print(f"instance {i:2d} L={p.levels} H={p.heads} K={p.points} N={seq.layout.total:3d} max_abs_dev={dev:.3e}")
    ok = worst < args.tol
    print(f"worst {worst:.3e} tol {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    mechs = ("msdmsa", "vanilla") if args.mechanism == "both" else (args.mechanism,)
    dtype = DTYPES[args.precision]
    records = []
    ok = True
    for m in mechs:
        recs = bench.bench_mechanism(m, args.n, args.channels, args.heads, args.levels, args.points,
                                     args.repeats, args.seed, dtype)
        records += recs
        slope = bench.fit_slope([r.n for r in recs], [r.time_ns for r in recs])
        lo, hi = SLOPE_BANDS[m]
        inside = lo <= slope <= hi
        ok &= inside
        print(f"# slope {m} {slope:.3f} band [{lo}, {hi}] {'ok' if inside else 'OUT'}")
    nmax = max(args.n)
    ratio = bench.workspace_ratio(nmax, args.channels, args.heads, args.levels, args.points)
    ok &= ratio > MIN_WORKSPACE_RATIO
    print(f"# workspace ratio vanilla/msdmsa at N={nmax}: {ratio:.2f}")
    with _output(args.out) as fh:
        bench.write_records(fh, records, bench.BENCH_SCHEMA)
    return 0 if ok or not args.check else 1


def _load_config(path, **overrides) -> network.ToyConfig:
    text = Path(path).read_text() if path else ""
    return network.ToyConfig.from_text(text, **overrides)


def cmd_sweep(args) -> int:
    over = {"precision": args.precision}
    if args.iterations is not None:
        over["iterations"] = args.iterations
    base = _load_config(args.config, **over)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    list(bench.sweep_configs(args.axis, values, base))  # validate every value before training
    seeds = args.seeds if args.seeds else [args.seed]
    records = bench.run_sweep(args.axis, values, base, seeds)
    with _output(args.out) as fh:
        bench.write_records(fh, records, bench.SWEEP_SCHEMA)
    for value, mean in bench.mean_by_value(records).items():
        print(f"# mean dice {args.axis}={value}: {mean:.4f}", file=sys.stderr)
    return 0


def cmd_train_demo(args) -> int:
    cfg = _load_config(args.config, seed=args.seed, precision=args.precision)
    out = Path(args.out or "train-demo")
    (out / "params").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    task = network.sphere_task(cfg)
    trace, params, pred = network.train_toy(cfg, task)
    with open(out / "trace.csv", "w", newline="") as fh:
        fh.write(TRACE_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "dice"])
        for i, (l, d) in enumerate(zip(trace.loss, trace.dice)):
            w.writerow([i, repr(l), repr(d)])
    for name, arr in params.items():
        vten.save(out / "params" / f"{name}.vten", arr)
    vten.save(out / "prediction.vten", pred.astype(cfg.dtype))
    vten.save(out / "labels.vten", task[1].astype(cfg.dtype))
    print(f"iterations {len(trace.dice)} final loss {trace.loss[-1]:.5f} final dice {trace.dice[-1]:.4f}")
    return 0


def cmd_pe_dump(args) -> int:
    if len(args.dims) != 3:
        raise ConfigError("--dims needs exactly three values D,H,W")
    if not args.out:
        raise ConfigError("pe-dump needs --out")
    table = build_pe(LevelLayout((tuple(args.dims),)), args.channels)
    vten.save(args.out, table.astype(DTYPES[args.precision]))
    print(f"wrote {table.shape[0]}x{table.shape[1]} PE table to {args.out}")
    return 0


def cmd_tensor(args) -> int:
    arr = vten.load(args.file)
    if args.action == "inspect":
        code = "f32" if arr.dtype == np.float32 else "f64"
        print(f"dtype {code}")
        print("dims " + " ".join(str(d) for d in arr.shape))
        if arr.size:
            print(f"min {arr.min():.9g}\nmax {arr.max():.9g}\nmean {arr.mean(dtype=np.float64):.9g}")
        return 0
    if not args.to or not args.out:
        raise ConfigError("convert needs --to and --out")
    vten.save(args.out, arr.astype(DTYPES[args.to]))
    return 0


@contextlib.contextmanager
def _output(path):
    if path:
        with open(path, "w", newline="") as fh:
            yield fh
    else:
        yield sys.stdout


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "train-demo": cmd_train_demo,
    "pe-dump": cmd_pe_dump,
    "tensor": cmd_tensor,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, DivergenceError) else 2


if __name__ == "__main__":
    sys.exit(main())
