"""``mmfl`` command line: generate, train, solve, eval, export-ilp, render, image.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import baselines
from .image import build_image, to_pgm
from .instance import (
    Family,
    GeneratorSpec,
    GtspInstance,
    InfeasibleTourError,
    InstanceFormatError,
    SpecError,
    Tour,
    dumps_dataset,
    dumps_tour,
    generate_dataset,
    loads_dataset,
    loads_instance,
    loads_tour,
    make_tour,
)
from .nn import ConfigError
from .render import render_svg
from .report import EvalReport, MethodResult

THREADS_ENV = "MMFL_THREADS"
METHODS = ("exact", "nn", "local_search", "random", "mmfl")
FAMILIES = tuple(f.value for f in Family)

log = logging.getLogger("mmfl")


class UsageError(Exception):
    """Bad flags or missing required inputs (exit 2)."""


def _positive(name: str):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {value}")
        return value
    return parse


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _sci(x: float) -> str:
    """Short scientific form: 1e-4 rather than 0.0001."""
    if x == 0 or 1e-3 <= abs(x) < 1e4:
        return repr(x)
    mant, exp = f"{x:.6e}".split("e")
    mant = mant.rstrip("0").rstrip(".")
    return f"{mant}e{int(exp)}"


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def _apply_threads() -> None:
    n = _threads()
    if n is not None:
        import torch

        torch.set_num_threads(n)


def _read_instances(path: str) -> list[GtspInstance]:
    p = Path(path)
    text = p.read_text()
    if text.lstrip().startswith("["):
        return loads_dataset(text, str(p))
    return [loads_instance(text, str(p))]


def _pick(instances: list[GtspInstance], index: int, path: str) -> GtspInstance:
    if index >= len(instances):
        raise UsageError(f"--index {index} out of range: {path} holds {len(instances)} instance(s)")
    return instances[index]


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _load_policy(path: str | None):
    if path is None:
        raise UsageError("--checkpoint is required when mmfl is among the methods")
    if not Path(path).exists():
        raise UsageError(f"--checkpoint: no such file {path}")
    from .policy import load_policy

    policy, _ = load_policy(path)
    return policy


# ----------------------------------------------------------------- solvers


def solve_with(method: str, instances: list[GtspInstance], seed: int = 0, restarts: int = 20,
               policy=None) -> tuple[list[Tour], float | None]:
    """Tours for every instance plus, for mmfl, the pure inference seconds."""
    if method == "mmfl":
        t0 = time.perf_counter()
        tours = policy.greedy_solve_many(instances)
        return tours, time.perf_counter() - t0
    out = []
    for i, inst in enumerate(instances):
        if method == "exact":
            out.append(baselines.exact_solve(inst))
        elif method == "nn":
            out.append(baselines.nearest_neighbor_solve(inst))
        elif method == "local_search":
            budget = baselines.SearchBudget(restarts=restarts, seed=seed + i)
            out.append(baselines.local_search(inst, baselines.nearest_neighbor_solve(inst), budget))
        elif method == "random":
            out.append(baselines.random_tour(inst, seed + i))
        else:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return out, None


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    try:
        spec = GeneratorSpec(args.n, args.m, args.family, args.seed)
    except SpecError as e:
        raise UsageError(f"--family/--n/--m: {e}")
    data = generate_dataset(spec, args.count)
    _write(args.out, dumps_dataset(data))
    if args.pgm_dir:
        d = Path(args.pgm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for inst in data:
            (d / f"{inst.family}_{inst.seed}.pgm").write_text(to_pgm(build_image(inst)))
    if args.out not in (None, "-"):
        print(f"wrote {len(data)} instance(s) to {args.out}", file=sys.stderr)
    return 0


TRAIN_FIELDS = (
    "epochs", "instances_per_epoch", "batch_size", "rollouts", "base_lr", "min_lr",
    "weight_decay", "clip_norm", "n", "m", "family", "eval_count", "eval_seed", "dtype",
)
POLICY_FIELDS = ("embed_dim", "heads", "graph_layers", "image_layers", "fusion_layers", "bottleneck_tokens", "patch_size")


def cmd_train(args) -> int:
    from .training import PRESETS, TrainingError, train, with_overrides

    overrides = {f: getattr(args, f) for f in TRAIN_FIELDS}
    overrides["seed"] = args.seed
    for f in POLICY_FIELDS:
        overrides["policy." + f] = getattr(args, f)
    if args.disable_image:
        overrides["policy.disable_image"] = True
    if args.disable_fusion:
        overrides["policy.disable_fusion"] = True
    if args.nondeterministic:
        overrides["deterministic"] = False
    try:
        cfg = with_overrides(PRESETS[args.preset], **overrides)
        GeneratorSpec(cfg.n, cfg.m, cfg.family, 0)
        if cfg.policy.embed_dim % cfg.policy.heads:
            raise ConfigError(f"--embed-dim {cfg.policy.embed_dim} is not divisible by --heads {cfg.policy.heads}")
    except (ConfigError, SpecError, TypeError, ValueError) as e:
        raise UsageError(str(e))
    if args.preset == "paper":
        print(
            "warning: the paper preset trains for "
            f"{cfg.epochs} epochs x {cfg.instances_per_epoch} instances (batch {cfg.batch_size}); "
            "expect days to weeks on a CPU",
            file=sys.stderr,
        )
    print(
        f"preset={args.preset} epochs={cfg.epochs} instances={cfg.instances_per_epoch} batch={cfg.batch_size} "
        f"k={cfg.k} n={cfg.n} m={cfg.m} family={cfg.family} d={cfg.policy.embed_dim} "
        f"lr={_sci(cfg.base_lr)} wd={_sci(cfg.weight_decay)} clip={cfg.clip_norm!r} seed={cfg.seed}",
        flush=True,
    )
    if not cfg.deterministic:
        _apply_threads()

    def progress(rec):
        print(f"epoch {rec.epoch:4d}  val {rec.val_cost:.4f}  reward {rec.train_reward:.4f}  lr {rec.lr:.3e}  {rec.seconds:.1f}s", flush=True)

    try:
        _, tlog = train(cfg, args.out_dir, resume=args.resume, progress=progress)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"initial val {tlog.initial_val_cost:.4f}  final val {tlog.records[-1].val_cost:.4f}")
    return 0


def cmd_solve(args) -> int:
    if args.method not in METHODS:
        raise UsageError(f"--method: unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    inst = _pick(_read_instances(args.instance), args.index, args.instance)
    policy = _load_policy(args.checkpoint) if args.method == "mmfl" else None
    _apply_threads()
    tours, _ = solve_with(args.method, [inst], args.seed, args.restarts, policy)
    tour = make_tour(inst, tours[0].nodes)
    print("tour", " ".join(str(v) for v in tour.nodes))
    print("cost", repr(tour.cost))
    if args.tour_out:
        _write(args.tour_out, dumps_tour(inst, tour))
    if args.render:
        _write(args.render, render_svg(inst, tour))
    return 0


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"--methods: unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    instances = _read_instances(args.dataset)
    policy = None
    load_seconds = 0.0
    if "mmfl" in methods:
        t0 = time.perf_counter()
        policy = _load_policy(args.checkpoint)
        load_seconds = time.perf_counter() - t0
    _apply_threads()
    report = EvalReport(Path(args.dataset).stem, [x.seed for x in instances])
    for method in methods:
        t0 = time.perf_counter()
        tours, inference = solve_with(method, instances, args.seed, args.restarts, policy)
        seconds = time.perf_counter() - t0 + (load_seconds if method == "mmfl" else 0.0)
        for inst, t in zip(instances, tours):
            make_tour(inst, t.nodes)  # refuses infeasible output
        report.add(MethodResult(method, [t.cost for t in tours], seconds, inference))
    table = report.table(include_time=not args.no_time)
    sys.stdout.write(table)
    if args.out:
        _write(args.out, report.to_csv(include_time=not args.no_time))
    if args.table:
        _write(args.table, table)
    return 0


def cmd_export_ilp(args) -> int:
    inst = _pick(_read_instances(args.instance), args.index, args.instance)
    _write(args.out, baselines.export_ilp(inst))
    return 0


def cmd_render(args) -> int:
    inst = _pick(_read_instances(args.instance), args.index, args.instance)
    tour = None
    if args.tour:
        tour = loads_tour(Path(args.tour).read_text())
    _write(args.out, render_svg(inst, tour))
    return 0


def cmd_image(args) -> int:
    inst = _pick(_read_instances(args.instance), args.index, args.instance)
    side = args.side
    img = build_image(inst, side, side) if side else build_image(inst)
    _write(args.out, to_pgm(img))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfl", description="Multi-modal GTSP solver and benchmark harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset of seeded instances")
    g.add_argument("--family", required=True, choices=FAMILIES)
    g.add_argument("--n", type=_positive("--n"), required=True)
    g.add_argument("--m", type=_positive("--m"), default=None, help="cluster count (optional for small/large/mixed)")
    g.add_argument("--count", type=_positive("--count"), default=30)
    g.add_argument("--seed", type=_nonneg, default=0)
    g.add_argument("--out", default="-", help="dataset file, '-' for stdout")
    g.add_argument("--pgm-dir", default=None, help="also write one PGM image per instance here")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the policy with REINFORCE")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--seed", type=_nonneg, default=0)
    t.add_argument("--out-dir", default=None)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--epochs", type=_positive("--epochs"))
    t.add_argument("--instances-per-epoch", type=_positive("--instances-per-epoch"))
    t.add_argument("--batch-size", type=_positive("--batch-size"))
    t.add_argument("--rollouts", type=_positive("--rollouts"))
    t.add_argument("--base-lr", type=float)
    t.add_argument("--min-lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--n", type=_positive("--n"))
    t.add_argument("--m", type=_positive("--m"))
    t.add_argument("--family", choices=FAMILIES)
    t.add_argument("--eval-count", type=_positive("--eval-count"))
    t.add_argument("--eval-seed", type=_nonneg)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--nondeterministic", action="store_true", help=f"allow {THREADS_ENV} threads")
    for f in POLICY_FIELDS:
        flag = "--" + f.replace("_", "-")
        t.add_argument(flag, type=_positive(flag))
    t.add_argument("--disable-image", action="store_true")
    t.add_argument("--disable-fusion", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve one instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--index", type=_nonneg, default=0, help="entry to use when --instance is a dataset")
    s.add_argument("--method", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--seed", type=_nonneg, default=0)
    s.add_argument("--restarts", type=_nonneg, default=20)
    s.add_argument("--tour-out")
    s.add_argument("--render", help="write an SVG of the tour here")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="compare methods on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--methods", default="nn,local_search,random")
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=_nonneg, default=0)
    e.add_argument("--restarts", type=_nonneg, default=20)
    e.add_argument("--out", help="CSV report")
    e.add_argument("--table", help="also write the text table here")
    e.add_argument("--no-time", action="store_true", help="omit timings (byte-stable output)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ilp", help="write the ILP model in LP format")
    x.add_argument("--instance", required=True)
    x.add_argument("--index", type=_nonneg, default=0)
    x.add_argument("--out", default="-")
    x.set_defaults(func=cmd_export_ilp)

    r = sub.add_parser("render", help="SVG of an instance and optional tour")
    r.add_argument("--instance", required=True)
    r.add_argument("--index", type=_nonneg, default=0)
    r.add_argument("--tour")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_render)

    i = sub.add_parser("image", help="PGM of the instance image")
    i.add_argument("--instance", required=True)
    i.add_argument("--index", type=_nonneg, default=0)
    i.add_argument("--side", type=_positive("--side"), help="override the adaptive side length")
    i.add_argument("--out", default="-")
    i.set_defaults(func=cmd_image)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mmfl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (InstanceFormatError, InfeasibleTourError, baselines.BudgetError, OSError, ValueError, RuntimeError) as e:
        print(f"mmfl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
