"""Command-line entry point: ``simulate``, ``batch``, ``sweep`` and ``verify``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

from .engine import (
    DEFAULT_THRESHOLDS,
    SeedPlan,
    TrajectoryError,
    run_batch,
    run_trajectory,
)
from .protocol import FeedbackMode
from .serialization import (
    ConfigError,
    batch_document,
    build_config,
    dumps_json,
    make_manifest,
    parse_config_text,
    read_config,
    round_sig,
    trajectory_csv,
    write_text,
)
from .state import StateHealthError
from .verify import VERIFY_SIZES, format_table, run_verification

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_HEALTH = 2
EXIT_VERIFY = 3

FEEDBACK_CHOICES = [m.value for m in FeedbackMode] + ["simple"]

log = logging.getLogger("qndfeedback")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("protocol parameters (override --config)")
    g.add_argument("--config", type=Path, help="key = value file, or a manifest/batch JSON")
    g.add_argument("--n-atoms", type=int)
    g.add_argument("--chi", type=float, help="phase shift per photon (rad)")
    g.add_argument("--omega-div-pi", type=float, help="frame rotation angle in units of pi")
    g.add_argument("--eta", type=float, help="detector efficiency")
    g.add_argument("--photons", type=lambda s: int(float(s)), help="photon budget")
    g.add_argument("--feedback", choices=FEEDBACK_CHOICES)
    g.add_argument("--cut-scale", type=float)
    g.add_argument("--activation-step", type=int)
    g.add_argument("--approx-base", choices=["approx", "exact"])
    g.add_argument("--accumulated-angle", choices=["true", "false"])
    g.add_argument("--seed", type=int)
    g.add_argument("--stride", type=int, help="record metrics every k-th photon")


def _add_batch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument(
        "--checkpoints", type=_ints, default=[],
        help="also report fractions at these recorded photon counts",
    )
    p.add_argument("--noise-level", type=float, default=0.0, help="relative noise on feedback angles")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qndfeedback", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="one trajectory to CSV")
    _add_config_flags(sim)
    sim.add_argument("--out", type=Path, required=True, help="CSV path; manifest goes next to it")

    bat = sub.add_parser("batch", help="success fractions over many seeds")
    _add_config_flags(bat)
    _add_batch_flags(bat)
    bat.add_argument("--out", type=Path, help="JSON path (default: standard output)")

    swp = sub.add_parser("sweep", help="batches over a parameter grid")
    _add_config_flags(swp)
    _add_batch_flags(swp)
    swp.add_argument(
        "--vary", action="append", default=[], metavar="KEY=V1,V2,...",
        help="grid axis; repeat for more axes (first axis varies slowest)",
    )
    swp.add_argument("--out", type=Path, required=True, help="output directory")

    ver = sub.add_parser("verify", help="fast invariant suite")
    ver.add_argument("--sizes", type=_ints, default=list(VERIFY_SIZES))
    ver.add_argument("--steps", type=int, default=100)
    ver.add_argument("--debug-flip-chi-sign", action="store_true", help=argparse.SUPPRESS)
    return parser


def _flag_values(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if args.config is not None:
        values.update(read_config(args.config))
    flags = {
        "n_atoms": args.n_atoms,
        "chi": args.chi,
        "omega_div_pi": args.omega_div_pi,
        "eta": args.eta,
        "photons": args.photons,
        "feedback": args.feedback,
        "cut_scale": args.cut_scale,
        "activation_step": args.activation_step,
        "approx_base": args.approx_base,
        "seed": args.seed,
        "stride": args.stride,
        "accumulated_angle": None if args.accumulated_angle is None else args.accumulated_angle == "true",
    }
    for key, val in flags.items():
        if val is None:
            continue
        if key == "omega_div_pi":
            values.pop("omega", None)
        values[key] = val
    return values


def _check_batch_args(args: argparse.Namespace) -> None:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if not args.thresholds:
        raise UsageError("--thresholds must not be empty")


def cmd_simulate(args: argparse.Namespace) -> int:
    config = build_config(_flag_values(args))
    if config.eta < 1.0:
        print(
            "warning: mixed-state path (eta < 1); entropy column left empty",
            file=sys.stderr,
        )
    result = run_trajectory(config)
    out: Path = args.out
    manifest_path = out.with_name(out.name + ".manifest.json")
    write_text(out, trajectory_csv(result))
    manifest = make_manifest(config, [out.name])
    write_text(manifest_path, dumps_json(manifest))
    print(dumps_json(result.final.as_dict()), end="")
    return EXIT_OK


def _batch(config, args, plan: SeedPlan):
    return run_batch(
        config,
        args.runs,
        plan,
        thresholds=args.thresholds,
        workers=args.workers,
        noise_level=args.noise_level,
        checkpoints=args.checkpoints,
    )


def cmd_batch(args: argparse.Namespace) -> int:
    _check_batch_args(args)
    config = build_config(_flag_values(args))
    summary = _batch(config, args, SeedPlan(config.seed))
    outputs = [args.out.name] if args.out else []
    doc = batch_document(summary, make_manifest(config, outputs))
    text = dumps_json(doc)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def parse_grid(specs: Sequence[str]) -> list[tuple[str, list[Any]]]:
    """``["eta=1,0.9", "feedback=none,simple"]`` -> ordered axes with parsed values."""
    if not specs:
        raise UsageError("sweep needs at least one --vary axis")
    axes = []
    seen = set()
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"malformed sweep axis {spec!r}; expected KEY=V1,V2")
        key, raw = (s.strip() for s in spec.split("=", 1))
        key = key.replace("-", "_")
        if key in seen:
            raise UsageError(f"sweep axis {key!r} given twice")
        seen.add(key)
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if not items:
            raise UsageError(f"sweep axis {key!r} has no values")
        try:
            parsed = [parse_config_text(f"{key} = {v}")[key] for v in items]
        except ConfigError as exc:
            raise UsageError(f"sweep axis {key!r}: {exc}") from None
        axes.append((key, parsed))
    return axes


def _label(val: Any) -> str:
    if isinstance(val, FeedbackMode):
        return val.value
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)


def cmd_sweep(args: argparse.Namespace) -> int:
    _check_batch_args(args)
    axes = parse_grid(args.vary)
    base_values = _flag_values(args)
    base = build_config(base_values)
    master = SeedPlan(base.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["point", *keys, "master_seed", "runs", "threshold", "fraction", "ci_low", "ci_high",
         "mean_final_overlap", "mean_final_c_lur", "broken_count"]
    )
    outputs = []
    for index, combo in enumerate(itertools.product(*(vals for _, vals in axes))):
        values = dict(base_values)
        for key, val in zip(keys, combo):
            if key == "omega_div_pi":
                values.pop("omega", None)
            if key == "omega":
                values.pop("omega_div_pi", None)
            values[key] = val
        plan = master.grid_point(index)
        values["seed"] = plan.master
        config = build_config(values)
        summary = _batch(config, args, plan)
        name = f"point_{index:03d}.json"
        outputs.append(name)
        write_text(out / name, dumps_json(batch_document(summary, make_manifest(config, [name]))))
        for t, frac, (lo, hi) in zip(summary.thresholds, summary.fractions(), summary.wilson_ci()):
            writer.writerow(
                [index, *map(_label, combo), plan.master, summary.n_runs, t,
                 *(f"{round_sig(x)!r}" for x in (frac, lo, hi, summary.mean_final_overlap,
                                                 summary.mean_final_c_lur)),
                 summary.broken_count]
            )
    write_text(out / "sweep.csv", buf.getvalue())
    manifest = make_manifest(base, ["sweep.csv", *outputs])
    manifest["grid"] = {k: [_label(v) for v in vals] for k, vals in axes}
    write_text(out / "sweep.manifest.json", dumps_json(manifest))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    if any(n < 1 for n in args.sizes):
        raise UsageError("--sizes must be positive")
    chi_sign = -1.0 if args.debug_flip_chi_sign else 1.0
    results, elapsed = run_verification(args.sizes, chi_sign=chi_sign, steps=args.steps)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'VERIFICATION FAILED'} in {elapsed:.2f} s")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "simulate": cmd_simulate,
    "batch": cmd_batch,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def _fail(kind: str, message: object, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (TrajectoryError, StateHealthError, ArithmeticError) as exc:
        return _fail("health", exc, EXIT_HEALTH)
    except OSError as exc:
        return _fail("io", exc, EXIT_USAGE)
    except (ValueError, json.JSONDecodeError) as exc:
        return _fail("usage", exc, EXIT_USAGE)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
