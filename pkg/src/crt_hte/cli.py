"""Command-line interface: ``crt-hte <psi|power|samplesize|dropout|simulate|casestudy>``.

Single-value commands print a JSON report. Tabular commands write CSV to
``--out`` (or stdout); the first line of every CSV is
``# manifest_sha256=<hash>`` tying the file to the run manifest written next to
it (``<out>.manifest.json``), to ``--manifest``, or to stderr.

Exit codes: 0 success, 2 validation error, 3 infeasible computation,
4 simulation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import time
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .casestudies import COLUMNS as CASE_COLUMNS
from .casestudies import STUDIES, case_study, parse_grid
from .design import (
    ModelParams,
    TrialDesign,
    design_to_dict,
    load_design,
    load_preset,
    validate_design,
)
from .errors import (
    CrtHteError,
    EnumerationTooLarge,
    NoRootInBracket,
    NonPositiveDiscriminant,
    SimulationFailed,
)
from .power import (
    detectable_delta,
    dropout_bracket,
    dropout_min_size,
    dropout_power,
    min_avg_cluster_size,
    power_chisq,
    power_wald_1d,
    psi_for_power,
    wald_se,
)
from .randomization import DEFAULT_CAP, compute_psi, psi_approx
from .simulate import DEFAULT_PARAMS, operating_characteristics_sweep
from .tables import DEFAULT_RHOS, DEFAULT_SEED, reproduce_table

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_SIMULATION = 0, 2, 3, 4

TABLE_COLUMNS = {
    1: ("table", "m_bar", "q", "rho", "psi", "cse", "esd", "se_bar", "replicates", "failed",
        "within_tolerance", "published_cse", "published_esd", "published_se_bar"),
}
_POWER_TAIL = ("psi", "multiple", "m_bar_raw", "m_bar", "phi", "rho", "type1", "power",
               "replicates", "failed", "within_tolerance", "published_m_bar", "published_phi",
               "phi_at_published_m_bar")
_PUBLISHED_RATES = ("published_type1", "published_power")
TABLE_COLUMNS[2] = ("table", "theta", "delta", "q") + _POWER_TAIL + _PUBLISHED_RATES
TABLE_COLUMNS[3] = ("table", "q", "delta", "theta") + _POWER_TAIL + _PUBLISHED_RATES
TABLE_COLUMNS[4] = (("table", "r", "delta", "q", "theta") + _POWER_TAIL
                    + ("phi_literal_at_published_m_bar",) + _PUBLISHED_RATES)
CUSTOM_COLUMNS = ("rho", "beta4", "esd", "se_bar", "type1", "power", "predicted",
                  "replicates", "failed", "boundary_fits", "seed")
SWEEP_COLUMNS = ("delta", "power", "psi", "se")


class UsageError(CrtHteError, ValueError):
    """Bad command-line input that argparse cannot catch on its own."""


# ----------------------------------------------------------------------------- formatting

def fmt(value: Any) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if v.is_integer() and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    return str(value)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    return obj


def render_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]], manifest_hash: str,
               footer: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest_sha256={manifest_hash}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    for line in footer:
        buf.write(f"# {line}\n")
    return buf.getvalue()


# ----------------------------------------------------------------------------- manifest

class Manifest:
    """Resolved inputs of one run; the hash covers everything except paths and timing."""

    def __init__(self, command: str, args: argparse.Namespace, argv: Sequence[str]):
        self.command = command
        self.argv = list(argv)
        self.config = getattr(args, "config", None)
        self.outputs: list[str] = []
        self.params: dict[str, Any] = {}
        self.design: dict | None = None
        self.seed = getattr(args, "seed", None)
        self.started = time.perf_counter()

    def resolve(self, **params: Any) -> None:
        self.params.update(_jsonable(params))

    def hashed_part(self) -> dict:
        return {"command": self.command, "parameters": self.params, "design": self.design,
                "seed": self.seed, "version": __version__}

    def sha256(self) -> str:
        text = json.dumps(self.hashed_part(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def document(self) -> dict:
        doc = self.hashed_part()
        doc.update(manifest_sha256=self.sha256(), config=self.config, argv=self.argv,
                   outputs=self.outputs,
                   duration_seconds=round(time.perf_counter() - self.started, 3))
        return doc


def _emit_csv(args: argparse.Namespace, manifest: Manifest, columns, rows, footer=()) -> None:
    text = render_csv(columns, rows, manifest.sha256(), footer)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        manifest.outputs.append(args.out)
    else:
        sys.stdout.write(text)
    _write_manifest(args, manifest)


def _emit_json(args: argparse.Namespace, manifest: Manifest, report: dict) -> None:
    report = dict(report, manifest_sha256=manifest.sha256())
    text = json.dumps(_jsonable(report), indent=2, sort_keys=False) + "\n"
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        manifest.outputs.append(args.out)
    else:
        sys.stdout.write(text)
    _write_manifest(args, manifest)


def _write_manifest(args: argparse.Namespace, manifest: Manifest) -> None:
    path = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    text = json.dumps(_jsonable(manifest.document()), indent=2) + "\n"
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stderr.write(text)


# ----------------------------------------------------------------------------- inputs

def _design(args: argparse.Namespace, manifest: Manifest, required: bool = True) -> TrialDesign | None:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        design = load_design(args.config)
    elif args.preset:
        design = load_preset(args.preset)
    elif required:
        raise UsageError("a design is required: pass --config FILE or --preset NAME")
    else:
        return None
    validate_design(design)
    manifest.design = design_to_dict(design)
    return design


def _floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a number or comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def _threads_default() -> int:
    raw = os.environ.get("CRT_HTE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _power_psi(design: TrialDesign, method: str, seed: int):
    if method == "series":
        return psi_for_power(design, "series")
    return compute_psi(design.clusters, design.i1, method, seed=seed)


# ----------------------------------------------------------------------------- commands

def cmd_psi(args, manifest: Manifest) -> int:
    design = _design(args, manifest)
    manifest.resolve(method=args.method, cap=args.cap, kurtosis=args.kurtosis,
                     replicates=args.replicates)
    if args.method == "series" and args.kurtosis != "standard":
        est = psi_approx(design.clusters, design.i1, kurtosis=args.kurtosis)
    else:
        est = compute_psi(design.clusters, design.i1, args.method, cap=args.cap,
                          replicates=args.replicates, seed=args.seed)
    report = {"command": "psi", "value": est.value, "method": est.method, "cv2": est.cv2,
              "kurtosis": est.kurtosis, "assignments_evaluated": est.assignments_evaluated,
              "std_error": est.std_error, "n_clusters": design.n_clusters, "i1": design.i1}
    _emit_json(args, manifest, report)
    return EXIT_OK


def _power_value(design, delta, psi, alpha, test):
    if test == "wald":
        return power_wald_1d(delta[0], design, psi, alpha)
    return power_chisq(delta, design, psi, alpha)


def cmd_power(args, manifest: Manifest) -> int:
    design = _design(args, manifest)
    test = args.test or ("wald" if design.p == 1 else "chisq")
    if test == "wald" and design.p != 1:
        raise UsageError("the Wald test needs one subgroup; use --test chisq")
    psi = _power_psi(design, args.psi_method, args.seed)
    manifest.resolve(test=test, alpha=args.alpha, psi_method=args.psi_method,
                     psi=psi.value, delta=args.delta, sweep=args.sweep)
    if args.sweep:
        if design.p != 1:
            raise UsageError("--sweep is available for one subgroup only")
        grid = parse_grid(args.sweep)
        se = float(wald_se(design.n_clusters, design.m_bar, design.theta, design.sigma_eps, psi))
        rows = [(d, _power_value(design, [d], psi, args.alpha, test), psi.value, se) for d in grid]
        _emit_csv(args, manifest, SWEEP_COLUMNS, rows)
        return EXIT_OK
    if args.delta is None:
        raise UsageError("power needs --delta (or --sweep)")
    delta = _floats(args.delta, "--delta")
    if len(delta) != design.p:
        raise UsageError(f"--delta needs {design.p} value(s), got {len(delta)}")
    report = {"command": "power", "test": test, "delta": delta, "alpha": args.alpha,
              "power": _power_value(design, delta, psi, args.alpha, test),
              "psi": psi.value, "psi_method": psi.method,
              "n_clusters": design.n_clusters, "m_bar": design.m_bar}
    if design.p == 1:
        report["se"] = float(wald_se(design.n_clusters, design.m_bar, design.theta,
                                     design.sigma_eps, psi))
        report["detectable_delta"] = detectable_delta(design.n_clusters, design.m_bar,
                                                      design.theta, design.sigma_eps, psi,
                                                      0.8, args.alpha)
    _emit_json(args, manifest, report)
    return EXIT_OK


def cmd_samplesize(args, manifest: Manifest) -> int:
    design = _design(args, manifest)
    psi = _power_psi(design, args.psi_method, args.seed)
    manifest.resolve(delta=args.delta, power=args.power, alpha=args.alpha, round=args.round,
                     rounding=args.rounding, psi_method=args.psi_method, psi=psi.value)
    size = min_avg_cluster_size(args.delta, design.n_clusters, design.theta, design.sigma_eps,
                                psi, args.round, args.power, args.alpha, args.rounding)
    se = wald_se(design.n_clusters, size.rounded, design.theta, design.sigma_eps, psi)
    from .dist import normal_cdf, normal_quantile

    achieved = normal_cdf(normal_quantile(args.alpha / 2.0) + abs(args.delta) / float(se))
    report = {"command": "samplesize", "delta": args.delta, "target_power": args.power,
              "alpha": args.alpha, "m_bar_raw": size.raw, "m_bar": size.rounded,
              "multiple": size.multiple, "rounding": args.rounding,
              "power_at_m_bar": achieved, "psi": psi.value, "psi_method": psi.method,
              "n_clusters": design.n_clusters}
    _emit_json(args, manifest, report)
    return EXIT_OK


def cmd_dropout(args, manifest: Manifest) -> int:
    design = _design(args, manifest)
    if design.p != 1:
        raise UsageError("the drop-out calculator needs one subgroup")
    psi = _power_psi(design, args.psi_method, args.seed)
    theta = float(design.theta[0])
    sizes = design.clusters.sizes
    manifest.resolve(rate=args.rate, delta=args.delta, power=args.power, alpha=args.alpha,
                     round=args.round, rounding=args.rounding, form=args.form,
                     psi_method=args.psi_method, psi=psi.value)
    size = dropout_min_size(args.rate, args.delta, theta, sizes, psi, design.sigma_eps,
                            args.round, args.power, args.alpha, args.form, args.rounding)
    by_form = {f: dropout_power(args.rate, size.rounded, args.delta, theta, sizes, psi,
                                design.sigma_eps, args.alpha, f) for f in ("literal", "printed")}
    br = dropout_bracket(args.rate, theta, sizes, args.form)
    report = {"command": "dropout", "rate": args.rate, "delta": args.delta,
              "target_power": args.power, "alpha": args.alpha, "form": args.form,
              "m_bar_raw": size.raw, "m_bar": size.rounded, "multiple": size.multiple,
              "power": by_form[args.form], "power_literal": by_form["literal"],
              "power_printed": by_form["printed"], "bracket_a": br.a, "bracket_b": br.b,
              "psi": psi.value, "n_clusters": design.n_clusters}
    _emit_json(args, manifest, report)
    return EXIT_OK


def _params_from_args(args, p: int) -> ModelParams:
    base = DEFAULT_PARAMS
    beta3 = (args.beta3 if args.beta3 is not None else base.beta3[0],) * p
    beta4 = tuple(_floats(args.delta, "--delta")) if args.delta is not None else (0.0,) * p
    if len(beta4) != p:
        raise UsageError(f"--delta needs {p} value(s), got {len(beta4)}")
    return ModelParams(beta1=args.beta1 if args.beta1 is not None else base.beta1,
                       beta2=args.beta2 if args.beta2 is not None else base.beta2,
                       beta3=beta3, beta4=beta4, rho=base.rho)


def _cell(values: Sequence[float]) -> Any:
    # one subgroup prints a plain number, several are joined with ';'
    return values[0] if len(values) == 1 else ";".join(fmt(v) for v in values)


def cmd_simulate(args, manifest: Manifest) -> int:
    rhos = tuple(_floats(args.rhos, "--rhos")) if args.rhos else DEFAULT_RHOS
    if any(not 0.0 <= r < 1.0 for r in rhos):
        raise UsageError("--rhos values must lie in [0, 1)")
    if args.replicates < 0:
        raise UsageError("--replicates must be non-negative")
    threads = args.threads if args.threads is not None else _threads_default()
    if (args.table is None) == (not args.custom):
        raise UsageError("choose exactly one of --table N or --custom")
    if args.table is not None:
        manifest.resolve(table=args.table, replicates=args.replicates, rhos=rhos)
        records = reproduce_table(args.table, args.replicates, args.seed, rhos, threads=threads)
        columns = TABLE_COLUMNS[args.table]
        rows = [tuple(rec.get(c) for c in columns) for rec in records]
        flagged = [rec for rec in records if rec.get("within_tolerance") is False]
        footer = [f"summary table={args.table} cells={len(records)} "
                  f"simulated={'yes' if args.replicates else 'no'} "
                  f"outside_tolerance={len(flagged)}"]
        key = {1: ("m_bar", "q"), 2: ("theta", "delta"), 3: ("q", "delta"), 4: ("r", "delta")}[args.table]
        for rec in flagged:
            footer.append("outside_tolerance " + " ".join(f"{k}={fmt(rec[k])}" for k in key + ("rho",)))
        _emit_csv(args, manifest, columns, rows, footer)
        return EXIT_OK
    design = _design(args, manifest)
    if args.replicates < 1:
        raise UsageError("--custom needs --replicates >= 1")
    params = _params_from_args(args, design.p)
    manifest.resolve(custom=True, replicates=args.replicates, rhos=rhos, rate=args.rate,
                     alpha=args.alpha, params=params.__dict__)
    sims = operating_characteristics_sweep(design, params, rhos, args.replicates, args.seed,
                                           alpha=args.alpha, dropout=args.rate, threads=threads)
    rows = [(oc.rho, _cell(params.beta4), _cell(oc.esd), _cell(oc.se_bar), oc.type1, oc.power,
             oc.predicted, oc.replicates, oc.failed, oc.boundary_fits, oc.seed) for oc in sims]
    footer = [f"summary custom rhos={len(sims)} failed={sum(oc.failed for oc in sims)}"]
    _emit_csv(args, manifest, CUSTOM_COLUMNS, rows, footer)
    return EXIT_OK


def cmd_casestudy(args, manifest: Manifest) -> int:
    if args.name not in STUDIES:
        raise UsageError(f"unknown case study {args.name!r}; choose from {', '.join(STUDIES)}")
    variants = (args.variant,) if args.variant else STUDIES[args.name]
    grid = parse_grid(args.grid) if args.grid else None
    manifest.resolve(name=args.name, variants=variants, grid=args.grid, power=args.power,
                     alpha=args.alpha)
    rows, footer = [], []
    for v in variants:
        # a delta grid does not apply to the prevalence sweep unless asked for explicitly
        g = None if (v == "theta-sweep" and not args.variant) else grid
        r, thr = case_study(args.name, v, g, args.power, args.alpha)
        rows.extend(r)
        if thr is not None:
            footer.append(f"threshold study={thr.study} variant={thr.variant} "
                          f"root={fmt(thr.root)} reported={fmt(thr.reported)} "
                          f"resolution={fmt(thr.resolution)}")
    _emit_csv(args, manifest, CASE_COLUMNS, rows, footer)
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def _add_design(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="design JSON file (keys: sizes, i1, theta, sigma_eps)")
    p.add_argument("--preset", help="name of a bundled design preset")


def _add_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json or stderr)")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crt-hte", description=(
        "Power and sample size for detecting heterogeneous treatment effects in "
        "cluster randomized trials with fixed subgroup prevalence."))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("psi", help="randomization inflation factor psi")
    _add_design(p)
    _add_io(p)
    p.add_argument("--method", choices=("auto", "exact", "series", "sampled"), default="auto")
    p.add_argument("--cap", type=_positive_int, default=DEFAULT_CAP,
                   help="largest number of assignments to enumerate")
    p.add_argument("--replicates", type=_positive_int, default=100_000,
                   help="draws for --method sampled")
    p.add_argument("--kurtosis", choices=("standard", "printed"), default="standard")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_psi)

    p = sub.add_parser("power", help="predicted power for a design")
    _add_design(p)
    _add_io(p)
    p.add_argument("--delta", help="interaction effect; comma list for several subgroups")
    p.add_argument("--alpha", type=_unit, default=0.05)
    p.add_argument("--test", choices=("wald", "chisq"))
    p.add_argument("--psi-method", choices=("series", "exact", "auto"), default="series")
    p.add_argument("--sweep", metavar="START:STOP:STEP", help="emit a CSV power curve over delta")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("samplesize", help="required average cluster size")
    _add_design(p)
    _add_io(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--power", type=_unit, default=0.8)
    p.add_argument("--alpha", type=_unit, default=0.05)
    p.add_argument("--round", type=_positive_int, default=1, help="round to this multiple")
    p.add_argument("--rounding", choices=("nearest", "ceil"), default="nearest")
    p.add_argument("--psi-method", choices=("series", "exact", "auto"), default="series")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("dropout", help="required average cluster size under drop-out")
    _add_design(p)
    _add_io(p)
    p.add_argument("--rate", type=_unit, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--power", type=_unit, default=0.8)
    p.add_argument("--alpha", type=_unit, default=0.05)
    p.add_argument("--round", type=_positive_int, default=1)
    p.add_argument("--rounding", choices=("nearest", "ceil"), default="nearest")
    p.add_argument("--form", choices=("printed", "literal"), default="printed",
                   help="size-spread term of the drop-out bracket")
    p.add_argument("--psi-method", choices=("series", "exact", "auto"), default="series")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_dropout)

    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    _add_design(p)
    _add_io(p)
    p.add_argument("--table", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--custom", action="store_true", help="simulate the given design")
    p.add_argument("--replicates", type=int, default=2000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $CRT_HTE_THREADS or 1)")
    p.add_argument("--rhos", help="comma-separated ICC values (default 0.05,0.5,0.95)")
    p.add_argument("--delta", help="true interaction effect(s) for --custom, comma list")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--beta3", type=float)
    p.add_argument("--rate", type=_unit, help="drop-out rate for --custom")
    p.add_argument("--alpha", type=_unit, default=0.05)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("casestudy", help="power and size curves for the case studies")
    p.add_argument("name", choices=tuple(STUDIES))
    p.add_argument("--variant", choices=("equal", "extreme", "dropout", "nodropout", "theta-sweep"))
    p.add_argument("--grid", help="START:STOP:STEP or comma list (delta, or theta for theta-sweep)")
    p.add_argument("--power", type=_unit, default=0.8)
    p.add_argument("--alpha", type=_unit, default=0.05)
    _add_io(p)
    p.set_defaults(func=cmd_casestudy)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, SimulationFailed):
        return EXIT_SIMULATION
    if isinstance(exc, (EnumerationTooLarge, NoRootInBracket, NonPositiveDiscriminant)):
        return EXIT_INFEASIBLE
    return EXIT_VALIDATION


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 for --help/--version
        return int(exc.code or 0)
    manifest = Manifest(args.command, args, argv)
    try:
        return args.func(args, manifest)
    except (CrtHteError, ValueError, OSError) as exc:
        print(f"crt-hte {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
