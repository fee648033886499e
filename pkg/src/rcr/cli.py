"""Command-line front end: ``rcr reject | fit | calibrate | simulate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DEFAULT_GRID,
    DEFAULT_MAX_PARAMS,
    DOF_MAX_N,
    ENV_TABLE,
    MIN_TRIALS,
    ContaminantKind,
    CorrectionTable,
    Mixing,
    Scenario,
    Shape,
    build_correction_table,
    fig3_scenario,
    fig4_dataset,
    generate_sample,
    load_table,
    write_atomic,
)
from .fitting import DRAW_BUDGET, FitError, functional_rcr
from .models import BUILTIN_MODELS, DataSet, get_model
from .rejection import (
    Contaminants,
    DistributionAssumption,
    RejectionError,
    Symmetry,
    rcr,
)
from .stats import Sample, Technique, build_deviation_set

REPORT_SCHEMA = "rcr-report/1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ALGORITHM = 0, 2, 3, 4


class DataError(ValueError):
    """Input that parses as arguments but not as data."""


# -- I/O helpers --------------------------------------------------------------


def _emit(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


def read_columns(path) -> dict[str, np.ndarray]:
    """Numeric columns of a headed, comma-separated file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or "" in header:
        raise DataError(f"{path}: header must name every column once")
    body = rows[1:]
    if not body:
        raise DataError(f"{path} has a header but no data rows")
    cols = {h: [] for h in header}
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: {h}={cell!r} is not a number") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: {h} is not finite")
            cols[h].append(v)
    return {h: np.asarray(v) for h, v in cols.items()}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if hasattr(obj, "value"):
        return obj.value
    return obj


# -- shared argument plumbing -------------------------------------------------


def _assumption(args) -> DistributionAssumption:
    if args.assumption:
        if args.uncontaminated or args.contaminants:
            raise argparse.ArgumentTypeError("--assumption cannot be combined with --uncontaminated/--contaminants")
        unc, _, con = args.assumption.partition(":")
        try:
            return DistributionAssumption(Symmetry(unc), Contaminants(con))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad --assumption {args.assumption!r}") from None
    return DistributionAssumption(args.uncontaminated or Symmetry.SYMMETRIC,
                                  args.contaminants or Contaminants.TWO_SIDED)


def _table(args) -> CorrectionTable:
    try:
        return load_table(args.correction_table)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load correction table: {exc}") from exc


def _table_meta(table: CorrectionTable) -> dict:
    return {"source": Path(table.source).name if table.source else "", "version": table.version,
            "trials": table.trials, "seed": table.seed}


OUTPUT_FLAGS = {"out", "kept_csv", "deviations_csv", "ensemble_csv"}


def _config(args) -> dict:
    # output destinations are left out so reruns to different paths give identical reports
    skip = {"func", "command", *OUTPUT_FLAGS}
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip}


def _report(command, args, table, body: dict) -> str:
    report = {
        "schema": REPORT_SCHEMA,
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "config": _config(args),
        "correction_table": _table_meta(table),
        **body,
    }
    return json.dumps(_jsonable(report), indent=2, sort_keys=False) + "\n"


def _sigma_dict(sigma) -> dict:
    return sigma.to_dict()


# -- subcommands --------------------------------------------------------------


def cmd_reject(args) -> int:
    cols = read_columns(args.input)
    if "y" not in cols:
        raise DataError(f"{args.input} has no 'y' column")
    try:
        sample = Sample(cols["y"], cols.get("w"), cols.get("sy"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    assumption = _assumption(args)
    table = _table(args)
    result = rcr(sample, assumption, table=table, bulk=not args.no_bulk)
    body = {
        "n_input": len(sample),
        "assumption": {"uncontaminated": assumption.uncontaminated, "contaminants": assumption.contaminants},
        "result": {"mu": result.mu, "sigma": _sigma_dict(result.sigma)},
        "kept_indices": result.kept_indices,
        "rejected_indices": result.rejected_indices,
        "rejection_order": result.rejection_order,
        "stage_log": result.stage_log,
        "warnings": [],
    }
    _emit(_report("reject", args, table, body), args.out)
    y = sample.values
    if args.kept_csv:
        write_atomic(args.kept_csv, _csv_text(["index", "y"], [(i, y[i]) for i in result.kept_indices]))
    if args.deviations_csv:
        w = sample.effective_weights
        dev = build_deviation_set(y[result.kept_indices], result.mu,
                                  None if w is None else w[result.kept_indices])
        rows = zip(dev.abscissae, dev.deviations, dev.percentiles)
        write_atomic(args.deviations_csv, _csv_text(["abscissa", "deviation", "percentile"], rows))
    return EXIT_OK


def _read_dataset(path) -> DataSet:
    cols = read_columns(path)
    if "y" not in cols:
        raise DataError(f"{path} has no 'y' column")
    xs = sorted((h for h in cols if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    if not xs:
        raise DataError(f"{path} has no x1 column")
    if xs != [f"x{i}" for i in range(1, len(xs) + 1)]:
        raise DataError(f"{path}: x columns must be x1..xn without gaps")
    try:
        return DataSet(np.column_stack([cols[h] for h in xs]), cols["y"], cols.get("sy"), cols.get("w"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_fit(args) -> int:
    data = _read_dataset(args.input)
    model = get_model(args.model, None if args.pivot == "auto" else _pivot(args.pivot))
    if model.n_dims != data.n_dims:
        raise DataError(f"model {args.model} takes {model.n_dims} x column(s), got {data.n_dims}")
    if len(data) <= model.n_params:
        raise DataError(f"need more points ({len(data)}) than parameters ({model.n_params})")
    assumption = _assumption(args)
    table = _table(args)
    result = functional_rcr(model, data, assumption, table=table, bulk=not args.no_bulk,
                            budget=args.budget, seed=args.seed)
    names = model.param_names
    named = lambda th: {n: float(v) for n, v in zip(names, th)}
    body = {
        "n_input": len(data),
        "assumption": {"uncontaminated": assumption.uncontaminated, "contaminants": assumption.contaminants},
        "model": {"name": model.name, "param_names": list(names), "pivot": result.pivot},
        "result": {
            "theta": named(result.theta_best),
            "sigma": _sigma_dict(result.sigma),
            "initial": {k: named(v) for k, v in result.initial.items()},
        },
        "ensemble": result.ensemble,
        "kept_indices": result.kept_indices,
        "rejected_indices": result.rejected_indices,
        "rejection_order": result.rejection_order,
        "stage_log": result.stage_log,
        "warnings": result.warnings,
    }
    _emit(_report("fit", args, table, body), args.out)
    if args.ensemble_csv and result.final_ensemble is not None:
        ens = result.final_ensemble
        header = [f"i{k + 1}" for k in range(model.n_params)] + list(names) + [f"w_{n}" for n in names]
        rows = (list(t) + list(th) + list(w) for t, th, w in zip(ens.tuples, ens.theta, ens.weights))
        write_atomic(args.ensemble_csv, _csv_text(header, rows))
    if args.kept_csv:
        rows = ([i, *data.x[i], data.y[i]] for i in result.kept_indices)
        header = ["index", *[f"x{k + 1}" for k in range(data.n_dims)], "y"]
        write_atomic(args.kept_csv, _csv_text(header, rows))
    return EXIT_OK


def _pivot(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --pivot {text!r}") from None
    return vals[0] if len(vals) == 1 else np.asarray(vals)


def cmd_calibrate(args) -> int:
    grid = tuple(args.N) if args.N else DEFAULT_GRID
    techniques = [Technique(t) for t in args.technique] if args.technique else None

    def progress(i, total, n, kind, m):
        if args.verbose:
            print(f"[{i}/{total}] n={n} center={getattr(kind, 'value', kind)} params={m}", file=sys.stderr)

    table = build_correction_table(trials=args.trials, seed=args.seed, grid=grid, max_params=args.max_params,
                                   dof_max_n=args.dof_max_n, progress=progress, techniques=techniques)
    try:
        table.write(args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {args.out}: {sum(len(c[0]) for c in table.cells.values())} cells, trials={table.trials}, seed={table.seed}")
    for key in sorted(table.cells, key=lambda k: tuple(str(getattr(v, "value", v)) for v in k)):
        technique, kind, side, m = key
        ns, fs, ses = table.cells[key]
        label = f"{technique.value}/{getattr(kind, 'value', kind)}/{side.value}/M={m}"
        print(f"  {label:32s} n={int(ns[0])}..{int(ns[-1])}  factor {fs[0]:.4f}..{fs[-1]:.4f}  "
              f"max stderr {ses.max():.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.preset == "fig4":
        f = 0.5 if args.f is None else args.f
        n = 101 if args.n is None else args.n
        data, labels = fig4_dataset(args.seed, n_points=n, contamination=f)
        rows = zip(data.x[:, 0], data.y, data.sigma_y, labels)
        text = _csv_text(["x1", "y", "sy", "label"], rows)
    else:
        if args.preset == "fig3":
            scenario = fig3_scenario(args.seed)
            overrides = {k: v for k, v in (("n_points", args.n), ("contamination", args.f)) if v is not None}
            scenario = Scenario(**{**scenario.__dict__, **overrides})
        else:
            scenario = Scenario(
                n_points=100 if args.n is None else args.n,
                contamination=0.0 if args.f is None else args.f,
                shape=args.shape,
                contaminants=args.contaminants_kind,
                contaminant_sigma=args.contaminant_sigma,
                mixing=args.mixing,
                seed=args.seed,
            )
        values, labels = generate_sample(scenario)
        text = _csv_text(["y", "label"], zip(values, labels))
    _emit(text, args.out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be positive")
    return v


def _grid_n(text: str) -> int:
    v = _positive_int(text)
    if v < 2:
        raise argparse.ArgumentTypeError("grid sizes must be at least 2")
    return v


def _trials(text: str) -> int:
    v = _positive_int(text)
    if v < MIN_TRIALS:
        raise argparse.ArgumentTypeError(f"need at least {MIN_TRIALS} trials")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("contamination fraction must lie in [0, 1)")
    return v


def _add_assumption_flags(p):
    p.add_argument("--assumption", metavar="UNCONTAMINATED:CONTAMINANTS",
                   help="shorthand such as symmetric:one-sided")
    p.add_argument("--uncontaminated", choices=[v.value for v in Symmetry],
                   help="shape of the uncontaminated distribution (default symmetric)")
    p.add_argument("--contaminants", choices=[v.value for v in Contaminants],
                   help="contaminant sidedness (default two-sided)")
    p.add_argument("--no-bulk", action="store_true", help="skip bulk pre-rejection")
    p.add_argument("--correction-table", default=os.environ.get(ENV_TABLE),
                   help=f"correction table file (default ${ENV_TABLE} or the packaged table)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcr", description="Robust Chauvenet outlier rejection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reject", help="reject outliers from a single-valued sample")
    p.add_argument("input", help="CSV with column y and optional w, sy")
    _add_assumption_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path (default stdout)")
    p.add_argument("--kept-csv", help="write the kept points here")
    p.add_argument("--deviations-csv", help="write (abscissa, deviation) pairs of the final stage here")
    p.set_defaults(func=cmd_reject)

    p = sub.add_parser("fit", help="fit a model while rejecting outliers")
    p.add_argument("input", help="CSV with columns x1..xn, y and optional sy, w")
    p.add_argument("--model", required=True, choices=sorted(BUILTIN_MODELS))
    p.add_argument("--pivot", default="auto", help="pivot value(s), comma-separated, or 'auto'")
    _add_assumption_flags(p)
    p.add_argument("--budget", type=_positive_int, default=DRAW_BUDGET,
                   help="largest ensemble enumerated exhaustively; sampled above it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path (default stdout)")
    p.add_argument("--ensemble-csv", help="write the final solution ensemble here")
    p.add_argument("--kept-csv", help="write the kept points here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="regenerate the correction-factor table")
    p.add_argument("--trials", type=_trials, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--N", type=_grid_n, nargs="+", help="sample sizes to calibrate (default full grid)")
    p.add_argument("--technique", choices=[t.value for t in Technique], nargs="+",
                   help="limit to these techniques")
    p.add_argument("--max-params", type=_positive_int, default=DEFAULT_MAX_PARAMS)
    p.add_argument("--dof-max-n", type=_positive_int, default=DOF_MAX_N)
    p.add_argument("--out", required=True, help="table file to write")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="write a synthetic contaminated sample")
    p.add_argument("--preset", choices=["fig3", "fig4", "custom"], default="custom")
    p.add_argument("--n", type=_positive_int)
    p.add_argument("--f", type=_fraction, help="contaminated fraction")
    p.add_argument("--shape", choices=[v.value for v in Shape], default=Shape.GAUSSIAN.value)
    p.add_argument("--contaminants", dest="contaminants_kind", choices=[v.value for v in ContaminantKind],
                   default=ContaminantKind.ONE_SIDED.value)
    p.add_argument("--contaminant-sigma", type=float, default=10.0)
    p.add_argument("--mixing", choices=[v.value for v in Mixing], default=Mixing.REPLACE.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except DataError as exc:
        print(f"rcr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RejectionError, FitError) as exc:
        print(f"rcr: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
