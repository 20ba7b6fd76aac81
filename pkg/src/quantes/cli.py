"""Command line front end.

Subcommands cover the whole workflow: ``stats`` summarizes a return file,
``fit`` estimates the joint model once on the full sample, ``forecast`` runs
the rolling out-of-sample exercise, ``backtest`` re-scores a previously
emitted forecast table, ``portfolio`` adds the allocation track, and
``simulate`` writes synthetic panels from the stock truth set. A key=value
config file can hold any flag; explicit flags win. Exit codes: 0 success,
2 validation problem, 3 numeric failure.
"""

import argparse
import datetime
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics as dyn
from .estimation import EMConfig, fit
from .exceptions import (
    InfeasibleAllocationError,
    NumericError,
    PathError,
    QuantesError,
    ValidationError,
)
from .pipeline import (
    ReportBundle,
    RunConfig,
    _backtest_table,
    _score_tables,
    _versions,
    emit_reports,
    load_returns,
    portfolio_run,
    rolling_forecast,
    summary_stats,
)
from .scoring import ForecastRecord
from .simulate import SimScenario, generate, reference_params


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


_CASTERS = {
    "input": str,
    "columns": _str_list,
    "tau": _float_list,
    "kind": str,
    "link": str,
    "window": str,
    "window_width": int,
    "oos": int,
    "refit_every": int,
    "tau_tilde": float,
    "out": str,
    "seed": int,
    "n_starts": int,
    "tol": float,
    "max_iterations": int,
    "forecasts": str,
    "length": int,
    "dimension": int,
    "family": str,
    "df": float,
    "replication": int,
}


def _read_config_file(path):
    """key = value lines; # comments; keys match the long flag names."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: line {lineno}: expected key = value")
        key, value = (side.strip() for side in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CASTERS:
            raise ValidationError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            out[key] = _CASTERS[key](value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
    return out


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="quantes",
        description="Joint quantile and expected shortfall forecasting.",
    )
    parser.add_argument("--version", action="version", version=f"quantes {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--config", help="key=value file; explicit flags override")
    data.add_argument("--input", help="delimited return file with a date column")
    data.add_argument("--columns", type=_str_list, help="comma list of asset columns")
    data.add_argument(
        "--tau", type=_float_list, help="levels in (0, 1): one shared or one per asset"
    )

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--kind", choices=sorted(dyn.KINDS), help="quantile recursion")
    model.add_argument("--link", choices=sorted(dyn.LINKS), help="shortfall link")
    model.add_argument("--seed", type=int, help="seed for every stochastic stage")
    model.add_argument("--n-starts", type=int, dest="n_starts")
    model.add_argument("--tol", type=float, help="EM stopping tolerance")
    model.add_argument("--max-iterations", type=int, dest="max_iterations")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--window", choices=("rolling", "expanding"))
    run.add_argument("--window-width", type=int, dest="window_width")
    run.add_argument("--oos", type=int, help="out-of-sample length")
    run.add_argument("--refit-every", type=int, dest="refit_every")
    run.add_argument("--out", help="report directory")

    p_stats = sub.add_parser("stats", parents=[data], help="summary statistics")
    p_stats.add_argument("--out", help="optional directory for CSV output")

    p_fit = sub.add_parser("fit", parents=[data, model], help="one full-sample fit")
    p_fit.add_argument("--out", help="optional directory for fit.json")

    sub.add_parser(
        "forecast", parents=[data, model, run], help="rolling out-of-sample forecasts"
    )

    p_back = sub.add_parser(
        "backtest", parents=[data], help="re-score an emitted forecast table"
    )
    p_back.add_argument("--forecasts", help="forecasts.csv from a previous run")
    p_back.add_argument("--out", help="report directory")

    p_port = sub.add_parser(
        "portfolio", parents=[data, model, run], help="forecasts plus allocation track"
    )
    p_port.add_argument("--tau-tilde", type=float, dest="tau_tilde")

    p_sim = sub.add_parser(
        "simulate", parents=[model], help="write a synthetic panel from stock truths"
    )
    p_sim.add_argument("--config", help="key=value file; explicit flags override")
    p_sim.add_argument("--tau", type=_float_list)
    p_sim.add_argument("--length", type=int, help="rows to generate")
    p_sim.add_argument("--dimension", type=int, help="number of assets")
    p_sim.add_argument("--family", choices=("normal", "student_t", "none"))
    p_sim.add_argument("--df", type=float)
    p_sim.add_argument("--replication", type=int)
    p_sim.add_argument("--out", help="output CSV path")
    return parser


def _merge(args, key, fallback=None):
    """Explicit flag, else config-file value, else fallback."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return args._file_config.get(key, fallback)


def _require(args, key):
    val = _merge(args, key)
    if val is None:
        raise ValidationError(f"missing required option --{key.replace('_', '-')}")
    return val


def _em_config(args, seed):
    em = EMConfig(seed=seed)
    n_starts = _merge(args, "n_starts")
    if n_starts is not None:
        em = replace(em, n_starts=int(n_starts))
    tol = _merge(args, "tol")
    if tol is not None:
        em = replace(em, tol=float(tol))
    max_iterations = _merge(args, "max_iterations")
    if max_iterations is not None:
        em = replace(em, max_iterations=int(max_iterations))
    return em


def _run_config(args):
    seed = int(_merge(args, "seed", 0))
    columns = _merge(args, "columns")
    return RunConfig(
        input_path=_require(args, "input"),
        tau=_merge(args, "tau", 0.1),
        columns=None if columns is None else tuple(columns),
        kind=_merge(args, "kind", dyn.SAV),
        link_kind=_merge(args, "link", dyn.MULT),
        window=_merge(args, "window", "rolling"),
        window_width=_merge(args, "window_width"),
        oos=int(_merge(args, "oos", 368)),
        refit_every=int(_merge(args, "refit_every", 4)),
        tau_tilde=_merge(args, "tau_tilde"),
        out_dir=_merge(args, "out", "reports"),
        seed=seed,
        em=_em_config(args, seed),
    )


def _print_table(names, stats, stream):
    rows = ["mean", "median", "sd", "skewness", "kurtosis", "jarque_bera", "ljung_box"]
    width = max(12, max(len(n) for n in names) + 2)
    print("statistic".ljust(12) + "".join(n.rjust(width) for n in names), file=stream)
    for row in rows:
        cells = "".join(f"{v:{width}.4f}" for v in stats[row])
        print(row.ljust(12) + cells, file=stream)
    print("correlation", file=stream)
    for line in stats["correlation"]:
        print("  " + "  ".join(f"{v:7.4f}" for v in line), file=stream)


def _cmd_stats(args, stream):
    table = load_returns(_require(args, "input"), _merge(args, "columns"))
    stats = summary_stats(table.values)
    _print_table(table.columns, stats, stream)
    out = _merge(args, "out")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w") as handle:
            handle.write("statistic," + ",".join(table.columns) + "\n")
            for row in ("mean", "median", "sd", "skewness", "kurtosis",
                        "jarque_bera", "ljung_box"):
                cells = ",".join("%.10g" % v for v in stats[row])
                handle.write(f"{row},{cells}\n")
        with open(out / "correlation.csv", "w") as handle:
            handle.write("asset," + ",".join(table.columns) + "\n")
            for name, line in zip(table.columns, stats["correlation"]):
                handle.write(name + "," + ",".join("%.10g" % v for v in line) + "\n")
        print(f"wrote {out / 'summary.csv'} and {out / 'correlation.csv'}", file=stream)
    return 0


def _levels_for(args, p):
    tau = _merge(args, "tau", [0.1])
    tau = np.asarray(tau, dtype=float).reshape(-1)
    if tau.size == 1:
        tau = np.full(p, tau[0])
    if tau.size != p:
        raise ValidationError("tau must have one entry or one per asset")
    return tau


def _cmd_fit(args, stream):
    table = load_returns(_require(args, "input"), _merge(args, "columns"))
    tau = _levels_for(args, table.shape[1])
    seed = int(_merge(args, "seed", 0))
    kind = _merge(args, "kind", dyn.SAV)
    link = _merge(args, "link", dyn.MULT)
    result = fit(
        table.values, tau, kind=kind, link_kind=link, config=_em_config(args, seed)
    )
    print(
        f"loglik {result.loglik:.6f}  iterations {result.iterations}  "
        f"converged {result.converged}  start {result.start_index}",
        file=stream,
    )
    for name, spec, link_par in zip(table.columns, result.params.specs,
                                    result.params.links):
        beta = " ".join(f"{b:+.4f}" for b in spec.beta)
        if link_par.kind == dyn.MULT:
            tail = f"gamma0 {link_par.gamma0:+.4f}"
        else:
            tail = "gamma " + " ".join(f"{g:+.4f}" for g in link_par.gamma)
        print(
            f"{name}: omega {spec.omega:+.4f}  eta {spec.eta:+.4f}  "
            f"beta {beta}  {tail}",
            file=stream,
        )
    if table.shape[1] > 1:
        print("psi", file=stream)
        for line in result.params.psi:
            print("  " + "  ".join(f"{v:7.4f}" for v in line), file=stream)
    out = _merge(args, "out")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        payload = result.to_dict()
        payload["columns"] = list(table.columns)
        payload["versions"] = _versions()
        with open(out / "fit.json", "w") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        print(f"wrote {out / 'fit.json'}", file=stream)
    return 0


def _cmd_forecast(args, stream):
    config = _run_config(args)
    bundle = rolling_forecast(config)
    paths = emit_reports(bundle, config.out_dir)
    for path in paths:
        print(f"wrote {path}", file=stream)
    return 0


def _cmd_portfolio(args, stream):
    config = _run_config(args)
    if config.tau_tilde is None:
        raise ValidationError("missing required option --tau-tilde")
    bundle = portfolio_run(config)
    paths = emit_reports(bundle, config.out_dir)
    for path in paths:
        print(f"wrote {path}", file=stream)
    summary = bundle.manifest["portfolio"]
    print(
        f"sharpe {summary['sharpe']:.4f}  hhi {summary['hhi']:.4f}  "
        f"compound {summary['compound_final']:.4f}  "
        f"infeasible {summary['infeasible_periods']}",
        file=stream,
    )
    return 0


def _cmd_backtest(args, stream):
    """Rebuild records from a wide forecast table and re-run the battery."""
    path = _merge(args, "forecasts") or _merge(args, "input")
    if path is None:
        raise ValidationError("missing required option --forecasts")
    table = load_returns(path)
    prefixes = [c[2:] for c in table.columns if c.startswith("y_")]
    if not prefixes:
        raise ValidationError(f"{path}: no y_<asset> columns found")
    for asset in prefixes:
        for want in (f"var_{asset}", f"es_{asset}"):
            if want not in table.columns:
                raise ValidationError(f"{path}: missing column {want!r}")
    tau = _levels_for(args, len(prefixes))
    col = {name: k for k, name in enumerate(table.columns)}
    records = []
    for t in range(table.shape[0]):
        row = table.values[t]
        records.append(
            ForecastRecord(
                t=t,
                y=np.array([row[col[f"y_{a}"]] for a in prefixes]),
                var=np.array([row[col[f"var_{a}"]] for a in prefixes]),
                es=np.array([row[col[f"es_{a}"]] for a in prefixes]),
                tau=tau,
            )
        )
    records = tuple(records)
    scores, score_paths = _score_tables(records, None, tuple(prefixes))
    tests = _backtest_table(records, tuple(prefixes), tau)
    bundle = ReportBundle(
        dates=table.dates,
        columns=tuple(prefixes),
        tau=tau,
        records=records,
        scores=scores,
        score_paths=score_paths,
        backtests=tests,
        manifest={
            "command": "backtest",
            "source": str(path),
            "tau": tau.tolist(),
            "versions": _versions(),
        },
    )
    out = _merge(args, "out", "reports")
    for written in emit_reports(bundle, out):
        print(f"wrote {written}", file=stream)
    n_reject = sum(r["reject"] for r in tests)
    print(f"{len(tests)} tests, {n_reject} rejections", file=stream)
    return 0


def _cmd_simulate(args, stream):
    kind = _merge(args, "kind", dyn.SAV)
    link = _merge(args, "link", dyn.MULT)
    p = int(_merge(args, "dimension", 3))
    length = int(_merge(args, "length", 1500))
    tau = _levels_for(args, p)
    family = _merge(args, "family", "normal")
    scenario = SimScenario(
        params=reference_params(kind, link, p),
        tau=tau,
        T=length,
        error_family=family,
        df=float(_merge(args, "df", 5.0)),
        seed=int(_merge(args, "seed", 0)),
    )
    y = generate(scenario, int(_merge(args, "replication", 0)))
    out = Path(_merge(args, "out", "simulated.csv"))
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    names = [f"asset{j + 1}" for j in range(p)]
    day = datetime.date(2000, 1, 7)
    with open(out, "w") as handle:
        handle.write("date," + ",".join(names) + "\n")
        for t in range(length):
            cells = ",".join("%.10g" % v for v in y[t])
            handle.write(f"{day.isoformat()},{cells}\n")
            day += datetime.timedelta(days=7)
    print(f"wrote {out} ({length} rows, {p} assets, {family})", file=stream)
    return 0


_DISPATCH = {
    "stats": _cmd_stats,
    "fit": _cmd_fit,
    "forecast": _cmd_forecast,
    "backtest": _cmd_backtest,
    "portfolio": _cmd_portfolio,
    "simulate": _cmd_simulate,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args._file_config = (
            _read_config_file(args.config) if getattr(args, "config", None) else {}
        )
        return _DISPATCH[args.command](args, sys.stdout)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, PathError, InfeasibleAllocationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except QuantesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
