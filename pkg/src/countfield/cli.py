"""Command-line interface.

Subcommands cover the full workflow: `simulate` writes a synthetic dataset
from a bundled preset, `fit` runs the sampler on a data CSV, and the
prediction commands (`predict`, `forecast`, `krige`, `aadb`) plus `diagnose`
consume the draws files a fit leaves behind.  Failures print one
machine-parseable line `error: <category>: <message>` to stderr and remove
any partially written outputs; configuration problems exit with code 2,
failures during computation with 1.
"""

from __future__ import annotations

import argparse
import csv
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .chain import SamplerError, pool_draws, run_chains
from .dataio import (
    RunConfig,
    ingest,
    load_run_config,
    read_draws,
    read_draws_light,
    write_aadb,
    write_dataset,
    write_diagnostics,
    write_draws,
    write_prediction,
    write_summary,
    write_truth,
)
from .diagnostics import diagnose
from .predict import estimate_aadb, forecast, impute, krige, spacetime_predict
from .simulate import (
    MissingnessScenario,
    apply_missingness,
    preset,
    simulate_dataset,
)
from .spde import load_mesh, save_mesh


class CliError(Exception):
    """Failure with a reporting category and exit code."""

    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _config_error(message: str) -> CliError:
    return CliError("config", message, 2)


# ---------------------------------------------------------------------------
# small parsing helpers


def _parse_at(raw: str) -> tuple[float, float]:
    parts = raw.split(",")
    if len(parts) != 2:
        raise _config_error(f"--at expects 'X,Y', got {raw!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise _config_error(f"--at coordinates must be numeric, "
                            f"got {raw!r}") from None


def _parse_period(raw: str, T: int):
    """'all' -> None; 'a:b' -> inclusive range; 'a,b,c' -> explicit times."""
    raw = raw.strip()
    if raw == "all":
        return None
    try:
        if ":" in raw:
            a, b = (int(v) for v in raw.split(":"))
            return list(range(a, b + 1))
        return [int(v) for v in raw.split(",")]
    except ValueError:
        raise _config_error(f"--period must be 'all', 'a:b', or a comma "
                            f"list of times, got {raw!r}") from None


def _site_index(dataset, raw: str) -> int:
    if raw in dataset.site_ids:
        return dataset.site_ids.index(raw)
    try:
        idx = int(raw)
    except ValueError:
        raise _config_error(f"unknown site {raw!r}") from None
    if not (0 <= idx < dataset.n_sites):
        raise _config_error(f"site index {idx} out of range "
                            f"0..{dataset.n_sites - 1}")
    return idx


def _read_csv_rows(path_str: str, flag: str):
    path = Path(path_str)
    if not path.exists():
        raise _config_error(f"{flag} file {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(f.strip() for f in r)]
    if len(rows) < 2:
        raise _config_error(f"{flag} file {path} has no data rows")
    return rows


def _read_keyed_covariates(path_str, keys, q: int, key_name: str,
                           flag: str) -> np.ndarray:
    """CSV with header `<key_name>,<q covariate columns>` into (len(keys), q)."""
    if path_str is None:
        raise _config_error(f"the model has covariates; supply them "
                            f"with {flag}")
    rows = _read_csv_rows(path_str, flag)
    header = [h.strip() for h in rows[0]]
    if header[0] != key_name or len(header) != 1 + q:
        raise _config_error(f"{flag} header must be '{key_name}' plus {q} "
                            f"covariate columns, got {','.join(header)}")
    table = {}
    for row_no, row in enumerate(rows[1:], start=2):
        if len(row) != 1 + q:
            raise _config_error(f"{flag} row {row_no}: expected {1 + q} "
                                f"fields, got {len(row)}")
        try:
            key = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise _config_error(f"{flag} row {row_no}: nonnumeric "
                                "field") from None
        if key in table:
            raise _config_error(f"{flag} row {row_no}: duplicate "
                                f"{key_name}={key}")
        table[key] = vals
    missing = [k for k in keys if k not in table]
    if missing:
        raise _config_error(f"{flag} lacks rows for {key_name}="
                            f"{missing[:5]}{'...' if len(missing) > 5 else ''}")
    return np.array([table[k] for k in keys])


def _read_future_covariates(path_str, dataset, horizons: int,
                            flag: str) -> np.ndarray:
    """CSV with header `site_id,h,<covariates>` into (H, n, q)."""
    q = dataset.q
    if path_str is None:
        raise _config_error(f"the model has covariates; supply future values "
                            f"with {flag}")
    rows = _read_csv_rows(path_str, flag)
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["site_id", "h"] or len(header) != 2 + q:
        raise _config_error(f"{flag} header must be 'site_id,h' plus {q} "
                            f"covariate columns, got {','.join(header)}")
    site_index = {sid: i for i, sid in enumerate(dataset.site_ids)}
    out = np.full((horizons, dataset.n_sites, q), np.nan)
    for row_no, row in enumerate(rows[1:], start=2):
        if len(row) != 2 + q:
            raise _config_error(f"{flag} row {row_no}: expected {2 + q} "
                                f"fields, got {len(row)}")
        sid = row[0].strip()
        if sid not in site_index:
            raise _config_error(f"{flag} row {row_no}: unknown site {sid!r}")
        try:
            h = int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError:
            raise _config_error(f"{flag} row {row_no}: nonnumeric "
                                "field") from None
        if not (1 <= h <= horizons):
            raise _config_error(f"{flag} row {row_no}: h must be in "
                                f"1..{horizons}, got {h}")
        out[h - 1, site_index[sid]] = vals
    if np.isnan(out).any():
        raise _config_error(f"{flag} must cover every (site, h) pair for "
                            f"h = 1..{horizons}")
    return out


def _prepare_dir(directory, written: list[Path]):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def out(name: str) -> Path:
        p = d / name
        written.append(p)
        return p

    return out


def _load_config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def _draws_files(fit_dir: Path) -> list[Path]:
    files = list(Path(fit_dir).glob("draws_chain*.csv"))
    if not files:
        raise _config_error(f"no draws files (draws_chain*.csv) in {fit_dir}")
    return sorted(files, key=lambda p: int(
        re.search(r"draws_chain(\d+)", p.stem).group(1)))


def _pred_setup(args, written):
    cfg = _load_config(args)
    dataset = ingest(args.data, period=cfg.period, order=cfg.order,
                     covariates=cfg.covariates)
    chains = [read_draws(f, dataset) for f in _draws_files(args.fit)]
    draws = pool_draws(chains)
    out = _prepare_dir(args.output or args.fit, written)
    return dataset, draws, out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, written):
    spec = preset(args.preset, seed=args.seed)
    truth = simulate_dataset(spec)
    dataset = truth.dataset
    if args.scenario == "holdout":
        ids = [s.strip() for s in args.holdout_sites.split(",") if s.strip()]
        if not ids:
            raise _config_error("--scenario holdout needs --holdout-sites")
        scenario = MissingnessScenario.holdout(
            [_site_index(dataset, s) for s in ids])
        dataset = apply_missingness(truth, scenario,
                                    np.random.default_rng(args.seed + 1))
    elif args.missing > 0:
        if args.scenario == "blocks":
            try:
                lo, hi = (int(v) for v in args.block_range.split(","))
            except ValueError:
                raise _config_error(f"--block-range expects 'LO,HI', got "
                                    f"{args.block_range!r}") from None
            scenario = MissingnessScenario.blocks(args.missing, (lo, hi))
        else:
            scenario = MissingnessScenario.cells(args.missing)
        dataset = apply_missingness(truth, scenario,
                                    np.random.default_rng(args.seed + 1))
    out = _prepare_dir(args.output, written)
    data_path = out("data.csv")
    write_dataset(dataset, data_path)
    truth_path = out("truth.npz")
    write_truth(truth, truth_path, mask=dataset.mask)
    print(f"wrote {data_path}")
    print(f"wrote {truth_path}")


def cmd_fit(args, written):
    cfg = _load_config(args)
    chain_cfg = cfg.chain
    if args.seed is not None:
        chain_cfg = replace(chain_cfg, seed=args.seed)
    if args.chains is not None:
        chain_cfg = replace(chain_cfg, n_chains=args.chains)
    if args.keep_lambda:
        chain_cfg = replace(chain_cfg, keep_lambda=True)
    dataset = ingest(args.data, period=cfg.period, order=cfg.order,
                     covariates=cfg.covariates)
    mesh = load_mesh(cfg.mesh_file) if cfg.mesh_file else None
    model = cfg.model_config(mesh)
    out = _prepare_dir(args.output or cfg.output_dir, written)

    chains = run_chains(dataset, model, chain_cfg)

    for c, draws in enumerate(chains):
        path = out(f"draws_chain{c}.csv")
        written.append(path.with_suffix(".npz"))
        write_draws(draws, path)
        print(f"wrote {path}")
    summary_path = out("summary.csv")
    write_summary(summary_path, chains)
    print(f"wrote {summary_path}")
    if chains[0].context.mesh is not None:
        mesh_path = out("mesh.txt")
        save_mesh(chains[0].context.mesh, mesh_path)
        print(f"wrote {mesh_path}")
    for c, d in enumerate(chains):
        print(f"chain {c}: acceptance lambda {d.accept_lambda:.3f}, "
              f"kappa {d.accept_kappa:.3f}")
    if chain_cfg.n_draws >= 2:
        report = diagnose(chains)
        diag_path = out("diagnostics.csv")
        write_diagnostics(diag_path, report)
        print(f"wrote {diag_path}")
        flagged = ", ".join(report.flagged) if report.flagged else "none"
        print(f"max R-hat {report.max_rhat():.4f}; flagged: {flagged}")


def cmd_predict(args, written):
    dataset, draws, out = _pred_setup(args, written)
    if args.at is None:
        if args.horizon:
            raise _config_error("--horizon needs --at (site predictions "
                                "come from `forecast`)")
        summary = impute(draws, dataset, level=args.level, seed=args.seed)
        path = out("imputation.csv")
    else:
        coords = _parse_at(args.at)
        x_future = None
        if dataset.q:
            x_future = _read_keyed_covariates(args.x_future,
                                              range(args.horizon + 1),
                                              dataset.q, "h", "--x-future")
        summary = spacetime_predict(draws, dataset, coords, args.horizon,
                                    x_future=x_future, level=args.level,
                                    seed=args.seed)
        path = out("spacetime.csv")
    write_prediction(path, summary)
    print(f"wrote {path}")


def cmd_forecast(args, written):
    dataset, draws, out = _pred_setup(args, written)
    x_future = None
    if dataset.q:
        x_future = _read_future_covariates(args.x_future, dataset,
                                           args.horizon, "--x-future")
    summary = forecast(draws, dataset, args.horizon, x_future=x_future,
                       level=args.level, seed=args.seed)
    path = out("forecast.csv")
    write_prediction(path, summary)
    print(f"wrote {path}")


def cmd_krige(args, written):
    dataset, draws, out = _pred_setup(args, written)
    coords = _parse_at(args.at)
    x_new = None
    if dataset.q:
        x_new = _read_keyed_covariates(args.x_new, range(dataset.T),
                                       dataset.q, "t", "--x-new")
    summary = krige(draws, dataset, coords, x_new=x_new, level=args.level,
                    seed=args.seed)
    path = out("krige.csv")
    write_prediction(path, summary)
    print(f"wrote {path}")


def cmd_aadb(args, written):
    dataset, draws, out = _pred_setup(args, written)
    if (args.site is None) == (args.at is None):
        raise _config_error("give exactly one of --site or --at")
    period = _parse_period(args.period, dataset.T)
    if args.site is not None:
        est = estimate_aadb(draws, dataset, site=_site_index(dataset,
                                                             args.site),
                            period=period, period_label=args.period,
                            level=args.level, seed=args.seed)
    else:
        coords = _parse_at(args.at)
        x_new = None
        if dataset.q:
            x_new = _read_keyed_covariates(args.x_new, range(dataset.T),
                                           dataset.q, "t", "--x-new")
        est = estimate_aadb(draws, dataset, new_site=coords, x_new=x_new,
                            period=period, period_label=args.period,
                            level=args.level, seed=args.seed)
    path = out("aadb.csv")
    write_aadb(path, est)
    print(f"wrote {path}")
    print(f"AADB {est.site} over {est.period}: mean {est.mean:.3f}, "
          f"{est.level * 100:.0f}% CI [{est.lower:.3f}, {est.upper:.3f}]")


def cmd_diagnose(args, written):
    chains = [read_draws_light(f) for f in _draws_files(args.fit)]
    report = diagnose(chains)
    out = _prepare_dir(args.output or args.fit, written)
    path = out("diagnostics.csv")
    write_diagnostics(path, report)
    print(f"wrote {path}")
    for c, d in enumerate(chains):
        print(f"chain {c}: acceptance lambda {d.accept_lambda:.3f}, "
              f"kappa {d.accept_kappa:.3f}")
    flagged = ", ".join(report.flagged) if report.flagged else "none"
    print(f"max R-hat {report.max_rhat():.4f}; flagged: {flagged}")


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countfield",
        description="Bayesian dynamic GLMs for spatiotemporal count data")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_, func):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = command("simulate", "write a synthetic dataset from a bundled preset",
                cmd_simulate)
    p.add_argument("--preset", required=True,
                   help="preset name, e.g. appendix-c-small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="sim", help="output directory")
    p.add_argument("--missing", type=float, default=0.0,
                   help="proportion of cells to mask")
    p.add_argument("--scenario", choices=["cells", "blocks", "holdout"],
                   default="cells")
    p.add_argument("--block-range", default="5,20",
                   help="LO,HI block lengths for --scenario blocks")
    p.add_argument("--holdout-sites", default="",
                   help="comma list of sites for --scenario holdout")

    p = command("fit", "run the MCMC sampler on a data CSV", cmd_fit)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--chains", type=int, help="override chain count")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--keep-lambda", action="store_true",
                   help="retain full log-rate draws (large)")

    def prediction_command(name, help_, func):
        p = command(name, help_, func)
        p.add_argument("--fit", required=True,
                       help="output directory of a previous fit")
        p.add_argument("--data", required=True,
                       help="the data CSV the fit used")
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--output", help="output directory (default: fit dir)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--level", type=float, default=0.95)
        return p

    p = prediction_command(
        "predict", "impute unobserved cells, or with --at predict a new "
        "site at horizons 0..H", cmd_predict)
    p.add_argument("--at", help="X,Y coordinates of a new site")
    p.add_argument("--horizon", type=int, default=0)
    p.add_argument("--x-future", help="CSV h,<covariates> for h = 0..H")

    p = prediction_command(
        "forecast", "posterior-predictive counts at the data sites",
        cmd_forecast)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--x-future",
                   help="CSV site_id,h,<covariates> for h = 1..H")

    p = prediction_command(
        "krige", "predict the count series at a new location", cmd_krige)
    p.add_argument("--at", required=True, help="X,Y coordinates")
    p.add_argument("--x-new", help="CSV t,<covariates> for t = 0..T-1")

    p = prediction_command(
        "aadb", "average daily count over a period", cmd_aadb)
    p.add_argument("--site", help="site id or index")
    p.add_argument("--at", help="X,Y coordinates of a new site")
    p.add_argument("--x-new", help="CSV t,<covariates> for t = 0..T-1")
    p.add_argument("--period", default="all",
                   help="'all', inclusive 'a:b', or comma list of times")

    p = command("diagnose", "convergence report over a fit's chains",
                cmd_diagnose)
    p.add_argument("--fit", required=True)
    p.add_argument("--output", help="output directory (default: fit dir)")
    return parser


def _cleanup(written: list[Path]) -> None:
    for path in written:
        try:
            path.unlink(missing_ok=True)
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    written: list[Path] = []
    try:
        args.func(args, written)
        return 0
    except CliError as err:
        _cleanup(written)
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return err.code
    except SamplerError as err:
        _cleanup(written)
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1
    except np.linalg.LinAlgError as err:
        _cleanup(written)
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as err:
        _cleanup(written)
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        _cleanup(written)
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
