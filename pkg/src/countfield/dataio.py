"""File formats: count data, run configuration, draws, and result tables.

Count data travels as long-format CSV with header
``site_id,x,y,t,count,<covariate columns...>``: one row per observed
(site, time) pair, an empty count marking an unobserved cell, the time
column either integer indices or ISO dates (converted to days from the
earliest date).  Posterior draws are stored as a CSV of the monitored
scalars (schema: one column per scalar) plus an ``.npz`` sidecar holding
the full latent draws and model metadata, which is enough to rebuild the
fit for prediction.  Run configuration is a flat INI file.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .chain import ChainConfig, PosteriorDraws
from .core import Dataset, PriorConfig
from .kernels import ModelConfig, build_context
from .simulate import SimulatedTruth, build_harmonics
from .spde import Mesh

_DATA_COLUMNS = ["site_id", "x", "y", "t", "count"]


def _fmt(v: float) -> str:
    # repr of a Python float is the shortest exactly round-tripping decimal
    return repr(float(v))


# ---------------------------------------------------------------------------
# count data


def write_dataset(dataset: Dataset, path, covariate_names=None) -> None:
    """Write a Dataset as long-format CSV; masked cells get empty counts."""
    q = dataset.q
    if covariate_names is None:
        covariate_names = [f"x{j + 1}" for j in range(q)]
    if len(covariate_names) != q:
        raise ValueError(f"need {q} covariate names, got {len(covariate_names)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(_DATA_COLUMNS + list(covariate_names))
        for t in range(dataset.T):
            for i in range(dataset.n_sites):
                cnt = str(int(dataset.counts[t, i])) if dataset.mask[t, i] \
                    else ""
                out.writerow([dataset.site_ids[i],
                              _fmt(dataset.sites[i, 0]),
                              _fmt(dataset.sites[i, 1]), str(t), cnt]
                             + [_fmt(v) for v in dataset.X[t, i]])


def _parse_time(raw: str, row_no: int):
    try:
        return int(raw), False
    except ValueError:
        pass
    try:
        return date.fromisoformat(raw), True
    except ValueError:
        raise ValueError(f"row {row_no}: time {raw!r} is neither an integer "
                         "index nor an ISO date") from None


def ingest(path, period: int = 7, order: int = 1,
           covariates=None) -> Dataset:
    """Read long-format count CSV into a Dataset.

    Sites appear in first-occurrence order; the time axis spans the full
    range between the earliest and latest index (days when dates are given),
    with absent or empty-count rows marked unobserved.  When the model has
    covariates every (site, time) cell needs a row, observed or not.
    `covariates` selects and orders the covariate columns; default is every
    column after `count` in file order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"data file {path} is empty")
    header = [h.strip() for h in rows[0]]
    if header[:5] != _DATA_COLUMNS:
        raise ValueError("data header must start with "
                         f"{','.join(_DATA_COLUMNS)}; got {','.join(header[:5])}")
    available = header[5:]
    if covariates is None:
        cov_names = list(available)
    else:
        cov_names = list(covariates)
        unknown = [c for c in cov_names if c not in available]
        if unknown:
            raise ValueError(f"covariate columns {unknown} not present in the "
                             f"data header (has {available})")
    cov_pos = [5 + available.index(c) for c in cov_names]
    q = len(cov_names)

    records: dict = {}     # (site, time) -> (row_no, count, covariates)
    coords: dict = {}
    first_row: dict = {}
    site_order: list[str] = []
    uses_dates = None

    for row_no, row in enumerate(rows[1:], start=2):
        if not row or all(f.strip() == "" for f in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"row {row_no}: expected {len(header)} fields, "
                             f"got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise ValueError(f"row {row_no}: empty site_id")

        def num(pos: int, name: str) -> float:
            raw = row[pos].strip()
            try:
                return float(raw)
            except ValueError:
                raise ValueError(f"row {row_no}: nonnumeric {name} "
                                 f"{raw!r}") from None

        x, y = num(1, "x"), num(2, "y")
        tval, is_date = _parse_time(row[3].strip(), row_no)
        if uses_dates is None:
            uses_dates = is_date
        elif uses_dates != is_date:
            raise ValueError(f"row {row_no}: mixes integer and date time "
                             "indices with earlier rows")
        raw_count = row[4].strip()
        if raw_count == "":
            cnt = None
        else:
            cnt = num(4, "count")
            if cnt < 0 or cnt != round(cnt):
                raise ValueError(f"row {row_no}: count must be a nonnegative "
                                 f"integer, got {raw_count!r}")
        covs = [num(pos, cov_names[j]) for j, pos in enumerate(cov_pos)]

        key = (sid, tval)
        if key in records:
            raise ValueError(f"rows {records[key][0]} and {row_no}: duplicate "
                             f"observation for site {sid!r} at t={row[3].strip()}")
        if sid in coords:
            if coords[sid] != (x, y):
                raise ValueError(f"rows {first_row[sid]} and {row_no}: site "
                                 f"{sid!r} has inconsistent coordinates")
        else:
            coords[sid] = (x, y)
            first_row[sid] = row_no
            site_order.append(sid)
        records[key] = (row_no, cnt, covs)

    if not records:
        raise ValueError(f"data file {path} has no data rows")
    t_values = [k[1] for k in records]
    t0 = min(t_values)
    to_index = (lambda tv: (tv - t0).days) if uses_dates \
        else (lambda tv: tv - t0)
    T = max(to_index(tv) for tv in t_values) + 1
    n = len(site_order)
    site_index = {sid: i for i, sid in enumerate(site_order)}

    counts = np.zeros((T, n))
    mask = np.zeros((T, n), dtype=bool)
    X = np.zeros((T, n, q))
    covered = np.zeros((T, n), dtype=bool)
    for (sid, tval), (_, cnt, covs) in records.items():
        t, i = to_index(tval), site_index[sid]
        covered[t, i] = True
        X[t, i] = covs
        if cnt is not None:
            counts[t, i] = cnt
            mask[t, i] = True
    if q and not covered.all():
        holes = np.argwhere(~covered)
        t, i = holes[0]
        raise ValueError(f"covariates must cover every (site, time) cell; "
                         f"{len(holes)} cells have no row, first missing: "
                         f"site {site_order[i]!r} at t={t}")

    F_vec, G = build_harmonics(period, order)
    F = np.tile(F_vec, (T, 1))
    sites = np.array([coords[sid] for sid in site_order])
    return Dataset(counts=counts, mask=mask, sites=sites, X=X, F=F, G=G,
                   site_ids=site_order)


# ---------------------------------------------------------------------------
# simulation truth sidecar


def write_truth(truth: SimulatedTruth, path, mask=None) -> None:
    """Latent layers and true hyperparameters, for scoring fits.

    `mask` overrides the stored observation mask, for recording which cells
    a missingness scenario hid after the truth was drawn.
    """
    h = truth.hypers
    np.savez(path, lam=truth.lam, mu=truth.mu, theta=truth.theta,
             theta0=truth.theta0, counts=truth.dataset.counts,
             mask=truth.dataset.mask if mask is None else mask,
             kappa=h.kappa, sigma2=h.sigma2, tau2=h.tau2, w=h.w, beta=h.beta)


def read_truth(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


# ---------------------------------------------------------------------------
# posterior draws


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".npz")


def write_draws(draws: PosteriorDraws, path) -> None:
    """Monitored scalars as CSV plus an .npz sidecar with the full state."""
    scalars = draws.monitored_scalars()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(scalars)
        cols = list(scalars.values())
        for k in range(draws.n_draws):
            out.writerow([_fmt(col[k]) for col in cols])

    ctx = draws.context
    meta = {
        "model_path": ctx.path,
        "nu": ctx.nu,
        "priors": dataclasses.asdict(ctx.priors),
        "chain": dataclasses.asdict(draws.config),
        "chain_id": draws.chain_id,
        "accept_lambda": draws.accept_lambda,
        "accept_kappa": draws.accept_kappa,
        "step_lambda": draws.step_lambda,
        "step_kappa": draws.step_kappa,
    }
    payload = dict(meta=np.array(json.dumps(meta)),
                   kappa=draws.kappa, sigma2=draws.sigma2, tau2=draws.tau2,
                   w=draws.w, beta=draws.beta, theta0=draws.theta0,
                   theta=draws.theta, intercepts=draws.intercepts,
                   lam_missing=draws.lam_missing,
                   missing_cells=draws.missing_cells,
                   monitored_cells=draws.monitored_cells)
    if draws.weights is not None:
        payload["weights"] = draws.weights
    if draws.lam is not None:
        payload["lam"] = draws.lam
    if ctx.mesh is not None:
        payload["mesh_vertices"] = ctx.mesh.vertices
        payload["mesh_triangles"] = ctx.mesh.triangles
    np.savez(_sidecar(path), **payload)


def read_draws(path, dataset: Dataset) -> PosteriorDraws:
    """Rebuild a PosteriorDraws from its sidecar, against the given dataset.

    The saved mesh is reused verbatim so node-weight draws stay aligned;
    predictions from the reloaded object match the original fit exactly.
    """
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"draws sidecar {side} does not exist")
    with np.load(side) as data:
        meta = json.loads(str(data["meta"][()]))
        mesh = None
        if "mesh_vertices" in data.files:
            mesh = Mesh(vertices=data["mesh_vertices"],
                        triangles=data["mesh_triangles"])
        model = ModelConfig(path=meta["model_path"], nu=meta["nu"], mesh=mesh,
                            priors=PriorConfig(**meta["priors"]))
        ctx = build_context(dataset, model)
        return PosteriorDraws(
            kappa=data["kappa"], sigma2=data["sigma2"], tau2=data["tau2"],
            w=data["w"], beta=data["beta"], theta0=data["theta0"],
            theta=data["theta"], intercepts=data["intercepts"],
            weights=data["weights"] if "weights" in data.files else None,
            lam_missing=data["lam_missing"],
            missing_cells=data["missing_cells"],
            lam=data["lam"] if "lam" in data.files else None,
            accept_lambda=meta["accept_lambda"],
            accept_kappa=meta["accept_kappa"],
            step_lambda=meta["step_lambda"],
            step_kappa=meta["step_kappa"],
            monitored_cells=data["monitored_cells"],
            chain_id=meta["chain_id"],
            config=ChainConfig(**meta["chain"]), context=ctx)


class DrawsFile:
    """Monitored scalars read back from a draws CSV, enough to diagnose."""

    def __init__(self, columns: dict, accept_lambda: float,
                 accept_kappa: float):
        self.columns = columns
        self.accept_lambda = accept_lambda
        self.accept_kappa = accept_kappa

    @property
    def n_draws(self) -> int:
        return len(next(iter(self.columns.values())))

    def monitored_scalars(self) -> dict:
        return dict(self.columns)


def read_draws_light(path) -> DrawsFile:
    """Read only the monitored-scalar table (plus acceptance rates)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"draws file {path} has no draws")
    header = rows[0]
    body = np.array([[float(v) for v in row] for row in rows[1:]])
    columns = {name: body[:, j] for j, name in enumerate(header)}
    accept_l = accept_k = float("nan")
    side = _sidecar(path)
    if side.exists():
        with np.load(side) as data:
            meta = json.loads(str(data["meta"][()]))
        accept_l = meta["accept_lambda"]
        accept_k = meta["accept_kappa"]
    return DrawsFile(columns, accept_l, accept_k)


# ---------------------------------------------------------------------------
# result tables


def hyper_summary(chains: list, level: float = 0.95) -> list[dict]:
    """Pooled posterior summary rows: kappa, sigma2, tau2, w_l, beta_j."""
    if not chains:
        raise ValueError("need at least one chain to summarize")
    p = chains[0].w.shape[1]
    q = chains[0].beta.shape[1]
    series = {"kappa": np.concatenate([c.kappa for c in chains]),
              "sigma2": np.concatenate([c.sigma2 for c in chains]),
              "tau2": np.concatenate([c.tau2 for c in chains])}
    for l in range(p):
        series[f"w{l + 1}"] = np.concatenate([c.w[:, l] for c in chains])
    for j in range(q):
        series[f"beta{j + 1}"] = np.concatenate([c.beta[:, j] for c in chains])
    alpha = (1.0 - level) / 2.0
    rows = []
    for name, vals in series.items():
        lo, med, hi = np.quantile(vals, [alpha, 0.5, 1.0 - alpha])
        rows.append({"parameter": name, "mean": float(vals.mean()),
                     "median": float(med),
                     "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                     "ci_lower": float(lo), "ci_upper": float(hi)})
    return rows


_SUMMARY_COLUMNS = ["parameter", "mean", "median", "sd", "ci_lower",
                    "ci_upper"]


def write_summary(path, chains: list, level: float = 0.95) -> None:
    rows = hyper_summary(chains, level)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(_SUMMARY_COLUMNS)
        for row in rows:
            out.writerow([row["parameter"]]
                         + [_fmt(row[c]) for c in _SUMMARY_COLUMNS[1:]])


def write_prediction(path, summary) -> None:
    """A PredictiveSummary as a delimited table, one row per target."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["target", "mean", "median", "sd", "ci_lower",
                      "ci_upper"])
        for j, label in enumerate(summary.labels):
            out.writerow([label, _fmt(summary.mean[j]),
                          _fmt(summary.median[j]), _fmt(summary.sd[j]),
                          _fmt(summary.lower[j]), _fmt(summary.upper[j])])


def write_aadb(path, est) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["site", "period", "mean", "median", "sd", "ci_lower",
                      "ci_upper"])
        out.writerow([est.site, est.period, _fmt(est.mean), _fmt(est.median),
                      _fmt(est.sd), _fmt(est.lower), _fmt(est.upper)])


def write_diagnostics(path, diag) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["parameter", "rhat", "ess", "flagged"])
        for name in diag.rhat:
            out.writerow([name, _fmt(diag.rhat[name]), _fmt(diag.ess[name]),
                          "1" if name in diag.flagged else "0"])


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a command-line run needs beyond the data itself."""

    path: str = "sparse"
    nu: float = 1.0
    mesh_file: str | None = None       # None -> automatic mesh
    target_nodes: int = 150
    period: int = 7
    order: int = 1
    covariates: list[str] | None = None   # None -> all extra data columns
    priors: PriorConfig = field(default_factory=PriorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    output_dir: str = "results"

    def model_config(self, mesh: Mesh | None = None) -> ModelConfig:
        return ModelConfig(path=self.path, nu=self.nu, mesh=mesh,
                           target_nodes=self.target_nodes, priors=self.priors)


_CONFIG_SCHEMA = {
    "model": {"path": str, "nu": float, "mesh": str, "target_nodes": int,
              "period": int, "order": int, "covariates": str},
    "priors": {name: float for name in
               ("a_sigma2", "b_sigma2", "a_tau2", "b_tau2", "a_w", "b_w",
                "beta_var", "kappa_max", "m0", "c0")},
    "chain": {"iterations": int, "burn_in": int, "thinning": int,
              "n_chains": int, "seed": int, "step_lambda": float,
              "step_kappa": float, "adapt_window": int, "keep_lambda": bool,
              "workers": int},
    "output": {"directory": str},
}

# keys whose empty/absent value means "decide automatically"
_OPTIONAL_KEYS = {"mesh", "covariates", "kappa_max", "step_kappa",
                  "adapt_window"}


def load_run_config(path) -> RunConfig:
    """Parse an INI run configuration; unknown sections or keys are errors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read(path, encoding="utf-8")

    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _CONFIG_SCHEMA:
            raise ValueError(f"unknown config section [{section}]; expected "
                             f"one of {sorted(_CONFIG_SCHEMA)}")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            raw = raw.strip()
            if raw == "":
                if key in _OPTIONAL_KEYS:
                    continue
                raise ValueError(f"config key {key!r} in [{section}] is empty")
            typ = _CONFIG_SCHEMA[section][key]
            try:
                if typ is bool:
                    values[section][key] = cp.getboolean(section, key)
                else:
                    values[section][key] = typ(raw)
            except ValueError as err:
                raise ValueError(f"config key {key!r} in [{section}]: "
                                 f"{err}") from None

    model = values.get("model", {})
    cov_raw = model.pop("covariates", None)
    covariates = [c.strip() for c in cov_raw.split(",") if c.strip()] \
        if cov_raw else None
    mesh_file = model.pop("mesh", None)
    cfg = RunConfig(
        path=model.get("path", "sparse"), nu=model.get("nu", 1.0),
        mesh_file=mesh_file, target_nodes=model.get("target_nodes", 150),
        period=model.get("period", 7), order=model.get("order", 1),
        covariates=covariates,
        priors=PriorConfig(**values.get("priors", {})),
        chain=ChainConfig(**values.get("chain", {})),
        output_dir=values.get("output", {}).get("directory", "results"))
    if cfg.path not in ("sparse", "dense"):
        raise ValueError(f"model path must be 'sparse' or 'dense', "
                         f"got {cfg.path!r}")
    return cfg
