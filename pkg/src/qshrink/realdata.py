"""CSV ingestion, BIC sub-model selection and the random-split prediction
protocol for real data."""

from __future__ import annotations

import csv
import itertools
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, QShrinkError, SchemaError
from .penalized import PenaltySpec, fit_penalized, tune
from .qr_core import Dataset, check_loss, solve_check_loss, validate_tau
from .shrinkage import estimate
from .simlab import PENALTIES, ExperimentReport, _provenance, _se, least_squares, prediction_mad, run_replicates

MISSING = {"", "na", "nan", "null", "none", "."}
MAX_LEVELS = 20
INTERCEPT = "(Intercept)"


def _is_missing(s: str) -> bool:
    return s.strip().lower() in MISSING


def _to_float(s: str):
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def ingest_csv(
    path,
    response_column: str,
    drop_missing: bool = True,
    log_response: bool = False,
    add_intercept: bool = True,
    max_levels: int = MAX_LEVELS,
) -> Dataset:
    """Read a headed CSV into a ``Dataset``.

    Numeric columns are used as they are.  Text columns with at most
    ``max_levels`` levels are one-hot encoded with the first (sorted) level
    dropped; any other text column is a schema error.  With ``drop_missing``
    rows holding a missing value in any column are removed first.  The
    returned dataset has every column in the first block (``p1 = p``); use
    ``Dataset.from_partition`` to split it.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header")
    if response_column not in header:
        raise SchemaError(f"response column {response_column!r} not found; columns are {header}")
    bad_width = [i + 2 for i, r in enumerate(rows) if len(r) != len(header)]
    if bad_width:
        raise SchemaError(f"rows with the wrong number of fields at lines {bad_width[:10]}")
    if drop_missing:
        rows = [r for r in rows if not any(_is_missing(v) for v in r)]
    if not rows:
        raise SchemaError("dataset has no data rows")

    cols = {h: [r[j].strip() for r in rows] for j, h in enumerate(header)}
    yraw = [_to_float(v) for v in cols[response_column]]
    if any(v is None for v in yraw):
        raise SchemaError(f"response column {response_column!r} is not numeric (or has missing values)")
    y = np.array(yraw)
    if log_response:
        if np.any(y <= 0):
            raise SchemaError("log transform needs a strictly positive response")
        y = np.log(y)

    names, mats, offending = [], [], []
    for h in header:
        if h == response_column:
            continue
        vals = cols[h]
        num = [_to_float(v) for v in vals]
        if all(v is not None for v in num):
            names.append(h)
            mats.append(np.array(num)[:, None])
            continue
        if any(_is_missing(v) for v in vals):
            offending.append(f"{h} (missing values)")
            continue
        levels = sorted(set(vals))
        if len(levels) > max_levels:
            offending.append(f"{h} ({len(levels)} text levels)")
            continue
        for lev in levels[1:]:
            names.append(f"{h}{lev}")
            mats.append(np.array([v == lev for v in vals], dtype=float)[:, None])
    if offending:
        raise SchemaError("columns cannot be encoded: " + ", ".join(offending))
    X = np.hstack(mats) if mats else np.empty((len(rows), 0))
    if add_intercept:
        X = np.column_stack([np.ones(len(rows)), X])
        names = [INTERCEPT] + names
    if X.shape[1] == 0:
        raise SchemaError("no predictor columns")
    return Dataset(y, X, p1=X.shape[1], feature_names=names)


def export_csv(data: Dataset, path, response_column: str = "y") -> Path:
    """Write ``data`` as a headed CSV that ``ingest_csv`` reads back unchanged.

    The intercept column is left out (ingest adds it again); floats are
    written in shortest round-trip form.
    """
    names = list(data.feature_names) if data.feature_names is not None else [f"x{j}" for j in range(data.p)]
    keep = [j for j, nm in enumerate(names) if nm != INTERCEPT]
    header = [response_column] + [names[j] for j in keep]
    if len(set(header)) != len(header):
        raise SchemaError("response column name clashes with a feature name")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            w.writerow([repr(float(data.y[i]))] + [repr(float(data.X[i, j])) for j in keep])
    return path


def _bic_ls(X, y):
    n = y.size
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    rss = float(np.sum((y - X @ beta) ** 2))
    return n * math.log(max(rss, 1e-300) / n) + X.shape[1] * math.log(n)


def _bic_quantile(X, y, tau):
    n = y.size
    beta, _ = solve_check_loss(X, y, tau)
    loss = float(np.sum(check_loss(y - X @ beta, tau)))
    return math.log(max(loss, 1e-300) / n) + X.shape[1] * math.log(n) / (2.0 * n)


def _best_subset_ls(X, y, chosen, pool, max_size):
    """Exhaustive least-squares BIC search through the Gram matrix."""
    n = y.size
    G = X.T @ X
    c = X.T @ y
    yy = float(y @ y)
    best_score, best_set = math.inf, list(chosen)
    for k in range(0, min(max_size, len(pool)) + 1):
        for extra in itertools.combinations(pool, k):
            cols = list(chosen) + list(extra)
            if not cols:
                continue
            try:
                L = np.linalg.cholesky(G[np.ix_(cols, cols)])
            except np.linalg.LinAlgError:
                continue
            z = np.linalg.solve(L, c[cols])
            rss = max(yy - float(z @ z), 1e-300)
            score = n * math.log(rss / n) + len(cols) * math.log(n)
            if score < best_score:
                best_score, best_set = score, cols
    return best_set


def select_submodel_bic(
    data: Dataset,
    method: str = "forward_stepwise_ls",
    tau: float = 0.5,
    keep: Sequence[str] = (INTERCEPT,),
    max_size: Optional[int] = None,
) -> list:
    """Pick the sub-model columns by BIC; returns their names.

    ``method`` is one of

    * ``"forward_stepwise_ls"``: forward stepwise on the Gaussian
      least-squares BIC, keeping the best step;
    * ``"best_subset_ls"``: exhaustive search over subsets of at most
      ``max_size`` extra columns (default: all), same criterion;
    * ``"forward_stepwise_quantile"``: forward stepwise on the Schwarz
      criterion of the check loss at ``tau``.

    Columns named in ``keep`` (the intercept) are always included.
    """
    if data.n <= data.p:
        raise DomainError(f"BIC selection needs n > p, got n={data.n}, p={data.p}")
    names = list(data.feature_names) if data.feature_names is not None else [f"x{j}" for j in range(data.p)]
    if method == "best_subset_ls":
        chosen = [j for j, nm in enumerate(names) if nm in keep]
        pool = [j for j in range(data.p) if j not in chosen]
        size = len(pool) if max_size is None else int(max_size)
        return [names[j] for j in _best_subset_ls(data.X, data.y, chosen, pool, size)]
    if method == "forward_stepwise_ls":
        crit = lambda cols: _bic_ls(data.X[:, cols], data.y)  # noqa: E731
    elif method == "forward_stepwise_quantile":
        validate_tau(tau)
        crit = lambda cols: _bic_quantile(data.X[:, cols], data.y, tau)  # noqa: E731
    else:
        raise DomainError(f"unknown selection method {method!r}")
    chosen = [j for j, nm in enumerate(names) if nm in keep]
    pool = [j for j in range(data.p) if j not in chosen]
    if chosen:
        best_score, best_set = crit(chosen), list(chosen)
    else:
        best_score, best_set = math.inf, []
    while pool:
        scores = [(crit(chosen + [j]), j) for j in pool]
        score, j = min(scores)
        chosen.append(j)
        pool.remove(j)
        if score < best_score:
            best_score, best_set = score, list(chosen)
    return [names[j] for j in best_set]


def partition(data: Dataset, sub_columns: Sequence[str]) -> Dataset:
    """Reorder ``data`` so the named sub-model columns form the first block."""
    names = list(data.feature_names or [])
    missing = [c for c in sub_columns if c not in names]
    if missing:
        raise SchemaError(f"partition columns not in data: {missing}")
    idx = [names.index(c) for c in sub_columns]
    return Dataset.from_partition(data.y, data.X, idx, names)


APE_COLUMNS = ("tau", "estimator", "ape", "se", "splits")
APE_ESTIMATORS = ("FM", "SM", "PT", "PS", "Ridge", "Lasso", "ENET", "LSE")


def _split_indices(n, train_frac, seed, k):
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))
    perm = rng.permutation(n)
    m = int(round(train_frac * n))
    return np.sort(perm[:m]), np.sort(perm[m:])


def _ape_split(job):
    data, tau_list, alpha, train_frac, seed, k, estimators = job
    if train_frac >= 1.0:
        tr = te = np.arange(data.n)
    else:
        tr, te = _split_indices(data.n, train_frac, seed, k)
    train, test = data.subset(tr), data.subset(te)
    out = {}
    if "LSE" in estimators:
        out["LSE"] = prediction_mad(test.y, test.X, least_squares(train))
    pens = [e for e in estimators if e in PENALTIES]
    if pens:
        # penalized fits are tuned on an inner half of the training rows and
        # refitted on all of them at the chosen lambda
        itr, iva = _split_indices(train.n, 0.5, seed + 1, k)
        inner_tr, inner_va = train.subset(itr), train.subset(iva)
    for tau in tau_list:
        try:
            res = estimate(train, tau, alpha)
        except QShrinkError:
            res = None
        for name in ("FM", "SM", "PT", "PS"):
            if name in estimators and res is not None and name in res.full_coef:
                out[(tau, name)] = prediction_mad(test.y, test.X, res.full_coef[name])
        for name in pens:
            spec = PenaltySpec(alpha=PENALTIES[name], standardize=True)
            try:
                tr_ = tune(inner_tr, inner_va, tau, spec)
                beta = fit_penalized(train, tau, spec, tr_.lam)
            except QShrinkError:
                continue
            out[(tau, name)] = prediction_mad(test.y, test.X, beta)
    return out


def ape_protocol(
    data: Dataset,
    sub_columns: Optional[Sequence[str]],
    tau_list: Sequence[float],
    splits: int = 999,
    seed: int = 2024,
    train_frac: float = 0.5,
    alpha: float = 0.05,
    estimators: Sequence[str] = APE_ESTIMATORS,
    workers: Optional[int] = None,
) -> ExperimentReport:
    """Average prediction error over random train/test splits.

    ``train_frac=1.0`` uses every row for both fitting and scoring (the
    degenerate one-split check).  ``sub_columns=None`` keeps the partition
    already present in ``data``.
    """
    if splits < 1:
        raise DomainError("splits must be >= 1")
    if not 0.0 < train_frac <= 1.0:
        raise DomainError("train_frac must lie in (0, 1]")
    unknown = set(estimators) - set(APE_ESTIMATORS)
    if unknown:
        raise DomainError(f"unknown estimators {sorted(unknown)}")
    tau_list = [validate_tau(t) for t in tau_list]
    if sub_columns is not None:
        data = partition(data, sub_columns)
    jobs = [(data, tau_list, alpha, train_frac, seed, k, tuple(estimators)) for k in range(splits)]
    out = run_replicates(_ape_split, jobs, workers)
    rows = []
    for tau in tau_list:
        for name in estimators:
            if name == "LSE":
                continue
            vals = np.array([o[(tau, name)] for o in out if (tau, name) in o])
            if vals.size:
                rows.append({"tau": tau, "estimator": name, "ape": float(vals.mean()), "se": _se(vals), "splits": int(vals.size)})
    if "LSE" in estimators:
        vals = np.array([o["LSE"] for o in out])
        rows.append({"tau": None, "estimator": "LSE", "ape": float(vals.mean()), "se": _se(vals), "splits": int(vals.size)})
    meta = {
        "experiment": "ape",
        "splits": splits,
        "seed": seed,
        "train_frac": train_frac,
        "alpha": alpha,
        "sub_columns": list(data.feature_names[: data.p1]) if data.feature_names else list(range(data.p1)),
        "penalized_tuning": "inner 50/50 split of the training rows, refit at the chosen lambda",
        "provenance": _provenance(),
    }
    return ExperimentReport(APE_COLUMNS, rows, meta)
