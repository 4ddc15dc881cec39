"""Monte Carlo experiments: correlated Gaussian designs, contaminated errors,
model-error sweeps over the distance from the sub-model, and the
train/validation/test prediction protocol.

Every replicate draws from its own generator keyed by ``(seed, replicate)``,
so serial and parallel runs agree bit for bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import DomainError, QShrinkError
from .penalized import PenaltySpec, tune
from .qr_core import Dataset
from .shrinkage import estimate

ESTIMATORS_ME = ("FM", "SM", "PT", "S", "PS")
ESTIMATORS_PMAD = ("FM", "SM", "PT", "PS", "Ridge", "Lasso", "ENET", "LSE")
PENALTIES = {"Ridge": 0.0, "Lasso": 1.0, "ENET": 0.5}
CASES = {"cauchy_mixture": 1, "contaminated_normal": 2}


@dataclass(frozen=True)
class ErrorModel:
    """``(1 - gamma) N(0, 1) + gamma G`` with G standard Cauchy or N(0, sigma2)."""

    kind: str = "contaminated_normal"
    gamma: float = 0.5
    sigma2: float = 100.0

    def __post_init__(self):
        if self.kind not in CASES:
            raise DomainError(f"unknown error model {self.kind!r}; expected one of {tuple(CASES)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be positive")

    @property
    def case(self) -> int:
        return CASES[self.kind]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        base = rng.standard_normal(n)
        out = rng.random(n) < self.gamma
        if self.kind == "cauchy_mixture":
            alt = rng.standard_cauchy(n)
        else:
            alt = np.sqrt(self.sigma2) * rng.standard_normal(n)
        return np.where(out, alt, base)


@dataclass
class SimulationConfig:
    """Design, truth and protocol for one experiment.

    ``sub_columns`` (0-based, default the first ``p1``) are the columns kept by
    the sub-model.  ``variance_schedule=(lo, hi)`` multiplies the errors by
    standard deviations whose variances ramp linearly from ``lo`` to ``hi``
    across observation indices: a genuinely non-identically distributed
    extension of the exchangeable mixtures.
    """

    p1: int
    p2: int
    beta_true: Sequence[float]
    n_train: int = 60
    n_valid: int = 0
    n_test: int = 0
    rho: float = 0.5
    error: ErrorModel = field(default_factory=ErrorModel)
    tau_list: Sequence[float] = (0.5,)
    alpha: float = 0.05
    replications: int = 1000
    seed: int = 20240501
    sub_columns: Optional[Sequence[int]] = None
    intercept: bool = False
    standardize: bool = False
    pmad_target: str = "observed"
    variance_schedule: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"correlation rho must lie in (-1, 1), got {self.rho}")
        if self.replications < 1:
            raise DomainError("replications must be >= 1")
        if self.p1 < 1 or self.p2 < 0:
            raise DomainError("need p1 >= 1 and p2 >= 0")
        beta = tuple(float(b) for b in self.beta_true)
        if len(beta) != self.p1 + self.p2:
            raise DomainError(f"beta_true has length {len(beta)}, expected p1 + p2 = {self.p1 + self.p2}")
        self.beta_true = beta
        if self.sub_columns is None:
            self.sub_columns = tuple(range(self.p1))
        self.sub_columns = tuple(int(c) for c in self.sub_columns)
        if len(self.sub_columns) != self.p1 or len(set(self.sub_columns)) != self.p1:
            raise DomainError("sub_columns must list p1 distinct columns")
        if min(self.sub_columns) < 0 or max(self.sub_columns) >= len(beta):
            raise DomainError("sub_columns out of range")
        if self.n_train < 1 or self.n_valid < 0 or self.n_test < 0:
            raise DomainError("split sizes must be nonnegative and n_train >= 1")
        if self.pmad_target not in ("observed", "signal"):
            raise DomainError("pmad_target must be 'observed' or 'signal'")
        self.tau_list = tuple(float(t) for t in self.tau_list)
        if self.variance_schedule is not None:
            lo, hi = (float(v) for v in self.variance_schedule)
            if lo <= 0 or hi <= 0:
                raise DomainError("variance schedule must be positive")
            self.variance_schedule = (lo, hi)

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    def with_beta(self, beta) -> "SimulationConfig":
        d = asdict(self)
        d["beta_true"] = tuple(beta)
        d["error"] = self.error
        return SimulationConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    """Train/validation/test datasets plus the noise-free test signal."""

    train: Dataset
    valid: Optional[Dataset]
    test: Optional[Dataset]
    test_signal: Optional[np.ndarray]


@dataclass
class ExperimentReport:
    """Rows of aggregated metrics plus the resolved configuration."""

    columns: tuple
    rows: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = [plain(r) for r in self.rows]
        self.metadata = plain(self.metadata)
        for r in self.rows:
            if set(r) != set(self.columns):
                raise DomainError(f"row keys {sorted(r)} do not match columns {self.columns}")
            if "se" in r and r["se"] is not None and not (r["se"] >= 0 or np.isnan(r["se"])):
                raise DomainError("standard errors must be >= 0")

    def lookup(self, **keys) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in keys.items())]

    def value(self, column: str, **keys):
        hits = self.lookup(**keys)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {keys}")
        return hits[0][column]

    def __eq__(self, other):
        return (
            isinstance(other, ExperimentReport)
            and self.columns == other.columns
            and _same(self.metadata, other.metadata)
            and _same(self.rows, other.rows)
        )


def plain(obj):
    """Recursively turn numpy scalars/arrays and tuples into plain Python values."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _same(a, b) -> bool:
    """Structural equality that treats NaN as equal to NaN."""
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
        return True
    return a == b


def _provenance() -> str:
    return f"qshrink {__version__}"


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent generator for one replicate."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(replicate),)))


def toeplitz_factor(p: int, rho: float) -> np.ndarray:
    """Cholesky factor of the matrix with entries rho^|j-k|."""
    if not -1.0 < rho < 1.0:
        raise DomainError(f"correlation rho must lie in (-1, 1), got {rho}")
    idx = np.arange(p)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def _standardize(X, ref):
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd


def generate(config: SimulationConfig, replicate: int):
    """Draw one replicate.

    Returns a ``Dataset`` when there are no validation/test rows, otherwise a
    ``Split``.  Columns are reordered so the sub-model block comes first; an
    intercept (if requested) is prepended to that block.  With
    ``standardize=True`` every split is centred and scaled by the training
    moments.
    """
    rng = replicate_rng(config.seed, replicate)
    n = config.n_train + config.n_valid + config.n_test
    p = config.p
    L = toeplitz_factor(p, config.rho)
    X = rng.standard_normal((n, p)) @ L.T
    eps = config.error.sample(rng, n)
    if config.variance_schedule is not None:
        lo, hi = config.variance_schedule
        eps = eps * np.sqrt(np.linspace(lo, hi, n))
    signal = X @ np.asarray(config.beta_true)
    y = signal + eps
    if config.standardize:
        X = _standardize(X, X[: config.n_train])
    sub = list(config.sub_columns)
    rest = [j for j in range(p) if j not in sub]
    X = X[:, sub + rest]
    p1 = config.p1
    if config.intercept:
        X = np.column_stack([np.ones(n), X])
        p1 += 1
    cut = np.cumsum([config.n_train, config.n_valid])
    parts = [slice(0, cut[0]), slice(cut[0], cut[1]), slice(cut[1], n)]
    train = Dataset(y[parts[0]], X[parts[0]], p1)
    if config.n_valid == 0 and config.n_test == 0:
        return train
    valid = Dataset(y[parts[1]], X[parts[1]], p1) if config.n_valid >= X.shape[1] else None
    test = Dataset(y[parts[2]], X[parts[2]], p1) if config.n_test >= X.shape[1] else None
    return Split(train=train, valid=valid, test=test, test_signal=signal[parts[2]])


def model_error(beta_hat, beta_true) -> float:
    """(b - beta)'(b - beta)."""
    b = np.asarray(beta_hat, dtype=float)
    t = np.asarray(beta_true, dtype=float)
    if b.shape != t.shape:
        raise DomainError(f"length mismatch: {b.shape} vs {t.shape}")
    d = b - t
    return float(d @ d)


def _reordered_truth(config: SimulationConfig) -> np.ndarray:
    sub = list(config.sub_columns)
    rest = [j for j in range(config.p) if j not in sub]
    b = np.asarray(config.beta_true)[sub + rest]
    return np.concatenate([[0.0], b]) if config.intercept else b


def _workers() -> int:
    env = os.environ.get("QSHRINK_THREADS")
    try:
        cap = int(env) if env else 1
    except ValueError:
        raise DomainError(f"QSHRINK_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, os.cpu_count() or 1))


def run_replicates(fn, args: list, workers: Optional[int] = None) -> list:
    """Map ``fn`` over ``args`` in order; processes are used when workers > 1."""
    workers = _workers() if workers is None else workers
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, args, chunksize=max(1, len(args) // (4 * workers))))


# ------------------------------------------------------------ ME sweeps ---


def _me_replicate(job):
    config, tau, replicate = job
    data = generate(config, replicate)
    if isinstance(data, Split):
        data = data.train
    truth = _reordered_truth(config)
    try:
        res = estimate(data, tau, config.alpha)
    except QShrinkError:
        return None
    return {name: model_error(res.full_coef[name], truth) for name in ESTIMATORS_ME if name in res.full_coef}


def _se(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")


MRME_COLUMNS = ("delta_star", "tau", "estimator", "mrme", "median_me", "mean_me", "se_me", "replications", "degenerate")


def mrme_sweep(config: SimulationConfig, delta_star_grid, workers: Optional[int] = None) -> ExperimentReport:
    """Median relative model error against FM along beta = beta0 + Delta* e.

    The perturbation is placed on the first coordinate of the beta_2 block.
    The same replicate streams are reused at every grid point.
    """
    grid = [float(d) for d in delta_star_grid]
    if not grid or any(d < 0 for d in grid):
        raise DomainError("delta* grid must be non-empty and nonnegative")
    if config.p2 < 1:
        raise DomainError("mrme_sweep needs p2 >= 1")
    rest = [j for j in range(config.p) if j not in config.sub_columns]
    base = np.asarray(config.beta_true)
    rows, paired = [], {}
    for d in grid:
        beta = base.copy()
        beta[rest[0]] += d
        cfg = config.with_beta(beta)
        for tau in config.tau_list:
            jobs = [(cfg, tau, r) for r in range(config.replications)]
            out = [o for o in run_replicates(_me_replicate, jobs, workers) if o is not None]
            if not out:
                raise QShrinkError("every replicate failed")
            me = {k: np.array([o[k] for o in out]) for k in out[0]}
            med_fm = float(np.median(me["FM"]))
            for name, vals in me.items():
                med = float(np.median(vals))
                degenerate = med == 0.0
                rows.append(
                    {
                        "delta_star": d,
                        "tau": tau,
                        "estimator": name,
                        "mrme": float("nan") if degenerate else med_fm / med,
                        "median_me": med,
                        "mean_me": float(vals.mean()),
                        "se_me": _se(vals),
                        "replications": int(vals.size),
                        "degenerate": bool(degenerate),
                    }
                )
            if "S" in me:
                paired[(d, tau)] = me["PS"] - me["S"]
    meta = {
        "experiment": "mrme_sweep",
        "config": _config_echo(config),
        "delta_star_grid": grid,
        "seed": config.seed,
        "provenance": _provenance(),
        "perturbation": "first beta_2 coordinate",
        "paired_ps_minus_s": {f"{d}|{t}": [float(np.mean(v)), _se(v)] for (d, t), v in paired.items()},
    }
    return ExperimentReport(MRME_COLUMNS, rows, meta)


def _config_echo(config: SimulationConfig) -> dict:
    d = config.to_dict()
    d["beta_true"] = list(d["beta_true"])
    d["tau_list"] = list(d["tau_list"])
    d["sub_columns"] = list(d["sub_columns"])
    if d["variance_schedule"] is not None:
        d["variance_schedule"] = list(d["variance_schedule"])
    return d


# ------------------------------------------------------ PMAD protocol ---


def prediction_mad(y_or_signal, X, beta) -> float:
    return float(np.mean(np.abs(np.asarray(y_or_signal) - X @ np.asarray(beta))))


def least_squares(data: Dataset) -> np.ndarray:
    return np.linalg.lstsq(data.X, data.y, rcond=None)[0]


def _pmad_replicate(job):
    config, replicate = job
    split = generate(config, replicate)
    if not isinstance(split, Split) or split.test is None:
        raise DomainError("the prediction protocol needs a test set with n_test >= p")
    if split.valid is None:
        raise DomainError("the prediction protocol needs a validation set with n_valid >= p")
    target = split.test.y if config.pmad_target == "observed" else split.test_signal
    Xt = split.test.X
    out = {"LSE": prediction_mad(target, Xt, least_squares(split.train)), "failed": []}
    for tau in config.tau_list:
        try:
            res = estimate(split.train, tau, config.alpha)
        except QShrinkError:
            res = None
            out["failed"].extend((tau, name) for name in ("FM", "SM", "PT", "PS"))
        for name in ("FM", "SM", "PT", "PS"):
            coef = None if res is None else res.full_coef.get(name)
            if coef is not None:
                out[(tau, name)] = prediction_mad(target, Xt, coef)
        for name, a in PENALTIES.items():
            try:
                tr = tune(split.train, split.valid, tau, PenaltySpec(alpha=a, standardize=True))
            except QShrinkError:
                out["failed"].append((tau, name))
                continue
            out[(tau, name)] = prediction_mad(target, Xt, tr.beta)
    return out


PMAD_COLUMNS = ("tau", "estimator", "case", "gamma", "mean", "se")


def pmad_experiment(config: SimulationConfig, workers: Optional[int] = None) -> ExperimentReport:
    """Mean prediction MAD (and its standard error) per (tau, estimator).

    Estimators are fitted on the training split, the penalized ones are tuned
    on the validation split, and all are scored on the test split.  LSE does
    not depend on tau and is reported once with ``tau = None``.
    """
    jobs = [(config, r) for r in range(config.replications)]
    out = run_replicates(_pmad_replicate, jobs, workers)
    case, gamma = config.error.case, config.error.gamma
    rows, counts = [], {}
    for tau in config.tau_list:
        for name in ESTIMATORS_PMAD[:-1]:
            vals = np.array([o[(tau, name)] for o in out if (tau, name) in o])
            if vals.size:
                rows.append({"tau": tau, "estimator": name, "case": case, "gamma": gamma, "mean": float(vals.mean()), "se": _se(vals)})
                counts[f"{tau}|{name}"] = int(vals.size)
    lse = np.array([o["LSE"] for o in out])
    rows.append({"tau": None, "estimator": "LSE", "case": case, "gamma": gamma, "mean": float(lse.mean()), "se": _se(lse)})
    counts["LSE"] = int(lse.size)
    failures = {}
    for o in out:
        for tau, name in o["failed"]:
            failures[f"{tau}|{name}"] = failures.get(f"{tau}|{name}", 0) + 1
    meta = {
        "experiment": "pmad",
        "config": _config_echo(config),
        "seed": config.seed,
        "provenance": _provenance(),
        "penalties": {k: {"alpha": a, "intercept_penalized": False} for k, a in PENALTIES.items()},
        "tuning": "mean validation check loss",
        "pmad_target": config.pmad_target,
        "replications": counts,
        "failures": failures,
    }
    return ExperimentReport(PMAD_COLUMNS, rows, meta)


def pmad_config(case: int, gamma: float, **overrides) -> SimulationConfig:
    """Configuration of the 50/50/200 prediction study."""
    kind = "cauchy_mixture" if case == 1 else "contaminated_normal"
    kw = dict(
        p1=3,
        p2=5,
        beta_true=(3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0),
        sub_columns=(0, 1, 4),
        n_train=50,
        n_valid=50,
        n_test=200,
        rho=0.5,
        error=ErrorModel(kind, gamma),
        tau_list=(0.25, 0.5, 0.75),
        replications=500,
        standardize=True,
    )
    kw.update(overrides)
    return SimulationConfig(**kw)


def mrme_config(**overrides) -> SimulationConfig:
    """Configuration of the model-error sweep: n=60, p1=p2=5, 0.5N(0,1)+0.5N(0,100)."""
    kw = dict(
        p1=5,
        p2=5,
        beta_true=(1.0,) * 5 + (0.0,) * 5,
        n_train=60,
        rho=0.5,
        error=ErrorModel("contaminated_normal", 0.5, 100.0),
        tau_list=(0.5,),
        replications=1000,
    )
    kw.update(overrides)
    return SimulationConfig(**kw)
