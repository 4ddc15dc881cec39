"""Command-line front end: ``qshrink fit|curves|simulate|ape``.

Settings come from an optional TOML file (flat keys named like the long
options, with underscores) and from the command line, which wins.  Every
report embeds the resolved settings.  Exit status is 0 on success, 2 for
invalid input and 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .asymptotics import CURVE_COLUMNS, AsymptoticInputs, curves
from .errors import ConvergenceError, QShrinkError, SchemaError, SingularBlockError, SingularDesignError
from .penalized import PenaltySpec, fit_penalized, tune
from .qr_core import Dataset, GammaBlocks, fit_full, gamma_blocks, validate_tau
from .realdata import APE_ESTIMATORS, _split_indices, ape_protocol, ingest_csv, partition, select_submodel_bic
from .reporting import FORMATS, SUFFIX, emit_report, render
from .shrinkage import estimate
from .simlab import PENALTIES, ExperimentReport, mrme_config, mrme_sweep, pmad_experiment, pmad_config, toeplitz_factor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMMANDS = ("fit", "curves", "simulate", "ape")
FIT_COLUMNS = ("tau", "estimator", "term", "coef")
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    """Resolved settings for one command."""

    command: str
    data: Optional[str] = None
    response: Optional[str] = None
    log_response: bool = False
    drop_missing: bool = True
    partition: Optional[object] = None  # "bic" or a list of column names
    bic_method: str = "forward_stepwise_ls"
    bic_max_size: Optional[int] = None
    tau: list = field(default_factory=lambda: [0.5])
    alpha: float = 0.05
    penalties: list = field(default_factory=list)
    valid_frac: float = 0.5
    seed: int = 20240501
    replications: Optional[int] = None
    splits: int = 999
    train_frac: float = 0.5
    estimators: list = field(default_factory=lambda: list(APE_ESTIMATORS))
    experiment: str = "mrme"
    case: int = 1
    gamma: float = 0.1
    pmad_target: str = "observed"
    delta_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0])
    formula: str = "derived"
    p1: Optional[int] = None
    p2: Optional[int] = None
    rho: float = 0.5
    density: float = 1.0
    out: Optional[str] = None
    format: list = field(default_factory=lambda: list(FORMATS))

    def validate(self):
        if self.command not in COMMANDS:
            raise SchemaError(f"unknown command {self.command!r}")
        for t in self.tau:
            validate_tau(t)
            if not 0.01 <= t <= 0.99:
                raise SchemaError(f"tau must lie in [0.01, 0.99], got {t}")
        if not 0.0 < self.alpha < 1.0:
            raise SchemaError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.command in ("fit", "ape") or (self.command == "curves" and self.data):
            if not self.data or not Path(self.data).is_file():
                raise SchemaError(f"data file not found: {self.data!r}")
            if not self.response:
                raise SchemaError("a response column is required")
        bad = [p for p in self.penalties if p not in PENALTIES]
        if bad:
            raise SchemaError(f"unknown penalties {bad}; choose from {sorted(PENALTIES)}")
        bad = [f for f in self.format if f not in FORMATS]
        if bad:
            raise SchemaError(f"unknown formats {bad}; choose from {list(FORMATS)}")
        if self.experiment not in ("mrme", "pmad"):
            raise SchemaError(f"unknown experiment {self.experiment!r}")
        return self


def _floats(s):
    return [float(x) for x in str(s).split(",") if x.strip()]


def _names(s):
    return [x.strip() for x in str(s).split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qshrink", description="Pretest and shrinkage quantile regression.")
    ap.add_argument("--version", action="version", version=f"qshrink {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file with default settings")
        p.add_argument("--tau", type=_floats, help="comma separated quantile levels")
        p.add_argument("--alpha", type=float, help="pretest level")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: print a table)")
        p.add_argument("--format", type=_names, help="comma separated subset of csv,table,json")
        if name in ("fit", "curves", "ape"):
            p.add_argument("--data", help="CSV file with a header row")
            p.add_argument("--response", help="response column")
            p.add_argument("--log-response", action="store_true", default=None)
            p.add_argument("--keep-missing", dest="drop_missing", action="store_false", default=None)
            p.add_argument("--partition", help='"bic" or comma separated sub-model columns')
            p.add_argument("--bic-method", choices=("forward_stepwise_ls", "best_subset_ls", "forward_stepwise_quantile"))
            p.add_argument("--bic-max-size", type=int)
        if name in ("fit",):
            p.add_argument("--penalties", type=_names, help="comma separated subset of Ridge,Lasso,ENET")
            p.add_argument("--valid-frac", type=float)
        if name == "ape":
            p.add_argument("--splits", type=int)
            p.add_argument("--train-frac", type=float)
            p.add_argument("--estimators", type=_names)
        if name == "simulate":
            p.add_argument("--experiment", choices=("mrme", "pmad"))
            p.add_argument("--case", type=int, choices=(1, 2))
            p.add_argument("--gamma", type=float)
            p.add_argument("--replications", type=int)
            p.add_argument("--pmad-target", choices=("observed", "signal"))
        if name in ("simulate", "curves"):
            p.add_argument("--delta-grid", type=_floats)
        if name == "curves":
            p.add_argument("--formula", choices=("derived", "printed"))
            p.add_argument("--p1", type=int)
            p.add_argument("--p2", type=int)
            p.add_argument("--rho", type=float)
            p.add_argument("--density", type=float, help="error density at the quantile (design-only mode)")
    return ap


def resolve(argv=None) -> RunConfig:
    """Merge the TOML file and the command line into a validated ``RunConfig``."""
    args = vars(build_parser().parse_args(argv))
    names = {f.name for f in fields(RunConfig)}
    values = {"command": args.pop("command")}
    cfg_path = args.pop("config", None)
    if cfg_path:
        try:
            with open(cfg_path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"cannot parse {cfg_path}: {exc}") from None
        unknown = set(doc) - names
        if unknown:
            raise SchemaError(f"unknown config keys {sorted(unknown)}")
        doc.pop("command", None)
        values.update(doc)
    values.update({k: v for k, v in args.items() if v is not None})
    for key in ("tau", "delta_grid"):
        if isinstance(values.get(key), (int, float)):
            values[key] = [float(values[key])]
    for key in ("penalties", "estimators", "format"):
        if isinstance(values.get(key), str):
            values[key] = _names(values[key])
    part = values.get("partition")
    if isinstance(part, str) and part != "bic":
        values["partition"] = _names(part)
    return RunConfig(**values).validate()


def _load(cfg: RunConfig):
    data = ingest_csv(cfg.data, cfg.response, drop_missing=cfg.drop_missing, log_response=cfg.log_response)
    if cfg.partition is None:
        raise SchemaError('a partition is required: "bic" or a list of sub-model columns')
    if cfg.partition == "bic":
        cols = select_submodel_bic(data, cfg.bic_method, tau=cfg.tau[0], max_size=cfg.bic_max_size)
    else:
        cols = list(cfg.partition)
    return partition(data, cols), cols


def _drop_zero_columns(data: Dataset):
    """Remove identically zero columns; they carry no information about beta."""
    zero = np.all(data.X == 0, axis=0)
    if not zero.any():
        return data, []
    if zero[: data.p1].all():
        raise SchemaError("every sub-model column is identically zero")
    keep = np.flatnonzero(~zero)
    names = list(data.feature_names)
    reduced = Dataset(data.y, data.X[:, keep], int(np.sum(~zero[: data.p1])), [names[j] for j in keep])
    return reduced, [names[j] for j in np.flatnonzero(zero)]


def run_fit(cfg: RunConfig) -> ExperimentReport:
    full, cols = _load(cfg)
    data, dropped = _drop_zero_columns(full)
    names = full.feature_names
    pos = {nm: j for j, nm in enumerate(data.feature_names)}

    def emit(tau, est, coef):
        # dropped columns are reported with coefficient zero
        for nm in names:
            c = float(coef[pos[nm]]) if nm in pos else 0.0
            rows.append({"tau": tau, "estimator": est, "term": nm, "coef": c})

    rows, tests = [], {}
    for tau in cfg.tau:
        if data.p2 == 0:
            beta = fit_full(data, tau).beta
            tests[str(tau)] = {"wald": None, "critical_value": None, "shrink_factor": None}
            emit(tau, "FM", beta)
            emit(tau, "SM", beta)
        else:
            res = estimate(data, tau, cfg.alpha)
            tests[str(tau)] = {"wald": res.wald, "critical_value": res.critical_value, "shrink_factor": res.shrink_factor}
            for est, coef in res.full_coef.items():
                emit(tau, est, coef)
        if cfg.penalties:
            tr, va = _split_indices(data.n, 1.0 - cfg.valid_frac, cfg.seed, 0)
            for est in cfg.penalties:
                spec = PenaltySpec(alpha=PENALTIES[est], standardize=True)
                lam = tune(data.subset(tr), data.subset(va), tau, spec).lam
                emit(tau, est, fit_penalized(data, tau, spec, lam))
                tests[str(tau)][f"lambda_{est}"] = lam
    meta = {"experiment": "fit", "n": data.n, "sub_columns": cols, "dropped_zero_columns": dropped, "tests": tests}
    return ExperimentReport(FIT_COLUMNS, rows, meta)


def run_curves(cfg: RunConfig) -> ExperimentReport:
    rows, meta = [], {"experiment": "curves", "formula": cfg.formula}
    if cfg.data:
        data, meta["sub_columns"] = _load(cfg)
    elif not cfg.p1 or not cfg.p2:
        raise SchemaError("curves needs either --data with a partition or --p1/--p2")
    for tau in cfg.tau:
        if cfg.data:
            blocks = gamma_blocks(fit_full(data, tau))
        else:
            # i.i.d. errors: D1 = f * D0, so Gamma = f^2 * Sigma
            L = toeplitz_factor(cfg.p1 + cfg.p2, cfg.rho)
            blocks = GammaBlocks.from_matrix(cfg.density**2 * (L @ L.T), cfg.p1)
        inputs = AsymptoticInputs(blocks, tau, alpha=cfg.alpha)
        for r in curves(inputs, cfg.delta_grid, formula=cfg.formula):
            rows.append({"tau": tau, **r})
    return ExperimentReport(("tau",) + CURVE_COLUMNS, rows, meta)


def run_simulate(cfg: RunConfig) -> ExperimentReport:
    over = {"seed": cfg.seed, "alpha": cfg.alpha}
    if cfg.replications is not None:
        over["replications"] = cfg.replications
    if cfg.experiment == "mrme":
        config = mrme_config(tau_list=tuple(cfg.tau), **over)
        return mrme_sweep(config, cfg.delta_grid)
    config = pmad_config(cfg.case, cfg.gamma, tau_list=tuple(cfg.tau), pmad_target=cfg.pmad_target, **over)
    return pmad_experiment(config)


def run_ape(cfg: RunConfig) -> ExperimentReport:
    data, cols = _load(cfg)
    return ape_protocol(
        data, None, cfg.tau, splits=cfg.splits, seed=cfg.seed, train_frac=cfg.train_frac, alpha=cfg.alpha, estimators=cfg.estimators
    )


RUNNERS = {"fit": run_fit, "curves": run_curves, "simulate": run_simulate, "ape": run_ape}


def run(cfg: RunConfig) -> ExperimentReport:
    report = RUNNERS[cfg.command](cfg)
    report.metadata["run_config"] = asdict(cfg)
    report.metadata["version"] = __version__
    return ExperimentReport(report.columns, report.rows, report.metadata)


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
        report = run(cfg)
        if cfg.out:
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            for fmt in cfg.format:
                emit_report(report, fmt, out / f"{cfg.command}{SUFFIX[fmt]}")
        else:
            sys.stdout.write(render(report, "table"))
    except SystemExit as exc:  # argparse
        return int(exc.code or 0)
    except (ConvergenceError, SingularDesignError, SingularBlockError, np.linalg.LinAlgError) as exc:
        print(f"qshrink: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QShrinkError, ValueError, TypeError, OSError) as exc:
        print(f"qshrink: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
