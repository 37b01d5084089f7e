"""Command-line front end.

Subcommands ``fit-outcome``, ``fit-mediation``, ``me-variance``, ``f-test``
and ``simulate`` write a JSON document holding the tool version, the fully
resolved configuration and the result. Settings come from built-in
defaults, then ``--config`` (JSON or TOML), then explicit flags.

Exit codes: 0 on success, 1 for bad input or configuration, 2 when an
estimator fails numerically. Errors are printed to stderr as one JSON
object naming the failing stage.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from civmed import __version__
from civmed.constructed_iv import (
    NuisanceConfig,
    ate_contrast,
    first_stage_f_test,
    fit_constructed_iv,
)
from civmed.data import RoleMap, load_dataset, transform_column
from civmed.errors import CivmedError, PreconditionError
from civmed.me_variance import estimate_me_variance
from civmed.mediation import (
    MediationModel,
    MediatorModelSpec,
    PipelineConfig,
    PipelineSpec,
    fit_mediator,
    run_pipelines,
)
from civmed.report import dumps
from civmed.simulation import MonteCarloGrid, render_report, run_monte_carlo
from civmed.terms import parse_terms

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMMANDS = ("fit-outcome", "fit-mediation", "me-variance", "f-test", "simulate")

COMMON_DEFAULTS = {"out": None, "format": "json", "threads": 1, "config": None}
DATA_DEFAULTS = {"data": None, "delimiter": ",", "na_policy": "strict", "transform": []}
OUTCOME_DEFAULTS = {
    "outcome": None, "error_prone": None, "clean": [], "exposure": None, "moderator": None,
    "layout": None, "builder": "efficient_star", "s_terms": None,
    "nuisance": "parametric_basis", "basis_degree": 3, "folds": 5, "seed": None,
    "weighted": False, "estimate_mu": False, "weak_threshold": 10.0,
}
DEFAULTS = {
    "fit-outcome": {**COMMON_DEFAULTS, **DATA_DEFAULTS, **OUTCOME_DEFAULTS, "contrast": None},
    "me-variance": {**COMMON_DEFAULTS, **DATA_DEFAULTS, **OUTCOME_DEFAULTS,
                    "source": "outcome", "T": "g2", "joint": False, "bounds": None},
    "fit-mediation": {
        **COMMON_DEFAULTS, **DATA_DEFAULTS,
        "outcome": None, "exposure": None, "mediator": None, "clean": [],
        "moderator": None, "levels": None, "pipeline": ["IVZ_IVY"],
        "outcome_terms": None, "interaction": False, "b_terms": None, "h1_terms": None,
        "h2_terms": None, "contrast": [1.0, 0.0], "inference": "bootstrap", "B": 500,
        "seed": None, "level": 0.95, "mediator_mode": "simplified",
        "allow_negative_sigma2": False, "nuisance": "parametric_basis", "basis_degree": 3,
        "folds": 5, "weak_threshold": 10.0, "draws_csv": None,
    },
    "f-test": {**COMMON_DEFAULTS, **DATA_DEFAULTS, "response": None, "small": None,
               "large": None, "threshold": 10.0},
    "simulate": {**COMMON_DEFAULTS, "grid": "default", "R": 500, "seed": None,
                 "inference": "sandwich", "B": 200, "level": 0.95, "markdown": None,
                 "pipeline": None},
}
# Destinations and worker counts do not change results; keeping them out of
# the embedded config makes reruns byte-identical.
NOT_EMBEDDED = ("out", "markdown", "draws_csv", "threads")
REQUIRED = {
    "fit-outcome": ("data", "outcome", "error_prone"),
    "me-variance": ("data", "outcome", "error_prone"),
    "fit-mediation": ("data", "outcome", "exposure", "mediator"),
    "f-test": ("data", "small", "large"),
    "simulate": ("seed",),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_common(p):
    p.add_argument("--config", help="JSON or TOML file with default settings")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--threads", type=int, help="worker cap for resampling")


def _add_data(p):
    p.add_argument("--data", help="input CSV file")
    p.add_argument("--delimiter")
    p.add_argument("--na-policy", dest="na_policy", choices=("strict", "drop"))
    p.add_argument("--transform", action="append",
                   help="COLUMN:KIND with KIND in center, log, log_center (repeatable)")


def _add_outcome(p):
    p.add_argument("--outcome", help="response column Y")
    p.add_argument("--error-prone", dest="error_prone", type=_csv_list,
                   help="error-prone column(s) C1*")
    p.add_argument("--clean", type=_csv_list, help="clean covariates C2")
    p.add_argument("--exposure", help="error-free exposure Z")
    p.add_argument("--moderator")
    p.add_argument("--layout", type=_csv_list, help="outcome terms, e.g. '1,C1,Z,Z*C2'")
    p.add_argument("--builder",
                   choices=("efficient_star", "simple", "c1_dependent", "raw_design"))
    p.add_argument("--s-terms", dest="s_terms", type=_csv_list,
                   help="simple builder: s(Z,C2) per error-prone column, e.g. 'Z^2'")
    _add_nuisance(p)
    p.add_argument("--weighted", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--estimate-mu", dest="estimate_mu", action="store_true",
                   default=argparse.SUPPRESS)
    p.add_argument("--weak-threshold", dest="weak_threshold", type=float)


def _add_nuisance(p):
    p.add_argument("--nuisance", choices=("parametric_basis", "crossfit_nonparametric"))
    p.add_argument("--basis-degree", dest="basis_degree", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="civmed", argument_default=argparse.SUPPRESS,
                     description="Constructed-instrument estimators under measurement error.")
    parser.add_argument("--version", action="version", version=f"civmed {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit-outcome", argument_default=argparse.SUPPRESS,
                       help="fit an outcome model with a constructed instrument")
    _add_common(p), _add_data(p), _add_outcome(p)
    p.add_argument("--format", choices=("json",))
    p.add_argument("--contrast", type=_float_list, help="z',z'' for an average effect")

    p = sub.add_parser("me-variance", argument_default=argparse.SUPPRESS,
                       help="estimate the measurement-error variance")
    _add_common(p), _add_data(p), _add_outcome(p)
    p.add_argument("--format", choices=("json",))
    p.add_argument("--source", choices=("outcome", "mediator"),
                   help="mediator: model the --exposure column on the error-prone one")
    p.add_argument("--T", dest="T", help="weight: g2, one, or a term such as 'Z'")
    p.add_argument("--joint", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--bounds", type=_float_list, help="low,high sanity range")

    p = sub.add_parser("fit-mediation", argument_default=argparse.SUPPRESS,
                       help="natural direct and indirect effects")
    _add_common(p), _add_data(p)
    p.add_argument("--format", choices=("json",))
    p.add_argument("--outcome")
    p.add_argument("--exposure", help="error-prone exposure A*")
    p.add_argument("--mediator", help="mediator Z")
    p.add_argument("--clean", type=_csv_list)
    p.add_argument("--moderator")
    p.add_argument("--levels", type=_float_list, help="moderator levels to report")
    p.add_argument("--pipeline", action="append",
                   help="NAIVE, IVZ_IVY, GMMZ_IVY, IVZ_GMMY or MOM_SENS(rr); repeatable")
    p.add_argument("--outcome-terms", dest="outcome_terms", type=_csv_list)
    p.add_argument("--interaction", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--b-terms", dest="b_terms", type=_csv_list)
    p.add_argument("--h1-terms", dest="h1_terms", type=_csv_list)
    p.add_argument("--h2-terms", dest="h2_terms", type=_csv_list)
    p.add_argument("--contrast", type=_float_list)
    p.add_argument("--inference", choices=("bootstrap", "sandwich", "none"))
    p.add_argument("--B", dest="B", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--mediator-mode", dest="mediator_mode",
                   choices=("simplified", "plugin_optimal"))
    p.add_argument("--allow-negative-sigma2", dest="allow_negative_sigma2",
                   action="store_true", default=argparse.SUPPRESS)
    _add_nuisance(p)
    p.add_argument("--weak-threshold", dest="weak_threshold", type=float)
    p.add_argument("--draws-csv", dest="draws_csv", help="write bootstrap draws here")

    p = sub.add_parser("f-test", argument_default=argparse.SUPPRESS,
                       help="nested-model first-stage F test")
    _add_common(p), _add_data(p)
    p.add_argument("--format", choices=("json", "text"))
    p.add_argument("--response", help="default: the one CSV column no term uses")
    p.add_argument("--small", type=_csv_list)
    p.add_argument("--large", type=_csv_list)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="Monte Carlo bias, variance and coverage grid")
    _add_common(p)
    p.add_argument("--format", choices=("json", "markdown", "csv"))
    p.add_argument("--grid", help="'default', 'quick' or a JSON/TOML grid file")
    p.add_argument("--R", dest="R", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--inference", choices=("sandwich", "bootstrap"))
    p.add_argument("--B", dest="B", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--pipeline", action="append")
    p.add_argument("--markdown", help="also write the markdown table here")
    return parser


def _read_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        if path.endswith(".toml"):
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise PreconditionError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise PreconditionError(f"config {path} must hold a table of settings")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_config(command: str, flags: dict) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    defaults = DEFAULTS[command]
    from_file = _read_config_file(flags["config"]) if flags.get("config") else {}
    unknown = sorted(set(from_file) - set(defaults))
    if unknown:
        raise PreconditionError(f"unknown setting(s) in config for {command}: {unknown}")
    for key in ("error_prone", "clean", "layout", "s_terms", "outcome_terms", "b_terms",
                "h1_terms", "h2_terms", "small", "large", "pipeline", "transform"):
        if isinstance(from_file.get(key), str):
            from_file[key] = _csv_list(from_file[key])
    cfg = {**defaults, **from_file, **flags}
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, [], "")]
    if missing:
        raise PreconditionError(
            f"{command} needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _load(cfg: dict, roles: RoleMap | None, extra=()):
    ds = load_dataset(cfg["data"], roles, delimiter=cfg["delimiter"],
                      na_policy=cfg["na_policy"], extra_columns=extra)
    for spec in cfg["transform"] or []:
        name, _, kind = spec.partition(":")
        ds = transform_column(ds, name, kind)
    return ds


def _nuisance(cfg: dict) -> NuisanceConfig:
    return NuisanceConfig(kind=cfg["nuisance"], basis_degree=cfg["basis_degree"],
                          K=cfg["folds"], seed=cfg["seed"])


def _outcome_roles(cfg: dict) -> RoleMap:
    return RoleMap(outcome=cfg["outcome"], error_prone=tuple(cfg["error_prone"]),
                   clean_covariates=tuple(cfg["clean"] or ()),
                   exposure_or_mediator=cfg["exposure"], moderator=cfg["moderator"])


def _fit_outcome(cfg: dict, roles: RoleMap, ds):
    return fit_constructed_iv(ds, roles, cfg["layout"], cfg["builder"], _nuisance(cfg),
                              s_terms=cfg["s_terms"], weighted=cfg["weighted"],
                              estimate_mu=cfg["estimate_mu"],
                              weak_threshold=cfg["weak_threshold"])


def run_fit_outcome(cfg: dict) -> dict:
    roles = _outcome_roles(cfg)
    ds = _stage("load", _load, cfg, roles)
    fit = _stage("outcome_fit", _fit_outcome, cfg, roles, ds)
    result = fit.to_dict()
    if cfg["contrast"]:
        z1, z0 = cfg["contrast"]
        result["contrast"] = {"z_prime": z1, "z_dprime": z0,
                              **_stage("contrast", ate_contrast, fit, z1, z0)}
    return result


def run_me_variance(cfg: dict) -> dict:
    roles = _outcome_roles(cfg)
    ds = _stage("load", _load, cfg, roles)
    if cfg["source"] == "outcome":
        fit = _stage("outcome_fit", _fit_outcome, cfg, roles, ds)
    else:
        if roles.exposure_or_mediator is None:
            raise PreconditionError("--source mediator needs --exposure as the mediator")
        fit = _stage("mediator_fit", fit_mediator, ds, roles, None, "constructed_iv",
                     nuisance_config=_nuisance(cfg), weak_threshold=cfg["weak_threshold"])
    est = _stage("me_variance", estimate_me_variance, ds, roles, fit, cfg["T"],
                 joint=cfg["joint"], bounds=tuple(cfg["bounds"]) if cfg["bounds"] else None,
                 emit_warnings=False)
    return {"estimate": est.to_dict(), "model": fit.to_dict()}


def run_fit_mediation(cfg: dict) -> dict:
    roles = RoleMap(outcome=cfg["outcome"], error_prone=(cfg["exposure"],),
                    clean_covariates=tuple(cfg["clean"] or ()),
                    exposure_or_mediator=cfg["mediator"], moderator=cfg["moderator"])
    ds = _stage("load", _load, cfg, roles)
    base = MediationModel.default(roles, interaction=cfg["interaction"])
    spec = base.mediator
    if cfg["b_terms"] or cfg["h1_terms"] or cfg["h2_terms"]:
        spec = MediatorModelSpec(b_terms=tuple(cfg["b_terms"] or spec.b_terms),
                                 h1_terms=tuple(cfg["h1_terms"] or spec.h1_terms),
                                 h2_terms=tuple(cfg["h2_terms"] or spec.h2_terms))
    model = MediationModel(tuple(cfg["outcome_terms"] or base.outcome_terms), spec)
    config = PipelineConfig(
        contrast=tuple(cfg["contrast"]), moderator_levels=cfg["levels"],
        inference=cfg["inference"], B=cfg["B"], seed=cfg["seed"], level=cfg["level"],
        nuisance=_nuisance(cfg), mediator_mode=cfg["mediator_mode"],
        allow_negative_sigma2=cfg["allow_negative_sigma2"],
        weak_threshold=cfg["weak_threshold"], threads=cfg["threads"])
    pipelines = [PipelineSpec.parse(p) for p in cfg["pipeline"]]
    if cfg["draws_csv"] and (len(pipelines) != 1 or cfg["inference"] != "bootstrap"):
        raise PreconditionError("--draws-csv needs bootstrap inference and one pipeline")
    reports = run_pipelines(ds, roles, model, pipelines, config)
    if cfg["draws_csv"]:
        (report,) = reports.values()
        Path(cfg["draws_csv"]).write_text(report.draws_csv(), encoding="utf-8")
    return {"model": model.to_dict(), "pipelines": {k: r.to_dict() for k, r in reports.items()}}


def _f_response(cfg: dict, terms) -> str:
    if cfg["response"]:
        return cfg["response"]
    with open(cfg["data"], encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(cfg["delimiter"])]
    used = {c for t in terms for c in t.columns}
    rest = [h for h in header if h and h not in used]
    if len(rest) != 1:
        raise PreconditionError(f"cannot infer the response from columns {rest}; "
                                "pass --response")
    return rest[0]


def run_f_test(cfg: dict) -> dict:
    small, large = parse_terms(cfg["small"]), parse_terms(cfg["large"])
    response = _f_response(cfg, large)
    # Only the response matters once it is named explicitly.
    roles = RoleMap(outcome=f"{response}__unused", error_prone=(response,))
    ds = _stage("load", load_dataset, cfg["data"], None, delimiter=cfg["delimiter"],
                na_policy=cfg["na_policy"])
    for spec in cfg["transform"] or []:
        name, _, kind = spec.partition(":")
        ds = transform_column(ds, name, kind)
    result = _stage("f_test", first_stage_f_test, ds, roles, small, large,
                    response=response, threshold=cfg["threshold"])
    return result.to_dict()


def _grid(cfg: dict) -> MonteCarloGrid:
    g = cfg["grid"]
    if g in ("default", "quick"):
        grid = MonteCarloGrid.named(g)
    else:
        grid = MonteCarloGrid.from_dict(_read_config_file(g))
    if cfg["pipeline"]:
        grid = MonteCarloGrid(grid.scenarios, grid.reliabilities, grid.n,
                              tuple(cfg["pipeline"]), grid.coefficients)
    return grid


def run_simulate(cfg: dict):
    grid = _stage("grid", _grid, cfg)
    return _stage("monte_carlo", run_monte_carlo, grid, cfg["R"], cfg["seed"],
                  inference=cfg["inference"], level=cfg["level"], bootstrap_B=cfg["B"],
                  threads=cfg["threads"])


RUNNERS = {"fit-outcome": run_fit_outcome, "me-variance": run_me_variance,
           "fit-mediation": run_fit_mediation, "f-test": run_f_test,
           "simulate": run_simulate}


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CivmedError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _error(exc: BaseException, code: int, stage: str | None) -> int:
    payload = {"error": type(exc).__name__, "exit_code": code, "stage": stage,
               "message": str(exc)}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command", None)
    if command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("civmed: error: a subcommand is required\n")
        return 1
    try:
        cfg = resolve_config(command, args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = RUNNERS[command](cfg)
        notes = list(dict.fromkeys(str(w.message) for w in caught))
        for note in notes:
            sys.stderr.write(f"warning: {note}\n")
        if command == "simulate":
            if cfg["markdown"]:
                Path(cfg["markdown"]).write_text(render_report(result, "markdown_table"),
                                                 encoding="utf-8")
            if cfg["format"] in ("markdown", "csv"):
                _write(render_report(result, "markdown_table" if cfg["format"] == "markdown"
                                     else "csv"), cfg["out"])
                return 0
            result = result.to_dict()
        if command == "f-test" and cfg["format"] == "text":
            _write(f"F = {result['f_statistic']:.6g}  df = ({result['df_num']}, "
                   f"{result['df_den']})  p = {result['p_value']:.6g}  weak = "
                   f"{'yes' if result['is_weak'] else 'no'}\n", cfg["out"])
            return 0
        embedded = {k: v for k, v in cfg.items() if k not in NOT_EMBEDDED}
        doc = {"tool": "civmed", "version": __version__, "command": command,
               "config": embedded, "result": result, "warnings": notes}
        _write(dumps(doc), cfg["out"])
        return 0
    except CivmedError as exc:
        return _error(exc, exc.exit_code, exc.stage)
    except OSError as exc:
        return _error(exc, 1, "io")


if __name__ == "__main__":
    sys.exit(main())
