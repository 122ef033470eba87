"""Command-line front end: ``estimate``, ``intervals``, ``coverage`` and ``plotdata``.

The config file holds ``key = value`` lines with dotted keys, for example::

    data.path = panel.csv
    data.features = gdp, trade
    predictand.kind = individual
    predictand.unit = A
    constraint.family = simplex
    study.alpha1 = 0.05

See the README for every key.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .config import ConstraintSpec, CovariateSpec, PredictandSpec, StudyConfig
from .conic import estimate_weights
from .constraints import relax, to_smooth, tune_rho
from .errors import InvalidConfig, StagsynthError
from .harness import DgpSpec, coverage_study
from .panel import PanelDataset, build_design, load_panel
from .pipeline import StudyResult, run_intervals
from .predictands import predictor_row

LOGGER = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_SECTION = "run"
_RESERVED = {"study.predictand", "study.covariates", "study.constraint"}


# --------------------------------------------------------------------------- config parsing


@dataclasses.dataclass(frozen=True)
class RunConfig:
    study: StudyConfig | None
    data_path: Path | None
    schema: dict
    fmt: str = "json"
    out: Path | None = None
    dgp: DgpSpec | None = None
    chunk: int = 20


def read_keys(path: str | Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), strict=True)
    parser.optionxform = str  # keys are case sensitive
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse {path}: {exc}") from exc
    return dict(parser[_SECTION])


def _convert(raw: str, annotation: str, key: str):
    text = raw.strip()
    if "None" in annotation and text.lower() in ("", "none", "null"):
        return None
    try:
        if annotation.startswith("tuple"):
            items = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(float(p) for p in items) if "float" in annotation else tuple(items)
        if annotation.startswith("bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc
    return text


def _build(cls, keys: dict[str, str], prefix: str, **extra):
    hints = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    kwargs = dict(extra)
    for key, raw in keys.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1 :]
        if name not in hints or f"{prefix}.{name}" in _RESERVED:
            raise InvalidConfig(f"unknown config key {key!r}")
        kwargs[name] = _convert(raw, hints[name], key)
    return cls(**kwargs)


def parse_run_config(path: str | Path, seed: int | None = None, fmt: str | None = None,
                     out: str | None = None, need_study: bool = True) -> RunConfig:
    keys = read_keys(path)
    known = ("data.", "predictand.", "constraint.", "covariates.", "study.", "output.", "dgp.")
    for key in keys:
        if not key.startswith(known):
            raise InvalidConfig(f"unknown config key {key!r}")
    base = Path(path).resolve().parent
    study = None
    if need_study or any(k.startswith("predictand.") for k in keys):
        pred_keys = {k: v for k, v in keys.items() if k.startswith("predictand.")}
        if "predictand.kind" not in pred_keys:
            pred_keys["predictand.kind"] = "individual"
        study = _build(StudyConfig, keys, "study",
                       predictand=_build(PredictandSpec, pred_keys, "predictand"),
                       constraint=_build(ConstraintSpec, keys, "constraint"),
                       covariates=_build(CovariateSpec, keys, "covariates"))
    elif any(k.startswith(("study.", "constraint.", "covariates.")) for k in keys):
        # coverage runs set predictands themselves; any placeholder unit works
        study = _build(StudyConfig, keys, "study", predictand=PredictandSpec("att"),
                       constraint=_build(ConstraintSpec, keys, "constraint"),
                       covariates=_build(CovariateSpec, keys, "covariates"))
    env_seed = os.environ.get("SEED")
    chosen = seed if seed is not None else (int(env_seed) if env_seed not in (None, "") else None)
    if study is not None and chosen is not None:
        study = replace(study, seed=chosen)
    data_path = keys.get("data.path")
    schema: dict[str, Any] = {}
    for name in ("unit", "time", "treatment", "adoption_time"):
        if f"data.{name}" in keys:
            schema[name] = keys[f"data.{name}"].strip()
    if "data.features" in keys:
        schema["features"] = [f.strip() for f in keys["data.features"].split(",") if f.strip()]
    unknown_data = set(k for k in keys if k.startswith("data.")) - {
        "data.path", "data.unit", "data.time", "data.treatment", "data.adoption_time", "data.features"}
    if unknown_data:
        raise InvalidConfig(f"unknown config key {sorted(unknown_data)[0]!r}")
    dgp_keys = {k: v for k, v in keys.items() if k.startswith("dgp.")}
    dgp = None
    chunk = 20
    if dgp_keys:
        if "dgp.chunk" in dgp_keys:
            chunk = int(dgp_keys.pop("dgp.chunk"))
        dgp = _build(DgpSpec, dgp_keys, "dgp")
        if chosen is not None:
            dgp = replace(dgp, seed=chosen)
    out_fmt = fmt or keys.get("output.format", "json").strip()
    if out_fmt not in ("json", "csv"):
        raise InvalidConfig(f"unknown output format {out_fmt!r}")
    out_path = out or keys.get("output.path")
    return RunConfig(study, (base / data_path.strip()) if data_path else None, schema, out_fmt,
                     Path(out_path) if out_path else None, dgp, chunk)


# --------------------------------------------------------------------------- serialization


def _num(x: float) -> Any:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return _Raw(format(x, ".17g"))


class _Raw(str):
    """A pre-formatted JSON number."""


def _encode(obj: Any, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, _Raw):
        return str(obj)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _encode(_num(obj), indent)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        return "[\n" + ",\n".join(pad + _encode(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_json(payload: dict) -> str:
    return _encode({"schema_version": SCHEMA_VERSION, **payload}) + "\n"


def _csv_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return "" if math.isnan(x) else ("inf" if x == math.inf else "-inf" if x == -math.inf else format(x, ".17g"))
    return str(v)


def to_csv(rows: Iterable[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------- commands


def _dataset(run: RunConfig) -> PanelDataset:
    if run.data_path is None:
        raise InvalidConfig("data.path is required")
    return load_panel(run.data_path, run.schema)


def cmd_estimate(run: RunConfig) -> str:
    dataset = _dataset(run)
    cfg = run.study
    design = build_design(dataset, cfg)
    fit = estimate_weights(design, cfg.constraint, cfg.tol, cfg.max_iter)
    smooth = to_smooth(cfg.constraint, design)
    rho = tune_rho(design, fit.residuals, smooth, fit.beta, cfg.cointegrated, cfg.rho_constant)
    relaxed = relax(smooth, fit.beta, rho.rho_j)
    sol = fit.solution
    if run.fmt == "csv":
        rows = [{"unit": u, "donor": j, "weight": w} for u in design.treated for j, w in fit.weights[u].items()]
        return to_csv(rows, ["unit", "donor", "weight"])
    units = {u: {"donors": fit.weights[u], "covariates": fit.covariates[u], "T0": design.T0_per_unit[u],
                 "rho": rho.rho_unit[u]} for u in design.treated}
    return to_json({
        "command": "estimate", "predictand": cfg.predictand.label, "family": cfg.constraint.family,
        "objective": fit.objective, "units": units, "active_constraints": relaxed.report(),
        "dropped_rows": [list(r) for r in design.dropped],
        "solver": {"status": sol.status, "iterations": sol.iterations, "primal_residual": sol.pres,
                   "dual_residual": sol.dres, "gap": sol.gap},
    })


_IV_COLUMNS = ["label", "tau_hat", "lower", "upper", "M1L", "M1U", "M2L", "M2U", "eps_delta",
               "alpha1", "alpha2", "simultaneous", "group", "draws_used"]


def _interval_rows(result: StudyResult) -> list[dict]:
    rows = []
    for iv in [*result.pointwise, *result.simultaneous]:
        rows.append({c: getattr(iv, c) for c in _IV_COLUMNS})
    return rows


def cmd_intervals(run: RunConfig) -> str:
    dataset = _dataset(run)
    result = run_intervals(dataset, run.study)
    rows = _interval_rows(result)
    if run.fmt == "csv":
        return to_csv(rows, _IV_COLUMNS)
    first = result.pointwise[0].diagnostics
    return to_json({
        "command": "intervals", "predictand": run.study.predictand.label,
        "family": run.study.constraint.family, "oos_method": run.study.oos_method,
        "intervals": rows,
        "diagnostics": {"rho": first["rho"], "active_constraints": first["active"],
                        "failed_draws": first["failures"], "inexact_programs": first["inexact_programs"],
                        "unbounded_programs": first["unbounded_programs"], "fit_status": first["fit_status"],
                        "theory_constants": "not computed"},
    })


def cmd_coverage(run: RunConfig) -> str:
    if run.dgp is None:
        raise InvalidConfig("coverage needs dgp.* keys")
    study = run.study or StudyConfig(PredictandSpec("att"))
    rep = coverage_study(run.dgp, study, chunk=run.chunk)
    payload = {"command": "coverage", **{k: v for k, v in rep.to_dict().items() if k != "schema_version"}}
    if run.fmt == "csv":
        rows = [{"predictand": k, "coverage": v, "mean_width": rep.mean_width[k], "failures": rep.failures[k]}
                for k, v in rep.coverage.items()]
        return to_csv(rows, ["predictand", "coverage", "mean_width", "failures"])
    return to_json(payload)


_PLOT_COLUMNS = ["unit", "period", "observed", "synthetic", "effect", "lower", "upper", "joint_lower",
                 "joint_upper"]


def plot_rows(dataset: PanelDataset, config: StudyConfig) -> list[dict]:
    """Per-period series for every treated unit of interest.

    Each unit is fit once with the never-treated pool used for its last
    period, so the synthetic path is one weight vector; post-treatment rows
    carry pointwise and joint intervals for ``k = 0..T - T_i``.
    """
    spec = config.predictand
    if spec.kind in ("individual", "unit_average"):
        units = [spec.unit]
    else:
        units = list(config.treated_units or dataset.treated)
    rows = []
    for u in units:
        Ti = int(dataset.adoption[u])
        cfg = replace(config, predictand=PredictandSpec("individual", unit=u, k=0), horizon=dataset.t_max - Ti,
                      simultaneous=True, treated_units=None)
        result = run_intervals(dataset, cfg)
        prep = result.prepared
        beta = prep.fit.beta
        post = {Ti + k: (pw, sm) for k, (pw, sm) in enumerate(zip(result.pointwise, result.simultaneous))}
        for t in dataset.times:
            t = int(t)
            y = float(dataset.cube[dataset.unit_index(u), dataset.time_index(t), 0])
            try:
                synth = float(predictor_row(dataset, prep.design, u, t) @ beta)
            except StagsynthError:
                synth = math.nan
            row = {"unit": u, "period": t, "observed": y, "synthetic": synth, "effect": y - synth}
            if t in post:
                pw, sm = post[t]
                row.update(effect=pw.tau_hat, lower=pw.lower, upper=pw.upper,
                           joint_lower=sm.lower, joint_upper=sm.upper)
            rows.append(row)
    return rows


def cmd_plotdata(run: RunConfig) -> str:
    rows = plot_rows(_dataset(run), run.study)
    if run.fmt == "csv":
        return to_csv(rows, _PLOT_COLUMNS)
    return to_json({"command": "plotdata", "rows": rows})


COMMANDS = {"estimate": cmd_estimate, "intervals": cmd_intervals, "coverage": cmd_coverage,
            "plotdata": cmd_plotdata}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=_u64, default=None, help="overrides SEED and study.seed")
        p.add_argument("--format", choices=("json", "csv"), default=None)
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = parse_run_config(args.config, args.seed, args.format, args.out,
                               need_study=args.command != "coverage")
        text = COMMANDS[args.command](run)
        _emit(text, run.out)
    except StagsynthError as exc:
        record = {"command": args.command, "error": {"code": exc.code, "message": str(exc),
                                                      "exit_code": exc.exit_code}}
        sys.stdout.write(to_json(record))
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        record = {"command": args.command, "error": {"code": "IOError", "message": str(exc), "exit_code": 3}}
        sys.stdout.write(to_json(record))
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
