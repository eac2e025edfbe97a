"""Command-line pipelines over the library: one binary, six subcommands.

    tercon simulate       synthetic ground truth (field, panel, events)
    tercon ingest         event CSV -> filtered, gridded count panel
    tercon fit            panel -> params + decoded field + posterior
    tercon sweep          cell size/shape sweep on shared point events
    tercon export-geojson decoded field/posterior -> GeoJSON map
    tercon evaluate       decoded field vs truth -> metrics report

Every subcommand reads a JSON config (flags override individual keys),
takes all randomness from one --seed, and writes a manifest.json next to
its outputs recording the resolved config, the seed, and a sha256 per
output file. Re-running a subcommand with the manifest's config and seed
reproduces every output byte for byte; results never depend on
--threads. Exit codes: 0 success, 2 usage or config error, 3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, hmm, hmrf, ingest, sim
from . import eval as eval_mod
from .covariates import (
    LinkShape,
    PerturbationSpec,
    build_cell_transitions,
    read_covariates,
)
from .grid import GridShape, GridSpec, Neighborhood, build_grid, grid_to_geojson

MANIFEST_FORMAT = "tercon-manifest v1"


class ConfigError(Exception):
    """Bad usage or configuration; maps to exit code 2."""


class DataError(Exception):
    """Unreadable or malformed input data; maps to exit code 3."""


# ---- config plumbing ----


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _require(cfg: dict, key: str):
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"missing required config key {key!r}")
    return cfg[key]


def _int_field(cfg: dict, key: str, default=None, minimum=None) -> int:
    raw = cfg.get(key, default)
    if raw is None:
        raise ConfigError(f"missing required config key {key!r}")
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"config key {key!r} must be >= {minimum}, got {value}")
    return value


def _float_field(cfg: dict, key: str, default=None) -> float:
    raw = cfg.get(key, default)
    if raw is None:
        raise ConfigError(f"missing required config key {key!r}")
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be a number, got {raw!r}")


def _grid_spec(cfg: dict) -> GridSpec:
    g = _require(cfg, "grid")
    if not isinstance(g, dict):
        raise ConfigError("config key 'grid' must be an object")
    try:
        spec = GridSpec(
            min_lon=float(_require(g, "min_lon")),
            min_lat=float(_require(g, "min_lat")),
            max_lon=float(_require(g, "max_lon")),
            max_lat=float(_require(g, "max_lat")),
            cell_size=float(g.get("cell_size", 0.5)),
            shape=GridShape(g.get("shape", "square")),
            neighborhood=Neighborhood(g.get("neighborhood", "rook")),
        )
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid config: {exc}") from exc
    return spec


def _grid_dict(spec: GridSpec) -> dict:
    return {
        "min_lon": spec.min_lon,
        "min_lat": spec.min_lat,
        "max_lon": spec.max_lon,
        "max_lat": spec.max_lat,
        "cell_size": spec.cell_size,
        "shape": spec.shape.value,
        "neighborhood": spec.neighborhood.value,
    }


def _params_from_config(cfg: dict | None) -> hmm.HmmParams | None:
    if cfg is None:
        return None
    try:
        params = hmm.HmmParams(
            pi=np.asarray(_require(cfg, "pi"), dtype=float),
            trans=np.asarray(_require(cfg, "trans"), dtype=float),
            lambda_t=np.asarray(_require(cfg, "lambda_t"), dtype=float),
            lambda_c=np.asarray(_require(cfg, "lambda_c"), dtype=float),
        )
        params.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad params config: {exc}") from exc
    return params


def _params_dict(params: hmm.HmmParams) -> dict:
    return {
        "pi": params.pi.tolist(),
        "trans": params.trans.tolist(),
        "lambda_t": params.lambda_t.tolist(),
        "lambda_c": params.lambda_c.tolist(),
    }


def _resolve_seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    return _int_field(cfg, "seed", default=0)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(_canonical_json(obj), encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(out_dir: Path, subcommand: str, seed: int, resolved: dict,
            outputs: list[Path]) -> int:
    manifest = {
        "format": MANIFEST_FORMAT,
        "tool_version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": resolved,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    _write_json(out_dir / "manifest.json", manifest)
    return 0


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_input(reader, path, *rest):
    """Run a data-file reader, mapping failures to the right exit class."""
    try:
        return reader(path, *rest)
    except FileNotFoundError as exc:
        raise DataError(f"input file not found: {path}") from exc
    except ingest.SchemaError:
        raise
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ---- simulate ----


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    if args.years is not None:
        cfg["years"] = args.years
    if args.k is not None:
        cfg["k"] = args.k
    if args.beta is not None:
        cfg["beta"] = args.beta
    if args.point_events:
        cfg["point_events"] = True
    seed = _resolve_seed(cfg, args)

    spec = _grid_spec(cfg)
    k = _int_field(cfg, "k", default=3, minimum=1)
    params = _params_from_config(cfg.get("params"))
    if params is None:
        if k != 3:
            raise ConfigError(f"k={k} needs explicit 'params' (defaults exist only for k=3)")
        params = sim.default_sim_params()
    elif params.n_states != k:
        raise ConfigError(f"params have {params.n_states} states but k={k}")
    config = sim.SimConfig(
        grid_spec=spec,
        years=_int_field(cfg, "years", default=10, minimum=1),
        params=params,
        beta=_float_field(cfg, "beta", default=0.0),
        point_events=bool(cfg.get("point_events", False)),
        coherence_sweeps=_int_field(cfg, "coherence_sweeps", default=sim.DEFAULT_COHERENCE_SWEEPS, minimum=0),
        year_start=_int_field(cfg, "year_start", default=2000),
        seed=seed,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    truth = sim.simulate(config)
    out = _out_dir(args)
    outputs = []
    sim.write_field_csv(truth.field, config.year_start, out / "truth_field.csv")
    outputs.append(out / "truth_field.csv")
    ingest.write_panel_csv(truth.panel, out / "panel.csv")
    outputs.append(out / "panel.csv")
    hmm.write_params(params, out / "params_true.txt")
    outputs.append(out / "params_true.txt")
    if truth.events is not None:
        ingest.write_events_csv(truth.events, out / "events.csv")
        outputs.append(out / "events.csv")

    resolved = {
        "grid": _grid_dict(spec),
        "years": config.years,
        "year_start": config.year_start,
        "k": k,
        "params": _params_dict(params),
        "beta": config.beta,
        "coherence_sweeps": config.coherence_sweeps,
        "point_events": config.point_events,
        "seed": seed,
    }
    return _finish(out, "simulate", seed, resolved, outputs)


# ---- ingest ----


def _policy_from_config(cfg: dict | None) -> ingest.FilterPolicy:
    if cfg is None:
        return ingest.FilterPolicy()
    try:
        return ingest.FilterPolicy(
            max_precision=int(cfg.get("max_precision", 3)),
            ged_excluded_categories=frozenset(
                cfg.get("ged_excluded_categories",
                        sorted(ingest.FilterPolicy().ged_excluded_categories))
            ),
            gtd_excluded_target_types=frozenset(
                cfg.get("gtd_excluded_target_types",
                        sorted(ingest.FilterPolicy().gtd_excluded_target_types))
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy config: {exc}") from exc


def cmd_ingest(args) -> int:
    cfg = _load_config(args.config)
    if args.events is not None:
        cfg["events"] = args.events
    seed = _resolve_seed(cfg, args)

    events_path = _require(cfg, "events")
    schema = cfg.get("schema")
    if schema is not None and not isinstance(schema, dict):
        raise ConfigError("config key 'schema' must map field names to column names")
    spec = _grid_spec(cfg)
    year_start = _int_field(cfg, "year_start")
    year_end = _int_field(cfg, "year_end")
    if year_end < year_start:
        raise ConfigError("year_end must be >= year_start")
    policy = _policy_from_config(cfg.get("policy"))
    apply_filter = bool(cfg.get("apply_filter", True))

    events, report = _read_input(ingest.parse_events, events_path, schema)
    kept = ingest.filter_events(events, policy) if apply_filter else events
    grid = build_grid(spec)
    panel, skips = ingest.aggregate(kept, grid, year_start, year_end)

    out = _out_dir(args)
    ingest.write_panel_csv(panel, out / "panel.csv")
    report_obj = {
        "input_rows": report.n_rows,
        "parsed": report.n_parsed,
        "row_errors": [[row, msg] for row, msg in report.errors],
        "filtered_out": len(events) - len(kept),
        "skipped": {
            "out_of_grid_t": skips.out_of_grid_t,
            "out_of_grid_c": skips.out_of_grid_c,
            "out_of_years_t": skips.out_of_years_t,
            "out_of_years_c": skips.out_of_years_c,
        },
        "aggregated": int(panel.t.sum() + panel.c.sum()),
    }
    _write_json(out / "ingest_report.json", report_obj)

    resolved = {
        "events": str(events_path),
        "schema": schema,
        "grid": _grid_dict(spec),
        "year_start": year_start,
        "year_end": year_end,
        "policy": {
            "max_precision": policy.max_precision,
            "ged_excluded_categories": sorted(policy.ged_excluded_categories),
            "gtd_excluded_target_types": sorted(policy.gtd_excluded_target_types),
        },
        "apply_filter": apply_filter,
        "seed": seed,
    }
    return _finish(out, "ingest", seed, resolved,
                   [out / "panel.csv", out / "ingest_report.json"])


# ---- fit ----


def _perturbations_from_config(raw) -> list[PerturbationSpec]:
    if not raw:
        return []
    specs = []
    for idx, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"perturbations[{idx}] must be an object")
        try:
            spec = PerturbationSpec(
                covariate=str(_require(item, "covariate")),
                source=int(_require(item, "source")),
                target=int(_require(item, "target")),
                delta=float(_require(item, "delta")),
                shape=LinkShape(item.get("shape", "linear")),
            )
            spec.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad perturbations[{idx}]: {exc}") from exc
        specs.append(spec)
    return specs


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    if args.panel is not None:
        cfg["panel"] = args.panel
    if args.mode is not None:
        cfg["mode"] = args.mode
    if args.k is not None:
        cfg["k"] = args.k
    if args.beta is not None:
        cfg["beta"] = args.beta
    seed = _resolve_seed(cfg, args)

    panel_path = _require(cfg, "panel")
    mode = cfg.get("mode", "independent")
    if mode not in ("independent", "coupled"):
        raise ConfigError(f"mode must be 'independent' or 'coupled', got {mode!r}")
    k = _int_field(cfg, "k", minimum=1)
    tol = _float_field(cfg, "tol", default=1e-6)
    max_iter = _int_field(cfg, "max_iter", default=500, minimum=1)
    restarts = _int_field(cfg, "restarts", default=10, minimum=1)
    beta_cfg = cfg.get("beta")
    beta = None if beta_cfg is None else _float_field(cfg, "beta")
    candidates_cfg = cfg.get("beta_candidates")
    em_iters = _int_field(cfg, "em_iters", default=5, minimum=0)
    sweeps = _int_field(cfg, "sweeps", default=200, minimum=1)
    burn_in = _int_field(cfg, "burn_in", default=50, minimum=0)
    thin = _int_field(cfg, "thin", default=2, minimum=1)
    if mode == "coupled":
        try:
            hmrf._check_schedule(sweeps, burn_in, thin)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    cov_path = cfg.get("covariates")
    perturbations = _perturbations_from_config(cfg.get("perturbations"))
    if perturbations and cov_path is None:
        raise ConfigError("perturbations given without a 'covariates' table")
    if mode == "coupled" and cfg.get("grid") is None:
        raise ConfigError("coupled mode requires a 'grid' for adjacency")

    panel = _read_input(ingest.read_panel_csv, panel_path)
    sequences = [
        hmm.ObservationSequence(panel.t[i], panel.c[i]) for i in range(panel.n_cells)
    ]
    table = None
    if cov_path is not None:
        table = _read_input(read_covariates, cov_path, panel.n_cells)
        for p in perturbations:
            if p.covariate not in table.values:
                raise ConfigError(f"perturbation references unknown covariate {p.covariate!r}")

    indep_params, indep_trace = hmm.baum_welch_fit(
        sequences, k, tol=tol, max_iter=max_iter, n_restarts=restarts, seed=seed
    )
    report: dict = {"mode": mode, "k": k, "bw_loglik": indep_trace[-1],
                    "bw_iterations": len(indep_trace)}
    out = _out_dir(args)

    if mode == "independent":
        params = indep_params
        cell_trans = _maybe_cell_trans(params, table, perturbations, k)
        field, gammas = hmm.decode_panel(params, panel, cell_trans)
        posterior = gammas
    else:
        grid = build_grid(_grid_spec(cfg))
        if grid.n_cells != panel.n_cells:
            raise DataError(
                f"grid has {grid.n_cells} cells but panel has {panel.n_cells}"
            )
        graph = grid.graph
        if beta is None:
            f0, _ = hmm.decode_panel(indep_params, panel)
            candidates = None if candidates_cfg is None else np.asarray(candidates_cfg, float)
            beta = hmrf.estimate_beta(f0, graph, candidates)
            report["beta_estimated"] = True
        potts, _, trace = hmrf.mcem_fit(
            panel, graph, k, beta, em_iters=em_iters, sweeps=sweeps,
            burn_in=burn_in, thin=thin, seed=seed, init_params=indep_params,
            final_posterior=False,
        )
        params = potts.hmm
        cell_trans = _maybe_cell_trans(params, table, perturbations, k)
        decode_params = hmrf.PottsParams(hmm=params, beta=beta, cell_trans=cell_trans)
        post, _ = hmrf.gibbs_sample(
            decode_params, panel, graph, sweeps=sweeps, burn_in=burn_in,
            thin=thin, seed=seed, seed_path=("decode",),
        )
        posterior = post.marginal
        field = hmrf.icm_decode(
            decode_params, panel, graph, init=posterior.argmax(axis=2)
        )
        report["beta"] = beta
        report["mcem_trace"] = trace
        report["gibbs"] = {"sweeps": sweeps, "burn_in": burn_in, "thin": thin,
                           "retained": post.n_samples}

    hmm.write_params(params, out / "params.txt")
    sim.write_field_csv(field, panel.year_start, out / "field.csv")
    hmrf.write_posterior_csv(posterior, panel.year_start, out / "posterior.csv")
    _write_json(out / "fit_report.json", report)

    resolved = {
        "panel": str(panel_path),
        "mode": mode,
        "k": k,
        "beta": beta_cfg,
        "beta_candidates": candidates_cfg,
        "tol": tol,
        "max_iter": max_iter,
        "restarts": restarts,
        "em_iters": em_iters,
        "sweeps": sweeps,
        "burn_in": burn_in,
        "thin": thin,
        "covariates": None if cov_path is None else str(cov_path),
        "perturbations": cfg.get("perturbations") or [],
        "grid": None if cfg.get("grid") is None else _grid_dict(_grid_spec(cfg)),
        "seed": seed,
    }
    return _finish(
        out, "fit", seed, resolved,
        [out / "params.txt", out / "field.csv", out / "posterior.csv",
         out / "fit_report.json"],
    )


def _maybe_cell_trans(params, table, perturbations, k) -> np.ndarray | None:
    if table is None or not perturbations:
        return None
    for p in perturbations:
        p.validate(n_states=k)
    return build_cell_transitions(params.trans, table, perturbations)


# ---- sweep ----


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)

    spec = _grid_spec(cfg)
    k = _int_field(cfg, "k", default=3, minimum=1)
    params = _params_from_config(cfg.get("params"))
    if params is None:
        if k != 3:
            raise ConfigError(f"k={k} needs explicit 'params' (defaults exist only for k=3)")
        params = sim.default_sim_params()
    elif params.n_states != k:
        raise ConfigError(f"params have {params.n_states} states but k={k}")
    years = _int_field(cfg, "years", default=10, minimum=1)
    year_start = _int_field(cfg, "year_start", default=2000)
    beta = _float_field(cfg, "beta", default=0.0)
    coherence = _int_field(cfg, "coherence_sweeps", default=sim.DEFAULT_COHERENCE_SWEEPS, minimum=0)
    fit_k = _int_field(cfg, "fit_k", default=k, minimum=1)
    targets_cfg = _require(cfg, "targets")
    if not isinstance(targets_cfg, list) or not targets_cfg:
        raise ConfigError("config key 'targets' must be a nonempty list")
    target_specs = []
    for idx, t in enumerate(targets_cfg):
        if not isinstance(t, dict):
            raise ConfigError(f"targets[{idx}] must be an object")
        merged = {
            "grid": {
                "min_lon": spec.min_lon, "min_lat": spec.min_lat,
                "max_lon": spec.max_lon, "max_lat": spec.max_lat,
                **t,
            }
        }
        target_specs.append(_grid_spec(merged))
    for idx, target in enumerate(target_specs):
        if target.cell_size <= spec.cell_size:
            raise ConfigError(
                f"targets[{idx}] cell_size {target.cell_size} is not strictly "
                f"coarser than the reference grid ({spec.cell_size})"
            )

    config = sim.SimConfig(
        grid_spec=spec, years=years, params=params, beta=beta,
        coherence_sweeps=coherence, year_start=year_start, seed=seed,
    )
    try:
        config.validate()
        fine_grid = build_grid(spec)
        field = sim.simulate_field(config, fine_grid)
        pe = sim.simulate_point_events(field, params, fine_grid, [], seed, year_start)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    threads = args.threads if args.threads else (os.cpu_count() or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = eval_mod.resolution_sweep(
                pe, target_specs, field, fine_grid, fit_k, seed, year_start,
                map_fn=pool.map,
            )
    else:
        records = eval_mod.resolution_sweep(
            pe, target_specs, field, fine_grid, fit_k, seed, year_start
        )

    out = _out_dir(args)
    eval_mod.write_sweep_csv(records, out / "sweep.csv")
    (out / "sweep.txt").write_text(eval_mod.format_sweep(records), encoding="utf-8")
    sim.write_field_csv(field, year_start, out / "truth_field.csv")
    ingest.write_events_csv(pe.events, out / "events.csv")

    resolved = {
        "grid": _grid_dict(spec),
        "years": years,
        "year_start": year_start,
        "k": k,
        "fit_k": fit_k,
        "params": _params_dict(params),
        "beta": beta,
        "coherence_sweeps": coherence,
        "targets": [_grid_dict(s) for s in target_specs],
        "seed": seed,
    }
    return _finish(
        out, "sweep", seed, resolved,
        [out / "sweep.csv", out / "sweep.txt", out / "truth_field.csv",
         out / "events.csv"],
    )


# ---- export-geojson ----


def cmd_export_geojson(args) -> int:
    cfg = _load_config(args.config)
    if args.field is not None:
        cfg["field"] = args.field
    if args.posterior is not None:
        cfg["posterior"] = args.posterior
    if args.year is not None:
        cfg["year"] = args.year
    seed = _resolve_seed(cfg, args)

    spec = _grid_spec(cfg)
    field_path = cfg.get("field")
    post_path = cfg.get("posterior")
    if field_path is None and post_path is None:
        raise ConfigError("need at least one of 'field' or 'posterior'")
    grid = build_grid(spec)

    properties: dict[int, dict] = {cell: {} for cell in range(grid.n_cells)}
    year = None
    if field_path is not None:
        field, ys = _read_input(sim.read_field_csv, field_path)
        if field.shape[0] != grid.n_cells:
            raise DataError(f"field has {field.shape[0]} cells, grid has {grid.n_cells}")
        year = _int_field(cfg, "year", default=ys)
        yi = year - ys
        if not 0 <= yi < field.shape[1]:
            raise ConfigError(f"year {year} outside field range {ys}..{ys + field.shape[1] - 1}")
        for cell in range(grid.n_cells):
            properties[cell]["state"] = int(field[cell, yi])
    if post_path is not None:
        marginal, ys = _read_input(hmrf.read_posterior_csv, post_path)
        if marginal.shape[0] != grid.n_cells:
            raise DataError(
                f"posterior has {marginal.shape[0]} cells, grid has {grid.n_cells}"
            )
        year = _int_field(cfg, "year", default=ys) if year is None else year
        yi = year - ys
        if not 0 <= yi < marginal.shape[1]:
            raise ConfigError(f"year {year} outside posterior range")
        for cell in range(grid.n_cells):
            for s in range(marginal.shape[2]):
                properties[cell][f"p_state_{s}"] = float(marginal[cell, yi, s])

    geo = grid_to_geojson(grid, properties)
    out = _out_dir(args)
    _write_json(out / "map.geojson", geo)

    resolved = {
        "grid": _grid_dict(spec),
        "field": None if field_path is None else str(field_path),
        "posterior": None if post_path is None else str(post_path),
        "year": year,
        "seed": seed,
    }
    return _finish(out, "export-geojson", seed, resolved, [out / "map.geojson"])


# ---- evaluate ----


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    if args.decoded is not None:
        cfg["decoded"] = args.decoded
    if args.truth is not None:
        cfg["truth"] = args.truth
    if args.k is not None:
        cfg["k"] = args.k
    seed = _resolve_seed(cfg, args)

    decoded_path = _require(cfg, "decoded")
    truth_path = _require(cfg, "truth")
    decoded, dys = _read_input(sim.read_field_csv, decoded_path)
    truth, tys = _read_input(sim.read_field_csv, truth_path)
    if decoded.shape != truth.shape or dys != tys:
        raise DataError(
            f"decoded ({decoded.shape} from {dys}) and truth ({truth.shape} "
            f"from {tys}) do not align"
        )
    k = _int_field(cfg, "k", default=int(max(decoded.max(), truth.max())) + 1, minimum=1)

    posterior = None
    if cfg.get("posterior") is not None:
        posterior, pys = _read_input(hmrf.read_posterior_csv, cfg["posterior"])
        if posterior.shape[:2] != truth.shape or pys != tys:
            raise DataError("posterior does not align with the truth field")
    fitted = true_p = None
    if cfg.get("fitted_params") is not None:
        fitted = _read_input(hmm.read_params, cfg["fitted_params"])
    if cfg.get("true_params") is not None:
        true_p = _read_input(hmm.read_params, cfg["true_params"])
    if (fitted is None) != (true_p is None):
        raise ConfigError("rate recovery needs both 'fitted_params' and 'true_params'")

    report = eval_mod.score(
        decoded, truth, k, posterior=posterior, fitted_params=fitted, true_params=true_p
    )
    out = _out_dir(args)
    eval_mod.write_report_csv(report, out / "report.csv")
    (out / "report.txt").write_text(eval_mod.format_report(report), encoding="utf-8")

    resolved = {
        "decoded": str(decoded_path),
        "truth": str(truth_path),
        "k": k,
        "posterior": cfg.get("posterior"),
        "fitted_params": cfg.get("fitted_params"),
        "true_params": cfg.get("true_params"),
        "seed": seed,
    }
    return _finish(out, "evaluate", seed, resolved,
                   [out / "report.csv", out / "report.txt"])


# ---- entry point ----


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tercon",
        description="Latent territorial control estimation from gridded conflict events",
    )
    parser.add_argument("--version", action="version", version=f"tercon {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate synthetic ground truth")
    _add_common(p)
    p.add_argument("--years", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--point-events", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="events CSV to gridded count panel")
    _add_common(p)
    p.add_argument("--events", help="events CSV path (overrides config)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit and decode a count panel")
    _add_common(p)
    p.add_argument("--panel", help="panel CSV path (overrides config)")
    p.add_argument("--mode", choices=["independent", "coupled"])
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="cell size/shape resolution sweep")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-geojson", help="export a field/posterior as GeoJSON")
    _add_common(p)
    p.add_argument("--field", help="field CSV path")
    p.add_argument("--posterior", help="posterior CSV path")
    p.add_argument("--year", type=int)
    p.set_defaults(func=cmd_export_geojson)

    p = sub.add_parser("evaluate", help="score a decoded field against truth")
    _add_common(p)
    p.add_argument("--decoded", help="decoded field CSV")
    p.add_argument("--truth", help="truth field CSV")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ingest.SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
