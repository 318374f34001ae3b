"""Batch runner: YAML experiment configs in, CSV rows and a JSON summary out.

Usage::

    heatpaths run CONFIG [--out DIR] [--workers N]
    heatpaths compare CONFIG [--out DIR] [--workers N]
    heatpaths selfcheck

Exit codes: 0 when every requested assertion passes, 1 when one fails,
2 for a malformed config, 3 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import multiprocessing
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Any

import numpy as np
import yaml
from scipy import integrate

from . import oracles
from .errors import ConfigParse, HeatPathsError, IncompatibleMethods, NumericalFailure
from .fk_montecarlo import MCConfig, feynman_kac_estimate, killed_walk_estimate, reflected_walk_estimate
from .geometry import Domain, DomainKind, make_domain, make_grid
from .kernels import ModelParams, PropagatorQuery
from .layer_series import Layer, green_absorbed_series, moving_absorbed_series, series_batch
from .schrodinger import (
    BoundaryMode,
    delta_bump_potential,
    delta_exact,
    l_operator_series,
    smooth_potential,
    smooth_potential_series,
    theorem1_potential,
)

CSV_HEADER = ["experiment", "domain", "method", "x", "y", "s", "t", "order", "value", "stderr", "mode", "runtime_ms"]

EXPERIMENT_KINDS = ("Series", "MC", "Schrodinger", "Green", "Compare", "Sweep")
SWEEP_AXES = ("epsilon", "kappa", "v", "dt", "n_time")
BOUNDARIES = ("Absorbing", "Reflecting", "Elastic")
_TOP_KEYS = {"experiments", "record_runtime", "write_terms"}
_EXPERIMENT_KEYS = {
    "id", "experiment", "domain", "queries", "sigma", "boundary", "methods", "series", "mc",
    "potential", "sweep", "assertions", "base",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    id: str
    experiment: str
    domain: dict
    queries: dict
    sigma: float = 1.0
    boundary: str = "Absorbing"
    methods: tuple = ()
    series: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    potential: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    assertions: dict = field(default_factory=dict)
    base: str = ""


@dataclass(frozen=True)
class RunConfig:
    experiments: tuple
    record_runtime: bool = False
    write_terms: bool = False

    def echo(self) -> dict:
        out = asdict(self)
        for e in out["experiments"]:
            e["methods"] = list(e["methods"])
        out["experiments"] = list(out["experiments"])
        return out


def _need(cond: bool, msg: str):
    if not cond:
        raise ConfigParse(msg)


def _number_list(value, name: str) -> list:
    vals = value if isinstance(value, list) else [value]
    _need(len(vals) > 0, f"{name} must not be empty")
    for v in vals:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        ok = ok or (isinstance(v, list) and all(isinstance(c, (int, float)) for c in v))
        _need(ok, f"{name} entries must be numbers or coordinate lists")
    return vals


def _parse_experiment(raw: Any, index: int) -> ExperimentConfig:
    _need(isinstance(raw, dict), f"experiment #{index} must be a mapping")
    unknown = set(raw) - _EXPERIMENT_KEYS
    _need(not unknown, f"experiment #{index}: unknown keys {sorted(unknown)}")
    eid = raw.get("id", f"exp{index}")
    _need(isinstance(eid, str) and eid, f"experiment #{index}: id must be a non-empty string")
    kind = raw.get("experiment")
    _need(kind in EXPERIMENT_KINDS, f"{eid}: experiment must be one of {EXPERIMENT_KINDS}")
    dom = raw.get("domain", {"kind": "Ball"} if kind == "Green" else None)
    _need(isinstance(dom, dict) and "kind" in dom, f"{eid}: domain must be a mapping with a kind")
    try:
        DomainKind(dom["kind"])
    except ValueError:
        raise ConfigParse(f"{eid}: unknown domain kind {dom['kind']!r}") from None
    qs = raw.get("queries")
    _need(isinstance(qs, dict), f"{eid}: queries must be a mapping with x, y, s, t")
    _need(set(qs) <= {"x", "y", "s", "t"} and {"x", "y", "t"} <= set(qs), f"{eid}: queries need x, y, t (s optional)")
    for key in ("x", "y", "t"):
        _number_list(qs[key], f"{eid}: queries.{key}")
    _need(isinstance(qs.get("s", 0.0), (int, float)), f"{eid}: queries.s must be a number")
    sigma = raw.get("sigma", 1.0)
    _need(isinstance(sigma, (int, float)) and sigma > 0, f"{eid}: sigma must be positive")
    boundary = raw.get("boundary", "Absorbing")
    _need(boundary in BOUNDARIES, f"{eid}: boundary must be one of {BOUNDARIES}")
    methods = raw.get("methods", [])
    _need(isinstance(methods, list) and all(isinstance(m, str) for m in methods), f"{eid}: methods must be a list")
    for key in ("series", "mc", "potential", "sweep", "assertions"):
        _need(isinstance(raw.get(key, {}), dict), f"{eid}: {key} must be a mapping")
    sweep = raw.get("sweep", {})
    if kind == "Sweep":
        _need(sweep.get("axis") in SWEEP_AXES, f"{eid}: sweep.axis must be one of {SWEEP_AXES}")
        vals = _number_list(sweep.get("values", []), f"{eid}: sweep.values")
        if sweep["axis"] == "epsilon":
            _need(all(a > b > 0 for a, b in zip(vals, vals[1:])), f"{eid}: epsilon sweep must be strictly decreasing")
        _need(raw.get("base") in ("Series", "MC", "Schrodinger"), f"{eid}: sweep needs base Series, MC or Schrodinger")
    if kind == "Compare":
        _need(len(methods) >= 1, f"{eid}: compare needs methods")
    mc = raw.get("mc", {})
    if mc:
        allowed = {"n_paths", "dt", "seed", "bridge_correction", "estimator", "test_function", "bin_half_width", "collar_refinement"}
        _need(set(mc) <= allowed, f"{eid}: unknown mc keys {sorted(set(mc) - allowed)}")
        _need(int(mc.get("n_paths", 1)) >= 1 and float(mc.get("dt", 1e-3)) > 0, f"{eid}: mc needs n_paths >= 1 and dt > 0")
    return ExperimentConfig(
        id=eid, experiment=kind, domain=dict(dom), queries=dict(qs), sigma=float(sigma), boundary=boundary,
        methods=tuple(methods), series=dict(raw.get("series", {})), mc=dict(mc), potential=dict(raw.get("potential", {})),
        sweep=dict(sweep), assertions=dict(raw.get("assertions", {})), base=str(raw.get("base", "")),
    )


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigParse(f"not valid YAML: {exc}") from None
    _need(isinstance(raw, dict), "config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    _need(not unknown, f"unknown top-level keys {sorted(unknown)}")
    exps = raw.get("experiments")
    _need(isinstance(exps, list) and exps, "config needs a non-empty experiments list")
    parsed = tuple(_parse_experiment(e, i) for i, e in enumerate(exps))
    ids = [e.id for e in parsed]
    _need(len(set(ids)) == len(ids), "experiment ids must be unique")
    return RunConfig(parsed, bool(raw.get("record_runtime", False)), bool(raw.get("write_terms", False)))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParse(f"cannot read {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _domain(cfg: ExperimentConfig, **override) -> Domain:
    params = {k: v for k, v in cfg.domain.items() if k not in ("kind", "kappa")}
    params.update(override.pop("params", {}))
    kappa = override.get("kappa", cfg.domain.get("kappa", 0.0))
    try:
        return make_domain(cfg.domain["kind"], params, kappa=kappa)
    except HeatPathsError as exc:
        raise ConfigParse(f"{cfg.id}: {exc}") from None


def _queries(cfg: ExperimentConfig, dim: int) -> list[PropagatorQuery]:
    q = cfg.queries
    s = float(q.get("s", 0.0))
    xs, ys, ts = (q[k] if isinstance(q[k], list) else [q[k]] for k in ("x", "y", "t"))
    if dim > 1:
        xs = [xs] if xs and not isinstance(xs[0], list) else xs
        ys = [ys] if ys and not isinstance(ys[0], list) else ys
    params = ModelParams(cfg.sigma, dim)
    try:
        return [PropagatorQuery(x, s, y, float(t), params) for t, x, y in product(ts, xs, ys)]
    except HeatPathsError as exc:
        raise ConfigParse(f"{cfg.id}: {exc}") from None


def _kind(boundary: str) -> str:
    return {"Absorbing": "absorbed", "Reflecting": "reflected", "Elastic": "elastic"}[boundary]


def _test_function(spec: dict | None):
    if not spec:
        return None
    kind = spec.get("kind", "gaussian")
    if kind == "gaussian":
        c, w = float(spec.get("center", 0.0)), float(spec.get("width", 0.1))
        return lambda y: np.exp(-((np.asarray(y) - c) ** 2) / (2 * w * w)) / np.sqrt(2 * np.pi * w * w)
    if kind == "indicator":
        lo, hi = float(spec.get("lower", -np.inf)), float(spec.get("upper", np.inf))
        return lambda y: ((np.asarray(y) > lo) & (np.asarray(y) < hi)).astype(float)
    raise ConfigParse(f"unknown test function kind {kind!r}")


def _potential(cfg: ExperimentConfig, epsilon: float | None = None):
    p = cfg.potential
    kind = p.get("kind")
    coupling = float(p.get("coupling", 1.0))
    eps = float(epsilon if epsilon is not None else p.get("epsilon", 0.05))
    if kind == "delta":
        return delta_bump_potential(eps, coupling, float(p.get("origin", 0.0)))
    if kind == "boundary_bump":
        mode = p.get("mode", cfg.boundary)
        return theorem1_potential(_domain(cfg), eps, BoundaryMode(mode), p.get("kappa"), cfg.sigma)
    if kind == "constant":
        c = float(p.get("value", 1.0))
        return smooth_potential(lambda a, t=0.0: c * np.ones_like(np.asarray(a, dtype=float)), coupling, label="constant")
    if kind == "gaussian":
        c, w, h = float(p.get("center", 0.0)), float(p.get("width", 0.1)), float(p.get("height", 1.0))
        return smooth_potential(lambda a, t=0.0: h * np.exp(-((np.asarray(a) - c) ** 2) / (2 * w * w)), coupling, label="gaussian")
    raise ConfigParse(f"{cfg.id}: potential.kind must be delta, boundary_bump, constant or gaussian")


def _oracle(cfg: ExperimentConfig, dom: Domain, q: PropagatorQuery, boundary: str) -> float:
    k = dom.kind
    p = dom.params
    try:
        if k is DomainKind.HALF_LINE:
            if boundary == "Absorbing":
                return oracles.half_space_absorbed(q, p["origin"], p["direction"])
            if boundary == "Reflecting":
                return oracles.half_space_reflected(q, p["origin"], p["direction"])
            return oracles.elastic_half_line(q, float(dom.kappa), p["origin"], p["direction"])
        if k is DomainKind.INTERVAL and boundary == "Absorbing":
            return oracles.interval_absorbed_images(q, p["lower"], p["upper"])
        if k is DomainKind.MOVING_HALF_LINE and boundary in ("Absorbing", "Reflecting"):
            fn = oracles.moving_line_absorbed if boundary == "Absorbing" else oracles.moving_line_reflected
            return fn(q, p["offset"], p["velocity"], p["direction"], p["start_time"])
    except HeatPathsError as exc:
        raise IncompatibleMethods(f"oracle not valid for this query: {exc}") from None
    raise IncompatibleMethods(f"no closed form for {boundary} on {k.value}")


def _series_results(cfg: ExperimentConfig, dom: Domain, queries, boundary: str):
    sp = cfg.series
    max_order = int(sp.get("max_order", 8))
    direction = sp.get("direction", "FP")
    out = []
    by_time: dict = {}
    for i, q in enumerate(queries):
        by_time.setdefault(q.t, []).append(i)
    results: dict = {}
    for t, idx in by_time.items():
        q0 = queries[idx[0]]
        grid = make_grid(q0.s, t, int(sp.get("n_time", 200)), int(sp.get("n_boundary", 64)), float(sp.get("grading", 2.0)))
        if dom.kind is DomainKind.MOVING_HALF_LINE:
            if boundary != "Absorbing":
                raise IncompatibleMethods("the moving-wall series is available for absorbing walls")
            for i in idx:
                results[i] = moving_absorbed_series(queries[i], dom, grid, max_order, direction)
        else:
            batch = series_batch(
                [queries[i] for i in idx], dom, grid, _kind(boundary), direction, max_order,
                rel_tol=float(sp.get("tolerance", 1e-10)),
            )
            results.update(zip(idx, batch))
    for i in range(len(queries)):
        out.append(results[i])
    return out


def _mc_estimate(cfg: ExperimentConfig, dom: Domain, q: PropagatorQuery, boundary: str, potential=None, **mc_override):
    m = dict(cfg.mc)
    m.update(mc_override)
    test = _test_function(m.get("test_function"))
    half = float(m.get("bin_half_width", 0.05))
    estimator = m.get("estimator")
    if estimator is None:
        estimator = "SmearedDensity" if test is not None else "BinnedDensity"
    bins = None
    if estimator == "BinnedDensity":
        if q.dimension != 1:
            raise IncompatibleMethods("binned MC densities are one-dimensional")
        y = float(q.y[0])
        bins = np.array([y - half, y + half])
    mc = MCConfig(
        n_paths=int(m.get("n_paths", 100_000)), dt=float(m.get("dt", 1e-3)), seed=int(m.get("seed", 0)),
        epsilon=getattr(getattr(potential, "bump", None), "epsilon", None), estimator=estimator,
        test_function=test, bins=bins, bridge_correction=bool(m.get("bridge_correction", True)),
        collar_refinement=bool(m.get("collar_refinement", True)),
    )
    if potential is not None:
        est = feynman_kac_estimate(q, potential, mc)
    elif boundary == "Absorbing":
        est = killed_walk_estimate(q, dom, mc)
    elif boundary == "Reflecting":
        est = reflected_walk_estimate(q, dom, mc)
    else:
        raise IncompatibleMethods("no Monte Carlo walk for elastic walls")
    mean = float(np.ravel(est.mean)[0])
    err = float(np.ravel(est.stderr)[0])
    return mean, err, est, bins, test


def _reference_average(ref_fn, bins, test, dom: Domain, q: PropagatorQuery) -> float:
    """The reference density averaged the same way the MC estimator averages."""
    if bins is not None:
        lo, hi = float(bins[0]), float(bins[1])
        return integrate.quad(lambda y: _safe(ref_fn, y), lo, hi, epsabs=1e-12, limit=200)[0] / (hi - lo)
    spread = 12 * q.sigma * np.sqrt(q.elapsed)
    lo, hi = float(q.x[0]) - spread, float(q.x[0]) + spread
    weight = test if test is not None else (lambda y: 1.0)
    return integrate.quad(lambda y: float(weight(y)) * _safe(ref_fn, y), lo, hi, epsabs=1e-12, limit=400)[0]


def _safe(fn, y):
    try:
        return fn(y)
    except HeatPathsError:
        return 0.0  # outside the domain the constrained density vanishes


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.ndarray):
        return " ".join(format(float(c), ".17g") for c in v)
    return str(v)


class _Collector:
    def __init__(self, cfg: ExperimentConfig, record_runtime: bool):
        self.cfg = cfg
        self.rows: list[dict] = []
        self.terms: list[dict] = []
        self.record_runtime = record_runtime

    def add(self, method, q, value, order=None, stderr=None, mode=None, runtime=None, label=None):
        self.rows.append({
            "experiment": self.cfg.id, "domain": label or self.cfg.domain["kind"], "method": method,
            "x": _fmt(q.x if q.dimension > 1 else float(q.x[0])), "y": _fmt(q.y if q.dimension > 1 else float(q.y[0])),
            "s": _fmt(q.s), "t": _fmt(q.t), "order": "" if order is None else str(order), "value": _fmt(float(value)),
            "stderr": _fmt(stderr), "mode": "" if mode is None else str(getattr(mode, "value", mode)),
            "runtime_ms": _fmt(round(runtime * 1000, 3)) if (self.record_runtime and runtime is not None) else "",
        })

    def add_terms(self, method, index, terms, partial):
        for k, (a, b) in enumerate(zip(terms, partial)):
            self.terms.append({"query": index, "method": method, "order": k, "term": _fmt(a), "partial_sum": _fmt(b)})


def _rel(a, b) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def _run_series(cfg, col):
    dom = _domain(cfg)
    queries = _queries(cfg, dom.dimension)
    t0 = time.perf_counter()
    res = _series_results(cfg, dom, queries, cfg.boundary)
    dt = (time.perf_counter() - t0) / max(len(queries), 1)
    errs = []
    for i, (q, r) in enumerate(zip(queries, res)):
        col.add("series", q, r.value, r.truncation_order, mode=r.convergence_mode, runtime=dt)
        col.add_terms("series", i, r.terms, r.partial_sums)
        try:
            ref = _oracle(cfg, dom, q, cfg.boundary)
            errs.append((abs(r.value - ref), _rel(r.value, ref)))
        except IncompatibleMethods:
            pass
    agg = {"n_queries": len(queries)}
    if errs:
        agg["max_abs_error"] = max(e[0] for e in errs)
        agg["max_rel_error"] = max(e[1] for e in errs)
    return agg


def _run_compare(cfg, col):
    methods = list(cfg.methods)
    if len(methods) < 2:
        raise IncompatibleMethods(f"{cfg.id}: comparison needs at least two methods")
    for m in methods:
        if m not in ("series", "oracle", "mc"):
            raise IncompatibleMethods(f"{cfg.id}: unknown method {m!r}")
    dom = _domain(cfg)
    queries = _queries(cfg, dom.dimension)
    values: dict = {m: [] for m in methods}
    if "series" in methods:
        t0 = time.perf_counter()
        res = _series_results(cfg, dom, queries, cfg.boundary)
        dt = (time.perf_counter() - t0) / len(queries)
    for i, q in enumerate(queries):
        if "series" in methods:
            r = res[i]
            values["series"].append(r.value)
            col.add("series", q, r.value, r.truncation_order, mode=r.convergence_mode, runtime=dt)
            col.add_terms("series", i, r.terms, r.partial_sums)
        if "oracle" in methods:
            t0 = time.perf_counter()
            v = _oracle(cfg, dom, q, cfg.boundary)
            values["oracle"].append(v)
            col.add("oracle", q, v, runtime=time.perf_counter() - t0)
        if "mc" in methods:
            t0 = time.perf_counter()
            mean, err, _, bins, test = _mc_estimate(cfg, dom, q, cfg.boundary)
            ref_name = "oracle" if "oracle" in methods else "series"
            if ref_name == "oracle":
                ref = _reference_average(lambda y: _oracle(cfg, dom, _with_y(q, y), cfg.boundary), bins, test, dom, q)
            else:
                ref = values["series"][-1]
            values["mc"].append((mean, err, ref))
            col.add("mc", q, mean, stderr=err, runtime=time.perf_counter() - t0)
    agg: dict = {"n_queries": len(queries)}
    det = [m for m in methods if m != "mc"]
    for a, b in zip(det, det[1:]):
        diffs = [abs(u - v) for u, v in zip(values[a], values[b])]
        rels = [_rel(u, v) for u, v in zip(values[a], values[b])]
        agg[f"max_abs[{a}|{b}]"] = max(diffs)
        agg[f"max_rel[{a}|{b}]"] = max(rels)
        agg.setdefault("max_abs_error", max(diffs))
        agg.setdefault("max_rel_error", max(rels))
    if "mc" in methods:
        z = [abs(m - r) / e if e > 0 else (0.0 if m == r else np.inf) for m, e, r in values["mc"]]
        agg["max_z"] = max(z)
    return agg


def _with_y(q: PropagatorQuery, y) -> PropagatorQuery:
    return PropagatorQuery(q.x, q.s, np.atleast_1d(y), q.t, q.params)


def _run_mc(cfg, col):
    dom = _domain(cfg)
    queries = _queries(cfg, dom.dimension)
    pot = _potential(cfg) if cfg.potential else None
    z = []
    for q in queries:
        t0 = time.perf_counter()
        mean, err, _, bins, test = _mc_estimate(cfg, dom, q, cfg.boundary, pot)
        col.add("mc", q, mean, stderr=err, runtime=time.perf_counter() - t0)
        try:
            ref = _reference_average(lambda y: _oracle(cfg, dom, _with_y(q, y), cfg.boundary), bins, test, dom, q)
            z.append(abs(mean - ref) / err if err > 0 else 0.0)
        except IncompatibleMethods:
            pass
    agg = {"n_queries": len(queries)}
    if z:
        agg["max_z"] = max(z)
    return agg


def _schrodinger_value(cfg, q, epsilon=None):
    p = cfg.potential
    kind = p.get("kind")
    pot = _potential(cfg, epsilon)
    sp = cfg.series
    if kind in ("constant", "gaussian"):
        r = smooth_potential_series(q, pot, max_order=int(sp.get("max_order", 8)), direction=sp.get("direction", "FI"))
        return "k_series", r
    grid = make_grid(q.s, q.t, int(sp.get("n_time", 120)), 1)
    nest = p.get("nest_ratio", 64.0 if kind == "boundary_bump" else None)
    order = int(sp.get("max_order", 2 if kind == "boundary_bump" else 6))
    r = l_operator_series(q, pot, order, grid=grid, nest_ratio=nest)
    return "l_series", r


def _schrodinger_reference(cfg, q):
    p = cfg.potential
    if p.get("kind") == "delta":
        return delta_exact(q, float(p.get("coupling", 1.0)))
    if p.get("kind") == "boundary_bump":
        return _oracle(cfg, _domain(cfg), q, p.get("mode", cfg.boundary))
    if p.get("kind") == "constant":
        c = float(p.get("value", 1.0)) * float(p.get("coupling", 1.0))
        from .kernels import free_propagator

        return np.exp(-c * q.elapsed) * free_propagator(q)
    raise IncompatibleMethods("no closed form for this potential")


def _run_schrodinger(cfg, col):
    if cfg.potential.get("kind") not in ("delta", "boundary_bump", "constant", "gaussian"):
        raise ConfigParse(f"{cfg.id}: potential.kind must be delta, boundary_bump, constant or gaussian")
    queries = _queries(cfg, 1)
    errs = []
    for i, q in enumerate(queries):
        t0 = time.perf_counter()
        method, r = _schrodinger_value(cfg, q)
        col.add(method, q, r.value, len(r.terms) - 1, mode=r.convergence_mode, runtime=time.perf_counter() - t0)
        col.add_terms(method, i, r.terms, r.partial_sums)
        try:
            ref = _schrodinger_reference(cfg, q)
            col.add("exact", q, ref)
            errs.append((abs(r.value - ref), _rel(r.value, ref)))
        except IncompatibleMethods:
            pass
    agg = {"n_queries": len(queries)}
    if errs:
        agg["max_abs_error"] = max(e[0] for e in errs)
        agg["max_rel_error"] = max(e[1] for e in errs)
    return agg


def _run_green(cfg, col):
    dom = _domain(cfg)
    if dom.kind is not DomainKind.BALL:
        raise IncompatibleMethods("the Green-function series is implemented on a ball")
    queries = _queries(cfg, 3)
    sp = cfg.series
    errs, gaps = [], []
    for q in queries:
        ref = oracles.ball_green_kelvin(q.y, q.x, dom.params["radius"], dom.params["center"], cfg.sigma)
        col.add("kelvin", q, ref)
        vals = {}
        for layer in (Layer.SBL, Layer.DBL):
            t0 = time.perf_counter()
            r = green_absorbed_series(
                q.y, q.x, dom, int(sp.get("n_boundary", 256)), int(sp.get("max_order", 8)), layer, cfg.sigma,
            )
            vals[layer] = r
            col.add(f"green_{layer.value}", q, r.value, r.truncation_order, mode=r.convergence_mode, runtime=time.perf_counter() - t0)
            errs.append(_rel(r.value, ref))
        a, b = vals[Layer.SBL].terms, vals[Layer.DBL].terms
        gaps.append(max(abs(u - v) for u, v in zip(a, b)))
    return {"n_queries": len(queries), "max_rel_error": max(errs), "max_term_gap": max(gaps)}


def _run_sweep(cfg, col):
    axis, values = cfg.sweep["axis"], list(cfg.sweep["values"])
    dom0 = _domain(cfg)
    queries = _queries(cfg, dom0.dimension)
    per_value = []
    for val in values:
        worst = 0.0
        for q in queries:
            t0 = time.perf_counter()
            label = f"{cfg.domain['kind']}[{axis}={val}]"
            if cfg.base == "Series":
                if axis == "kappa":
                    dom = _domain(cfg, kappa=float(val))
                    sub = cfg
                elif axis == "v":
                    dom = _domain(cfg, params={"velocity": float(val)})
                    sub = cfg
                elif axis == "n_time":
                    dom = dom0
                    sub = ExperimentConfig(**{**asdict(cfg), "series": {**cfg.series, "n_time": int(val)}})
                else:
                    raise ConfigParse(f"{cfg.id}: a Series sweep runs over kappa, v or n_time")
                r = _series_results(sub, dom, [q], cfg.boundary)[0]
                ref = _oracle(cfg, dom, q, cfg.boundary)
                col.add("series", q, r.value, r.truncation_order, mode=r.convergence_mode, runtime=time.perf_counter() - t0, label=label)
                worst = max(worst, abs(r.value - ref))
            elif cfg.base == "MC":
                if axis == "epsilon":
                    pot = _potential(cfg, float(val))
                    mean, err, _, bins, test = _mc_estimate(cfg, dom0, q, cfg.boundary, pot)
                    mode = cfg.potential.get("mode", cfg.boundary)
                elif axis == "dt":
                    pot = None
                    mean, err, _, bins, test = _mc_estimate(cfg, dom0, q, cfg.boundary, None, dt=float(val))
                    mode = cfg.boundary
                else:
                    raise ConfigParse(f"{cfg.id}: an MC sweep runs over epsilon or dt")
                ref = _reference_average(lambda y: _oracle(cfg, dom0, _with_y(q, y), mode), bins, test, dom0, q)
                col.add("mc", q, mean, stderr=err, runtime=time.perf_counter() - t0, label=label)
                worst = max(worst, abs(mean - ref))
            else:
                if axis != "epsilon":
                    raise ConfigParse(f"{cfg.id}: a Schrodinger sweep runs over epsilon")
                method, r = _schrodinger_value(cfg, q, float(val))
                ref = _schrodinger_reference(cfg, q)
                col.add(method, q, r.value, len(r.terms) - 1, mode=r.convergence_mode, runtime=time.perf_counter() - t0, label=label)
                worst = max(worst, abs(r.value - ref))
        per_value.append(worst)
    monotone = all(b < a for a, b in zip(per_value, per_value[1:]))
    return {"axis": axis, "values": values, "discrepancy": per_value, "monotone": monotone, "max_abs_error": per_value[-1]}


_RUNNERS = {
    "Series": _run_series, "Compare": _run_compare, "MC": _run_mc, "Schrodinger": _run_schrodinger,
    "Green": _run_green, "Sweep": _run_sweep,
}

_ASSERTIONS = {
    "max_abs_error": lambda agg, v: agg.get("max_abs_error", np.inf) <= v,
    "max_rel_error": lambda agg, v: agg.get("max_rel_error", np.inf) <= v,
    "max_z": lambda agg, v: agg.get("max_z", np.inf) <= v,
    "max_term_gap": lambda agg, v: agg.get("max_term_gap", np.inf) <= v,
    "monotone": lambda agg, v: bool(agg.get("monotone", False)) == bool(v),
}


def run_experiment(cfg: ExperimentConfig, record_runtime: bool = False, force_compare: bool = False) -> dict:
    col = _Collector(cfg, record_runtime)
    runner = _run_compare if force_compare else _RUNNERS[cfg.experiment]
    agg = runner(cfg, col)
    checks = {}
    for name, expected in cfg.assertions.items():
        if name not in _ASSERTIONS:
            raise ConfigParse(f"{cfg.id}: unknown assertion {name!r}")
        checks[name] = {"expected": expected, "passed": bool(_ASSERTIONS[name](agg, expected))}
    return {"id": cfg.id, "experiment": cfg.experiment, "aggregates": agg, "assertions": checks,
            "passed": all(c["passed"] for c in checks.values()), "rows": col.rows, "terms": col.terms}


_CONFIG: RunConfig | None = None


def _run_index(args):
    index, force_compare = args
    cfg = _CONFIG.experiments[index]
    try:
        return run_experiment(cfg, _CONFIG.record_runtime, force_compare)
    except ConfigParse:
        raise
    except HeatPathsError as exc:
        return {"id": cfg.id, "error": f"{type(exc).__name__}: {exc}", "exit_code": exc.exit_code}
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return {"id": cfg.id, "error": f"{type(exc).__name__}: {exc}", "exit_code": NumericalFailure.exit_code}


def execute(config: RunConfig, workers: int = 1, force_compare: bool = False) -> list[dict]:
    """Run every experiment; results come back in config order."""
    global _CONFIG
    _CONFIG = config
    tasks = [(i, force_compare) for i in range(len(config.experiments))]
    try:
        if workers > 1 and len(tasks) > 1 and "fork" in multiprocessing.get_all_start_methods():
            with ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("fork")) as pool:
                return list(pool.map(_run_index, tasks))
        return [_run_index(t) for t in tasks]
    finally:
        _CONFIG = None


def _csv_text(rows: list[dict], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_outputs(config: RunConfig, results: list[dict], out_dir: str) -> dict[str, str]:
    """Write all files at once through a staging directory so a failure leaves nothing behind."""
    os.makedirs(out_dir, exist_ok=True)
    files = {"results.csv": _csv_text([r for res in results for r in res["rows"]], CSV_HEADER)}
    summary = {
        "config": config.echo(),
        "experiments": [{k: v for k, v in res.items() if k not in ("rows", "terms")} for res in results],
        "passed": all(res["passed"] for res in results),
    }
    files["summary.json"] = json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n"
    if config.write_terms:
        for res in results:
            if res["terms"]:
                files[f"terms_{res['id']}.csv"] = _csv_text(res["terms"], ["query", "method", "order", "term", "partial_sum"])
    staging = tempfile.mkdtemp(prefix=".staging-", dir=out_dir)
    written = {}
    try:
        for name, text in files.items():
            with open(os.path.join(staging, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for name in files:
            final = os.path.join(out_dir, name)
            os.replace(os.path.join(staging, name), final)
            written[name] = final
    finally:
        for name in os.listdir(staging):
            os.remove(os.path.join(staging, name))
        os.rmdir(staging)
    return written


def _cmd_run(args, force_compare: bool) -> int:
    try:
        config = load_config(args.config)
        if force_compare:
            for e in config.experiments:
                if len(e.methods) < 2:
                    raise IncompatibleMethods(f"{e.id}: comparison needs at least two methods")
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigParse.exit_code
    except IncompatibleMethods as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return IncompatibleMethods.exit_code
    try:
        results = execute(config, args.workers, force_compare)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigParse.exit_code
    failed = [r for r in results if "error" in r]
    if failed:
        for r in failed:
            print(f"experiment {r['id']} failed: {r['error']}", file=sys.stderr)
        return max(r["exit_code"] for r in failed)
    write_outputs(config, results, args.out)
    for res in results:
        status = "PASS" if res["passed"] else "FAIL"
        print(f"{status} {res['id']}: {json.dumps(_json_safe(res['aggregates']), sort_keys=True)}")
    return 0 if all(r["passed"] for r in results) else 1


def selfcheck() -> list[tuple[str, bool, str]]:
    """Cross-checks between independent oracle routes."""
    from .kernels import free_propagator

    out = []
    hl = make_domain("HalfLine")
    q = PropagatorQuery(0.3, 0.0, 0.7, 0.2)
    a = oracles.interval_absorbed_images(q, 0.0, 1.0)
    b = oracles.interval_absorbed_eigen(q, 0.0, 1.0)
    out.append(("interval images vs sine series", abs(a - b) < 1e-10, f"{abs(a - b):.2e}"))
    q = PropagatorQuery(0.5, 0.0, 1.0, 1.0)
    r = series_batch([q], hl, make_grid(0.0, 1.0, 200, 1), "absorbed", "FP", 4)[0]
    err = abs(r.value - oracles.half_space_absorbed(q))
    out.append(("half-line absorbed series vs images", err < 1e-6, f"{err:.2e}"))
    gap = abs(oracles.elastic_half_line(q, 1e-9) - oracles.half_space_reflected(q))
    out.append(("elastic oracle at kappa -> 0 vs reflected", gap < 1e-8, f"{gap:.2e}"))
    gap = abs(oracles.moving_line_absorbed(q, 0.0, 0.0) - oracles.half_space_absorbed(q))
    out.append(("moving wall at rest vs half-line", gap < 1e-12, f"{gap:.2e}"))
    gap = abs(oracles.moving_line_reflected(q, 0.0, 0.0) - oracles.half_space_reflected(q))
    out.append(("moving reflected wall at rest vs half-line", gap < 1e-12, f"{gap:.2e}"))
    gap = abs(delta_exact(q, 1e-12) - free_propagator(q))
    out.append(("delta potential at zero coupling vs free", gap < 1e-10, f"{gap:.2e}"))
    xa, xb = np.array([0.1, 0.2, -0.3]), np.array([-0.4, 0.1, 0.2])
    gap = abs(oracles.ball_green_kelvin(xa, xb) - oracles.ball_green_kelvin(xb, xa))
    out.append(("ball Green function symmetry", gap < 1e-12, f"{gap:.2e}"))
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="heatpaths", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out", default=".")
        p.add_argument("--workers", type=int, default=1)
    sub.add_parser("selfcheck")
    args = parser.parse_args(argv)
    if args.command == "selfcheck":
        checks = selfcheck()
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name} ({detail})")
        return 0 if all(ok for _, ok, _ in checks) else 1
    if args.workers < 1:
        print("config error: --workers must be at least 1", file=sys.stderr)
        return ConfigParse.exit_code
    return _cmd_run(args, args.command == "compare")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
