"""Experiment runner: config parsing, seed management, subcommands, outputs.

One JSON config file with a strict schema drives every run; command-line
``--set section.key=value`` overrides leaf keys.  Each run writes RFC-4180
CSVs, a JSON manifest (resolved config, master seed, package version,
per-output checksums, wall clock) and optional self-contained SVG line
charts.  Outputs are bit-identical for identical manifest inputs regardless
of the worker-pool size (``THREADS``); ensembles are mapped in index order
with per-member seeds derived from the master seed.

Exit codes: 0 success, 1 configuration failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version as _pkg_version
from pathlib import Path

import numpy as np

from . import carleman as carleman_mod
from . import semilinear as semilinear_mod
from .hum import HumConfig, epsilon_sweep, solve_null_control, verify_energy_estimate
from .mesh import MeshConfigError, build_mesh, gradient, l2_inner
from .sampling import (random_adapted_field, random_spatial_field,
                       random_terminal_data, seed_split, standard_coefficients)
from .scenario import TreeConfigError, build_tree
from .spde import (BackwardProblem, ForwardProblem, StabilityError,
                   TreeOperator, adjoint_discrepancy, duality_identity)
from .weights import (WeightConfigError, WeightParams, build_weight_system,
                      gamma)

__all__ = ["ConfigError", "load_config", "run", "seed_split", "main",
           "DEFAULT_CONFIG"]

log = logging.getLogger(__name__)

try:
    __version__ = _pkg_version("spdecontrol")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"


class ConfigError(ValueError):
    """Configuration file or override failed validation."""


DEFAULT_CONFIG = {
    "version": 1,
    "master_seed": 1234,
    "mesh": {
        "a_end": 0.0, "b_end": 1.0, "M": 31,
        "ctrl_interval": [0.25, 0.45], "inner_interval": [0.30, 0.40],
    },
    "tree": {"N": 6, "T": 0.5},
    "weights": {
        "lambda": 1.0, "mu": 1.0, "m": 1.0,
        "variant": "backward-regularized", "eps": 0.05, "kappa": 30.0,
    },
    "problem": {
        "coeff_seed_label": "coefficients", "c0": 0.5, "c1": 2.0,
        "roughness": 0.5, "data": "random-smooth", "data_scale": 1.0,
        "source": "zero", "nonlinearity": "mix", "lipschitz": 1.0,
    },
    "hum": {
        "eps": 1e-3, "eps_list": [1e-1, 1e-2, 1e-3, 1e-4],
        "cg_tol": 1e-10, "cg_max_iters": 1000,
        "include_gradient_penalty": True,
    },
    "carleman": {
        "estimate": "C1-forward-L2", "calibration_size": 100,
        "test_size": 100,
    },
    "picard": {"tol": 1e-8, "max_iters": 50},
    "probe": {"lambdas": [1.0, 2.0, 4.0], "mus": [1.0]},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

SUBCOMMANDS = ("weights", "carleman", "hum-backward", "hum-forward",
               "semilinear-backward", "semilinear-forward",
               "probe-contraction", "selftest")


# ---------------------------------------------------------------------------
# configuration


def _validate_against(defaults: dict, cfg: dict, path: str = ""):
    for key, value in cfg.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a table")
            _validate_against(defaults[key], value, path + key + ".")


def _merge(defaults: dict, cfg: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in cfg.items():
        if isinstance(value, dict):
            out[key] = _merge(defaults[key], value)
        else:
            out[key] = value
    return out


def load_config(config_path: str | None, overrides=()) -> dict:
    """Resolve the run configuration: defaults <- file <- --set overrides."""
    cfg = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path!r}: {exc}")
    _validate_against(DEFAULT_CONFIG, cfg)
    merged = _merge(DEFAULT_CONFIG, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        target = merged
        ref = DEFAULT_CONFIG
        for key in keys[:-1]:
            if key not in ref or not isinstance(ref[key], dict):
                raise ConfigError(f"unknown config table {key!r} in {dotted!r}")
            target, ref = target[key], ref[key]
        if keys[-1] not in ref:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            target[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            target[keys[-1]] = raw
    if merged["version"] != 1:
        raise ConfigError(f"unsupported config version {merged['version']}")
    return merged


def _build_geometry(cfg: dict):
    m = cfg["mesh"]
    t = cfg["tree"]
    mesh = build_mesh(m["a_end"], m["b_end"], m["M"],
                      tuple(m["ctrl_interval"]), tuple(m["inner_interval"]))
    tree = build_tree(t["N"], t["T"])
    return mesh, tree


def _weight_params(cfg: dict, variant: str | None = None) -> WeightParams:
    w = cfg["weights"]
    v = variant if variant is not None else w["variant"]
    eps = w["eps"] if v.endswith("-regularized") else None
    return WeightParams(lam=w["lambda"], mu=w["mu"], m=w["m"],
                        T=cfg["tree"]["T"], variant=v, eps=eps)


def _hum_config(cfg: dict, direction: str) -> HumConfig:
    h = cfg["hum"]
    return HumConfig(eps=h["eps"], cg_tol=h["cg_tol"],
                     cg_max_iters=h["cg_max_iters"],
                     kappa=cfg["weights"]["kappa"], direction=direction,
                     include_gradient_penalty=h["include_gradient_penalty"])


def _thread_map(cfg_unused=None):
    threads = int(os.environ.get("THREADS", "0")) or (os.cpu_count() or 1)
    if threads <= 1:
        return map

    def pooled(fn, items):
        items = list(items)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # list() preserves submission order, keeping outputs identical
            # for every pool size
            return list(pool.map(fn, items))

    return pooled


# ---------------------------------------------------------------------------
# output helpers


class _RunWriter:
    def __init__(self, cfg: dict, subcommand: str):
        out = cfg["output"]
        base = os.environ.get("OUTPUT_DIR", out["directory"])
        self.directory = Path(base)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.formats = out["formats"]
        self.files: dict[str, str] = {}
        self.cfg = cfg
        self.subcommand = subcommand
        self.t0 = time.monotonic()

    def write_csv(self, name: str, header: list[str], rows):
        path = self.directory / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_csv_cell(v) for v in row])
        self.files[name] = _sha256(path)
        return path

    def write_svg(self, name: str, xs, series: dict, xlabel: str,
                  ylabel: str, loglog: bool = False):
        if "svg" not in self.formats:
            return None
        path = self.directory / name
        path.write_text(_svg_chart(xs, series, xlabel, ylabel, loglog))
        self.files[name] = _sha256(path)
        return path

    def finish(self, master_seed: int, extra: dict | None = None) -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "config": self.cfg,
            "master_seed": master_seed,
            "software_version": __version__,
            "outputs": self.files,
            "wall_clock_s": round(time.monotonic() - self.t0, 3),
        }
        if extra:
            manifest["summary"] = extra
        path = self.directory / f"{self.subcommand}_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                   default=_json_default) + "\n")
        return path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value)}")


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return value


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _svg_chart(xs, series: dict, xlabel: str, ylabel: str,
               loglog: bool) -> str:
    width, height, pad = 640, 420, 56
    xs = np.asarray(xs, dtype=float)
    tx = np.log10(xs) if loglog else xs
    all_y = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    ty_all = np.log10(np.maximum(all_y, 1e-300)) if loglog else all_y
    x_lo, x_hi = float(tx.min()), float(tx.max())
    y_lo, y_hi = float(ty_all.min()), float(ty_all.max())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return pad + (v - x_lo) / x_span * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y_lo) / y_span * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" '
        f'y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" '
        f'stroke="black"/>',
        f'<text x="{width//2}" y="{height-12}" text-anchor="middle" '
        f'font-size="13">{xlabel}</text>',
        f'<text x="14" y="{height//2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height//2})">{ylabel}</text>',
    ]
    for i, (label, ys) in enumerate(series.items()):
        ty = np.log10(np.maximum(np.asarray(ys, dtype=float), 1e-300)) \
            if loglog else np.asarray(ys, dtype=float)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(tx, ty))
        color = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.6"/>')
        parts.append(f'<text x="{width-pad+4}" y="{pad + 16*i}" '
                     f'font-size="12" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# problem assembly from the config


def _make_problem(cfg: dict, tree, mesh, direction: str):
    pc = cfg["problem"]
    master = cfg["master_seed"]
    coeff_seed = seed_split(master, pc["coeff_seed_label"])
    a = standard_coefficients(tree, mesh, coeff_seed, pc["c0"], pc["c1"],
                              pc["roughness"])
    rng = np.random.default_rng(seed_split(master, "data"))
    scale = pc["data_scale"]
    source = None
    if pc["source"] == "random":
        source = random_adapted_field(
            np.random.default_rng(seed_split(master, "source")),
            tree, mesh, scale)
    elif pc["source"] != "zero":
        raise ConfigError(f"unknown source generator {pc['source']!r}")
    if direction == "backward":
        if pc["data"] == "zero":
            y_T = np.zeros((tree.n_leaves, mesh.M))
        elif pc["data"] == "random-smooth":
            y_T = random_terminal_data(rng, tree, mesh, scale)
        else:
            raise ConfigError(f"unknown data generator {pc['data']!r}")
        return BackwardProblem(a=a, y_T=y_T, src_phi=source)
    if pc["data"] == "zero":
        z0 = np.zeros(mesh.M)
    elif pc["data"] == "random-smooth":
        z0 = random_spatial_field(rng, mesh, scale)
    else:
        raise ConfigError(f"unknown data generator {pc['data']!r}")
    return ForwardProblem(a=a, z0=z0, src_phi1=source)


def _make_nonlinearity(cfg: dict):
    pc = cfg["problem"]
    if pc["nonlinearity"] == "zero":
        return semilinear_mod.make_zero_nonlinearity()
    if pc["nonlinearity"] == "mix":
        return semilinear_mod.make_mix_nonlinearity(pc["lipschitz"])
    raise ConfigError(f"unknown nonlinearity {pc['nonlinearity']!r}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_weights(cfg: dict, writer: _RunWriter) -> dict:
    mesh, tree = _build_geometry(cfg)
    params = _weight_params(cfg)
    system = build_weight_system(params, tree, mesh,
                                 kappa=cfg["weights"]["kappa"])
    rows = []
    for k, t in enumerate(tree.times):
        for i, x in enumerate(mesh.x):
            rows.append([t, x, system.log_xi[k, i], system.ell[k, i]])
    writer.write_csv("weight_tables.csv", ["t", "x", "log_xi", "ell"], rows)

    check_rows = []
    step = 1e-4 * tree.T
    for tj in system.curve.junctions:
        for order, mism in zip((0, 1, 2), _junction_mismatch(params, tj, step)):
            check_rows.append([params.variant, tj, order, mism])
    writer.write_csv("weight_checks.csv",
                     ["variant", "junction", "derivative_order", "mismatch"],
                     check_rows)
    worst = max(abs(r[3]) for r in check_rows)
    return {"bridge": system.curve.bridge_kind, "worst_junction_mismatch": worst}


def _junction_mismatch(params: WeightParams, t0: float, s: float):
    """One-sided vs one-sided FD estimates of gamma and two derivatives."""
    def val(t):
        return gamma(t, params)[0]

    left = [val(t0 - j * s) for j in range(4)]
    right = [val(t0 + j * s) for j in range(4)]
    g_l, g_r = left[0], right[0]
    d_l = (3 * left[0] - 4 * left[1] + left[2]) / (2 * s)
    d_r = (-3 * right[0] + 4 * right[1] - right[2]) / (2 * s)
    s_l = (2 * left[0] - 5 * left[1] + 4 * left[2] - left[3]) / s**2
    s_r = (2 * right[0] - 5 * right[1] + 4 * right[2] - right[3]) / s**2
    return (g_r - g_l, d_r - d_l, s_r - s_l)


def _cmd_carleman(cfg: dict, writer: _RunWriter) -> dict:
    mesh, tree = _build_geometry(cfg)
    cc = cfg["carleman"]
    tag = cc["estimate"]
    w = cfg["weights"]
    master = cfg["master_seed"]
    map_fn = _thread_map()
    cal = carleman_mod.calibrate_constant(
        tag, cc["calibration_size"], w["lambda"], w["mu"],
        seed_split(master, "calibrate"), tree, mesh, m=w["m"], map_fn=map_fn)
    test = carleman_mod.calibrate_constant(
        tag, cc["test_size"], w["lambda"], w["mu"],
        seed_split(master, "test"), tree, mesh, m=w["m"], map_fn=map_fn)
    rows = []
    for phase, res in (("calibrate", cal), ("test", test)):
        for r in res.reports:
            rows.append([phase, r.estimate, r.lam, r.mu, r.m, r.seed,
                         r.log_lhs, r.log_rhs, r.log_C_emp])
    writer.write_csv("carleman_reports.csv",
                     ["phase", "estimate", "lambda", "mu", "m", "seed",
                      "log_lhs", "log_rhs", "log_C_emp"], rows)
    violations = sum(1 for r in test.reports
                     if not r.degenerate
                     and r.log_C_emp > cal.log_C_cal + math.log(10.0))
    return {"estimate": tag, "log_C_cal": cal.log_C_cal, "iqr": cal.iqr,
            "test_violations": violations, "degenerate": cal.degenerate}


def _cmd_hum(cfg: dict, writer: _RunWriter, direction: str) -> dict:
    mesh, tree = _build_geometry(cfg)
    variant = ("forward-regularized" if direction == "forward"
               else "backward-regularized")
    params = _weight_params(cfg, variant)
    system = build_weight_system(params, tree, mesh,
                                 kappa=cfg["weights"]["kappa"])
    problem = _make_problem(cfg, tree, mesh, direction)
    hum_cfg = _hum_config(cfg, direction)
    sweep = epsilon_sweep(hum_cfg, problem, system, tree, mesh,
                          cfg["hum"]["eps_list"])
    rows = [[cfg["master_seed"], r["eps"], r["residual"], r["J"],
             r["cg_iters"], sweep["slope"]] for r in sweep["rows"]]
    writer.write_csv("hum_sweep.csv",
                     ["seed", "eps", "residual", "J", "cg_iters", "slope"],
                     rows)
    result = solve_null_control(hum_cfg, problem, system, tree, mesh)
    ledger = verify_energy_estimate(result, problem, system, tree, mesh)
    writer.write_csv("energy_ledger.csv", ["term", "log_value"],
                     [[k, v] for k, v in ledger.items()])
    eps_vals = [r["eps"] for r in sweep["rows"]]
    residuals = [max(r["residual"], 1e-300) for r in sweep["rows"]]
    writer.write_svg("hum_sweep.svg", eps_vals, {"residual": residuals},
                     "eps", "endpoint residual", loglog=True)
    if not result.cg_converged:
        raise StabilityError("CG did not converge within the iteration cap")
    return {"direction": direction, "slope": sweep["slope"],
            "ctrl_norm_spread": sweep["ctrl_norm_spread"],
            "residual": result.residual, "log_gap": ledger["log_gap"]}


def _cmd_semilinear(cfg: dict, writer: _RunWriter, direction: str) -> dict:
    mesh, tree = _build_geometry(cfg)
    variant = ("forward-regularized" if direction == "forward"
               else "backward-regularized")
    params = _weight_params(cfg, variant)
    system = build_weight_system(params, tree, mesh,
                                 kappa=cfg["weights"]["kappa"])
    hum_cfg = _hum_config(cfg, direction)
    pc = cfg["picard"]
    master = cfg["master_seed"]
    rng = np.random.default_rng(seed_split(master, "data"))
    if direction == "backward":
        nl = _make_nonlinearity(cfg)
        y_T = random_terminal_data(rng, tree, mesh, cfg["problem"]["data_scale"])
        result, trace = semilinear_mod.picard_backward(
            nl, y_T, system, hum_cfg, tree, mesh, tol=pc["tol"],
            max_iters=pc["max_iters"], seed=seed_split(master, "validate"))
    else:
        pair = semilinear_mod.make_forward_pair(cfg["problem"]["lipschitz"],
                                                0.5 * cfg["problem"]["lipschitz"])
        y_0 = random_spatial_field(rng, mesh, cfg["problem"]["data_scale"])
        result, trace = semilinear_mod.picard_forward(
            pair, y_0, system, hum_cfg, tree, mesh, tol=pc["tol"],
            max_iters=pc["max_iters"], seed=seed_split(master, "validate"))
    rows = []
    for i, lr in enumerate(trace.log_residuals):
        rho = trace.rhos[i - 1] if 1 <= i <= len(trace.rhos) else ""
        rows.append([i + 1, lr, rho, result.residual])
    writer.write_csv("picard_trace.csv",
                     ["iteration", "log_residual_B", "rho",
                      "residual_endpoint"], rows)
    if not trace.converged:
        raise semilinear_mod.PicardDivergenceError(
            f"no convergence in {trace.iterations} iterations")
    return {"direction": direction, "iterations": trace.iterations,
            "consistency_residual": trace.consistency_residual,
            "residual": result.residual}


def _cmd_probe(cfg: dict, writer: _RunWriter) -> dict:
    mesh, tree = _build_geometry(cfg)
    hum_cfg = _hum_config(cfg, "backward")
    nl = _make_nonlinearity(cfg)
    grid = [(lam, mu) for mu in cfg["probe"]["mus"]
            for lam in cfg["probe"]["lambdas"]]
    rows = semilinear_mod.contraction_probe(
        nl, grid, hum_cfg, tree, mesh,
        seed=seed_split(cfg["master_seed"], "probe"),
        weight_eps=cfg["weights"]["eps"], m=cfg["weights"]["m"])
    writer.write_csv("contraction_probe.csv", ["lambda", "mu", "ratio"],
                     [[r["lam"], r["mu"], r["ratio"]] for r in rows])
    worst = max(r["ratio"] for r in rows)
    return {"max_ratio": worst, "rows": len(rows)}


def _cmd_selftest(cfg: dict, writer: _RunWriter) -> dict:
    from .reference import DeterministicHumOracle, dense_control_solution
    from .hum import assemble_functional
    mesh, tree = _build_geometry(cfg)
    master = cfg["master_seed"]
    gates: list[tuple[str, float, float]] = []  # name, value, tolerance

    fine = build_mesh(0.0, 1.0, 199, (0.25, 0.45), (0.30, 0.40))
    u = np.sin(np.pi * fine.x)
    gates.append(("mesh_gradient_oracle",
                  float(np.max(np.abs(gradient(u, fine)
                                      - np.pi * np.cos(np.pi * fine.x)))),
                  1e-3))
    a = standard_coefficients(tree, mesh, seed_split(master, "coefficients"))
    op = TreeOperator(tree, mesh, a)
    gates.append(("adjoint_dot_product",
                  adjoint_discrepancy(op, tree, mesh,
                                      seed=seed_split(master, "gate") % 2**31,
                                      n_pairs=10), 1e-11))

    rng = np.random.default_rng(seed_split(master, "selftest"))
    z = op.forward_solve(random_spatial_field(rng, mesh))
    pair = op.backward_solve(rng.standard_normal((tree.n_leaves, mesh.M)))
    lhs, rhs, scale = duality_identity(op, op, z, pair)
    gates.append(("duality_identity", abs(lhs - rhs) / max(scale, 1e-12),
                  1e-11))

    params = _weight_params(cfg, "backward-regularized")
    system = build_weight_system(params, tree, mesh,
                                 kappa=cfg["weights"]["kappa"])
    problem = BackwardProblem(a=a, y_T=random_terminal_data(rng, tree, mesh))
    hum_cfg = _hum_config(cfg, "backward")
    form = assemble_functional(hum_cfg, problem, system, tree, mesh)
    u0 = rng.standard_normal(form.zero_control().shape) * form.dof_masks
    g = form.gradient(u0)
    worst = 0.0
    for _ in range(5):
        v = rng.standard_normal(u0.shape) * form.dof_masks
        step = 1e-5
        fd = (form.value(u0 + step * v) - form.value(u0 - step * v)) / (2 * step)
        an = float(np.sum(g * v))
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-30))
    gates.append(("hum_gradient_fd", worst, 1e-6))

    tiny_mesh = build_mesh(0.0, 1.0, 5, (0.2, 0.9), (0.3, 0.8))
    tiny_tree = build_tree(3, cfg["tree"]["T"])
    tiny_a = np.ones((tiny_tree.n_nodes, 5)) * (1.0 + 0.3 * np.sin(np.pi * tiny_mesh.x))
    tiny_prob = BackwardProblem(
        a=tiny_a, y_T=rng.standard_normal((tiny_tree.n_leaves, 5)))
    tiny_params = WeightParams(lam=params.lam, mu=params.mu, m=params.m,
                               T=cfg["tree"]["T"],
                               variant="backward-regularized",
                               eps=cfg["weights"]["eps"])
    tiny_system = build_weight_system(tiny_params, tiny_tree, tiny_mesh,
                                      kappa=cfg["weights"]["kappa"])
    tiny_cfg = HumConfig(eps=1e-2, cg_tol=1e-12, cg_max_iters=500,
                         kappa=cfg["weights"]["kappa"])
    tiny_form = assemble_functional(tiny_cfg, tiny_prob, tiny_system,
                                    tiny_tree, tiny_mesh)
    dense = dense_control_solution(tiny_form)
    res = solve_null_control(tiny_cfg, tiny_prob, tiny_system, tiny_tree,
                             tiny_mesh)
    gates.append(("dense_oracle_control",
                  float(np.max(np.abs(dense[0] - res.u_hat))), 1e-8))

    a_prof = 1.0 + 0.3 * np.sin(np.pi * mesh.x)
    det_prob = BackwardProblem(
        a=np.tile(a_prof, (tree.n_nodes, 1)),
        y_T=np.tile(random_spatial_field(rng, mesh), (tree.n_leaves, 1)))
    det_cfg = HumConfig(eps=1e-2, cg_tol=1e-12, cg_max_iters=2000,
                        kappa=cfg["weights"]["kappa"])
    det_res = solve_null_control(det_cfg, det_prob, system, tree, mesh)
    oracle = DeterministicHumOracle(det_cfg, a_prof, det_prob.y_T[0], system,
                                    tree, mesh)
    u_det, _ = oracle.solve()
    worst = 0.0
    for k in range(tree.N):
        worst = max(worst, float(np.max(np.abs(
            det_res.u_hat[tree.depth_slice(k)] - u_det[k]))))
    scale = max(float(np.max(np.abs(u_det))), 1e-30)
    gates.append(("deterministic_hum_oracle", worst / scale, 1e-6))

    step = 1e-4 * tree.T
    worst = 0.0
    for tj in system.curve.junctions:
        mism = _junction_mismatch(system.params, tj, step)
        worst = max(worst, abs(mism[0]), abs(mism[1]) / 10.0,
                    abs(mism[2]) / 1e4)
    gates.append(("weight_junction_c2", worst, 1e-3))

    rows = []
    failures = 0
    for name, value, tol in gates:
        ok = value <= tol
        failures += 0 if ok else 1
        rows.append([name, value, tol, "pass" if ok else "FAIL"])
        print(f"{name:28s} {value:12.3e}  (tol {tol:g})  "
              f"{'pass' if ok else 'FAIL'}")
    writer.write_csv("selftest.csv", ["gate", "value", "tolerance", "status"],
                     rows)
    if failures:
        raise StabilityError(f"{failures} selftest gate(s) failed")
    return {"gates": len(gates), "failures": failures}


# ---------------------------------------------------------------------------
# entry point


def run(subcommand: str, config_path: str | None = None,
        overrides=()) -> int:
    """Execute one subcommand; returns the process exit status."""
    try:
        cfg = load_config(config_path, overrides)
    except (ConfigError, MeshConfigError, TreeConfigError,
            WeightConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    writer = _RunWriter(cfg, subcommand)
    try:
        if subcommand == "weights":
            summary = _cmd_weights(cfg, writer)
        elif subcommand == "carleman":
            summary = _cmd_carleman(cfg, writer)
        elif subcommand == "hum-backward":
            summary = _cmd_hum(cfg, writer, "backward")
        elif subcommand == "hum-forward":
            summary = _cmd_hum(cfg, writer, "forward")
        elif subcommand == "semilinear-backward":
            summary = _cmd_semilinear(cfg, writer, "backward")
        elif subcommand == "semilinear-forward":
            summary = _cmd_semilinear(cfg, writer, "forward")
        elif subcommand == "probe-contraction":
            summary = _cmd_probe(cfg, writer)
        elif subcommand == "selftest":
            summary = _cmd_selftest(cfg, writer)
        else:
            print(f"unknown subcommand {subcommand!r}", file=sys.stderr)
            return 1
    except (ConfigError, MeshConfigError, TreeConfigError, WeightConfigError,
            ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (StabilityError, semilinear_mod.PicardDivergenceError,
            ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        writer.finish(cfg["master_seed"], {"error": str(exc)})
        return 2
    writer.finish(cfg["master_seed"], summary)
    print(json.dumps(summary, default=_json_default, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spdecontrol",
        description="Null-controllability experiments for parabolic SPDEs "
                    "on scenario trees")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("-c", "--config", default=None,
                        help="JSON config file (defaults are built in)")
    parser.add_argument("--set", action="append", default=[], dest="sets",
                        metavar="KEY=VALUE",
                        help="override a config leaf, e.g. tree.N=8")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return run(args.subcommand, args.config, args.sets)


if __name__ == "__main__":
    sys.exit(main())
