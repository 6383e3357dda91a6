"""Experiment runner: declarative JSON configs to CSV artifacts.

Every pipeline consumes a config (pipeline name, model, grid, jump marks,
path count, seed, estimator settings), runs a fixed sequence of module
calls, and writes machine-readable CSVs plus a plain-text summary with one
PASS/FAIL line per check.  Outputs are a pure function of (config, seed):
the only randomness flows through the seeded path generator.

Exit codes: 0 all checks pass, 1 a check fails, 2 config error,
3 numerical/estimator error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint_bsde import solve_bsde_p, variational_inequality
from .adjoint_malliavin import hv_stationarity, malliavin_adjoint
from .cost import estimate_cost, gateaux_of_cost
from .errors import ConfigurationError, ConvergenceError, DegeneracyError, \
    DomainError, EstimatorError, SimulationError, UsageError
from .forward import gateaux_residual, simulate_ensemble
from .lq import lq_fixed_point, lq_malliavin_control
from .malliavin import duality_fixtures, verify_duality_brownian, \
    verify_duality_poisson
from .model import ControlPolicy, builtin_model
from .paths import EMPTY_LEVY, LevyMeasure, TimeGrid, generate_ensemble

PIPELINES = [
    ("duality-suite", "integration-by-parts fixtures for both noises"),
    ("gateaux-suite", "variation-rate slope and cost-derivative residuals"),
    ("malliavin-adjoint", "closed-form adjoint assembly and flow checks"),
    ("bsde-suite", "backward-equation adjoints with Picard diagnostics"),
    ("lq-solve", "fixed-point control solve with cost trace"),
    ("cross-check", "both adjoint engines on one comparable model"),
]

_TOP_KEYS = {"pipeline", "seed", "n_paths", "out_dir", "grid", "levy",
             "model", "estimator"}
_GRID_KEYS = {"T", "steps"}
_LEVY_KEYS = {"marks"}
_MARK_KEYS = {"z", "rate"}
_MODEL_KEYS = {"name", "params"}
_EST_KEYS = {"ridge", "damping", "eps", "max_sweeps", "control"}


def _reject_unknown(d, allowed, where):
    extra = set(d) - allowed
    if extra:
        raise ConfigurationError(f"unknown key(s) {sorted(extra)} in {where}")


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    if "pipeline" not in raw:
        raise ConfigurationError("config needs a 'pipeline' key")
    names = [n for n, _ in PIPELINES]
    if raw["pipeline"] not in names:
        raise ConfigurationError(
            f"unknown pipeline {raw['pipeline']!r}; choose from {names}")
    cfg = {
        "pipeline": raw["pipeline"],
        "seed": int(raw.get("seed", 0)),
        "n_paths": int(raw.get("n_paths", 20000)),
        "out_dir": raw.get("out_dir", "out"),
        "grid": dict(raw.get("grid", {})),
        "levy": dict(raw.get("levy", {})),
        "model": dict(raw.get("model", {})),
        "estimator": dict(raw.get("estimator", {})),
    }
    _reject_unknown(cfg["grid"], _GRID_KEYS, "grid")
    _reject_unknown(cfg["levy"], _LEVY_KEYS, "levy")
    _reject_unknown(cfg["model"], _MODEL_KEYS, "model")
    _reject_unknown(cfg["estimator"], _EST_KEYS, "estimator")
    for mk in cfg["levy"].get("marks", []):
        _reject_unknown(mk, _MARK_KEYS, "levy.marks entry")
    cfg["grid"] = {"T": float(cfg["grid"].get("T", 1.0)),
                   "steps": int(cfg["grid"].get("steps", 50))}
    if cfg["n_paths"] <= 0:
        raise ConfigurationError("n_paths must be positive")
    return cfg


def _build(cfg):
    grid = TimeGrid(T=cfg["grid"]["T"], N=cfg["grid"]["steps"])
    marks = tuple((float(m["z"]), float(m["rate"]))
                  for m in cfg["levy"].get("marks", []))
    levy = LevyMeasure(marks=marks) if marks else EMPTY_LEVY
    noise = generate_ensemble(grid, levy, n_paths=cfg["n_paths"],
                              seed=cfg["seed"])
    model = None
    if cfg["model"]:
        model = builtin_model(cfg["model"].get("name", "bounded_nonlinear"),
                              cfg["model"].get("params"), levy=levy)
    return grid, levy, noise, model


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(c) if isinstance(c, float) else str(c)
                              for c in row))
    path.write_text("\n".join(lines) + "\n")


def _fmt(x):
    return repr(float(x))


# -- pipelines ---------------------------------------------------------------


def _pipe_duality(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    rows = []
    for kind, functional, integrand in duality_fixtures():
        if kind == "poisson" and levy.n_marks == 0:
            continue
        if kind == "brownian":
            rep = verify_duality_brownian(functional, integrand, grid, levy,
                                          noise=noise)
        else:
            rep = verify_duality_poisson(functional, integrand, grid, levy,
                                         noise=noise)
        rows.append((rep.fixture, kind, rep.lhs, rep.rhs, rep.se, rep.ok))
        checks.append((f"duality[{rep.fixture}|{kind}]", rep.ok,
                       f"|diff|={abs(rep.diff):.3e} 3se={3 * rep.se:.3e}"))
    _write_csv(out / "duality.csv",
               ["fixture", "kind", "lhs", "rhs", "se", "ok"], rows)


def _default_model(cfg, levy, fallback="bounded_nonlinear"):
    name = cfg["model"].get("name", fallback)
    return builtin_model(name, cfg["model"].get("params"), levy=levy)


def _pipe_gateaux(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    model = _default_model(cfg, levy)
    u = ControlPolicy.constant(0.1, grid)
    d = ControlPolicy.constant(1.0, grid)
    eps_list = (0.1, 0.05, 0.025)
    base = simulate_ensemble(model, u, noise)
    sups = []
    for eps in eps_list:
        pert = simulate_ensemble(model, u.perturbed(d, eps), noise)
        sups.append(float(np.max(np.mean((pert.x - base.x) ** 2, axis=0))))
    slope = np.polyfit(np.log(eps_list), np.log(sups), 1)[0]
    res = gateaux_residual(model, u, d, eps_list, noise)
    g = gateaux_of_cost(model, u, d, noise, eps_list)
    rows = [(eps, sup, res[i][1], res[i][2], g["fd"][i][1], g["fd"][i][2])
            for i, (eps, sup) in enumerate(zip(eps_list, sups))]
    _write_csv(out / "gateaux.csv",
               ["eps", "sup_sq_gap", "x1_residual", "rho1_residual",
                "cost_fd", "cost_fd_se"], rows)
    _write_csv(out / "gateaux_analytic.csv", ["value", "se"],
               [(g["analytic"][0], g["analytic"][1])])
    checks.append(("variation-rate slope", abs(slope - 2.0) <= 0.2,
                   f"slope={slope:.3f}"))
    dec = all(res[i + 1][1] <= res[i][1] for i in range(len(res) - 1))
    checks.append(("x1 residual decreasing", dec,
                   " ".join(f"{r[1]:.3e}" for r in res)))


def _pipe_malliavin(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    model = _default_model(cfg, levy, fallback="lq_plain")
    u = ControlPolicy.constant(0.1, grid)
    st = simulate_ensemble(model, u, noise)
    adj = malliavin_adjoint(model, u, noise, with_kr=False)
    flow_err = 0.0
    mid = grid.N // 2
    flow_err = float(np.max(np.abs(
        np.exp(adj.expo[:, mid] - adj.expo[:, 0])
        * np.exp(adj.expo[:, grid.N] - adj.expo[:, mid])
        - np.exp(adj.expo[:, grid.N] - adj.expo[:, 0]))))
    rows = [(grid.times[i], adj.Sigma[:, i].mean(), adj.Pi[:, i].mean(),
             adj.Lambda[:, i].mean(), adj.q[:, i].mean())
            for i in range(grid.N + 1)]
    _write_csv(out / "adjoint.csv",
               ["t", "Sigma_mean", "Pi_mean", "Lambda_mean", "q_mean"], rows)
    hv = hv_stationarity(model, u, adj, st, noise)
    _write_csv(out / "stationarity.csv", ["t", "rms", "se"],
               [tuple(r) for r in hv])
    checks.append(("flow property", flow_err <= 1e-10, f"err={flow_err:.2e}"))
    checks.append(("adjoint finiteness", bool(np.isfinite(adj.q).all()),
                   "q finite"))


def _pipe_bsde(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    model = _default_model(cfg, levy, fallback="lq_meanfield")
    u = ControlPolicy.constant(0.1, grid)
    st = simulate_ensemble(model, u, noise)
    sol = solve_bsde_p(model, st, noise)
    rows = [(grid.times[i], sol.P[:, i].mean(), sol.p[:, i].mean(),
             sol.Q[:, i].mean() if i < grid.N else 0.0,
             sol.q[:, i].mean() if i < grid.N else 0.0)
            for i in range(grid.N + 1)]
    _write_csv(out / "bsde.csv", ["t", "P_mean", "p_mean", "Q_mean", "q_mean"],
               rows)
    _write_csv(out / "picard.csv", ["sweep", "rel_move"],
               list(enumerate(sol.picard_moves, start=1)))
    checks.append(("picard settled", sol.sweeps <= 10,
                   f"sweeps={sol.sweeps} last={sol.picard_moves[-1]:.2e}"))
    checks.append(("backward finiteness",
                   bool(np.isfinite(sol.p).all() and np.isfinite(sol.P).all()),
                   "P,p finite"))


def _pipe_lq(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    est = cfg["estimator"]
    name = cfg["model"].get("name", "lq_meanfield")
    kwargs = dict(max_sweeps=int(est.get("max_sweeps", 12)),
                  damping=float(est.get("damping", 0.5)))
    model = builtin_model(name, cfg["model"].get("params"), levy=levy)
    if name == "lq_plain":
        rep = lq_malliavin_control(model, noise, **kwargs)
    else:
        rep = lq_fixed_point(model, noise, **kwargs)
    _write_csv(out / "sweeps.csv", ["sweep", "J", "J_se", "sup_change"],
               [(s["sweep"], s["J"], s["J_se"], s["sup_change"])
                for s in rep.sweeps])
    _write_csv(out / "control.csv", ["t", "k0", "k1", "k2"],
               [(grid.times[i], *rep.final_policy.knots[i])
                for i in range(grid.N)])
    _write_csv(out / "cost.csv", ["J", "se", "n_paths"],
               [(rep.J_final.value, rep.J_final.se, rep.J_final.n_paths)])
    if rep.trivial:
        checks.append(("control-free shortcut", True,
                       f"u = M, 0 sweeps, J={rep.J_final.value:.5f}"))
    else:
        checks.append(("fixed point converged", rep.converged and not rep.diverged,
                       f"{len(rep.sweeps)} sweeps, J={rep.J_final.value:.5f}"))
        if rep.J_initial is not None:
            band = 3.0 * np.hypot(rep.J_final.se, rep.J_initial.se)
            checks.append(("cost descent",
                           rep.J_final.value <= rep.J_initial.value + band,
                           f"{rep.J_initial.value:.5f} -> {rep.J_final.value:.5f}"))


def _pipe_cross(cfg, out, checks):
    grid, levy, noise, _ = _build(cfg)
    model = _default_model(cfg, levy, fallback="lq_plain")
    if model.mean_field_in_state:
        raise ConfigurationError("cross-check needs a model both engines "
                                 "accept (no mean field in the dynamics)")
    u = ControlPolicy.constant(0.1, grid)
    st = simulate_ensemble(model, u, noise)
    adj = malliavin_adjoint(model, u, noise, with_kr=False)
    sol = solve_bsde_p(model, st, noise)
    n = noise.n_paths
    rows = []
    worst = 0.0
    for i in range(grid.N + 1):
        qm, pm = adj.q[:, i].mean(), sol.p[:, i].mean()
        se = float(np.hypot(adj.q[:, i].std(ddof=1), sol.p[:, i].std(ddof=1))
                   / np.sqrt(n))
        z = abs(qm - pm) / max(se + 0.1 * grid.dt * max(abs(qm), 1.0), 1e-300)
        worst = max(worst, z)
        rows.append((grid.times[i], qm, pm, se))
    _write_csv(out / "crosscheck.csv", ["t", "q_mean", "p_mean", "se"], rows)
    checks.append(("engines agree", worst <= 3.0, f"max z={worst:.2f}"))


_RUNNERS = {
    "duality-suite": _pipe_duality,
    "gateaux-suite": _pipe_gateaux,
    "malliavin-adjoint": _pipe_malliavin,
    "bsde-suite": _pipe_bsde,
    "lq-solve": _pipe_lq,
    "cross-check": _pipe_cross,
}


def run(config_path, seed=None, n_paths=None, out_dir=None) -> int:
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg["seed"] = int(seed)
        if n_paths is not None:
            cfg["n_paths"] = int(n_paths)
        if out_dir is not None:
            cfg["out_dir"] = str(out_dir)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(
            json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"config error: cannot write outputs: {exc}", file=sys.stderr)
        return 2
    checks: list[tuple[str, bool, str]] = []
    try:
        _RUNNERS[cfg["pipeline"]](cfg, out, checks)
    except (ConfigurationError, UsageError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, EstimatorError, ConvergenceError,
            DegeneracyError) as exc:
        print(f"{type(exc).__module__}.{type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3
    lines = [f"pipeline: {cfg['pipeline']}  seed: {cfg['seed']}  "
             f"paths: {cfg['n_paths']}"]
    ok_all = True
    for name, ok, detail in checks:
        ok_all = ok_all and bool(ok)
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok_all else 1


def list_pipelines() -> list:
    return list(PIPELINES)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfcontrol",
        description="Monte Carlo toolkit for partially observed mean-field "
                    "jump-diffusion control experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a pipeline from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--paths", type=int, default=None)
    p_run.add_argument("--out", default=None)
    sub.add_parser("list", help="list available pipelines")
    args = parser.parse_args(argv)
    if args.command == "list":
        for name, desc in PIPELINES:
            print(f"{name}: {desc}")
        return 0
    return run(args.config, seed=args.seed, n_paths=args.paths,
               out_dir=args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
