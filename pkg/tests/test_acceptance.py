"""The nine acceptance criteria, each reported as one PASS/FAIL line."""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import random_panel, record
from stagsynth import cli
from stagsynth.config import ConstraintSpec, CovariateSpec, PredictandSpec, StudyConfig
from stagsynth.conic import canonicalize_bound, bound_value, cone_violation, estimate_weights, solve_many
from stagsynth.constraints import epsilon_delta, rho_formula, to_smooth
from stagsynth.conic import norm_cone_epigraph, epigraph_vector, in_cone
from stagsynth.harness import DgpSpec, coverage_study, generate, write_panel
from stagsynth.panel import build_design
from stagsynth.pipeline import run_intervals, run_many
from stagsynth.predictands import build_predictor
from stagsynth.uncertainty import maxineq_halfwidth, subgaussian_halfwidth


def _report(name: str, ok: bool, detail: str = "") -> None:
    record(name, ok, detail)
    print(("PASS " if ok else "FAIL ") + name + (f" ({detail})" if detail else ""))


def test_1_formula_reproduction():
    t0 = time.perf_counter()
    sg = subgaussian_halfwidth(1.0, 0.05)
    mx = maxineq_halfwidth(1.0, 19, 0.05)
    rho = rho_formula(100, 1.0, 0.5)
    # ridge: one unit, ||p||_1 = 1, ||beta||_2 = 1, rho = 0.1; "exactly" means up to the
    # rounding of 0.1**2, which is not representable
    rng = np.random.default_rng(0)
    ds = random_panel(rng, J=2, T0=6)
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), constraint=ConstraintSpec("ridge", Q2=1.0))
    design = build_design(ds, cfg)
    smooth = to_smooth(cfg.constraint, design)
    beta = np.array([0.6, 0.8])
    p = np.array([0.25, 0.75])
    eps = epsilon_delta(smooth, beta, p, {"a": 0.1}, ("a",))
    elapsed = time.perf_counter() - t0
    ok = (abs(sg - 2.71620) <= 1e-4 and abs(mx - 3.65681) <= 1e-4 and abs(rho - 0.21460) <= 1e-4
          and abs(eps - 0.005) <= 4 * math.ulp(0.005))
    _report("1 formula reproduction", ok,
            f"subgauss={sg:.6f} maxineq={mx:.6f} rho={rho:.6f} ridge_eps={eps!r} in {elapsed * 1e3:.1f} ms")
    assert ok


FAMILIES = [("simplex", {}), ("lasso", {"Q1": 0.8}), ("ridge", {"Q2": 0.6}), ("l1l2", {"Q2": 0.8}), ("ols", {})]


def _oracle_instance(rng, family, kw):
    J = int(rng.integers(1, 4))
    T0 = int(rng.integers(5, 11))
    ds = random_panel(rng, J=J, T0=T0, noise=0.7)
    if family == "l1l2":
        kw = {"Q2": max(kw["Q2"], 1.0 / math.sqrt(J) + 0.05)}
    cov = CovariateSpec(constant=("y",)) if rng.random() < 0.3 and family != "ols" else CovariateSpec()
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), constraint=ConstraintSpec(family, **kw),
                      covariates=cov)
    return ds, cfg


def test_2_solver_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_rel, worst_cone, bad = 0.0, 0.0, []
    for family, kw in FAMILIES:
        for trial in range(50):
            ds, cfg = _oracle_instance(rng, family, kw)
            design = build_design(ds, cfg)
            fit = estimate_weights(design, cfg.constraint)
            blocks = [design.w_cols[u] for u in design.treated]
            c = cfg.constraint
            ref = oracles.constrained_ls(design.A, design.Z, design.V, blocks, family, c.Q1, c.Q2)
            f_ref = oracles.objective(design.A, design.Z, design.V, ref)
            rel = abs(fit.objective - f_ref) / max(abs(f_ref), 1.0)
            prog, x = fit.program.program, fit.solution.x
            cone = float(cone_violation(prog.h - prog.G @ x, prog.cones).max(initial=0.0))
            worst_rel, worst_cone = max(worst_rel, rel), max(worst_cone, cone)
            if rel > 1e-5 or cone > 1e-8:
                bad.append((family, trial, rel, cone))
            if family == "l1l2" and design.J_total <= 3 and design.C.shape[1] == 0:
                grid = oracles.simplex_grid(design.J_total, 60)
                grid = grid[np.linalg.norm(grid, axis=1) <= c.Q2]
                vals = [oracles.objective(design.A, design.Z, design.V, g) for g in grid]
                if vals and fit.objective > min(vals) + 1e-7:
                    bad.append((family, trial, "grid", min(vals) - fit.objective))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 30
    _report("2 solver oracle equivalence", ok,
            f"250 fits, max rel obj diff {worst_rel:.2e}, max cone violation {worst_cone:.2e}, {elapsed:.1f} s")
    assert not bad, bad[:5]
    assert elapsed < 30


def test_3_socp_trick():
    cones = [("q", 4)]
    boundary = epigraph_vector(np.array([3.0, 4.0]), 25.0)
    r_boundary = float(np.linalg.norm(boundary[1:]))
    zero = epigraph_vector(np.zeros(1), 0.0)
    outside = epigraph_vector(np.array([1.0]), 0.5)
    inside = epigraph_vector(np.array([1.0]), 1.5)
    G, h = norm_cone_epigraph(np.eye(2), np.zeros(2), y_off=25.0)
    via_rows = h - G @ np.zeros(2)
    ok = (r_boundary == 26.0 and boundary[0] == 26.0 and in_cone(boundary, [("q", 4)])
          and np.array_equal(boundary[1:], [-24.0, 6.0, 8.0])
          and zero[0] == 1.0 and np.linalg.norm(zero[1:]) == 1.0 and in_cone(zero, [("q", 3)])
          and not in_cone(outside, [("q", 3)]) and abs(np.linalg.norm(outside[1:]) - math.sqrt(4.25)) < 1e-15
          and in_cone(inside, [("q", 3)]) and G.shape == (4, 2) and via_rows[0] == 26.0
          and cones == [("q", 4)])
    _report("3 SOCP trick unit suite", ok, f"||(-24,6,8)|| = {r_boundary}, exterior norm {np.linalg.norm(outside[1:]):.4f} > 1.5")
    assert ok


def test_4_bound_closed_form():
    rng = np.random.default_rng(4)
    draws = rng.normal(size=200) * 1.3
    Q = np.eye(1)
    progs, bps = [], []
    for g in draws:
        for d in ("inf", "sup"):
            bp = canonicalize_bound(d, np.ones(1), Q, np.array([g]), None)
            bps.append(bp)
            progs.append(bp.program)
    sols = solve_many(progs)
    vals = np.array([bound_value(bp, s).value for bp, s in zip(bps, sols)]).reshape(200, 2)
    lo_ref, hi_ref = oracles.scalar_bounds(draws)
    err = max(np.abs(vals[:, 1] - 2 * np.maximum(draws, 0)).max(), np.abs(vals[:, 0] - lo_ref).max(),
              np.abs(vals[:, 1] - hi_ref).max())
    ok = err <= 1e-6
    _report("4 bound-program closed form", ok, f"max |sup - 2 max(G,0)| over 200 draws = {err:.2e}")
    assert ok


def _nested(inner, outer) -> bool:
    return outer.lower <= inner.lower and inner.upper <= outer.upper


def test_5_sign_nesting_monotonicity():
    rng = np.random.default_rng(5)
    ds = random_panel(rng, J=5, T0=20, T_post=4, N1=2, stagger=1)
    checks = 0
    failures = []
    for family, kw in FAMILIES:
        for sim in ("max_ineq", "bonferroni"):
            base = StudyConfig(PredictandSpec("individual", unit="a"), constraint=ConstraintSpec(family, **kw),
                               horizon=2, simultaneous=True, sim_method=sim, draws=100, seed=11)
            loose = replace(base, alpha1=0.1)
            loose2 = replace(base, alpha2=0.1)
            r0, r1, r2 = run_many([(ds, base), (ds, loose), (ds, loose2)])
            for r in (r0, r1, r2):
                for iv in [*r.pointwise, *r.simultaneous]:
                    checks += 1
                    if not iv.M1L <= 0.0 <= iv.M1U:
                        failures.append(("sign", family, iv.label))
                for pw, sm in zip(r.pointwise, r.simultaneous):
                    checks += 1
                    if not _nested(pw, sm):
                        failures.append(("simultaneous", family, sim, pw.label))
            for a, b in [(r1, r0), (r2, r0)]:
                for ia, ib in zip(a.pointwise, b.pointwise):
                    checks += 1
                    if not _nested(ia, ib):
                        failures.append(("alpha", family, ia.label))
    ok = not failures
    _report("5 sign/nesting/monotonicity", ok, f"{checks} exact inclusion checks, {len(failures)} violations")
    assert ok, failures


def test_6_monte_carlo_coverage():
    spec = DgpSpec(J=10, T0=50, N1=3, stagger=5, T_post=5, sigma=1.0, R=500, seed=2026)
    cfg = StudyConfig(PredictandSpec("individual", unit="t00"), alpha1=0.05, alpha2=0.05, draws=200,
                      u_missp=False, e_regressors="constant", seed=99)
    t0 = time.perf_counter()
    rep = coverage_study(spec, cfg, chunk=25)
    elapsed = time.perf_counter() - t0
    worst = min(rep.coverage.values())
    cover = ", ".join(f"{k}={v:.3f}" for k, v in rep.coverage.items())
    ok = worst >= 0.88 and rep.failure_rate == 0.0 and elapsed < 600
    _report("6 Monte Carlo coverage", ok,
            f"R=500, nominal 0.90: {cover}; pooled {rep.overall:.3f}; failures {rep.failure_rate:.3f}; "
            f"{elapsed / 60:.1f} min")
    assert worst >= 0.88
    assert elapsed < 600


def test_7_noiseless_identification():
    w0 = tuple(np.random.default_rng(7).dirichlet(np.full(10, 3.0)))
    spec = DgpSpec(J=10, T0=50, N1=1, T_post=3, sigma=0.0, w0=w0, effect=1.0, R=1, seed=7)
    ds, truth = generate(spec, 0)
    cfg = StudyConfig(PredictandSpec("individual", unit="t00", k=0), seed=1)
    res = run_intervals(ds, cfg)
    fit = res.prepared.fit
    w_hat = np.array([fit.weights["t00"][f"d{j:02d}"] for j in range(10)])
    err = float(np.abs(w_hat - np.asarray(w0)).max())
    iv = res.pointwise[0]
    collapse = max(abs(iv.lower - (truth.effect - iv.eps_delta)), abs(iv.upper - (truth.effect + iv.eps_delta)))
    ok = err <= 1e-6 and collapse <= 1e-6
    _report("7 noiseless identification", ok, f"||w_hat - w0||_inf = {err:.2e}, interval [{iv.lower:.9f}, "
            f"{iv.upper:.9f}] vs effect 1 +/- eps {iv.eps_delta}")
    assert ok


def test_8_determinism(tmp_path):
    spec = DgpSpec(R=1, seed=8, N1=2, T_post=3)
    ds, _ = generate(spec, 0)
    write_panel(ds, tmp_path / "panel.csv")
    (tmp_path / "run.cfg").write_text(
        "data.path = panel.csv\npredictand.kind = individual\npredictand.unit = t01\n"
        "constraint.family = lasso\nstudy.seed = 123\nstudy.horizon = 2\nstudy.simultaneous = true\n")
    outs = []
    for n in range(2):
        out = tmp_path / f"out{n}.json"
        assert cli.main(["intervals", "--config", str(tmp_path / "run.cfg"), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 100
    _report("8 determinism", ok, f"{len(outs[0])} bytes, identical={outs[0] == outs[1]}")
    assert ok


def test_9_predictand_linearity():
    rng = np.random.default_rng(9)
    ds = random_panel(rng, J=6, T0=15, T_post=3, N1=3, stagger=1)
    worst = 0.0
    for k in range(3):
        cfg = StudyConfig(PredictandSpec("att", k=k))
        design = build_design(ds, cfg)
        beta = estimate_weights(design, cfg.constraint).beta
        att = build_predictor(cfg.predictand, ds, design).tau_hat(beta)
        indiv = [build_predictor(PredictandSpec("individual", unit=u, k=k), ds, design).tau_hat(beta)
                 for u in design.treated]
        worst = max(worst, abs(att - float(np.mean(indiv))))
    ok = worst <= 1e-12
    _report("9 predictand linearity", ok, f"max |att - mean individual| = {worst:.1e}")
    assert ok
