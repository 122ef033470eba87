from __future__ import annotations

import numpy as np
import pytest

from conftest import random_panel
from stagsynth.config import PredictandSpec, StudyConfig
from stagsynth.errors import InvalidConfig, MissingJointCovariance
from stagsynth.pipeline import period_specs, prepare, run_intervals, run_many

FAST = dict(draws=40)


def _panel(seed=0, **kw):
    kw = {"J": 3, "T0": 20, "T_post": 3, **kw}
    return random_panel(np.random.default_rng(seed), **kw)


def test_period_specs():
    spec = PredictandSpec("individual", unit="a", k=2)
    assert period_specs(StudyConfig(spec)) == [spec]
    ks = [s.k for s in period_specs(StudyConfig(spec, horizon=3))]
    assert ks == [0, 1, 2, 3]
    with pytest.raises(InvalidConfig):
        period_specs(StudyConfig(spec, simultaneous=True))
    with pytest.raises(InvalidConfig):
        period_specs(StudyConfig(PredictandSpec("unit_average", unit="a"), horizon=1))


def test_interval_contains_point_estimate():
    res = run_intervals(_panel(), StudyConfig(PredictandSpec("individual", unit="a", k=1), **FAST))
    (iv,) = res.pointwise
    assert iv.lower <= iv.tau_hat <= iv.upper
    assert iv.lower == pytest.approx(iv.tau_hat + iv.M1L - iv.M2U - iv.eps_delta, abs=1e-12)
    assert iv.upper == pytest.approx(iv.tau_hat + iv.M1U - iv.M2L + iv.eps_delta, abs=1e-12)
    assert iv.draws_used <= 40


def test_simultaneous_rows_share_group():
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), horizon=2, simultaneous=True, **FAST)
    res = run_intervals(_panel(1), cfg)
    assert len(res.pointwise) == len(res.simultaneous) == 3
    assert len({iv.group for iv in res.simultaneous}) == 1
    assert all(iv.simultaneous for iv in res.simultaneous)
    for pw, sm in zip(res.pointwise, res.simultaneous):
        assert sm.tau_hat == pw.tau_hat
        assert sm.lower <= pw.lower and pw.upper <= sm.upper


@pytest.mark.parametrize("method", ["max_ineq", "bonferroni", "scheffe"])
def test_simultaneous_methods(method):
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), horizon=2, simultaneous=True, sim_method=method,
                      **FAST)
    res = run_intervals(_panel(2), cfg)
    assert all(np.isfinite([iv.lower, iv.upper]).all() for iv in res.simultaneous)
    assert res.simultaneous[0].diagnostics["sim_method"] == method


def test_scheffe_needs_enough_residuals():
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), horizon=2, simultaneous=True, sim_method="scheffe",
                      **FAST)
    with pytest.raises(MissingJointCovariance):
        run_intervals(_panel(3, T0=3), cfg)


@pytest.mark.parametrize("method", ["subgaussian", "location_scale", "quantile_reg"])
def test_oos_methods_run(method):
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), oos_method=method, **FAST)
    (iv,) = run_intervals(_panel(4), cfg).pointwise
    assert iv.M2L <= iv.M2U


def test_cohort_strategies_agree_on_single_member():
    ds = _panel(5)
    a = run_intervals(ds, StudyConfig(PredictandSpec("cohort_att", s0=21, k=0), **FAST)).pointwise[0]
    b = run_intervals(ds, StudyConfig(PredictandSpec("cohort_att", s0=21, k=0, strategy="aggregate_unit"),
                                      **FAST)).pointwise[0]
    assert a.tau_hat == pytest.approx(b.tau_hat, abs=1e-6)


def test_att_over_staggered_units():
    ds = _panel(6, N1=2, stagger=2)
    res = run_intervals(ds, StudyConfig(PredictandSpec("att", k=1), **FAST))
    pv = res.prepared.predictors[0]
    assert pv.units == ("a", "b")
    assert res.pointwise[0].lower <= res.pointwise[0].upper


def test_batched_runs_match_single_runs():
    jobs = [(_panel(7), StudyConfig(PredictandSpec("individual", unit="a", k=k), seed=3, **FAST)) for k in (0, 1)]
    batched = run_many(jobs)
    for (ds, cfg), res in zip(jobs, batched):
        single = run_intervals(ds, cfg).pointwise[0]
        assert res.pointwise[0].lower == pytest.approx(single.lower, abs=1e-7)
        assert res.pointwise[0].upper == pytest.approx(single.upper, abs=1e-7)


def test_deterministic_given_seed():
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), seed=11, **FAST)
    a = run_intervals(_panel(8), cfg).pointwise[0]
    b = run_intervals(_panel(8), cfg).pointwise[0]
    assert (a.lower, a.upper) == (b.lower, b.upper)


def test_prepare_uses_last_period_pool():
    ds = _panel(9, N1=2, stagger=1)
    prep = prepare(ds, StudyConfig(PredictandSpec("individual", unit="a"), horizon=2, **FAST))
    # at k = 2 unit b is already treated, so it cannot be a donor for a
    assert "b" not in prep.design.donor_pools["a"]
