from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import random_panel
from stagsynth.config import CovariateSpec, PredictandSpec, StudyConfig
from stagsynth.errors import EmptyCohort, InvalidConfig, PeriodOutOfRange
from stagsynth.panel import PanelDataset, build_design
from stagsynth.predictands import AVE_UNIT, aggregate_cohort, build_post_row, build_predictor


def _post_row_panel():
    recs = []
    for t in range(1, 9):
        recs.append(("a", t, "y", float(t), 6.0))
        recs.append(("d1", t, "y", 1.1 if t == 7 else 0.3 * t, math.inf))
        recs.append(("d2", t, "y", 2.2 if t == 7 else 0.1 * t * t, math.inf))
    return PanelDataset.from_records(recs)


def test_post_row_assembly():
    ds = _post_row_panel()
    cfg = StudyConfig(PredictandSpec("individual", unit="a", k=1),
                      covariates=CovariateSpec(constant=("y",), trend=("y",)))
    design = build_design(ds, cfg)
    np.testing.assert_array_equal(build_post_row(ds, design, "a", 7), [1.1, 2.2, 1.0, 7.0])


def test_post_row_rejects_never_treated():
    ds = _post_row_panel()
    design = build_design(ds, StudyConfig(PredictandSpec("individual", unit="a")))
    with pytest.raises(InvalidConfig):
        build_post_row(ds, design, "d1", 7)


def test_post_row_second_feature_constant_is_zero():
    rng = np.random.default_rng(4)
    ds = random_panel(rng, J=2, T0=6, M=2)
    cfg = StudyConfig(PredictandSpec("individual", unit="a"), covariates=CovariateSpec(constant=("y", "x1")))
    design = build_design(ds, cfg)
    row = build_post_row(ds, design, "a", 7)
    labels = design.r_labels["a"]
    g = dict(zip(labels, row[len(design.w_cols["a"]):]))
    assert g[("constant", "y")] == 1.0
    assert g[("constant", "x1")] == 0.0


def _staggered():
    rng = np.random.default_rng(11)
    return random_panel(rng, J=3, T0=8, N1=2, stagger=2, T_post=3)


def test_individual_zero_padding():
    ds = _staggered()
    spec = PredictandSpec("individual", unit="b", k=1)
    cfg = StudyConfig(spec, treated_units=("a", "b"), covariates=CovariateSpec(constant=("y",)))
    design = build_design(ds, cfg)
    pv = build_predictor(spec, ds, design)
    assert not np.any(pv.p_tau[design.unit_cols("a")])
    t = int(ds.adoption["b"]) + 1
    np.testing.assert_array_equal(pv.p_tau[design.unit_cols("b")], build_post_row(ds, design, "b", t))
    assert pv.observed == ds.value("b", t)


def test_att_with_one_unit_equals_individual():
    rng = np.random.default_rng(2)
    ds = random_panel(rng, J=3, T0=7, T_post=3)
    design = build_design(ds, StudyConfig(PredictandSpec("att", k=2)))
    att = build_predictor(PredictandSpec("att", k=2), ds, design)
    ind = build_predictor(PredictandSpec("individual", unit="a", k=2), ds, design)
    np.testing.assert_array_equal(att.p_tau, ind.p_tau)
    assert att.observed == ind.observed


def test_unit_average_single_period_equals_individual():
    rng = np.random.default_rng(6)
    ds = random_panel(rng, J=2, T0=5, T_post=1)
    design = build_design(ds, StudyConfig(PredictandSpec("unit_average", unit="a")))
    avg = build_predictor(PredictandSpec("unit_average", unit="a"), ds, design)
    ind = build_predictor(PredictandSpec("individual", unit="a", k=0), ds, design)
    np.testing.assert_array_equal(avg.p_tau, ind.p_tau)


def test_unit_average_is_mean_of_rows():
    rng = np.random.default_rng(7)
    ds = random_panel(rng, J=2, T0=5, T_post=4)
    design = build_design(ds, StudyConfig(PredictandSpec("unit_average", unit="a")))
    avg = build_predictor(PredictandSpec("unit_average", unit="a"), ds, design)
    rows = [build_post_row(ds, design, "a", t) for t in range(6, 10)]
    np.testing.assert_allclose(avg.p_tau, np.mean(rows, axis=0), rtol=0, atol=1e-15)
    assert len(avg.post_rows) == 4


def test_cohort_att_weights_members_equally():
    rng = np.random.default_rng(9)
    ds = random_panel(rng, J=3, T0=6, N1=2, stagger=0)
    spec = PredictandSpec("cohort_att", s0=7, k=0)
    design = build_design(ds, StudyConfig(spec))
    pv = build_predictor(spec, ds, design)
    for u in ("a", "b"):
        np.testing.assert_allclose(pv.p_tau[design.unit_cols(u)], 0.5 * build_post_row(ds, design, u, 7))
    assert pv.observed == pytest.approx((ds.value("a", 7) + ds.value("b", 7)) / 2, abs=1e-15)


def test_period_out_of_range():
    rng = np.random.default_rng(1)
    ds = random_panel(rng, J=2, T0=5, T_post=2)
    spec = PredictandSpec("individual", unit="a", k=5)
    with pytest.raises(PeriodOutOfRange):
        build_predictor(spec, ds, build_design(ds, StudyConfig(PredictandSpec("individual", unit="a"))))


def test_predictor_support_matches_units():
    ds = _staggered()
    cfg = StudyConfig(PredictandSpec("att", k=0))
    design = build_design(ds, cfg)
    pv = build_predictor(cfg.predictand, ds, design)
    assert np.abs(pv.p_tau).sum() > 0
    for u in design.treated:
        assert np.any(pv.p_tau[design.unit_cols(u)])


def _cohort_panel(values):
    recs = []
    for u, vals in values.items():
        a = 3.0 if u != "d" else math.inf
        for t, v in enumerate(vals, start=1):
            if v is not None:
                recs.append((u, t, "y", v, a))
    return PanelDataset.from_records(recs)


def test_aggregate_cohort_mean():
    ds = _cohort_panel({"a": [2, 2, 2], "b": [4, 4, 6], "d": [1, 1, 1]})
    out = aggregate_cohort(ds, 3)
    assert set(out.units) == {AVE_UNIT, "d"}
    assert out.adoption[AVE_UNIT] == 3.0
    np.testing.assert_array_equal(out.series(AVE_UNIT), [3, 3, 4])


def test_aggregate_single_member():
    ds = _cohort_panel({"a": [2, 5, 7], "d": [1, 1, 1]})
    np.testing.assert_array_equal(aggregate_cohort(ds, 3).series(AVE_UNIT), [2, 5, 7])


def test_aggregate_skips_missing(caplog):
    ds = _cohort_panel({"a": [None, 1, 1], "b": [5, 3, 3], "d": [1, 1, 1]})
    with caplog.at_level("WARNING"):
        out = aggregate_cohort(ds, 3)
    assert out.value(AVE_UNIT, 1) == 5.0
    assert "subset" in caplog.text


def test_aggregate_empty_cohort():
    ds = _cohort_panel({"a": [1, 1, 1], "d": [1, 1, 1]})
    with pytest.raises(EmptyCohort):
        aggregate_cohort(ds, 2)
