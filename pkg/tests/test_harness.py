from __future__ import annotations

import math

import numpy as np
import pytest

from stagsynth.config import PredictandSpec, StudyConfig
from stagsynth.conic import estimate_weights
from stagsynth.errors import InvalidConfig
from stagsynth.harness import DgpSpec, coverage_study, generate, rep_seed, write_panel
from stagsynth.panel import build_design, load_panel

FAST = dict(draws=40)


def test_spec_validation():
    with pytest.raises(InvalidConfig):
        DgpSpec(phi=1.0, error_law="ar1")
    with pytest.raises(InvalidConfig):
        DgpSpec(error_law="garch")
    with pytest.raises(InvalidConfig):
        DgpSpec(J=2, w0=(0.5, 0.6))


def test_adoption_layout():
    spec = DgpSpec(T0=20, N1=3, stagger=4, T_post=2)
    assert spec.adoption_times == [21, 25, 29]
    assert spec.T == 30
    ds, truth = generate(spec, 0)
    assert ds.treated == ("t00", "t01", "t02")
    assert ds.t_max == 30 and len(ds.never_treated) == spec.J


def test_generate_is_deterministic():
    spec = DgpSpec(J=4, T0=10, N1=2, seed=5)
    a, _ = generate(spec, 3)
    b, _ = generate(spec, 3)
    c, _ = generate(spec, 4)
    assert np.array_equal(a.cube, b.cube)
    assert not np.array_equal(a.cube, c.cube)


def test_noiseless_treated_is_donor_combination():
    w0 = (0.2, 0.5, 0.3)
    spec = DgpSpec(J=3, T0=15, N1=1, sigma=0.0, w0=w0, intercept=0.0, effect=1.0)
    ds, truth = generate(spec, 0)
    donors = np.stack([ds.series(f"d{j:02d}") for j in range(3)])
    treated = ds.series("t00")
    post = np.arange(ds.times.size) >= spec.T0
    np.testing.assert_allclose(treated, np.asarray(w0) @ donors + post * 1.0, atol=1e-12)
    assert truth.value(PredictandSpec("individual", unit="t00", k=2)) == 1.0


def test_noiseless_weights_recovered():
    w0 = (0.2, 0.5, 0.3)
    spec = DgpSpec(J=3, T0=15, N1=1, sigma=0.0, w0=w0)
    ds, _ = generate(spec, 1)
    cfg = StudyConfig(PredictandSpec("individual", unit="t00"))
    fit = estimate_weights(build_design(ds, cfg), cfg.constraint)
    np.testing.assert_allclose(list(fit.weights["t00"].values()), w0, atol=1e-6)


def test_ar1_autocorrelation():
    spec = DgpSpec(J=1, T0=500, N1=1, T_post=1, error_law="ar1", phi=0.5, sigma=1.0)
    ds, _ = generate(spec, 0)
    w = spec.weights
    u = ds.series("t00")[:500] - w @ np.stack([ds.series("d00")])[:, :500]
    u = u - u.mean()
    r1 = float(u[1:] @ u[:-1] / (u @ u))
    assert abs(r1 - 0.5) < 0.1


def test_cointegrated_donors_share_trend():
    spec = DgpSpec(J=3, T0=200, N1=1, error_law="cointegrated")
    ds, _ = generate(spec, 0)
    d = np.stack([ds.series(f"d{j:02d}") for j in range(3)])
    # a shared random walk makes donor levels far more correlated than noise alone
    assert np.corrcoef(d)[0, 1] > 0.5


def test_rep_seed_is_stable():
    assert rep_seed(7, 3) == rep_seed(7, 3)
    assert rep_seed(7, 3) != rep_seed(7, 4)
    assert 0 <= rep_seed(2**63, 9) < 2**64


def test_write_panel_round_trip(tmp_path):
    ds, _ = generate(DgpSpec(J=3, T0=6, N1=2, stagger=1, M=2), 0)
    path = tmp_path / "p.csv"
    write_panel(ds, path)
    back = load_panel(path)
    assert back.units == ds.units and back.features == ds.features
    assert np.array_equal(back.cube, ds.cube)
    assert back.adoption == ds.adoption


def test_noiseless_coverage_is_full():
    spec = DgpSpec(J=4, T0=15, N1=2, stagger=2, sigma=0.0, R=3, w0=(0.1, 0.2, 0.3, 0.4))
    rep = coverage_study(spec, StudyConfig(PredictandSpec("att"), **FAST), chunk=3)
    assert all(v == 1.0 for v in rep.coverage.values())
    assert rep.failure_rate == 0.0
    assert rep.to_dict()["schema_version"] == 1


def test_widths_shrink_with_alpha():
    spec = DgpSpec(J=5, T0=20, N1=2, stagger=3, R=4, seed=3)
    wide = coverage_study(spec, StudyConfig(PredictandSpec("att"), alpha1=0.05, alpha2=0.05, **FAST))
    narrow = coverage_study(spec, StudyConfig(PredictandSpec("att"), alpha1=0.25, alpha2=0.25, **FAST))
    for label in wide.widths:
        assert all(n < w for n, w in zip(narrow.widths[label], wide.widths[label]))
        # nested intervals: a hit at the lower nominal level is a hit at the higher one
        assert all(w or not n for n, w in zip(narrow.hits[label], wide.hits[label]))
        assert narrow.coverage[label] <= wide.coverage[label]


def test_chunk_does_not_change_hits():
    spec = DgpSpec(J=4, T0=15, N1=1, R=4, seed=1)
    cfg = StudyConfig(PredictandSpec("att"), **FAST)
    a = coverage_study(spec, cfg, chunk=1)
    b = coverage_study(spec, cfg, chunk=4)
    assert a.hits == b.hits
    for label in a.widths:
        np.testing.assert_allclose(a.widths[label], b.widths[label], rtol=1e-6)


def test_misspecification_shifts_treated():
    base, _ = generate(DgpSpec(J=2, T0=5, N1=1), 0)
    shifted, _ = generate(DgpSpec(J=2, T0=5, N1=1, misspecification=2.5), 0)
    np.testing.assert_allclose(shifted.series("t00") - base.series("t00"), 2.5)
    assert not math.isnan(shifted.value("t00", 1))
