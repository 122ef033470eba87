from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stagsynth.panel import PanelDataset  # noqa: E402

ACCEPTANCE: dict[str, str] = {}


def random_panel(rng: np.random.Generator, J: int = 3, T0: int = 8, T_post: int = 2, N1: int = 1,
                 stagger: int = 1, M: int = 1, noise: float = 0.5, missing: int = 0) -> PanelDataset:
    """Small random panel: never-treated donors d*, treated units a*, b*, ..."""
    T = T0 + stagger * (N1 - 1) + T_post
    features = ["y"] + [f"x{m}" for m in range(1, M)]
    recs = []
    donors = rng.normal(size=(J, T, M)) + rng.normal(0, 2, size=(J, 1, M))
    for j in range(J):
        for t in range(T):
            for m, f in enumerate(features):
                recs.append((f"d{j}", t + 1, f, float(donors[j, t, m]), math.inf))
    for i in range(N1):
        Ti = T0 + 1 + stagger * i
        w = rng.dirichlet(np.ones(J))
        y = np.einsum("j,jtm->tm", w, donors) + noise * rng.normal(size=(T, M))
        for t in range(T):
            for m, f in enumerate(features):
                recs.append((f"{'abcdefgh'[i]}", t + 1, f, float(y[t, m]), float(Ti)))
    if missing:
        drop = set(rng.choice(len(recs), size=missing, replace=False).tolist())
        recs = [r for k, r in enumerate(recs) if k not in drop]
    return PanelDataset.from_records(recs, features)


def record(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = f"{'PASS' if passed else 'FAIL'} {criterion}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
            terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
