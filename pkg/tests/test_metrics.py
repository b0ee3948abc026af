import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.metrics import PSNR_CAP, EvalReport, decoupling_score, psnr, region_psnr


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.5) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_psnr_symmetric_and_region_bounds(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    m = rng.uniform(size=(8, 8)) > 0.5
    if 0 < m.sum() < m.size:
        r = region_psnr(a, b, m)
        lo, hi = min(r["static_db"], r["dynamic_db"]), max(r["static_db"], r["dynamic_db"])
        assert lo - 1e-9 <= r["full_db"] <= hi + 1e-9


def test_region_psnr_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(8, 8, 3))
    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    assert set(region_psnr(t, t, m).values()) == {PSNR_CAP}
    r = t.copy()
    r[m] += 0.2
    out = region_psnr(r, t, m)
    assert out["static_db"] == PSNR_CAP and out["full_db"] < PSNR_CAP
    out = region_psnr(t + 0.1, t, m)
    for v in out.values():
        assert v == pytest.approx(20.0, abs=1e-9)


def test_decoupling_examples():
    assert decoupling_score([1.0, 0.0, 1.0], [1, 0, 1])["accuracy"] == 1.0
    s = decoupling_score([0.9, 0.3, 0.1, 0.1], [1, 1, 0, 0], 0.5)
    assert s == {"accuracy": 0.75, "precision": 1.0, "recall": 0.5}
    s = decoupling_score([0.9] * 4, [1, 1, 0, 0])
    assert s["precision"] == 0.5 and s["recall"] == 1.0


def test_report_table_and_dict():
    rep = EvalReport(psnr_db=[20.0, 30.0], ssim=[0.5, 0.7], frames=["a", "b"])
    assert rep.psnr_mean == 25.0 and rep.ssim_mean == pytest.approx(0.6)
    d = rep.to_dict()
    assert d["psnr_mean"] == 25.0 and d["frames"] == ["a", "b"]
    assert "mean" in rep.table()
