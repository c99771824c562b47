import math

import numpy as np
import pytest

from guidegen.schedules import (
    NoiseSchedule,
    alpha_bar_of,
    constant_beta_schedule,
    cosine_schedule,
)


def test_cosine_full_scale():
    sch = cosine_schedule(1000, 0.008)
    assert sch.T == 1000
    assert np.all(sch.betas > 0.0)
    assert np.all(sch.betas <= 0.999)


@pytest.mark.parametrize("T", [1, 4, 64, 250])
def test_alpha_bar_strictly_decreasing(T):
    sch = cosine_schedule(T)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert sch.alpha_bars[-1] < sch.alpha_bars[0] or T == 1


def test_constant_beta_cumulative_product():
    sch = constant_beta_schedule(4, 0.5)
    np.testing.assert_allclose(sch.alpha_bars, [0.5, 0.25, 0.125, 0.0625], atol=1e-15)


def test_alpha_bar_of_zero_is_one():
    sch = cosine_schedule(8)
    assert alpha_bar_of(sch, 0) == 1.0


def test_alpha_bar_of_constant():
    sch = constant_beta_schedule(4, 0.5)
    assert alpha_bar_of(sch, 2) == pytest.approx(0.25, abs=1e-15)


def test_alpha_bar_final_cosine_64():
    # independent evaluation of the squared-cosine formula
    T, offset = 64, 0.008

    def f(u):
        return math.cos(((u / T + offset) / (1 + offset)) * math.pi / 2) ** 2

    expected = 1.0
    for t in range(1, T + 1):
        beta = min(1 - f(t) / f(t - 1), 0.999)
        expected *= 1 - beta
    sch = cosine_schedule(T, offset)
    got = alpha_bar_of(sch, T)
    assert got == pytest.approx(expected, rel=1e-12)
    assert 0.0 < got < 0.05


def test_recompute_alpha_bars_matches():
    for T in (1, 7, 100):
        sch = cosine_schedule(T)
        np.testing.assert_allclose(np.cumprod(1 - sch.betas), sch.alpha_bars, atol=1e-12)


def test_clip_never_nonpositive():
    for T in (2, 10, 1000):
        assert cosine_schedule(T).betas.min() > 0


def test_out_of_range_errors():
    sch = cosine_schedule(4)
    with pytest.raises(IndexError):
        alpha_bar_of(sch, 5)
    with pytest.raises(IndexError):
        sch.beta(0)
    with pytest.raises(ValueError):
        cosine_schedule(0)
    with pytest.raises(ValueError):
        cosine_schedule(4, offset=0.0)


def test_inconsistent_alpha_bars_rejected():
    betas = np.full(3, 0.1)
    bad = np.array([0.9, 0.81, 0.5])
    with pytest.raises(ValueError):
        NoiseSchedule(betas=betas, alpha_bars=bad)
