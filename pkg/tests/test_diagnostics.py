import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrglmm.diagnostics import ConvergenceReport, assess, effective_sample_size, gelman_rubin
from scrglmm.mcmc import Chain


def ar1(n, rho, rng):
    x = np.empty(n)
    x[0] = rng.normal() / math.sqrt(1 - rho * rho)
    eps = rng.normal(size=n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + eps[t]
    return x


def test_rhat_same_distribution():
    x = np.random.default_rng(0).normal(size=(4, 10_000))
    assert gelman_rubin(x) < 1.05


def test_rhat_separated_means():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert gelman_rubin(x) > 2


def test_rhat_permuted_copies():
    rng = np.random.default_rng(2)
    a = rng.normal(size=2000)
    assert gelman_rubin(np.vstack([a, rng.permutation(a)])) == pytest.approx(1.0, abs=1e-3)


def test_rhat_hand_value():
    x = np.array([[0.0, 1, 2, 3, 4, 5, 6, 7, 8, 9], [1.0, 2, 3, 4, 5, 6, 7, 8, 9, 10]])
    # W = 55/6, B = n var(means) = 10 * 0.5, var+ = 0.9 W + B / 10
    W = 55 / 6
    assert gelman_rubin(x) == pytest.approx(math.sqrt((0.9 * W + 0.5) / W), abs=1e-14)


def test_rhat_errors():
    with pytest.raises(ValueError):
        gelman_rubin(np.zeros((1, 50)) + np.arange(50))
    with pytest.raises(ValueError):
        gelman_rubin(np.ones((2, 50)))
    with pytest.raises(ValueError):
        gelman_rubin(np.random.default_rng(0).normal(size=(2, 9)))


def test_split_rhat_single_chain():
    x = np.random.default_rng(3).normal(size=(1, 4000))
    assert gelman_rubin(x, split=True) < 1.05
    drift = np.linspace(0, 10, 4000)[None] + x
    assert gelman_rubin(drift, split=True) > 1.5


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100), st.floats(0.01, 100), st.integers(0, 10_000))
def test_rhat_affine_invariant(shift, scale, seed):
    x = np.random.default_rng(seed).normal(size=(3, 200))
    x[1] += 0.3
    assert gelman_rubin(shift + scale * x) == pytest.approx(gelman_rubin(x), rel=1e-9)


def test_ess_iid():
    x = np.random.default_rng(4).normal(size=10_000)
    assert 9_000 <= effective_sample_size(x) <= 11_000


def test_ess_ar1():
    x = ar1(10_000, 0.9, np.random.default_rng(5))
    analytic = 10_000 * 0.1 / 1.9
    assert abs(effective_sample_size(x) - analytic) <= 0.3 * analytic


def test_ess_antithetic_and_cap():
    rng = np.random.default_rng(6)
    x = np.where(np.arange(1000) % 2 == 0, 1.0, -1.0) + 0.01 * rng.normal(size=1000)
    assert effective_sample_size(x) > 1000
    assert effective_sample_size(x, cap=True) == 1000


def test_ess_pools_chains():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 2000))
    assert effective_sample_size(x) == pytest.approx(effective_sample_size(x.ravel()))


def test_ess_errors():
    with pytest.raises(ValueError, match="constant"):
        effective_sample_size(np.ones(500))
    with pytest.raises(ValueError):
        effective_sample_size(np.arange(50.0))
    with pytest.raises(ValueError):
        effective_sample_size(np.r_[np.arange(200.0), np.nan])


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0.001, 1e3), st.integers(0, 10_000))
def test_ess_affine_invariant_and_bounded(shift, scale, seed):
    x = ar1(500, 0.5, np.random.default_rng(seed))
    e = effective_sample_size(x)
    assert effective_sample_size(shift + scale * x) == pytest.approx(e, rel=1e-6)
    assert 0 < e <= 500 * 1.5


def _chain(names, samples, runtime=1.0):
    return Chain(names=tuple(names), samples=np.asarray(samples), chain_id=0, seed=0, runtime=runtime)


def test_assess_converged_and_gated():
    rng = np.random.default_rng(8)
    chains = [_chain(["a", "b"], rng.normal(size=(1000, 2)), runtime=2.0) for _ in range(3)]
    rep = assess(chains)
    assert rep.converged and rep.runtime == 6.0
    assert rep.efficiency["a"] == pytest.approx(rep.ess["a"] / 6.0)
    shifted = [_chain(["a", "b"], c.samples + np.array([k * 3.0, 0.0])) for k, c in enumerate(chains)]
    assert not assess(shifted).converged


def test_assess_thresholds():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 1000))
    assert assess({"p": x}, ess_floor=400).converged
    assert not assess({"p": x}, ess_floor=5000).converged
    assert not assess({"p": x}, threshold=0.99).converged


def test_assess_single_chain_and_constant():
    rng = np.random.default_rng(10)
    rep = assess([_chain(["a", "c"], np.column_stack([rng.normal(size=1000), np.ones(1000)]))])
    assert not rep.converged
    assert math.isnan(rep.rhat["c"]) and math.isnan(rep.ess["c"])
    assert rep.rhat["a"] < 1.05 and rep.notes


def test_report_table():
    rep = ConvergenceReport(rhat={"N": 1.01}, ess={"N": 800.0}, runtime=4.0, converged=True)
    assert rep.to_table(timing=False) == "parameter\trhat\tess\nN\t1.01\t800\n# converged\ttrue\n"
    full = rep.to_table()
    assert "efficiency" in full and "\t200\n" in full
    assert rep.to_dict()["converged"] is True
