import math

import numpy as np
import pytest
from oracles import brute_force_logposterior, random_toy
from scipy.special import logit

from scrglmm.geometry import aggregate_detectors, build_detector_grid, build_habitat
from scrglmm.likelihood import (
    ChainState,
    ModelSpec,
    Priors,
    full_logposterior,
    half_normal_detection,
    individual_loglik,
    initial_state,
    latent_logprior,
    log_prior,
    pointwise_loglik,
    resolve_baseline,
)
from scrglmm.simulate import SimulatedDataset, get_scenario, simulate_activity_centers, simulate_scenario

KINDS = ("SCR", "RE", "SARE", "FM", "FE")


def test_half_normal_examples():
    assert half_normal_detection(0.3, 0.0, 1.5) == 0.3
    s = 1.7
    assert half_normal_detection(0.42, s * math.sqrt(2 * math.log(2)), s) == pytest.approx(0.21, abs=1e-15)
    assert half_normal_detection(0.6, 3.0, 1.5) == pytest.approx(0.6 * math.exp(-2), abs=1e-15)
    with pytest.raises(ValueError):
        half_normal_detection(0.5, 1.0, 0.0)


def _state(**kw):
    base = dict(psi=0.5, sigma=1.0, s=np.zeros((1, 2)), z=np.ones(1, dtype=np.uint8))
    base.update(kw)
    return ChainState(**base)


def test_resolve_baseline_examples():
    g = build_detector_grid(32, 32)
    cm1, cm4 = aggregate_detectors(g, 1), aggregate_detectors(g, 4)
    np.testing.assert_array_equal(resolve_baseline(_state(p0=0.2), ModelSpec("SCR"), cm1), np.full(1024, 0.2))
    fm = _state(eta1=0.1, eta2=0.7, pi=0.5, u=np.ones(64, dtype=np.uint8))
    np.testing.assert_array_equal(resolve_baseline(fm, ModelSpec("FM", 4), cm4), np.full(1024, 0.7))
    re = _state(mu=logit(0.3), W=np.zeros(64), sigma_w=1.0)
    np.testing.assert_allclose(resolve_baseline(re, ModelSpec("RE", 4), cm4), 0.3, atol=1e-15)


def test_fm_and_re_share_two_level_pattern():
    g = build_detector_grid(4, 4)
    cm = aggregate_detectors(g, 2)
    u = np.array([0, 1, 1, 0], dtype=np.uint8)
    fm = _state(eta1=0.2, eta2=0.6, pi=0.5, u=u)
    W = np.where(u == 1, logit(0.6), logit(0.2))
    re = _state(mu=0.0, W=W, sigma_w=1.0)
    np.testing.assert_allclose(resolve_baseline(fm, ModelSpec("FM", 2), cm), resolve_baseline(re, ModelSpec("RE", 2), cm), atol=1e-15)


def test_fe_without_covariate():
    with pytest.raises(ValueError, match="FE requires covariate"):
        resolve_baseline(_state(mu=0.0), ModelSpec("FE"), aggregate_detectors(build_detector_grid(2, 2), 1))


def test_individual_loglik_examples():
    g1 = build_detector_grid(1, 1)
    assert individual_loglik(np.zeros(1), np.zeros(2), 0, np.array([0.5]), 1.0, g1) == 0.0
    assert individual_loglik(np.ones(1), np.zeros(2), 0, np.array([0.5]), 1.0, g1) == -math.inf
    assert individual_loglik(np.ones(1), np.zeros(2), 1, np.array([0.5]), 1.0, g1) == pytest.approx(math.log(0.5), abs=1e-15)


def test_individual_loglik_three_terms():
    g = build_detector_grid(3, 1)
    p0 = np.array([0.3, 0.5, 0.8])
    s = np.array([0.4, 0.2])
    y = np.array([1, 0, 1])
    p = [p0[j] * math.exp(-((0.4 - x) ** 2 + 0.2**2) / (2 * 1.3**2)) for j, x in enumerate((-1.0, 0.0, 1.0))]
    hand = math.log(p[0]) + math.log(1 - p[1]) + math.log(p[2])
    assert individual_loglik(y, s, 1, p0, 1.3, g) == pytest.approx(hand, abs=1e-12)


def test_radius_truncation():
    g = build_detector_grid(1, 1)
    s = np.array([3.0, 0.0])
    assert individual_loglik(np.ones(1), s, 1, np.array([0.5]), 1.0, g, radius=2.0) == -math.inf
    assert individual_loglik(np.zeros(1), s, 1, np.array([0.5]), 1.0, g, radius=2.0) == 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_matches_brute_force_oracle(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    for _ in range(150):
        data, spec, st = random_toy(rng, kind)
        assert full_logposterior(st, data, spec) == pytest.approx(brute_force_logposterior(st, data, spec), abs=1e-10)


@pytest.mark.parametrize("kind", ("RE", "SARE", "FM"))
def test_matches_oracle_with_aggregation(kind):
    rng = np.random.default_rng(7)
    for _ in range(60):
        data, spec, st = random_toy(rng, kind, aggregation=2, max_m=3)
        assert full_logposterior(st, data, spec) == pytest.approx(brute_force_logposterior(st, data, spec), abs=1e-10)


def test_outside_habitat_is_impossible():
    rng = np.random.default_rng(0)
    data, spec, st = random_toy(rng, "SCR")
    st.s[0] = [data.habitat.xmax + 0.1, 0.0]
    assert full_logposterior(st, data, spec) == -math.inf


def test_sare_identity_limit_matches_re():
    g = build_detector_grid(4, 4)
    cm = aggregate_detectors(g, 1)
    W = np.random.default_rng(1).normal(size=16)
    sare = _state(mu=0.0, W=W, phi=1e6)
    re = _state(mu=0.0, W=W, sigma_w=1.0)
    a = latent_logprior(sare, ModelSpec("SARE"), cm)
    b = latent_logprior(re, ModelSpec("RE"), cm)
    assert a == pytest.approx(b, abs=1e-8)


def test_log_prior_examples():
    assert log_prior(_state(sigma=60.0, p0=0.5), ModelSpec("SCR")) == -math.inf
    assert log_prior(_state(eta1=0.4, eta2=0.2, pi=0.5), ModelSpec("FM")) == -math.inf
    sare = _state(mu=0.0, phi=1.0)
    # mu = 0 contributes -log(2 sqrt(2 pi)); phi = 1 contributes the N(0, 5^2) density at log 1
    expected = -math.log(50.0) - math.log(2 * math.sqrt(2 * math.pi)) - math.log(5 * math.sqrt(2 * math.pi))
    assert log_prior(sare, ModelSpec("SARE")) == pytest.approx(expected, abs=1e-14)


def test_priors_are_configurable():
    st = _state(sigma=60.0, p0=0.5)
    assert np.isfinite(log_prior(st, ModelSpec("SCR", priors=Priors(sigma_upper=100.0))))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("XYZ")
    with pytest.raises(ValueError):
        ModelSpec("FE", aggregation=2)
    with pytest.raises(ValueError):
        ModelSpec("SCR", radius=0.0)
    assert ModelSpec("sare", 4).label == "SARE-4x4"
    assert ModelSpec("SCR").top_level() == ("N", "sigma", "p0")
    with pytest.raises(ValueError, match="covariate"):
        ModelSpec("FE").validate(build_detector_grid(2, 2))


def test_spec_config_round_trip():
    spec = ModelSpec("SARE", 2, radius=None, priors=Priors(mu_sd=3.0))
    assert ModelSpec.from_config(spec.to_config()) == spec
    assert ModelSpec.from_config(spec.to_config()).digest() == spec.digest()


@pytest.fixture(scope="module")
def scenario_data():
    sc = get_scenario(3).with_design(nx=12, ny=12, n_true=40, m_aug=80, buffer=3.0)
    return simulate_scenario(sc, seed=8)


def _truth_state(ds, kind, spec):
    t = ds.truth
    M = ds.M
    extra = simulate_activity_centers(M - t.n_true, ds.habitat, np.random.default_rng(0))
    s = np.vstack([t.s, extra])
    st = ChainState(psi=0.5, sigma=t.sigma, s=s, z=t.z.copy())
    if kind == "SCR":
        st.p0 = t.eta
    else:
        st.mu, st.W, st.phi = logit(t.eta), t.W.copy(), 1.0
    return st


@pytest.mark.parametrize("kind", ("SCR", "SARE"))
def test_radius_ten_sigma_is_exact_enough(scenario_data, kind):
    ds = scenario_data
    spec = ModelSpec(kind, radius=10 * ds.truth.sigma)
    st = _truth_state(ds, kind, spec)
    full = full_logposterior(st, ds, ModelSpec(kind, radius=None))
    assert full_logposterior(st, ds, spec) == pytest.approx(full, abs=1e-6)


def test_permutation_invariance(scenario_data):
    ds = scenario_data
    spec = ModelSpec("SARE", radius=None)
    st = _truth_state(ds, "SARE", spec)
    perm = np.random.default_rng(4).permutation(ds.M)
    ds2 = SimulatedDataset(Y=ds.Y[perm], grid=ds.grid, habitat=ds.habitat)
    st2 = st.copy()
    st2.s, st2.z = st.s[perm], st.z[perm]
    assert full_logposterior(st2, ds2, spec) == pytest.approx(full_logposterior(st, ds, spec), abs=1e-12 * abs(full_logposterior(st, ds, spec)))


def test_constant_w_sare_matches_scr_likelihood(scenario_data):
    ds = scenario_data
    scr, sare = ModelSpec("SCR"), ModelSpec("SARE")
    st_scr = _truth_state(ds, "SCR", scr)
    st_sare = _truth_state(ds, "SARE", sare)
    st_sare.mu, st_sare.W = 0.0, np.full(ds.J, logit(st_scr.p0))
    a = full_logposterior(st_scr, ds, scr) - log_prior(st_scr, scr)
    b = full_logposterior(st_sare, ds, sare) - log_prior(st_sare, sare) - latent_logprior(st_sare, sare, sare.clusters(ds.grid))
    assert a == pytest.approx(b, abs=1e-9)


def test_pointwise_marginalizes_inclusion():
    g = build_detector_grid(1, 1)
    h = build_habitat(g, 1.0)
    ds = SimulatedDataset(Y=np.array([[1], [0]]), grid=g, habitat=h)
    st = _state(psi=0.4, p0=0.5, s=np.zeros((2, 2)), z=np.array([1, 0], dtype=np.uint8))
    ll = pointwise_loglik(st, ds, ModelSpec("SCR"))
    assert ll[0] == pytest.approx(math.log(0.4 * 0.5))
    assert ll[1] == pytest.approx(math.log(0.4 * 0.5 + 0.6))


@pytest.mark.parametrize("kind", KINDS)
def test_initial_state_is_finite(scenario_data, kind):
    ds = scenario_data
    spec = ModelSpec(kind, 2 if kind in ("RE", "SARE", "FM") else 1)
    if kind == "FE":
        spec = spec.with_covariate(ds.truth.fe_covariate())
    st = initial_state(ds, spec, np.random.default_rng(1))
    assert np.isfinite(full_logposterior(st, ds, spec))
    assert st.psi == 0.5 and st.sigma == 2.0
    assert np.all(st.z[ds.detected] == 1)
