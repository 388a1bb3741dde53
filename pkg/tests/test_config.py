from importlib.resources import files

import pytest

from scrglmm.config import DEFAULT_MODELS, ConfigError, load_config, parse_config, with_overrides


def test_empty_config_is_full_design():
    cfg = parse_config("")
    assert cfg.scenarios == tuple(range(1, 11)) and cfg.replicates == 100
    assert cfg.priors.sigma_upper == 50.0 and cfg.rhat_threshold == 1.1 and cfg.ess_floor == 400
    assert [(m.spec.kind, m.spec.aggregation) for m in cfg.models] == list(DEFAULT_MODELS)
    assert all(m.spec.radius == 10.0 for m in cfg.models)
    sare = cfg.mcmc_for(cfg.models[4])
    assert (sare.n_iterations, sare.burn_in) == (100_000, 20_000)


def test_non_dividing_aggregation():
    with pytest.raises(ConfigError, match="aggregation"):
        parse_config('[[models]]\nkind = "SARE"\naggregation = 3\n')


def test_unknown_scenario_lists_valid_ids():
    with pytest.raises(ConfigError, match="1-10"):
        parse_config("[study]\nscenarios = [11]\n")


@pytest.mark.parametrize(
    "text,where",
    [
        ("[study]\nreplicate = 3\n", "study.replicate"),
        ("[design]\nnx = 1.5\n", "design.nx"),
        ("[mcmc]\nn_iterations = 10\nburn_in = 20\n", "mcmc"),
        ("[mcmc]\nloglik_every = 0\n", "loglik_every"),
        ("[priors]\nsigma_upper = \"big\"\n", "priors.sigma_upper"),
        ("[[models]]\nkind = \"XX\"\n", "models[0]"),
        ("[[models]]\naggregation = 2\n", "models[0].kind"),
        ("[bogus]\n", "<root>.bogus"),
        ("[study]\nreference = \"other\"\n", "study.reference"),
    ],
)
def test_errors_name_the_key(text, where):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert where in str(info.value)


def test_parse_error_has_position():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("[study]\nreplicates = = 3\n")


def test_per_model_mcmc_override():
    cfg = parse_config('[mcmc]\nn_iterations = 5000\nburn_in = 1000\n[[models]]\nkind = "FM"\naggregation = 4\nmcmc = { n_iterations = 8000 }\n')
    m = cfg.mcmc_for(cfg.models[0], seed=3)
    assert (m.n_iterations, m.burn_in, m.seed) == (8000, 1000, 3)


def test_digest_ignores_workers():
    a = parse_config("[study]\nworkers = 1\n")
    b = parse_config("[study]\nworkers = 4\n")
    assert a.digest() == b.digest()
    assert with_overrides(a, base_seed=9).digest() != a.digest()


def test_shipped_desk_profile(tmp_path):
    text = files("scrglmm").joinpath("profiles/desk.toml").read_text()
    cfg = parse_config(text)
    assert cfg.scenarios == (4, 10) and cfg.replicates == 10
    assert cfg.design == {"nx": 16, "ny": 16, "n_true": 75, "m_aug": 150, "buffer": 3.0}
    assert [m.label for m in cfg.models] == ["SCR", "RE-4x4", "SARE-4x4", "FM-4x4", "FE"]
    assert {(m.n_iterations, m.n_chains) for m in (cfg.mcmc_for(e) for e in cfg.models)} == {(20_000, 3)}
    p = tmp_path / "desk.toml"
    p.write_text(text)
    assert load_config(p) == cfg
