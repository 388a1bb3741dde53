import json

import pytest

from scrglmm import study as study_mod
from scrglmm.config import parse_config, with_overrides
from scrglmm.io import read_json
from scrglmm.study import (
    StudyError,
    fit_seed,
    load_result,
    resolve_workers,
    run_study,
    summarize,
    triple_key,
)

TINY = """
[study]
scenarios = [4, 10]
replicates = 2
base_seed = 11

[design]
nx = 4
ny = 4
n_true = 10
m_aug = 20
buffer = 2.0

[mcmc]
n_iterations = 300
burn_in = 100
n_chains = 2
loglik_every = 5

[[models]]
kind = "SCR"

[[models]]
kind = "SARE"
aggregation = 2

[[models]]
kind = "FE"
"""


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and ".timing." not in p.name}


def test_keys_and_seeds():
    assert triple_key(4, 0, "SARE-4x4") == "s04_r0000_SARE-4x4"
    assert fit_seed(1, 4, 0, "SCR") == fit_seed(1, 4, 0, "SCR") != fit_seed(1, 4, 1, "SCR")


def test_zero_replicates(tmp_path):
    cfg = parse_config(TINY.replace("replicates = 2", "replicates = 0"))
    res = run_study(cfg, tmp_path)
    assert res.fits == [] and res.datasets == []
    paths = summarize(tmp_path)
    assert (tmp_path / "report" / "metrics.csv").read_text().count("\n") == 1
    assert read_json(paths["deltas.json"]) == []


def test_simulate_only_study(tmp_path):
    cfg = parse_config("models = []\n" + TINY.split("[[models]]")[0])
    res = run_study(cfg, tmp_path)
    assert len(res.datasets) == 4 and res.fits == []
    summarize(tmp_path)
    t1 = (tmp_path / "report" / "table1_data.tsv").read_text().splitlines()
    assert len(t1) == 3
    for name in ("table2_convergence.tsv", "aggregates.tsv", "table3_efficiency.timing.tsv"):
        assert len((tmp_path / "report" / name).read_text().splitlines()) == 1


@pytest.fixture(scope="module")
def serial(tmp_path_factory):
    root = tmp_path_factory.mktemp("serial")
    cfg = parse_config(TINY)
    res = run_study(cfg, root, workers=1)
    summarize(root, res)
    return root, res


def test_study_records(serial):
    root, res = serial
    assert len(res.fits) == 2 * 2 * 3
    assert all(f["status"] == "ok" for f in res.fits)
    rows = (root / "report" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 12
    conv = (root / "report" / "table2_convergence.tsv").read_text().splitlines()[1:]
    for line in conv:
        sid, model, attempted, n_conv, rate = line.split("\t")
        fits = res.fits_for(int(sid), model)
        assert int(attempted) == len(fits) == 2
        assert int(n_conv) == sum(f["converged"] for f in fits)
        assert float(rate) == pytest.approx(int(n_conv) / 2)
    surf = (root / "report" / "surfaces.csv").read_text().splitlines()
    assert len(surf) == 1 + 12 * 16


def test_parallel_matches_serial(serial, tmp_path):
    root, _ = serial
    run_study(parse_config(TINY), tmp_path, workers=2)
    summarize(tmp_path)
    assert _files(tmp_path) == _files(root)


def test_reports_regenerate_identically(serial, tmp_path):
    root, _ = serial
    before = _files(root / "report")
    summarize(root, load_result(root))
    assert _files(root / "report") == before


def test_resume_fills_missing(serial, tmp_path):
    root, _ = serial
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    victim = copy / "fits" / "s10_r0001_SARE-2x2.json"
    victim.unlink()
    res = run_study(parse_config(TINY), copy, resume=True)
    assert len(res.fits) == 12
    assert victim.read_bytes() == (root / "fits" / victim.name).read_bytes()


def test_existing_study_guarded(serial, tmp_path):
    root, _ = serial
    with pytest.raises(StudyError, match="resume"):
        run_study(parse_config(TINY), root, resume=False)
    with pytest.raises(StudyError, match="different configuration"):
        run_study(with_overrides(parse_config(TINY), base_seed=12), root)


def test_failures_are_isolated(tmp_path, monkeypatch):
    real = study_mod.fit_triple

    def flaky(cfg, sid, rep, entry):
        if entry.label == "SARE-2x2" and rep == 1:
            raise RuntimeError("boom")
        return real(cfg, sid, rep, entry)

    monkeypatch.setattr(study_mod, "fit_triple", flaky)
    cfg = parse_config(TINY.replace("scenarios = [4, 10]", "scenarios = [4]"))
    res = run_study(cfg, tmp_path)
    failed = [f for f in res.fits if f["status"] == "failed"]
    assert [f["key"] for f in failed] == ["s04_r0001_SARE-2x2"]
    assert "boom" in failed[0]["error"]
    summarize(tmp_path)
    table = (tmp_path / "report" / "table2_convergence.tsv").read_text()
    assert "4\tSARE-2x2\t2\t" in table


def test_delta_rows_exclude_fe(serial):
    _, res = serial
    for row in study_mod.delta_rows(res):
        assert "FE" not in row["models"]
        if row["WAIC"] is not None:
            assert min(row["WAIC"]["deltas"].values()) == 0.0
            assert row["WAIC"]["deltas"][row["WAIC"]["winner"]] == 0.0


def test_workers_env(monkeypatch):
    cfg = parse_config(TINY)
    monkeypatch.setenv("SCRGLMM_WORKERS", "3")
    assert resolve_workers(cfg) == 3
    assert resolve_workers(cfg, 2) == 2
    monkeypatch.setenv("SCRGLMM_WORKERS", "x")
    with pytest.raises(StudyError):
        resolve_workers(cfg)


def test_manifest_records_completion(serial):
    root, _ = serial
    man = json.loads((root / "manifest.json").read_text())
    assert len(man["completed"]) == 12 and set(man["completed"].values()) == {"ok"}
    assert "workers" not in man["config"]["study"]
