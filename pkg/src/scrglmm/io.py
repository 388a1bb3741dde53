"""On-disk formats: datasets, chains and JSON records.

Every file starts with a magic line ``# scrglmm-<kind> v1``. Floats are
written with ``repr`` so that reading a file back gives bit-identical values.
Wall-clock timings live in separate ``*.timing.json`` files so that every
other output is a pure function of configuration and seed.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from scrglmm import __version__
from scrglmm.geometry import DetectorGrid, Habitat
from scrglmm.mcmc import Chain
from scrglmm.simulate import Scenario, SimulatedDataset, Truth

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def magic(kind: str) -> str:
    return f"# scrglmm-{kind} v{FORMAT_VERSION}"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, NaN/inf as strings, trailing newline."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- datasets
def dataset_text(ds: SimulatedDataset) -> str:
    meta = {
        "version": __version__,
        "M": ds.M,
        "J": ds.J,
        "seed": ds.seed,
        "grid": ds.grid.to_config(),
        "habitat": ds.habitat.to_config(),
        "scenario": None if ds.scenario is None else ds.scenario.to_config(),
    }
    lines = [magic("dataset"), json.dumps(_jsonable(meta), sort_keys=True), "[detections]", "row,detector"]
    rows, cols = np.nonzero(ds.Y)
    lines += [f"{i},{j}" for i, j in zip(rows.tolist(), cols.tolist())]
    t = ds.truth
    if t is not None:
        tmeta = {"n_true": t.n_true, "sigma": t.sigma, "eta": t.eta, "phi": t.phi, "kind": t.kind}
        lines += ["[truth]", json.dumps(_jsonable(tmeta), sort_keys=True)]
        lines += ["[truth_ac]", "row,x,y"]
        lines += [f"{i},{float(x)!r},{float(y)!r}" for i, (x, y) in enumerate(t.s)]
        lines += ["[truth_surface]", "detector,W,p0"]
        lines += [f"{j},{float(w)!r},{float(p)!r}" for j, (w, p) in enumerate(zip(t.W, t.p0))]
        lines += ["[truth_z]", "".join(str(int(v)) for v in t.z)]
    return "\n".join(lines) + "\n"


def write_dataset(path, ds: SimulatedDataset) -> None:
    atomic_write_text(path, dataset_text(ds))


def _sections(lines: list[str]) -> dict:
    out, name = {}, None
    for line in lines:
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            out[name] = []
        elif name is not None:
            out[name].append(line)
    return out


def read_dataset(path) -> SimulatedDataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    if not lines or lines[0] != magic("dataset"):
        raise FormatError(f"{path}: not a dataset file (expected first line {magic('dataset')!r})")
    try:
        meta = json.loads(lines[1])
    except (IndexError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}:2: malformed metadata line: {exc}") from exc
    sec = _sections(lines[2:])
    grid = DetectorGrid.from_config(meta["grid"])
    habitat = Habitat.from_config(meta["habitat"])
    Y = np.zeros((meta["M"], meta["J"]), dtype=np.uint8)
    for line in sec.get("detections", [])[1:]:
        i, j = line.split(",")
        Y[int(i), int(j)] = 1
    scenario = Scenario(**meta["scenario"]) if meta.get("scenario") else None
    truth = None
    if "truth" in sec:
        tmeta = json.loads(sec["truth"][0])
        s = np.array([[float(v) for v in line.split(",")[1:]] for line in sec["truth_ac"][1:]]).reshape(-1, 2)
        surf = np.array([[float(v) for v in line.split(",")[1:]] for line in sec["truth_surface"][1:]]).reshape(-1, 2)
        z = np.array([int(c) for c in sec["truth_z"][0]], dtype=np.uint8)
        truth = Truth(s=s, z=z, W=surf[:, 0], p0=surf[:, 1], **tmeta)
    return SimulatedDataset(Y=Y, grid=grid, habitat=habitat, truth=truth, scenario=scenario, seed=meta.get("seed"))


# ---------------------------------------------------------------- chains
def chain_text(chain: Chain) -> str:
    lines = [magic("chain"), "\t".join(chain.names)]
    lines += ["\t".join(repr(float(v)) for v in row) for row in chain.samples]
    return "\n".join(lines) + "\n"


def matrix_text(kind: str, header: list[str], values: np.ndarray) -> str:
    lines = [magic(kind), "\t".join(header)]
    lines += ["\t".join(repr(float(v)) for v in row) for row in np.atleast_2d(values)]
    return "\n".join(lines) + "\n"


def read_matrix(path, kind: str) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != magic(kind):
        raise FormatError(f"{path}: expected first line {magic(kind)!r}")
    header = lines[1].split("\t")
    if len(lines) == 2:
        return header, np.empty((0, len(header)))
    values = np.array([[float(v) for v in line.split("\t")] for line in lines[2:]])
    return header, values


def chain_meta(chain: Chain, spec_digest: str) -> dict:
    return {
        "chain_id": chain.chain_id,
        "seed": chain.seed,
        "spec_digest": spec_digest,
        "n_samples": chain.n_samples,
        "acceptance": chain.acceptance,
        "final_scales": chain.scales,
    }


def write_chain(directory, chain: Chain, spec_digest: str, save_loglik: bool = False) -> None:
    d = Path(directory)
    stem = f"chain_{chain.chain_id}"
    atomic_write_text(d / f"{stem}.tsv", chain_text(chain))
    write_json(d / f"{stem}.meta.json", chain_meta(chain, spec_digest))
    write_json(d / f"{stem}.timing.json", {"runtime_s": chain.runtime})
    if chain.p0_sum is not None:
        mom = np.column_stack([chain.p0_sum, chain.p0_sumsq])
        atomic_write_text(d / f"{stem}.p0.tsv", matrix_text("p0-moments", ["p0_sum", "p0_sumsq"], mom))
    if save_loglik and chain.loglik is not None:
        header = [f"row{i}" for i in range(chain.loglik.shape[1])]
        atomic_write_text(d / f"{stem}.loglik.tsv", matrix_text("loglik", header, chain.loglik))


def read_chain(directory, chain_id: int) -> Chain:
    d = Path(directory)
    stem = f"chain_{chain_id}"
    names, samples = read_matrix(d / f"{stem}.tsv", "chain")
    meta = read_json(d / f"{stem}.meta.json")
    timing_path = d / f"{stem}.timing.json"
    runtime = read_json(timing_path)["runtime_s"] if timing_path.exists() else math.nan
    p0_sum = p0_sumsq = loglik = None
    if (d / f"{stem}.p0.tsv").exists():
        _, mom = read_matrix(d / f"{stem}.p0.tsv", "p0-moments")
        p0_sum, p0_sumsq = mom[:, 0].copy(), mom[:, 1].copy()
    if (d / f"{stem}.loglik.tsv").exists():
        _, loglik = read_matrix(d / f"{stem}.loglik.tsv", "loglik")
    return Chain(
        names=tuple(names),
        samples=samples,
        chain_id=int(meta["chain_id"]),
        seed=int(meta["seed"]),
        runtime=float(runtime),
        loglik=loglik,
        p0_sum=p0_sum,
        p0_sumsq=p0_sumsq,
        acceptance=meta["acceptance"],
        scales=meta["final_scales"],
    )
