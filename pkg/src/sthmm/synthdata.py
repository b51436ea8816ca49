"""Synthetic datasets from the spatio-temporal hidden Markov model.

Presets ``"A"`` to ``"D"`` reproduce the four benchmark scenarios.  Each
replicate draws its randomness from the master seed under spawn keys
``(replicate, 0)`` for the graph, ``(replicate, 1)`` for the latent field and
``(replicate, 2)`` for the observations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import latent
from .emission import (
    Dataset,
    EmissionParams,
    read_observations_csv,
    write_observations_csv,
)
from .graph import build_erdos_renyi, build_grid, load_edge_list, save_edge_list
from .latent import LatentParams
from .samplers import child_seed

SCENARIOS = ("A", "B", "C", "D")

OBSERVATIONS_FILE = "observations.csv"
EDGES_FILE = "edges.txt"
TRUTH_FILE = "truth.json"


class SynthError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    name: str
    N: int
    T: int
    K: int
    d: int
    graph_recipe: tuple
    theta: LatentParams
    emission: EmissionParams
    replicates: int = 50
    seed: int = 0
    burn_sweeps: int = 500
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.graph_recipe[0]
        if kind == "grid":
            if self.graph_recipe[1] ** 2 != self.N:
                raise SynthError("grid side does not match N")
        elif kind == "erdos_renyi":
            if self.graph_recipe[1] != self.N:
                raise SynthError("graph size does not match N")
        else:
            raise SynthError(f"unknown graph recipe {kind!r}")
        if self.theta.K != self.K or self.emission.K != self.K or self.emission.d != self.d:
            raise SynthError("truth dimensions do not match (K, d)")
        if self.burn_sweeps < 1:
            raise SynthError("burn_sweeps must be >= 1")

    def graph(self, replicate_index: int = 0):
        if self.graph_recipe[0] == "grid":
            return build_grid(self.graph_recipe[1])
        _, n, m = self.graph_recipe
        return build_erdos_renyi(n, m, child_seed(self.seed, replicate_index, 0))


def _two_state(gamma_off, delta_off):
    g = np.array([[0.0, -gamma_off], [gamma_off, 0.0]])
    dl = np.array([[0.0, -delta_off], [-delta_off, 0.0]])
    return LatentParams(np.array([2.0, 0.0]), np.array([2.0, 0.0]), g, g.copy(), dl)


def scenario_preset(name: str, seed: int = 0, replicates: int = 50) -> ScenarioSpec:
    """Benchmark scenario ``name`` in ``{"A", "B", "C", "D"}``.

    Examples
    --------
    >>> s = scenario_preset("A")
    >>> s.N, s.T, s.K, float(s.theta.beta[0])
    (9, 5, 2, 2.0)
    """
    name = str(name).upper()
    if name == "A":
        theta = _two_state(1.0, 1.0)
        em = EmissionParams(np.array([[-3.0, -3.0], [3.0, 3.0]]), np.stack([np.eye(2)] * 2))
        return ScenarioSpec("A", 9, 5, 2, 2, ("grid", 3), theta, em, replicates, seed)
    if name in ("B", "C"):
        T = 5 if name == "B" else 10
        theta = _two_state(2.0, 2.0 if name == "B" else 1.0)
        em = EmissionParams(np.array([[-3.0, -3.0], [3.0, 3.0]]), np.stack([np.eye(2)] * 2))
        return ScenarioSpec(name, 40, T, 2, 2, ("erdos_renyi", 40, 20), theta, em, replicates, seed)
    if name == "D":
        off = 1.0 - np.eye(3)
        theta = LatentParams(np.zeros(3), np.zeros(3), -2.0 * off, -2.0 * off, -1.0 * off)
        em = EmissionParams(np.array([[-5.0, -5.0], [0.0, 5.0], [5.0, -5.0]]), np.stack([np.eye(2)] * 3))
        return ScenarioSpec("D", 40, 5, 3, 2, ("erdos_renyi", 40, 20), theta, em, replicates, seed)
    raise SynthError(f"unknown scenario {name!r}; choose one of {', '.join(SCENARIOS)}")


def sample_latent_field(theta: LatentParams, g, T: int, burn_sweeps: int = 500,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Approximate draw from ``p(u | theta)``: uniform start, then ``burn_sweeps`` Gibbs sweeps."""
    if burn_sweeps < 1:
        raise SynthError("burn_sweeps must be >= 1")
    rng = np.random.default_rng(rng)
    u = latent.uniform_field(g.n_sites, T, theta.K, rng)
    latent.gibbs_sweep(u, theta, g, rng, n_sweeps=burn_sweeps)
    return u


def sample_observations(u, emission: EmissionParams, rng) -> np.ndarray:
    N, T = u.shape
    y = np.empty((N, T, emission.d))
    L = np.linalg.cholesky(emission.sigma)
    z = rng.standard_normal((N, T, emission.d))
    for k in range(emission.K):
        sel = u == k + 1
        y[sel] = emission.mu[k] + z[sel] @ L[k].T
    return y


def sample_dataset(spec: ScenarioSpec, replicate_index: int = 0) -> Dataset:
    g = spec.graph(replicate_index)
    u = sample_latent_field(spec.theta, g, spec.T, spec.burn_sweeps,
                            np.random.default_rng(child_seed(spec.seed, replicate_index, 1)))
    y = sample_observations(u, spec.emission, np.random.default_rng(child_seed(spec.seed, replicate_index, 2)))
    meta = {"scenario": spec.name, "replicate": replicate_index, "seed": spec.seed}
    return Dataset(y, g, u, spec.theta, spec.emission, meta)


# --- bundles ----------------------------------------------------------------


def _theta_json(theta: LatentParams) -> dict:
    return {
        "beta": theta.beta.tolist(), "beta_star": theta.beta_star.tolist(),
        "gamma": theta.gamma.tolist(), "gamma_star": theta.gamma_star.tolist(),
        "delta": theta.delta.tolist(),
    }


def write_bundle(dataset: Dataset, directory) -> Path:
    """Write observations, edge list and (when known) truth JSON into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / OBSERVATIONS_FILE, "w", newline="") as fh:
        write_observations_csv(dataset.y, fh)
    with open(d / EDGES_FILE, "w") as fh:
        save_edge_list(dataset.graph, fh)
    truth = {"N": dataset.N, "T": dataset.T, "d": dataset.d, "meta": dataset.meta}
    if dataset.true_theta is not None:
        truth["K"] = dataset.true_theta.K
        truth["theta"] = _theta_json(dataset.true_theta)
    if dataset.true_emission is not None:
        truth["emission"] = {"mu": dataset.true_emission.mu.tolist(),
                             "sigma": dataset.true_emission.sigma.tolist()}
    if dataset.true_field is not None:
        truth["field"] = np.asarray(dataset.true_field).tolist()
    with open(d / TRUTH_FILE, "w") as fh:
        json.dump(truth, fh, indent=1)
        fh.write("\n")
    return d


def read_bundle(directory) -> Dataset:
    d = Path(directory)
    for f in (OBSERVATIONS_FILE, EDGES_FILE):
        if not (d / f).is_file():
            raise SynthError(f"missing bundle file {d / f}")
    with open(d / OBSERVATIONS_FILE) as fh:
        y = read_observations_csv(fh)
    with open(d / EDGES_FILE) as fh:
        g = load_edge_list(fh)
    theta = em = u = None
    meta = {}
    if (d / TRUTH_FILE).is_file():
        with open(d / TRUTH_FILE) as fh:
            truth = json.load(fh)
        meta = truth.get("meta", {})
        if "theta" in truth:
            t = truth["theta"]
            theta = LatentParams(*(np.array(t[k], dtype=float)
                                   for k in ("beta", "beta_star", "gamma", "gamma_star", "delta")))
        if "emission" in truth:
            em = EmissionParams(np.array(truth["emission"]["mu"]), np.array(truth["emission"]["sigma"]))
        if "field" in truth:
            u = np.array(truth["field"], dtype=np.int64)
    return Dataset(y, g, u, theta, em, meta)
