"""Bayesian spatio-temporal hidden Markov models with an autologistic latent field.

Submodules
----------
graph        neighbourhood systems (grids, G(n, M) random graphs, edge lists)
latent       autologistic parameters, full conditionals, Gibbs sweeps, enumeration
emission     Gaussian emissions and their conjugate updates
samplers     exchange and pseudo-posterior MCMC engines
diagnostics  Geweke, MCSE, MAP decoding, relabelling, DIC
synthdata    simulation scenarios and dataset bundles
cli          the ``sthmm`` command
"""

from sthmm.emission import Dataset, EmissionParams, default_priors
from sthmm.graph import NeighborhoodSystem, build_erdos_renyi, build_grid
from sthmm.latent import LatentParams
from sthmm.samplers import SamplerConfig, fit, run_chain

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EmissionParams",
    "LatentParams",
    "NeighborhoodSystem",
    "SamplerConfig",
    "build_erdos_renyi",
    "build_grid",
    "default_priors",
    "fit",
    "run_chain",
]
