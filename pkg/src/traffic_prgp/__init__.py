"""Traffic state estimation with physics-regularized Gaussian processes."""

from .data import Dataset, UnitSpec, ingest_csv, export_csv
from .gp_core import GpSpec, KernelParams, gp_posterior, log_marginal_likelihood
from .metanet import MetanetParams, TrafficGrid, simulate
from .prgp import TrainConfig, train, predict

__all__ = ["Dataset", "UnitSpec", "ingest_csv", "export_csv", "GpSpec", "KernelParams",
           "gp_posterior", "log_marginal_likelihood", "MetanetParams", "TrafficGrid",
           "simulate", "TrainConfig", "train", "predict"]
__version__ = "0.1.0"
