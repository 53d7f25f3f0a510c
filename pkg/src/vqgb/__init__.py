"""Generalization and data-generation bound machinery for small vector-quantized autoencoders."""
from .bounds import (BoundInputs, BoundReport, natarajan_cmi_cap, parametric_log_covering,
                     rhs_basic_it, rhs_metric_entropy, rhs_permutation, rhs_supersample,
                     rhs_wasserstein)
from .datasets import BoundedDataset, load_idx, normalize_to_box, synth_mixture
from .diffcore import MlpSpec, NumericError, grad_check
from .experiments import ExperimentConfig, load_config, make_config
from .infotools import (CmiProtocolConfig, categorical_kl, empirical_kl_term, estimate_cmi_term,
                        knn_mi, marginal_prior, plugin_discrete_mi)
from .kernels import BACKEND
from .model import ModelParams, posteriors, reconstruction_losses, sqvae_loss
from .quantizer import Codebook
from .resampling import Supersample, estimate_gap, make_supersample, split_by_u
from .trainer import Architecture, TrainConfig, train
from .transport import EmpiricalMeasure, validate_generation_bound, w2_exact

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Architecture", "BoundInputs", "BoundReport", "BoundedDataset",
    "CmiProtocolConfig", "Codebook", "EmpiricalMeasure", "ExperimentConfig", "MlpSpec",
    "ModelParams", "NumericError", "Supersample", "TrainConfig", "categorical_kl",
    "empirical_kl_term", "estimate_cmi_term", "estimate_gap", "grad_check", "knn_mi",
    "load_config", "load_idx", "make_config", "make_supersample", "marginal_prior",
    "natarajan_cmi_cap", "normalize_to_box", "parametric_log_covering", "plugin_discrete_mi",
    "posteriors", "reconstruction_losses", "rhs_basic_it", "rhs_metric_entropy",
    "rhs_permutation", "rhs_supersample", "rhs_wasserstein", "split_by_u", "sqvae_loss",
    "synth_mixture", "train", "validate_generation_bound", "w2_exact",
]
