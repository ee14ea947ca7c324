"""Fit heavy-tailed scale mixtures of phase-type distributions by EM.

Public names are imported lazily so that ``import nphfit`` (and the
command-line entry point) stays cheap until numerics are needed.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "mat_exp": "matrix_core",
    "exp_and_integral": "matrix_core",
    "PhaseTypeRep": "phase_type",
    "validate": "phase_type",
    "ph_density": "phase_type",
    "ph_survival": "phase_type",
    "erlang": "phase_type",
    "random_init": "phase_type",
    "ScalingFamily": "scaling",
    "GeometricPareto": "scaling",
    "Zeta": "scaling",
    "DiscretizedWeibull": "scaling",
    "DiscretizedLognormal": "scaling",
    "parse_family": "scaling",
    "NphModel": "nph_model",
    "model_quantile": "nph_model",
    "WeightedObservation": "observations",
    "CensoredObservation": "observations",
    "Dataset": "observations",
    "EmConfig": "em_fit",
    "SufficientStats": "em_fit",
    "FitResult": "em_fit",
    "e_step": "em_fit",
    "m_step": "em_fit",
    "fit": "em_fit",
    "fit_erlang_mixture": "em_fit",
    "e_step_censored": "censoring",
    "fit_censored": "censoring",
    "TargetDistribution": "kl_fit",
    "parse_target": "kl_fit",
    "quadrature_nodes": "kl_fit",
    "fit_distribution": "kl_fit",
    "load_csv": "data_io",
    "bin_body_tail": "data_io",
    "save_model": "data_io",
    "load_model": "data_io",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
