"""Variance-preserving diffusion at desk scale.

Submodules: schedule (noising profiles and closed forms), data
(mixtures, builtins, normalization, file formats), forward (chain
simulation and temporal correlations), score (analytic oracle and
trainable noise predictor), reverse (generation), diagnostics (kernel
discrepancy, normality ratios, decay times), uturn (turn-around
generation and turn-step scans), cli (the vpdiff command).

Submodules are imported lazily so the command line can pin BLAS thread
counts before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "schedule",
    "data",
    "forward",
    "score",
    "reverse",
    "diagnostics",
    "uturn",
    "series",
    "plots",
    "cli",
    "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
