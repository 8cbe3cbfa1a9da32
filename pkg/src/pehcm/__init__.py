"""Coarse-label embedding learning in the Poincare ball with hierarchical
cosine margins.

The package is a plain numpy library: ball geometry, a hyperbolic
multinomial-logistic-regression head, the hierarchical cosine-margin loss
with its adaptive target ladder, pseudo-labeling from a per-class feature
memory, a small reverse-mode tape for training, synthetic hierarchical
datasets, and an episodic few-shot / retrieval evaluator. ``pehcm.cli``
exposes the command-line driver.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "geometry",
    "margins",
    "mlr",
    "pseudo_labels",
    "network",
    "data",
    "evaluation",
    "config",
    "checkpoint",
    "trainer",
    "cli",
)


def __getattr__(name):
    # Submodules load lazily so `import pehcm` stays free of numpy; the CLI
    # relies on that to cap BLAS thread counts before numpy initializes.
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
