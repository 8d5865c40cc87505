"""Online test-time adaptation of concept-bottleneck classifiers on frozen embeddings.

The package adapts a source-trained concept-bottleneck model (concept bank +
linear head + optional residual concept branch) to an unlabeled target stream
in three stages per batch: concept-score alignment, linear-probe adaptation,
and residual-concept-bottleneck fitting.  A synthetic world generator makes
the three shift regimes (low-level, concept-level, incomplete-bank)
reproducible at small scale.

Submodules are imported lazily so the CLI can pin BLAS thread counts before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "adapt",
    "annotate",
    "cli",
    "iofmt",
    "losses",
    "model",
    "numerics",
    "pseudolabel",
    "rng",
    "shiftsim",
    "stats",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
