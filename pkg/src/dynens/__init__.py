"""dynens: dynamic ensembles of calculations.

A manager coordinates workers that run generator and simulator functions,
with resource-aware dispatch of applications onto nodes and GPUs, a live
surrogate-model generator for batch active learning, and restartable
histories.
"""

from dynens.history import EnsembleRecord, GenPoint, History, histories_equal

__version__ = "0.1.0"

__all__ = [
    "EnsembleRecord",
    "GenPoint",
    "History",
    "histories_equal",
    "__version__",
]
