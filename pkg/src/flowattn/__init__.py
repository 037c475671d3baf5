"""Flow-based sparse attention for small graphs, on plain numpy.

Modules: ``matcore`` (dense helpers, CSV I/O), ``autodiff`` (reverse-mode
tape), ``flowsolve`` (penalized flow solver and oracles), ``graphkit``
(graphs, encodings, synthetic tasks), ``sfilayer`` (attention layer and
model), ``trainer`` (training, checkpoints) and ``cli``.
"""
from . import autodiff, flowsolve, graphkit, matcore, sfilayer, trainer
from .flowsolve import FlowProblem, SolverConfig, solve
from .matcore import DomainError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "flowsolve",
    "graphkit",
    "matcore",
    "sfilayer",
    "trainer",
    "FlowProblem",
    "SolverConfig",
    "solve",
    "DomainError",
    "ShapeError",
]
