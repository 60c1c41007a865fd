"""Spec-conditioned program synthesis baseline.

Trains a character-level transformer decoder over program text,
conditioned on (x, y) example pairs through a per-pair MLP projector.
Consumes the benchmark's exported JSON-lines task files and emits
candidate files in the harness's JSON-lines format; the two packages
share no code, only file formats.
"""

__version__ = "0.1.0"

from .data import TaskExample, load_tasks
from .model import ModelConfig, SpecToProgramModel, estimate_flops
from .vocab import Vocab

__all__ = [
    "TaskExample",
    "load_tasks",
    "ModelConfig",
    "SpecToProgramModel",
    "estimate_flops",
    "Vocab",
    "__version__",
]
