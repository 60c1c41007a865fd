"""Controlled program-synthesis benchmark over a bounded arithmetic DSL.

Enumerates every program up to a fixed operator budget, filters for
validity under seeded sampling, groups observational-equivalence
classes, embeds the universe into semantic and syntactic metric
spaces, and builds train/test splits with known out-of-distribution
geometry.  Hot numeric kernels run under numba when available; set
ARITHBENCH_BACKEND=numpy to force the pure-numpy fallback.
"""

__version__ = "0.1.0"

from .evaluator import EvalDomain
from .grammar import Node, ParseError, parse, render
from .kernels import BACKEND
from .universe import Universe, build_universe, partition_equivalence

__all__ = [
    "EvalDomain",
    "Node",
    "ParseError",
    "parse",
    "render",
    "BACKEND",
    "Universe",
    "build_universe",
    "partition_equivalence",
    "__version__",
]
