"""Pathway-centric multi-omics survival modeling.

A framework-free package: a reverse-mode autodiff tape over dense arrays
and segment operations, hierarchical pathway graph batching, context-
conditioned expression modulation, relation-typed attention message
passing, Cox partial-likelihood training, and a full survival-statistics
suite, wired together by a reproducible experiment harness.
"""

from .autodiff import SegmentMap, Tape
from .config import RunConfig, SynthSpec
from .errors import (
    ConfigError,
    DataError,
    NoEventsError,
    NumericError,
    PathsurvError,
)
from .kernels import active_backend

__all__ = [
    "SegmentMap",
    "Tape",
    "RunConfig",
    "SynthSpec",
    "PathsurvError",
    "ConfigError",
    "DataError",
    "NumericError",
    "NoEventsError",
    "active_backend",
]

__version__ = "1.0.0"
