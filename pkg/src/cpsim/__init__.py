"""cpsim: a deterministic discrete-event simulator of network control planes
(conventional L2, conventional L3, pure SDN) with attack injection and
composable defense policies, plus a harness that reproduces the full
attack x defense comparison matrix as executable scenarios."""

__version__ = "0.1.0"

from .engine import Engine, Frame, Topology  # noqa: F401
from .scenario import build_engine, load_file, run, validate  # noqa: F401
