"""Approximate-multiplier workbench for small CNN classifiers."""

from .engine import LayerAssignment, NetworkSpec, build_network, network_forward, parse_assignment
from .evaluation import compute_aoc, evaluate, sweep
from .kernels import EXACT, KernelKind, MulKernel, OpCount

__all__ = [
    "EXACT", "KernelKind", "LayerAssignment", "MulKernel", "NetworkSpec", "OpCount",
    "build_network", "compute_aoc", "evaluate", "network_forward", "parse_assignment", "sweep",
]
__version__ = "0.1.0"
