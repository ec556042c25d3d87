"""Graph-free MLP students distilled from multiplex GNN teachers."""

from mgfd.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
