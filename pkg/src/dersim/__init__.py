"""dersim: distribution-grid reliability simulation for DER coordination."""

from .network import NetworkModel, parse_network, serialize_network
from .powerflow import solve_series, solve_step

__version__ = "0.1.0"

__all__ = [
    "NetworkModel",
    "parse_network",
    "serialize_network",
    "solve_step",
    "solve_series",
    "__version__",
]
