"""In-protocol Internet measurement: a shim header carried by production
traffic, the endpoint and router logic that fills it, a deterministic
network simulator, and trace analysis."""

from .endpoint import Endpoint, RttDecomposition, decompose, verify_participation
from .integrity import compute_integrity, localize_mutation
from .netsim import Network, Trace, build_network, run, schedule_route_change
from .nonce import ArrivalReport, InconsistentError, reconstruct_arrivals
from .router import forward
from .wire import ShimHeader, decode_shim, encode_shim

__version__ = "0.1.0"

__all__ = [
    "ArrivalReport",
    "Endpoint",
    "InconsistentError",
    "Network",
    "RttDecomposition",
    "ShimHeader",
    "Trace",
    "build_network",
    "compute_integrity",
    "decode_shim",
    "decompose",
    "encode_shim",
    "forward",
    "localize_mutation",
    "reconstruct_arrivals",
    "run",
    "schedule_route_change",
    "verify_participation",
]
