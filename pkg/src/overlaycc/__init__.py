"""Overlay congestion-control simulator with a distributed predictive controller.

Modules: ``network`` (topology and units), ``qp`` (interior-point QP solver),
``fairness`` (max-min fair rates), ``controller`` (per-relay optimal control
problem), ``feedback`` (neighbour trajectory exchange), ``baselines`` (AIMD
transports), ``sim`` (time-stepped simulator), ``metrics`` and ``cli``.
"""
from .network import Circuit, Node, OverlayNetwork, build_toy_topology
from .sim import ScenarioConfig, run

__all__ = ["Circuit", "Node", "OverlayNetwork", "ScenarioConfig", "build_toy_topology", "run"]
__version__ = "0.1.0"
