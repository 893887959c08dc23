"""Tri-finger cube manipulation benchmarks in a small deterministic simulator.

The package bundles three structured controllers (motion planning, cartesian
position control, cartesian impedance control), grasp heuristics with a
force-closure test, Bayesian optimization for controller gains, and a residual
policy learning environment, plus a benchmarking harness with a CLI.
"""

__version__ = "0.1.0"
