"""Nearest class-center probes and the stochastic variability-simplification loss
for small fully-connected networks."""

__version__ = "0.1.0"
