"""Optic-flow tunnel navigation: simulation, policy-gradient training and Shapley attention maps."""

__version__ = "0.1.0"
