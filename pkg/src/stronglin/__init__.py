"""Deterministic simulation and linearizability tooling for randomized
shared-memory algorithms under restricted adversaries."""

__version__ = "0.1.0"
