"""Multimodal (graph + image) constructive policy for the generalized TSP,
with classical reference solvers and a benchmarking CLI."""

__version__ = "0.1.0"
