"""Descriptor-based MDP for learning pick, place and regrasp from point clouds."""

__version__ = "0.1.0"
