"""Saddle dynamics for nonconvex PDE-constrained optimal control."""

from .grid import Grid, build_grid
from .hisd import HisdConfig, SaddlePoint, run_pchisd
from .landscape import LandscapeGraph, build_landscape
from .problem import PRESETS, Problem, make_preset

__all__ = [
    "Grid", "build_grid", "HisdConfig", "SaddlePoint", "run_pchisd",
    "LandscapeGraph", "build_landscape", "PRESETS", "Problem", "make_preset",
]
