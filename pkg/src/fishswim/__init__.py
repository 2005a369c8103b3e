"""Desk-scale robotic-fish training stack: LBM fluid, articulated body, SAC, baseline."""

__version__ = "0.1.0"
