"""Dual-stream tri-plane vision transformer with a residual temporal
attention head, plus the seeded synthetic volumetric benchmark that drives
its experiments."""

__version__ = "0.1.0"
