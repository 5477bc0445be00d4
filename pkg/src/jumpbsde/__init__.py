"""Numerical lab for BSDEs driven by a Brownian motion and a marked jump measure."""

__version__ = "0.1.0"
