"""Monte Carlo and Malliavin-calculus tools for planar kinetic Brownian motion."""

__version__ = "0.1.0"
