"""fbmlab: simulation and numerical checks for differential equations driven
by fractional Brownian motion."""

__version__ = "0.1.0"
