"""Monte Carlo stochastic depth: uncertainty estimates for residual networks."""

__version__ = "1.0.0"
