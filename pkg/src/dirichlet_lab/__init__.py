"""dirichlet-lab: Monte Carlo / finite-element laboratory for Dirichlet
problems on irregular bounded open sets."""

__version__ = "0.1.0"
