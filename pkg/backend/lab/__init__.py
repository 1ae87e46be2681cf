"""Periodic homogenization lab for interacting lattice diffusions on the torus."""
__version__ = "0.1.0"
