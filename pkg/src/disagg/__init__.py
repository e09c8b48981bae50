"""Disaggregated volumetric data layouts with a lattice Boltzmann test bed."""

__version__ = "0.1.0"
