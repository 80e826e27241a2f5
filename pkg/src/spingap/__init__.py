"""Spectral gap estimates for canonical ensembles of unbounded spins."""

from .potential import PotentialSpec, gaussian, quartic, smoothed_power
from .single_site import TiltedMeasure, solve_chemical_potential

__all__ = ["PotentialSpec", "gaussian", "quartic", "smoothed_power",
           "TiltedMeasure", "solve_chemical_potential"]
__version__ = "0.1.0"
