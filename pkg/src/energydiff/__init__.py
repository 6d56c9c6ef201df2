"""Energy diffusion in the harmonic lattice with momentum-exchange noise."""
from energydiff.core import AdmissibilityError, DivergenceError, ModelParams, PhaseState
from energydiff.dynamics import Integrator, calibrate_generator
from energydiff.equilibrium import GibbsSampler
from energydiff.estimators import (
    SoundConeError,
    estimate_correlation,
    green_kubo,
    msd,
    simulate,
)
from energydiff.spectral import thermal_diffusivity

__all__ = [
    "AdmissibilityError",
    "DivergenceError",
    "GibbsSampler",
    "Integrator",
    "ModelParams",
    "PhaseState",
    "SoundConeError",
    "calibrate_generator",
    "estimate_correlation",
    "green_kubo",
    "msd",
    "simulate",
    "thermal_diffusivity",
]
