"""Resolvent estimates, embedded eigenvalues and resonances on manifolds with cylindrical ends."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .geometry import (EndProfile, GeometryError, InputError, ManifoldConfig, RepulsivePotential, ResolutionError,
                       TransverseSpectrum, estar_threshold, transverse_spectrum, validate_profile)
from .halfline import BoundReport, ModeOperator, PoleSignal, PreconditionError, Weight, WeightQuery, discretize, weighted_norm
from .modes import ModeFamily, assemble_modes, full_weighted_norm
from .embedded import HourglassSpec, certify_embedded, embedded_criterion
from .continuation import (ResonanceRecord, RiemannPoint, boundary_point, dh_metric, mode_resonances,
                           resonance_free_region, transport)

__all__ = [
    "EndProfile", "GeometryError", "InputError", "ManifoldConfig", "RepulsivePotential", "ResolutionError",
    "TransverseSpectrum", "estar_threshold", "transverse_spectrum", "validate_profile",
    "BoundReport", "ModeOperator", "PoleSignal", "PreconditionError", "Weight", "WeightQuery", "discretize",
    "weighted_norm", "ModeFamily", "assemble_modes", "full_weighted_norm",
    "HourglassSpec", "certify_embedded", "embedded_criterion",
    "ResonanceRecord", "RiemannPoint", "boundary_point", "dh_metric", "mode_resonances",
    "resonance_free_region", "transport",
]
