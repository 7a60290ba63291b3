"""Toy drift-chamber tracking benchmark.

Geometry and helix utilities, a small event simulator, a hit-level CSV
format, a Hough track finder, a least-squares helix fitter and the matching
metrics used to score them.
"""

__version__ = "0.1.0"

from .geometry import MDCGeometry, WireId, default_geometry, load_geometry
from .helix import HelixParams, KinematicState, helix_from_state, state_from_helix
from .simulation import Category, Event, SimConfig, generate_event, generate_events
from .finder import HoughTrackFinder, TrackCandidate
from .fitter import FitResult, HelixFitter, fit_helix, fitted_charge

__all__ = [
    "MDCGeometry",
    "WireId",
    "default_geometry",
    "load_geometry",
    "HelixParams",
    "KinematicState",
    "helix_from_state",
    "state_from_helix",
    "Category",
    "Event",
    "SimConfig",
    "generate_event",
    "generate_events",
    "HoughTrackFinder",
    "TrackCandidate",
    "FitResult",
    "HelixFitter",
    "fit_helix",
    "fitted_charge",
]
