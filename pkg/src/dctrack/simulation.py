"""Toy event generation: kinematics, digitisation, noise and track selection.

Each event draws from its own RNG stream keyed on ``(seed, event_id)`` so
events can be generated in any order or in parallel and still come out
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geometry import MDCGeometry, WireId, default_geometry
from .helix import (
    HelixParams,
    KinematicState,
    arclength_at_radius,
    helix_from_state,
    internal_params,
    line_doca,
    point_at_arclength,
)

__all__ = [
    "Category",
    "SimConfig",
    "Hit",
    "TruthTrack",
    "Event",
    "SPECIES_CHARGE",
    "sample_kinematics",
    "crossings",
    "digitize",
    "overlay_noise",
    "apply_track_selection",
    "generate_event",
    "generate_events",
    "event_rng",
]

PT_RANGE = (0.15, 1.5)
COS_THETA_MAX = 0.93
CLOSE_BY_DPHI = 0.2
MIN_LAYERS = 6

SPECIES_CHARGE = {
    "e-": -1, "e+": 1,
    "mu-": -1, "mu+": 1,
    "pi+": 1, "pi-": -1,
    "K+": 1, "K-": -1,
    "p": 1, "pbar": -1,
}


class Category(str, Enum):
    SINGLE = "single"
    CONVENTIONAL_TWO = "conventional-two"
    CLOSE_BY_TWO = "close-by-two"


@dataclass(frozen=True)
class SimConfig:
    noise_rate: float = 30.0  # mean noise hits per event
    efficiency: float = 0.98  # per-hit survival probability
    sigma_drift: float = 0.013  # cm
    b_field: float = 1.0  # T

    def __post_init__(self):
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.sigma_drift < 0:
            raise ValueError("sigma_drift must be >= 0")
        if self.b_field <= 0:
            raise ValueError("b_field must be positive")


@dataclass(frozen=True, slots=True)
class Hit:
    wire: WireId
    middle_x: float
    middle_y: float
    layer: int
    slayer: int
    locallayer: int
    raw_drift_dist: float
    raw_drift_dist_err: float
    is_signal: int
    track_index: int
    scaled_flt_len: float
    lr_ambig: int

    def as_noise(self) -> "Hit":
        return replace(self, is_signal=0, track_index=0)


@dataclass(frozen=True)
class TruthTrack:
    track_index: int
    state: KinematicState
    detectable_hits: tuple[Hit, ...] = ()
    species: str | None = field(default=None, compare=False)

    @property
    def charge(self) -> int:
        return self.state.charge

    @property
    def pt(self) -> float:
        return self.state.pt

    @property
    def cos_theta(self) -> float:
        return self.state.cos_theta

    def helix(self, b_field: float = 1.0) -> HelixParams:
        return helix_from_state(self.state, b_field)


@dataclass(frozen=True)
class Event:
    event_id: int
    truth: tuple[TruthTrack, ...]
    hits: tuple[Hit, ...]
    category: Category | None = field(default=None, compare=False)

    def sorted(self) -> "Event":
        """Copy with hits in canonical (layer, cell) order."""
        return replace(self, hits=tuple(sorted(self.hits, key=lambda h: h.wire)))


def event_rng(seed: int, event_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(event_id,)))


def _state(rng, phi, charge):
    pt = rng.uniform(*PT_RANGE)
    cos_t = rng.uniform(-COS_THETA_MAX, COS_THETA_MAX)
    tan_l = cos_t / np.sqrt(1.0 - cos_t**2)
    mom = np.array([pt * np.cos(phi), pt * np.sin(phi), pt * tan_l])
    return KinematicState(np.zeros(3), mom, charge)


def sample_kinematics(category, rng) -> list[tuple[str, KinematicState]]:
    """Draw production states for one event.

    ``rng`` is a Generator or an integer seed. Returns ``(species, state)``
    pairs, all produced at the origin.
    """
    category = Category(category)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if category is Category.SINGLE:
        species = rng.choice(list(SPECIES_CHARGE))
        phi = rng.uniform(0.0, 2.0 * np.pi)
        return [(str(species), _state(rng, phi, SPECIES_CHARGE[species]))]
    first = "pi+" if rng.integers(2) else "pi-"
    second = "pi-" if first == "pi+" else "pi+"
    phi1 = rng.uniform(0.0, 2.0 * np.pi)
    if category is Category.CLOSE_BY_TWO:
        phi2 = (phi1 + CLOSE_BY_DPHI) % (2.0 * np.pi)
    else:
        phi2 = rng.uniform(0.0, 2.0 * np.pi)
    return [
        (first, _state(rng, phi1, SPECIES_CHARGE[first])),
        (second, _state(rng, phi2, SPECIES_CHARGE[second])),
    ]


def _make_hits(geometry, layers, cells, drift, err, signal, track, flt, lr):
    mx, my = geometry.midpoints_array(layers, cells)
    hits = []
    for i in range(len(layers)):
        lay = int(layers[i])
        hits.append(
            Hit(
                wire=WireId(lay, int(cells[i])),
                middle_x=float(mx[i]),
                middle_y=float(my[i]),
                layer=lay,
                slayer=int(geometry.superlayer[lay]),
                locallayer=int(geometry.local_layer[lay]),
                raw_drift_dist=float(drift[i]),
                raw_drift_dist_err=float(err),
                is_signal=int(signal),
                track_index=int(track),
                scaled_flt_len=float(flt[i]),
                lr_ambig=int(lr[i]),
            )
        )
    return hits


def crossings(helix: HelixParams, geometry: MDCGeometry, b_field: float = 1.0):
    """Layers the outgoing helix crosses inside their wire length.

    Returns ``(layers, s, points)`` with ``s`` the transverse arclength at
    the layer-radius crossing.
    """
    p = tuple(internal_params(helix, b_field))
    s = arclength_at_radius(p, geometry.radius)
    layers = np.flatnonzero(np.isfinite(s))
    s = s[layers]
    pts = point_at_arclength(helix, s, b_field)
    inside = np.abs(pts[:, 2]) <= geometry.half_length[layers]
    return layers[inside], s[inside], pts[inside]


def digitize(track: TruthTrack, geometry: MDCGeometry, config: SimConfig, rng,
             vertex_s: float = 0.0) -> list[Hit]:
    """Signal hits for one track: nearest wire per crossed layer, smeared drift.

    ``vertex_s`` is the production vertex arclength from the POCA.
    """
    b = config.b_field
    helix = track.helix(b)
    layers, s_cross, pts = crossings(helix, geometry, b)
    if len(layers) == 0:
        return []
    cells = geometry.nearest_wires(layers, pts)
    west, east = geometry.endpoints_array(layers, cells)
    p = tuple(internal_params(helix, b))
    s_star, doca, side = line_doca(p, west, east, s_cross)
    half_pitch = 0.5 * geometry.pitch[layers]
    smear = rng.normal(0.0, config.sigma_drift, len(layers)) if config.sigma_drift > 0 else 0.0
    drift = np.minimum(np.abs(doca + smear), np.nextafter(half_pitch, 0.0))
    keep = rng.random(len(layers)) < config.efficiency
    radius = 100.0 * helix.pt / (0.299792458 * b)
    flt = (s_star - vertex_s) / (2.0 * np.pi * radius)
    sel = np.flatnonzero(keep)
    return _make_hits(
        geometry, layers[sel], cells[sel], drift[sel], config.sigma_drift, 1,
        track.track_index, flt[sel], side[sel],
    )


def _dedup(hits):
    best = {}
    for h in hits:
        cur = best.get(h.wire)
        if cur is None or h.raw_drift_dist < cur.raw_drift_dist:
            best[h.wire] = h
    return sorted(best.values(), key=lambda h: h.wire)


def _attach(event: Event) -> Event:
    by_track: dict[int, list[Hit]] = {}
    for h in event.hits:
        if h.is_signal:
            by_track.setdefault(h.track_index, []).append(h)
    truth = tuple(
        replace(t, detectable_hits=tuple(by_track.get(t.track_index, ())))
        for t in event.truth
    )
    return replace(event, truth=truth)


def overlay_noise(event: Event, noise_rate: float, rng, geometry: MDCGeometry | None = None,
                  sigma_drift: float = 0.013) -> Event:
    """Add Poisson(noise_rate) noise hits on free wires."""
    if noise_rate < 0:
        raise ValueError("noise_rate must be >= 0")
    if noise_rate == 0:
        return event
    geometry = geometry or default_geometry()
    n = int(rng.poisson(noise_rate))
    if n == 0:
        return event
    used = geometry.flat_index([h.wire.global_layer for h in event.hits],
                               [h.wire.cell for h in event.hits])
    free = np.setdiff1d(np.arange(geometry.total_wires), used)
    n = min(n, len(free))
    chosen = np.sort(rng.choice(free, size=n, replace=False))
    layers, cells = geometry.unflatten(chosen)
    drift = rng.uniform(0.0, 0.5 * geometry.pitch[layers])
    lr = np.where(rng.random(n) < 0.5, -1, 1)
    noise = _make_hits(geometry, layers, cells, drift, sigma_drift, 0, 0, np.zeros(n), lr)
    hits = sorted(list(event.hits) + noise, key=lambda h: h.wire)
    return replace(event, hits=tuple(hits))


def apply_track_selection(event: Event, min_layers: int = MIN_LAYERS) -> Event:
    """Relabel hits of tracks spanning fewer than ``min_layers`` layers as noise
    and drop those tracks from the truth list."""
    layers: dict[int, set[int]] = {}
    for h in event.hits:
        if h.is_signal:
            layers.setdefault(h.track_index, set()).add(h.layer)
    short = {t.track_index for t in event.truth if len(layers.get(t.track_index, ())) < min_layers}
    if not short:
        return event
    hits = tuple(h.as_noise() if h.is_signal and h.track_index in short else h for h in event.hits)
    truth = tuple(t for t in event.truth if t.track_index not in short)
    return _attach(replace(event, hits=hits, truth=truth))


def generate_event(category, event_id: int, seed: int, config: SimConfig | None = None,
                   geometry: MDCGeometry | None = None) -> Event:
    config = config or SimConfig()
    geometry = geometry or default_geometry()
    category = Category(category)
    rng = event_rng(seed, event_id)
    truth = []
    hits = []
    for i, (species, state) in enumerate(sample_kinematics(category, rng), start=1):
        t = TruthTrack(track_index=i, state=state, species=species)
        truth.append(t)
        hits.extend(digitize(t, geometry, config, rng))
    event = Event(event_id, tuple(truth), tuple(_dedup(hits)), category)
    event = overlay_noise(event, config.noise_rate, rng, geometry, config.sigma_drift)
    # event-level truth veto is a no-op: only signal topologies are generated
    return apply_track_selection(_attach(event))


def generate_events(category, n_events: int, seed: int, config: SimConfig | None = None,
                    geometry: MDCGeometry | None = None, first_id: int = 0) -> list[Event]:
    return [generate_event(category, first_id + i, seed, config, geometry) for i in range(n_events)]
