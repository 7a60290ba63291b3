"""Five-parameter helix model in a uniform solenoidal field along +z.

Parameters are defined at the point of closest approach (POCA) of the
trajectory to the origin:

``d_r``
    signed transverse distance of the POCA from the origin; the sign is that
    of the z component of (POCA x momentum).
``phi0``
    azimuth of the POCA as seen from the helix centre, in [0, 2pi).
``kappa``
    charge / pT in (GeV/c)^-1.
``d_z``
    z of the POCA.
``tan_lambda``
    pz / pT.

Positive tracks turn clockwise seen from +z, so the momentum azimuth at the
POCA is ``psi = phi0 - q * pi / 2``. Internally most routines work with
``psi`` and the signed curvature ``k = q / R`` (cm^-1), which stay smooth as
``kappa`` passes through zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "C_LIGHT",
    "HelixParams",
    "KinematicState",
    "radius_cm",
    "curvature_per_cm",
    "helix_from_state",
    "state_from_helix",
    "point_at_arclength",
    "direction_at_arclength",
    "poca_to_wire",
    "arclength_at_radius",
    "circle_distance",
    "line_doca",
]

C_LIGHT = 0.299792458  # GeV/c per (T m)
TWO_PI = 2.0 * np.pi


def radius_cm(pt, b_field=1.0):
    """Transverse radius of curvature in cm for pT in GeV/c and B in T."""
    return 100.0 * np.asarray(pt) / (C_LIGHT * b_field)


def curvature_per_cm(kappa, b_field=1.0):
    """Signed curvature q/R in cm^-1 for a given kappa."""
    return np.asarray(kappa) * C_LIGHT * b_field / 100.0


@dataclass(frozen=True)
class HelixParams:
    d_r: float
    phi0: float
    kappa: float
    d_z: float
    tan_lambda: float

    def __post_init__(self):
        if self.kappa == 0.0 or not np.isfinite(self.kappa):
            raise ValueError("kappa must be finite and non-zero")
        object.__setattr__(self, "phi0", float(self.phi0) % TWO_PI)

    @property
    def charge(self) -> int:
        return 1 if self.kappa > 0 else -1

    @property
    def pt(self) -> float:
        return 1.0 / abs(self.kappa)

    @property
    def psi(self) -> float:
        """Azimuth of the momentum at the POCA."""
        return (self.phi0 - self.charge * 0.5 * np.pi) % TWO_PI

    @property
    def cos_theta(self) -> float:
        return self.tan_lambda / np.hypot(1.0, self.tan_lambda)

    def as_array(self) -> np.ndarray:
        return np.array([self.d_r, self.phi0, self.kappa, self.d_z, self.tan_lambda])

    @classmethod
    def from_psi(cls, d_r, psi, kappa, d_z, tan_lambda) -> "HelixParams":
        q = 1 if kappa > 0 else -1
        return cls(float(d_r), float(psi) + q * 0.5 * np.pi, float(kappa),
                   float(d_z), float(tan_lambda))


@dataclass(frozen=True, eq=False)
class KinematicState:
    position: np.ndarray  # cm
    momentum: np.ndarray  # GeV/c
    charge: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        mom = np.asarray(self.momentum, dtype=float).reshape(3)
        if self.charge not in (-1, 1):
            raise ValueError(f"charge must be +1 or -1, got {self.charge}")
        if not np.any(mom):
            raise ValueError("momentum must be non-zero")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "momentum", mom)

    @property
    def pt(self) -> float:
        return float(np.hypot(self.momentum[0], self.momentum[1]))

    @property
    def cos_theta(self) -> float:
        return float(self.momentum[2] / np.linalg.norm(self.momentum))

    @property
    def phi(self) -> float:
        return float(np.arctan2(self.momentum[1], self.momentum[0]) % TWO_PI)

    def __eq__(self, other):
        if not isinstance(other, KinematicState):
            return NotImplemented
        return (
            self.charge == other.charge
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.momentum, other.momentum)
        )

    __hash__ = None


def _wrap_pi(a):
    return (np.asarray(a) + np.pi) % TWO_PI - np.pi


def helix_from_state(s: KinematicState, b_field: float = 1.0) -> HelixParams:
    """Helix parameters at the POCA to the origin for a state anywhere on the track."""
    if b_field <= 0:
        raise ValueError("b_field must be positive")
    pt = s.pt
    if pt <= 0.0:
        raise ValueError("transverse momentum must be positive")
    q = s.charge
    k = q * C_LIGHT * b_field / (100.0 * pt)
    psi_x = np.arctan2(s.momentum[1], s.momentum[0])
    x, y = s.position[0], s.position[1]
    # centre sits at position + (1/k) * (sin psi, -cos psi)
    cx = x + np.sin(psi_x) / k
    cy = y - np.cos(psi_x) / k
    dist = np.hypot(cx, cy)
    if dist == 0.0:
        raise ValueError("helix centre at the origin: POCA undefined")
    radius = 1.0 / abs(k)
    # unit vector from centre toward the origin is the POCA direction
    phi0 = np.arctan2(-cy, -cx)
    d_r = q * (dist - radius)
    # arclength from POCA to the given position; angle around centre falls by k*s
    theta_x = np.arctan2(y - cy, x - cx)
    s_x = _wrap_pi(phi0 - theta_x) / k
    tan_lambda = s.momentum[2] / pt
    d_z = s.position[2] - s_x * tan_lambda
    return HelixParams(float(d_r), float(phi0), q / pt, float(d_z), float(tan_lambda))


def state_from_helix(h: HelixParams, b_field: float = 1.0) -> KinematicState:
    psi = h.psi
    pt = h.pt
    pos = np.array([h.d_r * np.sin(psi), -h.d_r * np.cos(psi), h.d_z])
    mom = np.array([pt * np.cos(psi), pt * np.sin(psi), pt * h.tan_lambda])
    return KinematicState(pos, mom, h.charge)


def internal_params(h: HelixParams, b_field: float = 1.0) -> np.ndarray:
    """Smooth parametrisation (d_r, psi, k[cm^-1], d_z, tan_lambda)."""
    return np.array([h.d_r, h.psi, curvature_per_cm(h.kappa, b_field), h.d_z, h.tan_lambda])


def helix_from_internal(p, b_field: float = 1.0) -> HelixParams:
    kappa = p[2] * 100.0 / (C_LIGHT * b_field)
    return HelixParams.from_psi(p[0], p[1], kappa, p[3], p[4])


def _sinc(x):
    return np.sinc(x / np.pi)


def _points(p, s):
    """Helix points for internal params ``p`` (broadcastable) at arclength s."""
    d_r, psi, k, d_z, tl = p
    half = 0.5 * k * s
    chord = s * _sinc(half)
    ang = psi - half
    x = d_r * np.sin(psi) + chord * np.cos(ang)
    y = -d_r * np.cos(psi) + chord * np.sin(ang)
    z = d_z + s * tl
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def _tangent(p, s):
    _, psi, k, _, tl = p
    ang = psi - k * s
    return np.stack(np.broadcast_arrays(np.cos(ang), np.sin(ang), tl), axis=-1)


def _as_internal(h, b_field):
    """Internal tuple from HelixParams, or from a (..., 5) array already in
    internal form."""
    if isinstance(h, HelixParams):
        return tuple(internal_params(h, b_field))
    h = np.asarray(h, dtype=float)
    return tuple(h[..., i] for i in range(5))


def point_at_arclength(h: HelixParams, s_2d, b_field: float = 1.0):
    """3-D point(s) at transverse arclength ``s_2d`` (cm) from the POCA."""
    return _points(_as_internal(h, b_field), np.asarray(s_2d, dtype=float))


def direction_at_arclength(h: HelixParams, s_2d, b_field: float = 1.0):
    """Unnormalised tangent (cos, sin, tan_lambda) along the helix."""
    return _tangent(_as_internal(h, b_field), np.asarray(s_2d, dtype=float))


def arclength_at_radius(p, rho):
    """Smallest non-negative arclength where the transverse radius equals rho.

    Uses rho^2 = d_r^2 + 4 (1 + k d_r) sin^2(k s / 2) / k^2. Returns NaN where
    the circle never reaches ``rho``.
    """
    d_r, _, k, _, _ = p
    one_kd = 1.0 + k * d_r
    with np.errstate(invalid="ignore", divide="ignore"):
        length = np.sqrt((np.asarray(rho) ** 2 - d_r**2) / one_kd)
        x = 0.5 * k * length
        ratio = np.where(np.abs(x) < 1e-8, 1.0, np.arcsin(np.clip(x, -1, 1)) / np.where(x == 0, 1, x))
        s = np.where(np.abs(x) <= 1.0, length * ratio, np.nan)
    return s


def circle_distance(p, wx, wy):
    """Unsigned transverse distance from points (wx, wy) to the helix circle.

    Stable as the curvature goes to zero.
    """
    d_r, psi, k, _, _ = p
    sp, cp = np.sin(psi), np.cos(psi)
    along_m = wx * sp - wy * cp - d_r  # offset from POCA along (sin psi, -cos psi)
    along_t = wx * cp + wy * sp
    a = k * (along_m**2 + along_t**2) - 2.0 * along_m
    return np.abs(a) / (1.0 + np.sqrt(np.maximum(1.0 + k * a, 0.0)))


def line_doca(p, west, east, s0, n_iter: int = 8, tol: float = 1e-11):
    """Newton solution of the helix-to-wire-line closest approach.

    Parameters
    ----------
    p : tuple of arrays
        Internal helix parameters, broadcastable against the wires.
    west, east : ndarray, shape (..., 3)
        Wire endpoints.
    s0 : ndarray
        Starting arclengths, close to the answer.
    n_iter : int
        Most Newton steps taken.
    tol : float
        Stop once every step is below this, cm.

    Returns
    -------
    s, doca, side : ndarray
    """
    d_r, psi, k, d_z, tl = p
    d = east - west
    d = d / np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    wx, wy, wz = west[..., 0], west[..., 1], west[..., 2]
    px0 = d_r * np.sin(psi) - wx
    py0 = -d_r * np.cos(psi) - wy
    pz0 = d_z - wz
    s = np.asarray(s0, dtype=float)

    def geometry_at(s):
        half = 0.5 * k * s
        chord = s * np.sinc(half / np.pi)
        ang = psi - half
        rx = px0 + chord * np.cos(ang)
        ry = py0 + chord * np.sin(ang)
        rz = pz0 + s * tl
        along = rx * dx + ry * dy + rz * dz
        ex, ey, ez = rx - along * dx, ry - along * dy, rz - along * dz
        a2 = psi - k * s
        return ex, ey, ez, np.cos(a2), np.sin(a2), a2

    for _ in range(n_iter):
        ex, ey, ez, tx, ty, a2 = geometry_at(s)
        td = tx * dx + ty * dy + tl * dz
        g = ex * tx + ey * ty + ez * tl
        # second derivative of the helix is k * (sin, -cos, 0)
        e_h2 = k * (ex * ty - ey * tx)
        gp = 1.0 + tl * tl - td * td + e_h2
        gp = np.where(gp > 1e-12, gp, 1.0)
        step = g / gp
        s = s - step
        if np.max(np.abs(step), initial=0.0) < tol:
            break
    ex, ey, ez, tx, ty, _ = geometry_at(s)
    doca = np.sqrt(ex * ex + ey * ey + ez * ez)
    # e points from the wire to the track; the wire sits at -e
    cross = -tx * ey + ty * ex
    side = np.where(cross < 0, -1, 1)
    return s, doca, side


def _segment_dist(points, west, east):
    seg = east - west
    t = np.clip(((points - west) @ seg) / (seg @ seg), 0.0, 1.0)
    closest = west + t[..., None] * seg
    return np.linalg.norm(points - closest, axis=-1), closest


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def poca_to_wire(
    h: HelixParams,
    wire,
    b_field: float = 1.0,
    window=None,
    step: float = 0.5,
    n_golden: int = 80,
):
    """Closest approach of a helix to a finite wire segment.

    A coarse scan over the arclength window brackets the minimum, which
    golden-section search then refines.

    Parameters
    ----------
    h : HelixParams
    wire : pair of array-like
        ``(east, west)`` 3-D endpoints, as returned by ``wire_endpoints``.
    window : (float, float), optional
        Arclength range to search. Defaults to one full turn from the POCA,
        capped at 300 cm.
    step : float
        Coarse scan spacing in cm.

    Returns
    -------
    (s_star, doca, side) or None
        None when the distance has no interior minimum in the window.
    """
    east, west = (np.asarray(w, dtype=float) for w in wire)
    p = _as_internal(h, b_field)
    if window is None:
        window = (0.0, min(TWO_PI / abs(p[2]), 300.0))
    lo, hi = float(window[0]), float(window[1])
    n = int(np.clip(np.ceil((hi - lo) / step), 16, 20000)) + 1
    grid = np.linspace(lo, hi, n)
    dist, _ = _segment_dist(_points(p, grid), west, east)
    i = int(np.argmin(dist))
    if i == 0 or i == n - 1:
        return None
    a, b = grid[i - 1], grid[i + 1]

    def f(s):
        return _segment_dist(_points(p, np.array([s]))[0], west, east)[0]

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(n_golden):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        if b - a < 1e-13:
            break
    s_star = 0.5 * (a + b)
    pt = _points(p, np.array([s_star]))[0]
    doca, closest = _segment_dist(pt, west, east)
    t = _tangent(p, np.array([s_star]))[0]
    to_wire = closest - pt
    cross = t[0] * to_wire[1] - t[1] * to_wire[0]
    side = -1 if cross < 0 else 1
    return float(s_star), float(doca), side
