"""Least-squares helix fit of a track candidate.

The fit runs in three stages:

1. a Taubin circle fit on the axial hits, each wire moved by its drift
   distance towards the current circle;
2. a straight-line fit of z against transverse arclength, using the points
   where the stereo wires cross the transverse circle;
3. damped Gauss-Newton passes on all hits, minimising the difference between
   the signed 3-D distance of closest approach and the signed drift distance.
   Left/right signs are re-read from the current helix at the start of every
   pass.

Fitting happens in the smooth internal parameters (d_r, psi, k, d_z,
tan_lambda) so that a track can pass through infinite momentum without the
parametrisation blowing up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .finder import TrackCandidate, hit_matrix
from .geometry import default_geometry
from .helix import (
    C_LIGHT,
    HelixParams,
    arclength_at_radius,
    helix_from_internal,
    internal_params,
    line_doca,
)
from .helix import _points, _tangent

__all__ = ["FitResult", "HelixFitter", "fit_helix", "fitted_charge", "taubin_circle"]

MIN_HITS = 6
MAX_RECOVERY = 2  # extra passes allowed for taking back wrongly cut hits
SIGMA_FLOOR = 1e-4  # cm; stands in for a zero drift error on unsmeared data


@dataclass(frozen=True)
class FitResult:
    """Outcome of one helix fit.

    ``covariance`` is in (d_r, phi0, kappa, d_z, tan_lambda) order; the z
    rows are NaN when the fit had too few stereo hits to constrain them.
    ``used`` indexes the input hits that survived outlier rejection.
    ``chi2_trace`` holds one ``(n_hits, chi2_values)`` pair per pass: the
    hits used and chi2 at the start of the pass and after every accepted
    step.
    """

    params: HelixParams
    chi2: float
    ndf: int
    converged: bool
    z_constrained: bool = True
    covariance: np.ndarray | None = field(default=None, repr=False, compare=False)
    n_iter: int = 0
    used: np.ndarray | None = field(default=None, repr=False, compare=False)
    chi2_trace: tuple = field(default=(), repr=False, compare=False)

    @property
    def charge(self) -> int:
        return self.params.charge


def _freeze(trace):
    return tuple((n, tuple(values)) for n, values in trace)


def fitted_charge(result: FitResult) -> int:
    """Charge from the sign of the fitted kappa."""
    return 1 if result.params.kappa > 0 else -1


def taubin_circle(x, y):
    """Taubin algebraic circle fit.

    Returns
    -------
    (cx, cy, r) : tuple of float

    Raises
    ------
    np.linalg.LinAlgError
        Fewer than three distinct points, or all of them collinear.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise np.linalg.LinAlgError("need at least three points")
    mx, my = x.mean(), y.mean()
    u, v = x - mx, y - my
    z = u * u + v * v
    zm = z.mean()
    z0 = (z - zm) / (2.0 * np.sqrt(zm)) if zm > 0 else z
    _, sv, vt = np.linalg.svd(np.column_stack([z0, u, v]), full_matrices=False)
    if sv[-1] < 1e-12 * sv[0] and sv[-2] < 1e-12 * sv[0]:
        raise np.linalg.LinAlgError("degenerate point set")
    a = vt[-1]
    a0 = a[0] / (2.0 * np.sqrt(zm))
    a3 = -zm * a0
    if abs(a0) < 1e-14 * np.linalg.norm(a):
        raise np.linalg.LinAlgError("points are collinear")
    cx = -a[1] / (2.0 * a0) + mx
    cy = -a[2] / (2.0 * a0) + my
    r = np.sqrt(a[1] ** 2 + a[2] ** 2 - 4.0 * a0 * a3) / (2.0 * abs(a0))
    return float(cx), float(cy), float(r)


def _circle_to_internal(cx, cy, r, q):
    """(d_r, psi, k) of the circle (cx, cy, r) travelled with charge sign q."""
    cn = np.hypot(cx, cy)
    return q * (cn - r), float(np.arctan2(q * cx, -q * cy)), q / r


def _centre(p):
    d_r, psi, k = p[0], p[1], p[2]
    lever = d_r + 1.0 / k
    return lever * np.sin(psi), -lever * np.cos(psi)


class HelixFitter(BaseEstimator):
    """Helix fit of one candidate's hits.

    Parameters
    ----------
    geometry : MDCGeometry, optional
    b_field : float
        Field in T.
    n_passes : int
        Gauss-Newton passes, each on a fresh outlier selection. Up to
        ``MAX_RECOVERY`` extra passes follow when the final helix explains
        hits that an earlier pass left out. Left/right signs are taken from
        the helix at every evaluation.
    max_iter : int
        Iteration cap per pass.
    tol : float
        Convergence threshold on the largest parameter step.
    sigma_floor : float
        Lower bound on the per-hit drift error, cm.
    outlier_cut : float
        Hits further than this many errors from the helix, or three robust
        residual spreads when that is wider, are left out of the next pass.

    Attributes
    ----------
    result_ : FitResult
    params_ : HelixParams
    chi2_, ndf_, converged_, z_constrained_ : as in ``result_``
    """

    def __init__(self, geometry=None, b_field=1.0, n_passes=2, max_iter=15, tol=1e-8,
                 sigma_floor=SIGMA_FLOOR, outlier_cut=5.0):
        self.geometry = geometry
        self.b_field = b_field
        self.n_passes = n_passes
        self.max_iter = max_iter
        self.tol = tol
        self.sigma_floor = sigma_floor
        self.outlier_cut = outlier_cut

    # -- public ---------------------------------------------------------------

    def fit(self, X, y=None, seed: HelixParams | None = None):
        """Fit the hits in ``X`` (rows in ``HIT_FEATURES`` order).

        ``seed`` supplies the starting helix and, in particular, the charge
        used to orient the first circle. Without it the seed is a straight
        track through the origin towards the hits' mean azimuth.
        """
        geom = self.geometry or default_geometry()
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or len(X) < MIN_HITS:
            raise ValueError(f"a helix fit needs at least {MIN_HITS} hits, got {len(X)}")
        if seed is None:
            phi = float(np.arctan2(X[:, 1].mean(), X[:, 0].mean()))
            seed = HelixParams.from_psi(0.0, phi, 1e-6, 0.0, 0.0)
        self.result_ = self._fit(X, seed, geom)
        r = self.result_
        self.params_, self.chi2_, self.ndf_ = r.params, r.chi2, r.ndf
        self.converged_, self.z_constrained_ = r.converged, r.z_constrained
        self.covariance_ = r.covariance
        return self

    def predict(self, X):
        """Unsigned distance of closest approach from the fitted helix to each
        hit's wire, cm, i.e. the expected drift distance."""
        check_is_fitted(self, "result_")
        geom = self.geometry or default_geometry()
        w = self._wires(np.asarray(X, dtype=float), geom)
        p = tuple(internal_params(self.params_, self.b_field))
        _, doca, _ = line_doca(p, w[0], w[1], self._s_start(p, w[2]))
        return doca

    # -- stages ----------------------------------------------------------------

    @staticmethod
    def _wires(X, geom):
        layers = X[:, 2].astype(int)
        cells = geom.cells_from_midpoints(layers, X[:, 0], X[:, 1])
        west, east = geom.endpoints_array(layers, cells)
        return west, east, geom.radius[layers], geom.is_axial[layers], geom.half_length[layers]

    @staticmethod
    def _s_start(p, radius):
        s = arclength_at_radius(p, radius)
        reach = np.pi / max(abs(float(p[2])), 1e-12)
        return np.where(np.isfinite(s), s, min(reach, 300.0))

    def _circle_stage(self, X, axial, p):
        """Taubin fit on drift-corrected axial points.

        Two refinement chains run: one takes the first drift-circle sides
        from the start, the other from a Taubin fit to the bare wire
        positions, which needs no sides at all. Whichever of the start and
        the two results best explains the axial hits is returned.
        """
        x, y, d = X[axial, 0], X[axial, 1], X[axial, 3]
        if len(x) < 3:
            return p
        err = np.maximum(X[axial, 4], self.sigma_floor)
        floor = np.maximum(self.outlier_cut * err, 0.05)
        q = 1.0 if p[2] > 0 else -1.0

        def resid(p):
            cx, cy = _centre(p)
            return np.abs(np.abs(np.hypot(x - cx, y - cy) - 1.0 / abs(p[2])) - d)

        def cost(p):
            return float(np.sum(np.minimum((resid(p) / floor) ** 2, 1.0)))

        choices = [p]
        try:
            cx, cy, r = taubin_circle(x, y)
            if np.isfinite(r) and r > 0:
                choices.append(self._circle_chain(x, y, d, floor, np.array(
                    [*_circle_to_internal(cx, cy, r, q), p[3], p[4]])))
        except np.linalg.LinAlgError:
            pass
        choices.insert(1, self._circle_chain(x, y, d, floor, p))
        costs = [cost(c) if c is not None else np.inf for c in choices]
        return choices[int(np.argmin(costs))]

    @staticmethod
    def _circle_chain(x, y, d, floor, p):
        """Alternate side assignment and Taubin refits from circle ``p``.

        Each round keeps only points within a cut that scales with the robust
        spread of the residuals; rounds stop once neither the sides nor the
        selection change. Returns None if a fit fails.
        """
        q = 1.0 if p[2] > 0 else -1.0
        min_sel = max(3, len(x) // 2)
        sel = np.ones(len(x), dtype=bool)
        state = None
        for _ in range(10):
            cx, cy = _centre(p)
            dx, dy = x - cx, y - cy
            dist = np.hypot(dx, dy)
            outside = dist > 1.0 / abs(p[2])
            if state is not None and np.array_equal(outside, state[0]) and np.array_equal(sel, state[1]):
                break
            state = (outside, sel)
            shift = np.where(outside, -d, d) / np.where(dist > 0, dist, 1.0)
            try:
                cx, cy, r = taubin_circle((x + shift * dx)[sel], (y + shift * dy)[sel])
            except np.linalg.LinAlgError:
                return None
            if not np.isfinite(r) or r <= 0:
                return None
            p = np.array([*_circle_to_internal(cx, cy, r, q), p[3], p[4]])
            cx, cy = _centre(p)
            res = np.abs(np.abs(np.hypot(x - cx, y - cy) - r) - d)
            cut = np.maximum(floor, 3.0 * 1.4826 * np.median(res[sel]))
            new_sel = res <= cut
            if new_sel.sum() >= min_sel:
                sel = new_sel
        return p

    def _z_stage(self, X, wires, stereo, p):
        """Line fit z = d_z + s tan_lambda through the stereo wire crossings."""
        west, east, _, _, hl = wires
        if stereo.sum() < 2:
            return p, False
        cx, cy = _centre(p)
        r = 1.0 / abs(p[2])
        w0 = west[stereo, :2] - (cx, cy)
        dvec = east[stereo, :2] - west[stereo, :2]
        a = np.sum(dvec * dvec, axis=1)
        b = 2.0 * np.sum(dvec * w0, axis=1)
        d = X[stereo, 3]
        hl = hl[stereo]
        # candidate crossings: circle grown or shrunk by the drift, two roots each
        ts, zs, ss = [], [], []
        pca = np.array([p[0] * np.sin(p[1]), -p[0] * np.cos(p[1])]) - (cx, cy)
        a0 = np.arctan2(pca[1], pca[0])
        q = 1.0 if p[2] > 0 else -1.0
        for sign in (1.0, -1.0):
            c = np.sum(w0 * w0, axis=1) - (r + sign * d) ** 2
            disc = b * b - 4.0 * a * c
            sq = np.sqrt(np.maximum(disc, 0.0))
            for root in (1.0, -1.0):
                t = (-b + root * sq) / (2.0 * a)
                good = (disc >= 0) & (t >= -0.05) & (t <= 1.05)
                px, py = w0[:, 0] + t * dvec[:, 0], w0[:, 1] + t * dvec[:, 1]
                turn = (q * (a0 - np.arctan2(py, px))) % (2.0 * np.pi)
                good &= turn <= np.pi
                ts.append(np.where(good, t, np.nan))
                zs.append(-hl + 2.0 * hl * t)
                ss.append(turn * r)
        zs, ss, ok = np.array(zs), np.array(ss), np.isfinite(np.array(ts))
        d_z, tan_l = p[3], p[4]
        used = False
        for _ in range(3):
            res = np.where(ok, np.abs(zs - (d_z + ss * tan_l)), np.inf)
            pick = np.argmin(res, axis=0)
            cols = np.arange(res.shape[1])
            have = np.isfinite(res[pick, cols])
            if have.sum() < 2:
                break
            s_sel, z_sel = ss[pick, cols][have], zs[pick, cols][have]
            if np.ptp(s_sel) <= 0:
                break
            tan_l, d_z = np.polyfit(s_sel, z_sel, 1)
            used = True
        return np.array([p[0], p[1], p[2], d_z, tan_l]), used

    def _signed(self, p, west, east, s0):
        """Signed doca and POCA arclength; p may carry a leading batch axis."""
        s, doca, side = line_doca(p, west, east, s0)
        return side * doca, s

    def _fit(self, X, seed, geom):
        wires = self._wires(X, geom)
        west, east, radius, axial, _ = wires
        drift = X[:, 3]
        sigma = np.maximum(X[:, 4] if X.shape[1] > 4 else 0.0, self.sigma_floor)
        seed_p = internal_params(seed, self.b_field)
        if not np.isfinite(seed_p).all() or seed_p[2] == 0:
            seed_p[2] = 1e-6
        p = self._circle_stage(X, axial, seed_p.copy())
        p, z_ok = self._z_stage(X, wires, ~axial, p)
        free = np.arange(5) if z_ok else np.arange(3)
        use = np.ones(len(X), dtype=bool)

        s_all = self._s_start(p, radius)
        converged = False
        cov_int = None
        n_iter = 0
        chi2 = np.inf
        trace = []
        n_pass = 0
        while True:
            # leave out hits the current helix cannot explain, keeping enough
            # for the fit; the cut widens with the robust spread of residuals
            # so a helix still far from the hits does not shed most of them,
            # and it is redone from all hits each pass so early losses can
            # return once the helix has improved
            r_all = (np.abs(self._signed(tuple(p), west, east, s_all)[0]) - drift) / sigma
            spread = 1.4826 * np.median(np.abs(r_all[use]))
            cut = max(self.outlier_cut, 3.0 * spread)
            good = np.abs(r_all) <= cut
            enough = good.sum() >= max(MIN_HITS, len(free) + 1)
            if z_ok:
                enough &= (good & ~axial).sum() >= 2  # keep the z line determined
            if n_pass >= self.n_passes:
                # extra passes only to take back hits the final helix explains
                if n_pass >= self.n_passes + MAX_RECOVERY or not (enough and (good & ~use).any()):
                    break
            if enough:
                use = good
            n_pass += 1
            w_, e_, d_, sg_ = west[use], east[use], drift[use], sigma[use]
            _, s_cur = self._signed(tuple(p), w_, e_, s_all[use])

            def residual(params, s0):
                # left/right re-resolved from the helix at every evaluation
                dlt, s_new = self._signed(params, w_, e_, s0)
                side = np.where(dlt < 0, -1.0, 1.0)
                return (dlt - side * d_) / sg_, s_new

            r, s_cur = residual(tuple(p), s_cur)
            chi2 = float(r @ r)
            trace.append((int(use.sum()), [chi2]))
            lam = 1e-3
            converged = False
            for _ in range(self.max_iter):
                n_iter += 1
                J = self._jacobian(p, free, w_, e_, s_cur, sg_)
                A = J.T @ J
                g = J.T @ r
                step = None
                for _ in range(8):
                    M = A + lam * np.diag(np.maximum(np.diag(A), 1e-12))
                    try:
                        dp = -np.linalg.solve(M, g)
                    except np.linalg.LinAlgError:
                        break
                    trial = p.copy()
                    trial[free] += dp
                    if trial[2] == 0:
                        trial[2] = 1e-12
                    r_new, s_new = residual(tuple(trial), s_cur)
                    chi2_new = float(r_new @ r_new)
                    # accept only a strict improvement, so the seed's charge
                    # survives unless flipping it really fits better
                    if np.isfinite(chi2_new) and chi2_new < chi2:
                        step = (trial, r_new, s_new, chi2_new, dp)
                        lam = max(lam / 10.0, 1e-9)
                        break
                    lam *= 10.0
                if step is None:
                    converged = bool(np.isfinite(chi2))
                    break
                p, r, s_cur, chi2, dp = step
                trace[-1][1].append(chi2)
                if np.max(np.abs(dp)) < self.tol * max(1.0, np.max(np.abs(p[free]))):
                    converged = True
                    break
            s_all[use] = s_cur
            J = self._jacobian(p, free, w_, e_, s_cur, sg_)
            try:
                cov_int = np.linalg.inv(J.T @ J)
            except np.linalg.LinAlgError:
                return FitResult(seed, float("nan"), int(use.sum()) - len(free), False, z_ok,
                                 None, n_iter, np.flatnonzero(use), _freeze(trace))
        ndf = int(use.sum()) - len(free)

        params = helix_from_internal(p, self.b_field)
        cov = np.full((5, 5), np.nan)
        jac = np.array([1.0, 1.0, 100.0 / (C_LIGHT * self.b_field), 1.0, 1.0])[free]
        cov[np.ix_(free, free)] = cov_int * np.outer(jac, jac)
        return FitResult(params, chi2, ndf, bool(converged), z_ok, cov, n_iter,
                         np.flatnonzero(use), _freeze(trace))

    @staticmethod
    def _jacobian(p, free, west, east, s, sigma):
        """Analytic Jacobian of the normalised residuals.

        The POCA arclength is stationary, so the derivative of the distance is
        the unit wire-to-track vector dotted into the derivative of the helix
        point at fixed arclength.
        """
        d_r, psi, k = p[0], p[1], p[2]
        pts = _points(tuple(p), s)
        d = east - west
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        rel = pts - west
        e = rel - np.sum(rel * d, axis=-1, keepdims=True) * d
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
        # at zero distance the signed doca is still smooth: its gradient is the
        # in-plane normal, recovered from the side convention
        tan = _tangent(tuple(p), s)
        nrm = np.cross(tan, d)
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
        unit = np.where(norm > 1e-12, e / np.where(norm > 0, norm, 1.0), nrm)
        half = 0.5 * k * s
        chord = s * np.sinc(half / np.pi)
        with np.errstate(divide="ignore", invalid="ignore"):
            dchord = np.where(np.abs(half) < 1e-4, -(s**3) * k / 12.0, (s * np.cos(half) - chord) / k)
        ang = psi - half
        ca, sa = np.cos(ang), np.sin(ang)
        zero = np.zeros_like(s)
        one = np.ones_like(s)
        dx = np.stack([
            np.stack([np.sin(psi) * one, -np.cos(psi) * one, zero], -1),
            np.stack([d_r * np.cos(psi) - chord * sa, d_r * np.sin(psi) + chord * ca, zero], -1),
            np.stack([dchord * ca + 0.5 * s * chord * sa, dchord * sa - 0.5 * s * chord * ca, zero], -1),
            np.stack([zero, zero, one], -1),
            np.stack([zero, zero, s], -1),
        ])
        # signed doca = side * |e|; its gradient is side * unit(e) . dx
        cross = tan[:, 0] * (-e[:, 1]) - tan[:, 1] * (-e[:, 0])
        side = np.where(norm[:, 0] > 1e-12, np.where(cross < 0, -1.0, 1.0), 1.0)
        J = np.einsum("pnc,nc->np", dx, unit) * side[:, None]
        return J[:, free] / sigma[:, None]


def fit_helix(candidate: TrackCandidate, hits, geometry=None, b_field: float = 1.0,
              **options) -> FitResult:
    """Fit one finder candidate.

    Parameters
    ----------
    candidate : TrackCandidate
        Hit indices into ``hits`` plus the finder's seed helix.
    hits : sequence of Hit or ndarray
        The event's hits, or their feature matrix.
    options
        Forwarded to :class:`HelixFitter`.

    Raises
    ------
    ValueError
        Fewer than six hits.
    """
    X = hits if isinstance(hits, np.ndarray) else hit_matrix(hits)
    ids = np.array(sorted(candidate.hit_ids), dtype=int)
    fitter = HelixFitter(geometry=geometry, b_field=b_field, **options)
    return fitter.fit(X[ids], seed=candidate.seed).result_
