"""Baseline pattern recognition: conformal-map Hough transform.

Axial wire mid-points are mapped to (u, v) = (x, y) / (x^2 + y^2), where a
circle through the origin becomes the line u cos(phi0) + v sin(phi0) =
-1 / (2R). Every axial hit votes, for each phi0 bin, for the band of signed
kappa bins compatible with its position within half a cell. Peaks are taken
one at a time with the winning hits removed, each peak is refined by a
circle fit through the origin, and stereo hits are attached afterwards from
a (tan_lambda, d_z) vote on their z along the wire.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import default_geometry
from .helix import C_LIGHT, HelixParams

__all__ = ["TrackCandidate", "HoughTrackFinder", "seed_charge", "hit_matrix", "HIT_FEATURES"]

HIT_FEATURES = ("middleX", "middleY", "layer", "rawDriftDist", "rawDriftDistErr")


def hit_matrix(hits) -> np.ndarray:
    """Feature matrix (n_hits, 5) in :data:`HIT_FEATURES` order."""
    if len(hits) == 0:
        return np.empty((0, len(HIT_FEATURES)))
    return np.array(
        [(h.middle_x, h.middle_y, h.layer, h.raw_drift_dist, h.raw_drift_dist_err) for h in hits],
        dtype=float,
    )


@dataclass(frozen=True)
class TrackCandidate:
    hit_ids: frozenset
    seed: HelixParams
    quality: int  # accumulator votes at the peak

    def __len__(self):
        return len(self.hit_ids)


def seed_charge(candidate: TrackCandidate) -> int:
    return 1 if candidate.seed.kappa > 0 else -1


@dataclass
class _Circle:
    """Circle through the origin: centre (cx, cy), charge q."""

    cx: float
    cy: float
    q: int

    @property
    def radius(self):
        return float(np.hypot(self.cx, self.cy))

    @property
    def phi0(self):
        return float(np.arctan2(-self.cy, -self.cx) % (2.0 * np.pi))


def _circle_from_peak(phi0, kappa, alpha):
    radius = 1.0 / (2.0 * alpha * abs(kappa))
    return _Circle(-radius * np.cos(phi0), -radius * np.sin(phi0), 1 if kappa > 0 else -1)


class HoughTrackFinder(ClusterMixin, BaseEstimator):
    """Global Hough track finder for one event.

    Parameters
    ----------
    geometry : MDCGeometry, optional
        Chamber layout; the built-in default when None.
    b_field : float
        Solenoid field in T.
    n_phi_bins, n_kappa_bins : int
        Accumulator binning over [0, 2pi) x [-1/pt_min, 1/pt_min].
    pt_min : float
        Lowest transverse momentum searched for, GeV/c.
    road_width : float
        Full width of the assignment road in cell pitches.
    min_votes : int
        Accumulator threshold for a peak.
    min_axial_hits, min_hits : int
        Minimum axial and total hits for a kept candidate.
    z_road : float
        Window in cm for attaching stereo hits to the fitted z line.
    tan_lambda_max, n_tanl_bins, dz_max, dz_bin : float, int, float, float
        Binning of the stereo (tan_lambda, d_z) vote.
    max_tracks : int
        Cap on peaks taken per event.
    n_starts : int
        Most accumulator cells tied at a peak used as fit starting points.
    n_sigma, min_tight : float
        Inlier window for the final circle passes: ``n_sigma`` drift errors,
        but never below ``min_tight`` cm nor above the road.

    Attributes
    ----------
    candidates_ : list of TrackCandidate
    labels_ : ndarray of shape (n_hits,)
        Candidate index for every hit, -1 when unassigned.
    """

    def __init__(
        self,
        geometry=None,
        b_field=1.0,
        n_phi_bins=720,
        n_kappa_bins=200,
        pt_min=0.15,
        road_width=3.0,
        min_votes=7,
        min_axial_hits=6,
        min_hits=6,
        z_road=3.0,
        tan_lambda_max=3.0,
        n_tanl_bins=120,
        dz_max=20.0,
        dz_bin=2.0,
        max_tracks=10,
        n_starts=48,
        start_margin=2,
        n_sigma=5.0,
        min_tight=0.05,
    ):
        self.geometry = geometry
        self.b_field = b_field
        self.n_phi_bins = n_phi_bins
        self.n_kappa_bins = n_kappa_bins
        self.pt_min = pt_min
        self.road_width = road_width
        self.min_votes = min_votes
        self.min_axial_hits = min_axial_hits
        self.min_hits = min_hits
        self.z_road = z_road
        self.tan_lambda_max = tan_lambda_max
        self.n_tanl_bins = n_tanl_bins
        self.dz_max = dz_max
        self.dz_bin = dz_bin
        self.max_tracks = max_tracks
        self.n_starts = n_starts
        self.start_margin = start_margin
        self.n_sigma = n_sigma
        self.min_tight = min_tight

    # -- sklearn surface ------------------------------------------------------

    def fit(self, X, y=None):
        geom = self.geometry or default_geometry()
        X = np.asarray(X, dtype=float)
        if X.size == 0:
            self.candidates_ = []
            self.labels_ = np.empty(0, dtype=int)
            return self
        X = check_array(X, dtype=float)
        if X.shape[1] < len(HIT_FEATURES):
            raise ValueError(f"expected {len(HIT_FEATURES)} hit features, got {X.shape[1]}")
        layers = X[:, 2].astype(int)
        if np.any(layers < 0) or np.any(layers >= geom.n_layers) or np.any(layers != X[:, 2]):
            raise ValueError("layer column must hold integer indices of the geometry")
        self._alpha = C_LIGHT * self.b_field / 200.0
        self.candidates_ = self._find(X, layers, geom)
        labels = np.full(len(X), -1, dtype=int)
        for i, c in enumerate(self.candidates_):
            labels[list(c.hit_ids)] = i
        self.labels_ = labels
        return self

    def predict(self, X=None):
        """Candidate label per hit of the fitted event."""
        check_is_fitted(self, "labels_")
        return self.labels_

    # -- Hough ----------------------------------------------------------------

    def _accumulate(self, xa, ya, r2, ra, half):
        n_phi, n_k = self.n_phi_bins, self.n_kappa_bins
        kmax = 1.0 / self.pt_min
        dk = 2.0 * kmax / n_k
        phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
        cphi, sphi = np.cos(phi), np.sin(phi)
        rho = (xa[:, None] * cphi + ya[:, None] * sphi) / r2[:, None]
        sinrel = (ya[:, None] * cphi - xa[:, None] * sphi) / ra[:, None]
        mag = -rho / self._alpha
        w = ((half / r2 + (np.pi / n_phi) / ra) / self._alpha)[:, None]
        lo = np.maximum(mag - w, 0.0)
        hi = mag + w
        pos = sinrel < 0
        k_lo = np.where(pos, lo, -hi)
        k_hi = np.where(pos, hi, -lo)
        ok = (hi > 0) & (k_hi >= -kmax) & (k_lo <= kmax)
        b_lo = np.clip(np.floor((k_lo + kmax) / dk), 0, n_k - 1).astype(int)
        b_hi = np.clip(np.floor((k_hi + kmax) / dk), 0, n_k - 1).astype(int)
        j = np.broadcast_to(np.arange(n_phi), ok.shape)
        stride = n_k + 1
        starts = (j * stride + b_lo)[ok]
        stops = (j * stride + b_hi + 1)[ok]
        diff = np.bincount(starts, minlength=n_phi * stride) - np.bincount(
            stops, minlength=n_phi * stride
        )
        acc = np.cumsum(diff.reshape(n_phi, stride), axis=1)[:, :n_k]
        return acc, phi, -kmax + (np.arange(n_k) + 0.5) * dk

    # -- road assignment and refinement -----------------------------------------

    def _refine(self, cx, cy, q, xa, ya, da, phih, road, tight):
        """Refine a batch of start circles on the same hits.

        Alternates hit selection and drift-corrected fits through the origin,
        all starts at once. The first passes use hits inside the road, the
        later ones only those compatible with the drift resolution, so stray
        hits in the road do not pull the circle. Returns the refined centres,
        charges and a truncated quadratic cost per start.
        """
        cx, cy, q = (np.array(v, dtype=float) for v in (cx, cy, q))
        for it in range(5):
            res, dist = self._batch_residuals(cx, cy, q, xa, ya, da, phih)
            use = res <= (road if it < 2 else tight)[None, :]
            # drift-corrected points, pushed towards each circle
            radius = np.hypot(cx, cy)[:, None]
            shift = np.where(dist > radius, -da, da) / np.where(dist > 0, dist, 1.0)
            px = xa + shift * (xa - cx[:, None])
            py = ya + shift * (ya - cy[:, None])
            w = use.astype(float)
            bb = px**2 + py**2
            sxx, syy, sxy = (w * px * px).sum(1), (w * py * py).sum(1), (w * px * py).sum(1)
            bx, by = (w * px * bb).sum(1), (w * py * bb).sum(1)
            det = 4.0 * (sxx * syy - sxy**2)
            ok = (use.sum(1) >= 3) & (np.abs(det) > 1e-12 * np.maximum(sxx * syy, 1e-300))
            safe = np.where(ok, det, 1.0)
            ncx = 2.0 * (syy * bx - sxy * by) / safe
            ncy = 2.0 * (sxx * by - sxy * bx) / safe
            ok &= np.isfinite(ncx) & np.isfinite(ncy) & (np.hypot(ncx, ncy) > 0)
            phi0 = np.arctan2(-ncy, -ncx)
            side = (w * np.sin(np.arctan2(py, px) - phi0[:, None])).sum(1)
            cx = np.where(ok, ncx, cx)
            cy = np.where(ok, ncy, cy)
            q = np.where(ok, np.where(side > 0, -1.0, 1.0), q)
        res, _ = self._batch_residuals(cx, cy, q, xa, ya, da, phih)
        cost = np.minimum((res / tight) ** 2, 1.0).sum(1)
        return cx, cy, q, cost

    @staticmethod
    def _batch_residuals(cx, cy, q, xa, ya, da, phih):
        dist = np.hypot(xa - cx[:, None], ya - cy[:, None])
        res = np.abs(np.abs(dist - np.hypot(cx, cy)[:, None]) - da)
        phi0 = np.arctan2(-cy, -cx)
        on_arc = np.sin(phih - phi0[:, None]) * q[:, None] < 0
        return np.where(on_arc, res, np.inf), dist

    @staticmethod
    def _residuals(circ, xa, ya, drift, phih):
        dist = np.hypot(xa - circ.cx, ya - circ.cy)
        res = np.abs(np.abs(dist - circ.radius) - drift)
        # only the outgoing half of the circle is traversed
        on_arc = np.sin(phih - circ.phi0) * circ.q < 0
        return np.where(on_arc, res, np.inf)

    @staticmethod
    def _fit_circle(xa, ya, drift, circ):
        """Least-squares circle through the origin on drift-corrected points."""
        dx, dy = xa - circ.cx, ya - circ.cy
        dist = np.hypot(dx, dy)
        shift = np.where(dist > circ.radius, -drift, drift) / np.where(dist > 0, dist, 1.0)
        px, py = xa + shift * dx, ya + shift * dy
        A = np.column_stack([2.0 * px, 2.0 * py])
        b = px**2 + py**2
        try:
            (cx, cy), *_ = np.linalg.lstsq(A, b, rcond=None)
        except np.linalg.LinAlgError:
            return circ
        if not np.isfinite(cx) or not np.isfinite(cy) or np.hypot(cx, cy) == 0:
            return circ
        phi0 = np.arctan2(-cy, -cx)
        phih = np.arctan2(py, px)
        q = -1 if np.sum(np.sin(phih - phi0)) > 0 else 1
        return _Circle(float(cx), float(cy), q)

    def _find(self, X, layers, geom):
        x, y, drift = X[:, 0], X[:, 1], X[:, 3]
        axial = geom.is_axial[layers]
        ax = np.flatnonzero(axial)
        xa, ya, da = x[ax], y[ax], drift[ax]
        r2 = xa**2 + ya**2
        ra = np.sqrt(r2)
        phih = np.arctan2(ya, xa)
        half = 0.5 * geom.pitch[layers[ax]]
        road = 0.5 * self.road_width * geom.pitch[layers[ax]]
        tight = np.minimum(np.maximum(self.n_sigma * X[ax, 4], self.min_tight), road)

        remaining = np.ones(len(ax), dtype=bool)
        suppressed = np.zeros((self.n_phi_bins, self.n_kappa_bins), dtype=bool)
        circles: list[tuple[_Circle, int]] = []
        n_k_win = max(1, self.n_kappa_bins // 20)
        n_phi_win = max(1, self.n_phi_bins // 72)
        for _ in range(4 * self.max_tracks):
            if len(circles) >= self.max_tracks or remaining.sum() < self.min_votes:
                break
            idx = np.flatnonzero(remaining)
            acc, phis, kaps = self._accumulate(xa[idx], ya[idx], r2[idx], ra[idx], half[idx])
            acc[suppressed] = 0
            flat = int(np.argmax(acc))
            votes = int(acc.flat[flat])
            if votes < self.min_votes:
                break
            j, k = divmod(flat, self.n_kappa_bins)
            # the peak is usually a plateau; refine from several of its cells
            # and keep the circle that explains the most hits best
            tied = np.flatnonzero(acc.ravel() >= votes - self.start_margin)
            tied = tied[np.linspace(0, len(tied) - 1, min(len(tied), self.n_starts)).astype(int)]
            jj, kk = np.divmod(tied, self.n_kappa_bins)
            radius = 1.0 / (2.0 * self._alpha * np.abs(kaps[kk]))
            cx, cy, q, cost = self._refine(
                -radius * np.cos(phis[jj]), -radius * np.sin(phis[jj]), np.sign(kaps[kk]),
                xa[idx], ya[idx], da[idx], phih[idx], road[idx], tight[idx],
            )
            b = int(np.argmin(cost))
            circ = _Circle(float(cx[b]), float(cy[b]), int(q[b]))
            res = self._residuals(circ, xa[idx], ya[idx], da[idx], phih[idx])
            members = idx[res <= road[idx]]
            if len(members) < self.min_axial_hits:
                jj = np.arange(j - n_phi_win, j + n_phi_win + 1) % self.n_phi_bins
                kk = slice(max(0, k - n_k_win), k + n_k_win + 1)
                suppressed[jj, kk] = True
                continue
            remaining[members] = False
            circles.append((circ, votes))

        # final axial assignment: best residual, ties to the earlier peak
        if circles:
            res = np.column_stack(
                [self._residuals(c, xa, ya, da, phih) for c, _ in circles]
            )
            res = np.where(res <= road[:, None], res, np.inf)
            best = np.argmin(res, axis=1)
            has = np.isfinite(res[np.arange(len(ax)), best])
        kept = []
        for i, (circ, votes) in enumerate(circles):
            members = np.flatnonzero(has & (best == i))
            if len(members) < self.min_axial_hits:
                continue
            r = self._residuals(circ, xa[members], ya[members], da[members], phih[members])
            use = members[r <= tight[members]]
            if len(use) >= 3:
                circ = self._fit_circle(xa[use], ya[use], da[use], circ)
            kept.append((circ, votes, ax[members]))

        stereo = np.flatnonzero(~axial)
        zlines = [self._z_line(circ, X, layers, stereo, geom) for circ, _, _ in kept]
        stereo_of = self._assign_stereo(kept, zlines, X, layers, stereo, geom)

        cands = []
        for i, ((circ, votes, ax_ids), zl) in enumerate(zip(kept, zlines)):
            ids = frozenset(int(v) for v in ax_ids) | frozenset(stereo_of.get(i, ()))
            if len(ids) < self.min_hits:
                continue
            tan_l, dz = zl if zl is not None else (0.0, 0.0)
            pt = C_LIGHT * self.b_field * circ.radius / 100.0
            seed = HelixParams(0.0, circ.phi0, circ.q / pt, dz, tan_l)
            cands.append(TrackCandidate(ids, seed, votes))
        return cands

    # -- stereo ---------------------------------------------------------------

    @staticmethod
    def _stereo_points(circ, X, layers, stereo, geom):
        """(hit id, s, z) where each stereo wire's transverse projection meets
        the circle grown or shrunk by the drift distance."""
        if len(stereo) == 0:
            return np.empty(0, int), np.empty(0), np.empty(0)
        lay = layers[stereo]
        cells = geom.cells_from_midpoints(lay, X[stereo, 0], X[stereo, 1])
        west, east = geom.endpoints_array(lay, cells)
        hl = geom.half_length[lay]
        d = X[stereo, 3]
        D = east[:, :2] - west[:, :2]
        c = np.array([circ.cx, circ.cy])
        R = circ.radius
        p0 = west[:, :2] - c
        a = np.sum(D * D, axis=1)
        b = 2.0 * np.sum(D * p0, axis=1)
        ids, ss, zs = [], [], []
        for sign in (1.0, -1.0):
            rr = R + sign * d
            cc = np.sum(p0 * p0, axis=1) - rr * rr
            disc = b * b - 4.0 * a * cc
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            for root in (1.0, -1.0):
                t = (-b + root * sq) / (2.0 * a)
                good = ok & (t >= 0.0) & (t <= 1.0)
                px = p0[:, 0] + t * D[:, 0]
                py = p0[:, 1] + t * D[:, 1]
                theta = np.arctan2(py, px)
                s = ((circ.q * (circ.phi0 - theta)) % (2.0 * np.pi)) * R
                good &= s <= np.pi * R
                ids.append(stereo[good])
                ss.append(s[good])
                zs.append((-hl + 2.0 * hl * t)[good])
        return np.concatenate(ids), np.concatenate(ss), np.concatenate(zs)

    def _z_line(self, circ, X, layers, stereo, geom):
        ids, s, z = self._stereo_points(circ, X, layers, stereo, geom)
        if len(np.unique(ids)) < 2:
            return None
        edges = np.linspace(-self.tan_lambda_max, self.tan_lambda_max, self.n_tanl_bins + 1)
        n_dz = int(np.ceil(2.0 * self.dz_max / self.dz_bin))
        dz_edges = -self.dz_max + self.dz_bin * np.arange(n_dz + 1)
        # each point traces a line in (tan_lambda, d_z); mark every d_z bin the
        # line crosses inside each tan_lambda bin, with a small slack
        a = z[:, None] - s[:, None] * edges[None, :-1]
        b = z[:, None] - s[:, None] * edges[None, 1:]
        lo = np.minimum(a, b) - 0.5 * self.dz_bin
        hi = np.maximum(a, b) + 0.5 * self.dz_bin
        cover = (dz_edges[None, None, :-1] <= hi[:, :, None]) & (dz_edges[None, None, 1:] >= lo[:, :, None])
        order = np.argsort(ids, kind="stable")
        sid = ids[order]
        starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
        per_hit = np.logical_or.reduceat(cover[order], starts, axis=0)
        votes = per_hit.sum(axis=0).ravel()
        best = int(np.argmax(votes))
        if votes[best] < 2:
            return None
        ti, bi = divmod(best, n_dz)
        tan_l = 0.5 * (edges[ti] + edges[ti + 1])
        d_z = -self.dz_max + (bi + 0.5) * self.dz_bin
        for _ in range(3):
            sel_s, sel_z = _closest_per_hit(ids, s, z, tan_l, d_z, self.z_road)
            if len(sel_s) < 2 or np.ptp(sel_s) == 0:
                break
            tan_l, d_z = np.polyfit(sel_s, sel_z, 1)
        return float(tan_l), float(d_z)

    def _assign_stereo(self, kept, zlines, X, layers, stereo, geom):
        best: dict[int, tuple[float, int]] = {}
        for i, ((circ, _, _), zl) in enumerate(zip(kept, zlines)):
            if zl is None:
                continue
            ids, s, z = self._stereo_points(circ, X, layers, stereo, geom)
            res = np.abs(z - (zl[1] + s * zl[0]))
            for h, r in zip(ids.tolist(), res.tolist()):
                if r <= self.z_road and (h not in best or r < best[h][0]):
                    best[h] = (r, i)
        out: dict[int, list[int]] = {}
        for h, (_, i) in best.items():
            out.setdefault(i, []).append(h)
        return out


def _closest_per_hit(ids, s, z, tan_l, d_z, road):
    res = np.abs(z - (d_z + s * tan_l))
    order = np.lexsort((res, ids))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ids[order][1:] != ids[order][:-1]
    pick = order[first]
    pick = pick[res[pick] <= road]
    return s[pick], z[pick]
