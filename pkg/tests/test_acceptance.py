"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line with the measured numbers and
then asserts, so ``pytest -v`` output doubles as the acceptance record.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from dctrack import metrics as M
from dctrack.dataset_io import read_events, write_events
from dctrack.finder import HoughTrackFinder
from dctrack.fitter import HelixFitter
from dctrack.helix import (
    HelixParams,
    helix_from_state,
    point_at_arclength,
    poca_to_wire,
    state_from_helix,
)
from dctrack.reco import reconstruct
from dctrack.simulation import Category, SimConfig, generate_events

EXPECTED_COLUMNS = [
    "eventIndex",
    "middleX", "middleY", "layer", "slayer", "locallayer",
    "rawDriftDist", "rawDriftDistErr", "isSignal", "trackIndex",
    "scaledFltLen", "lrAmbig",
    "initialMomX", "initialMomY", "initialMomZ",
    "initialPosX", "initialPosY", "initialPosZ",
    "charge",
]


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


# -- metrics oracle ---------------------------------------------------------------


def brute_force_match(truths, recos):
    """Reference classification written as plainly as possible.

    Returns ``{reco_id: (truth_id, n_matched, classification)}``.
    """
    det = {t.track_index: {h.wire for h in t.detectable_hits} for t in truths}
    passing = {}
    result = {}
    for r in recos:
        best_tid, best_n = None, 0
        for tid in sorted(det):
            n = len(det[tid] & r.hit_keys)
            if n > best_n:
                best_tid, best_n = tid, n
        ok = False
        if best_tid is not None:
            eff = best_n / len(det[best_tid])
            pur = best_n / len(r.hit_keys)
            ok = pur > 0.5 and eff > 0.2 and best_n >= 6 and len(det[best_tid]) >= 6
            if ok:
                passing.setdefault(best_tid, []).append((eff, pur, r.reco_id))
        result[r.reco_id] = [best_tid, best_n, "fake"]
    for tid, cands in passing.items():
        # every passing reco is a clone unless no other candidate beats it
        for eff, pur, rid in cands:
            beaten = any(
                (e2 > eff) or (e2 == eff and p2 > pur) or (e2 == eff and p2 == pur and r2 < rid)
                for e2, p2, r2 in cands if r2 != rid
            )
            result[rid][2] = "clone" if beaten else "matched"
    return {k: tuple(v) for k, v in result.items()}


def random_small_event(rng):
    n_truth = int(rng.integers(0, 4))
    n_hits = int(rng.integers(0, 61))
    owner = rng.integers(-1, n_truth, n_hits) if n_truth else np.full(n_hits, -1)
    truths = [
        SimpleNamespace(
            track_index=tid + 1,
            detectable_hits=[SimpleNamespace(wire=k) for k in np.flatnonzero(owner == tid)],
            pt=float(rng.uniform(0.1, 1.5)),
            cos_theta=float(rng.uniform(-0.9, 0.9)),
            charge=int(rng.choice([-1, 1])),
        )
        for tid in range(n_truth)
    ]
    # partition the hits into a few reco tracks and leftovers
    n_reco = int(rng.integers(0, 5))
    label = rng.integers(-1, n_reco, n_hits) if n_reco else np.full(n_hits, -1)
    if n_truth and n_reco:
        # bias recos toward one truth track so that matches actually happen
        for j in range(n_reco):
            tid = int(rng.integers(0, n_truth))
            sel = (owner == tid) & (rng.random(n_hits) < 0.6)
            label[sel] = j
    recos = [
        SimpleNamespace(reco_id=j, hit_keys=frozenset(int(k) for k in np.flatnonzero(label == j)),
                        charge=int(rng.choice([-1, 1])), pt=float(rng.uniform(0.1, 1.5)))
        for j in range(n_reco)
    ]
    recos = [r for r in recos if r.hit_keys]
    return truths, recos


def test_metrics_oracle_equivalence(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    matches, mismatches = [], 0
    counts = {"matched": 0, "clone": 0, "fake": 0}
    for eid in range(1000):
        truths, recos = random_small_event(rng)
        ev = M.match_event(truths, recos, event_id=eid)
        matches.append(ev)
        ref = brute_force_match(truths, recos)
        got = {r.reco_id: (r.truth_id, r.n_matched_hits, r.classification.value) for r in ev.records}
        mismatches += got != ref
        for _, _, c in ref.values():
            counts[c] += 1
    rep = M.aggregate(matches)
    agg_ok = (rep.n_matched, rep.n_clone, rep.n_fake) == (counts["matched"], counts["clone"], counts["fake"])
    n_det = sum(1 for ev in matches for t in ev.truths if t.n_detectable_hits >= 6)
    agg_ok &= rep.n_detectable == n_det
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and agg_ok and dt < 30 and min(counts.values()) > 0
    verdict("metrics oracle equivalence", ok,
            f"1000 events, {mismatches} mismatching, matched/clone/fake = "
            f"{counts['matched']}/{counts['clone']}/{counts['fake']}, aggregate agrees={agg_ok}, {dt:.1f} s")


def test_matching_boundaries(verdict):
    def one(n_truth_hits, keys):
        t = SimpleNamespace(track_index=1, detectable_hits=[SimpleNamespace(wire=k) for k in range(n_truth_hits)],
                            pt=1.0, cos_theta=0.0, charge=1)
        r = SimpleNamespace(reco_id=0, hit_keys=frozenset(keys), charge=1, pt=1.0)
        return M.match_event([t], [r]).records[0]

    pur = one(20, list(range(8)) + list(range(100, 108)))
    eff = one(30, range(6))
    six = one(10, range(6))
    ok = (
        pur.hit_purity == 0.5 and pur.classification is M.Classification.FAKE
        and eff.hit_eff == pytest.approx(0.2) and eff.classification is M.Classification.FAKE
        and six.n_matched_hits == 6 and six.classification is M.Classification.MATCHED
    )
    verdict("matching boundaries", ok,
            f"purity 0.50 -> {pur.classification.value}, efficiency 0.20 -> {eff.classification.value}, "
            f"6 matched hits -> {six.classification.value}")


# -- resolution ----------------------------------------------------------------------


def test_resolution_estimator(verdict):
    rng = np.random.default_rng(2)
    out, ok = [], True
    for sigma in (0.002, 0.005, 0.02):
        r = M.resolution(rng.normal(0.0, sigma, 100_000))
        rel = r / sigma - 1
        ok &= abs(rel) <= 0.02
        out.append(f"sigma {sigma}: r = {r:.6f} ({100 * rel:+.2f}%)")
    verdict("resolution estimator", ok, "; ".join(out))


# -- helix --------------------------------------------------------------------------


def test_helix_round_trip_and_poca(verdict):
    rng = np.random.default_rng(3)
    n = 100_000
    worst = 0.0
    for _ in range(n):
        h = HelixParams(rng.uniform(-5, 5), rng.uniform(0, 2 * np.pi),
                        rng.choice([-1, 1]) / rng.uniform(0.1, 2.0),
                        rng.uniform(-20, 20), rng.uniform(-3, 3))
        h2 = helix_from_state(state_from_helix(h))
        a, b = h.as_array(), h2.as_array()
        d = np.abs(b - a)
        d[1] = abs((b[1] - a[1] + np.pi) % (2 * np.pi) - np.pi)
        worst = max(worst, float(np.max(d / np.maximum(np.abs(a), 1.0))))
        if h2.charge != h.charge:
            worst = np.inf

    # the POCA to the origin and to a wire are both minima over the arc
    poca_bad = 0
    for _ in range(100):
        h = HelixParams(rng.uniform(-2, 2), rng.uniform(0, 2 * np.pi),
                        rng.choice([-1, 1]) / rng.uniform(0.15, 1.5), rng.uniform(-5, 5), rng.uniform(-1, 1))
        s = rng.uniform(-30, 30, 1000)
        rho = np.hypot(*point_at_arclength(h, s)[:, :2].T)
        poca_bad += np.any(rho < abs(h.d_r) - 1e-12)

        s_hit = rng.uniform(10, 40)
        p = point_at_arclength(h, s_hit)
        off = rng.normal(0, 0.5, 3)
        off[2] = 0.0
        w = p + off
        wire = (w + [0.1, 0.05, 80.0], w - [0.1, 0.05, 80.0])
        res = poca_to_wire(h, wire, window=(0.0, 60.0))
        if res is None:
            poca_bad += 1
            continue
        s_star, doca, _ = res
        samples = rng.uniform(0.0, 60.0, 1000)
        pts = point_at_arclength(h, samples)
        east, west = (np.asarray(x) for x in wire)
        u = west - east
        t = np.clip(((pts - east) @ u) / (u @ u), 0, 1)
        dist = np.linalg.norm(pts - (east + t[:, None] * u), axis=1)
        poca_bad += np.any(dist < doca - 1e-9)
    ok = worst <= 1e-9 and poca_bad == 0
    verdict("helix round trip", ok,
            f"{n} states, worst relative error {worst:.2e}; POCA minimality failures {poca_bad} "
            f"of 200 helices x 1000 arc lengths")


# -- closed-loop reconstruction -------------------------------------------------------


def _evaluate(events):
    """Finder plus fitter over ``events``; a report per stage."""
    finder = HoughTrackFinder()
    fitter = HelixFitter(geometry=finder.geometry)
    by_id = {e.event_id: e for e in events}
    found, fitted = [], []
    for eid, finding, fitting in reconstruct(events, finder, fitter):
        found.append(M.match_event(by_id[eid].truth, finding, event_id=eid))
        fitted.append(M.match_event(by_id[eid].truth, fitting, event_id=eid))
    return {"finding": M.aggregate(found), "fitting": M.aggregate(fitted)}


def _pct(rate):
    return f"{100 * rate.value:.2f}% [{100 * rate.lo:.2f}, {100 * rate.hi:.2f}]"


def test_closed_loop_clean_singles(verdict):
    cfg = SimConfig(noise_rate=0.0, sigma_drift=0.0)
    events = generate_events(Category.SINGLE, 10_000, seed=11, config=cfg)
    t0 = time.perf_counter()
    reports = _evaluate(events)
    dt = time.perf_counter() - t0
    rep = reports["fitting"]
    ok = rep.eps_track.value >= 0.995 and rep.r_wrong_q.value <= 0.001 and dt < 300
    verdict("closed-loop clean singles", ok,
            f"{rep.n_detectable} detectable, eps_track {_pct(rep.eps_track)}, "
            f"R_wrong,q {_pct(rep.r_wrong_q)}, finder-only eps {_pct(reports['finding'].eps_track)}, "
            f"{dt:.0f} s")


def test_degradation_ordering(verdict):
    cfg = SimConfig(noise_rate=30.0, sigma_drift=0.013)
    out = {}
    for cat, seed in ((Category.CONVENTIONAL_TWO, 21), (Category.CLOSE_BY_TWO, 22)):
        events = generate_events(cat, 5000, seed=seed, config=cfg)
        out[cat] = _evaluate(events)["fitting"]
    conv, close = out[Category.CONVENTIONAL_TWO], out[Category.CLOSE_BY_TWO]
    ok = close.eps_track.value <= conv.eps_track.value
    verdict("degradation ordering", ok,
            f"close-by eps {_pct(close.eps_track)} <= conventional eps {_pct(conv.eps_track)}")


# -- CSV --------------------------------------------------------------------------------


def test_csv_round_trip(verdict, tmp_path):
    events = generate_events(Category.CONVENTIONAL_TWO, 120, seed=31)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    n_rows = write_events(events, a)
    back, _ = read_events(a)
    write_events(back, b)
    header = a.read_text(encoding="utf-8").splitlines()[0].split(",")
    same = a.read_bytes() == b.read_bytes()
    ok = n_rows >= 10_000 and same and header == EXPECTED_COLUMNS
    verdict("CSV round trip", ok,
            f"{n_rows} hits, byte-identical={same}, columns exact={header == EXPECTED_COLUMNS}")


# -- intervals ----------------------------------------------------------------------------


def test_interval_calibration(verdict):
    # each experiment is 1e5 Bernoulli trials; 1e4 experiments per p
    rng = np.random.default_rng(41)
    n_trials, n_exp = 100_000, 10_000
    out, ok = [], True
    for p in (0.01, 0.5, 0.99):
        ks = rng.binomial(n_trials, p, n_exp)
        cover = 0
        for k in np.unique(ks):
            lo, hi = M.clopper_pearson(int(k), n_trials)
            if lo <= p <= hi:
                cover += int(np.sum(ks == k))
        frac = cover / n_exp
        ok &= 0.65 <= frac <= 0.71
        out.append(f"p {p}: {100 * frac:.2f}%")
    verdict("interval calibration", ok, "; ".join(out))
