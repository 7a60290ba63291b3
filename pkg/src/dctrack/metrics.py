"""Track-level evaluation: hit matching, rates with intervals, pT resolution.

Matching works on wire-level hit keys. A reconstructed track is compared
with the truth track that contributes most of its hits; it is *matched* when
its hit purity exceeds 0.5, its hit efficiency exceeds 0.2 and it shares at
least six hits with that truth track. When several reconstructed tracks
pass for one truth track, the one with the highest efficiency is kept and
the rest are clones. Anything that does not pass is a fake.

Rates are normalised to the number of detectable truth tracks and carry
central Clopper-Pearson intervals at one-sigma (68.27%) confidence.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

__all__ = [
    "Classification",
    "DetectabilityRule",
    "MatchRecord",
    "TruthRecord",
    "EventMatch",
    "Rate",
    "MetricsReport",
    "Bin",
    "match_event",
    "aggregate",
    "clopper_pearson",
    "poisson_interval",
    "pt_residuals",
    "resolution",
    "binned",
    "check_edges",
    "default_pt_edges",
    "default_cos_edges",
    "format_report",
    "format_binned",
    "report_rows",
    "write_report_rows",
    "MIN_PURITY",
    "MIN_HIT_EFF",
    "MIN_MATCHED_HITS",
    "ONE_SIGMA",
]

MIN_PURITY = 0.5  # strict
MIN_HIT_EFF = 0.2  # strict
MIN_MATCHED_HITS = 6  # inclusive
ONE_SIGMA = math.erf(1.0 / math.sqrt(2.0))  # 0.6827
RESOLUTION_QUANTILE = 0.68


class Classification(str, Enum):
    MATCHED = "matched"
    CLONE = "clone"
    FAKE = "fake"


@dataclass(frozen=True)
class DetectabilityRule:
    """A truth track counts as detectable with at least this many hits."""

    min_detectable_hits: int = 6

    def __post_init__(self):
        if self.min_detectable_hits < 1:
            raise ValueError("min_detectable_hits must be >= 1")

    def __call__(self, n_hits: int) -> bool:
        return n_hits >= self.min_detectable_hits


@dataclass(frozen=True)
class TruthRecord:
    event_id: int
    truth_id: int
    n_detectable_hits: int
    pt: float
    cos_theta: float
    charge: int
    detectable: bool


@dataclass(frozen=True)
class MatchRecord:
    event_id: int
    reco_id: int
    truth_id: int | None
    n_matched_hits: int
    n_assigned_hits: int
    n_detectable_hits: int
    hit_eff: float
    hit_purity: float
    classification: Classification
    charge_correct: bool
    reco_pt: float = float("nan")
    truth_pt: float = float("nan")
    truth_cos_theta: float = float("nan")

    @property
    def passes(self) -> bool:
        return self.classification is not Classification.FAKE


@dataclass(frozen=True)
class EventMatch:
    """Per-event matching output: one record per reco track plus the truth
    tracks they were compared against."""

    event_id: int
    records: tuple[MatchRecord, ...]
    truths: tuple[TruthRecord, ...]


def _truth_fields(t):
    """(id, hit keys, pt, cos_theta, charge) from a TruthTrack-like object."""
    keys = frozenset(h.wire for h in t.detectable_hits)
    return t.track_index, keys, float(t.pt), float(t.cos_theta), int(t.charge)


def match_event(truth, reco, rule: DetectabilityRule | None = None,
                event_id: int = 0) -> EventMatch:
    """Classify the reconstructed tracks of one event.

    Parameters
    ----------
    truth : sequence of TruthTrack
        Truth tracks with their detectable hits.
    reco : sequence of RecoTrack
        Reconstructed tracks with their assigned hit keys.
    rule : DetectabilityRule, optional
    event_id : int
        Copied into the records.

    Raises
    ------
    ValueError
        The same hit key is assigned to two reconstructed tracks.
    """
    rule = rule or DetectabilityRule()
    owner: dict = {}
    tinfo = {}
    truths = []
    for t in truth:
        tid, keys, pt, cos_t, q = _truth_fields(t)
        tinfo[tid] = (len(keys), pt, cos_t, q)
        truths.append(TruthRecord(event_id, tid, len(keys), pt, cos_t, q, rule(len(keys))))
        for k in keys:
            owner[k] = tid
    seen: dict = {}
    for r in reco:
        for k in r.hit_keys:
            if k in seen:
                raise ValueError(
                    f"event {event_id}: hit {k} assigned to reco tracks {seen[k]} and {r.reco_id}"
                )
            seen[k] = r.reco_id

    prelim = []
    for r in reco:
        counts: dict[int, int] = {}
        for k in r.hit_keys:
            tid = owner.get(k)
            if tid is not None:
                counts[tid] = counts.get(tid, 0) + 1
        n_assigned = len(r.hit_keys)
        if counts:
            tid = min(counts, key=lambda t: (-counts[t], t))
            n_matched = counts[tid]
            n_det, t_pt, t_cos, t_q = tinfo[tid]
        else:
            tid, n_matched, n_det, t_pt, t_cos, t_q = None, 0, 0, math.nan, math.nan, 0
        eff = n_matched / n_det if n_det else 0.0
        pur = n_matched / n_assigned if n_assigned else 0.0
        ok = (
            tid is not None
            and pur > MIN_PURITY
            and eff > MIN_HIT_EFF
            and n_matched >= MIN_MATCHED_HITS
            and rule(n_det)
        )
        prelim.append((r, tid, n_matched, n_assigned, n_det, eff, pur, ok, t_pt, t_cos, t_q))

    # one matched reco per truth: highest efficiency, then purity, then lowest id
    winner: dict[int, tuple] = {}
    for r, tid, _, _, _, eff, pur, ok, *_ in prelim:
        if ok:
            key = (-eff, -pur, r.reco_id)
            if tid not in winner or key < winner[tid]:
                winner[tid] = key

    records = []
    for r, tid, n_m, n_a, n_d, eff, pur, ok, t_pt, t_cos, t_q in prelim:
        if not ok:
            cls = Classification.FAKE
        elif winner[tid][2] == r.reco_id:
            cls = Classification.MATCHED
        else:
            cls = Classification.CLONE
        records.append(
            MatchRecord(
                event_id=event_id,
                reco_id=r.reco_id,
                truth_id=tid,
                n_matched_hits=n_m,
                n_assigned_hits=n_a,
                n_detectable_hits=n_d,
                hit_eff=eff,
                hit_purity=pur,
                classification=cls,
                charge_correct=tid is not None and int(r.charge) == t_q,
                reco_pt=float(r.pt),
                truth_pt=t_pt,
                truth_cos_theta=t_cos,
            )
        )
    return EventMatch(event_id, tuple(records), tuple(truths))


# -- intervals -----------------------------------------------------------------


def clopper_pearson(k: int, n: int, level: float = ONE_SIGMA) -> tuple[float, float]:
    """Central Clopper-Pearson interval for k successes in n trials."""
    if n <= 0 or k < 0 or k > n:
        raise ValueError(f"need 0 <= k <= n and n > 0, got k={k}, n={n}")
    a = 0.5 * (1.0 - level)
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1.0 - a, k + 1, n - k))
    return lo, hi


def poisson_interval(k: int, level: float = ONE_SIGMA) -> tuple[float, float]:
    """Central Garwood interval on a Poisson mean given k counts."""
    a = 0.5 * (1.0 - level)
    lo = 0.0 if k == 0 else float(stats.chi2.ppf(a, 2 * k) / 2.0)
    hi = float(stats.chi2.ppf(1.0 - a, 2 * k + 2) / 2.0)
    return lo, hi


@dataclass(frozen=True)
class Rate:
    """k / n with its interval.

    A binomial interval is used while k <= n; clone and fake counts can
    exceed the number of detectable tracks, and then the interval comes from
    the Poisson mean of k scaled by 1/n.
    """

    k: int
    n: int
    value: float
    lo: float
    hi: float

    @classmethod
    def of(cls, k: int, n: int, level: float = ONE_SIGMA) -> "Rate | None":
        if n <= 0:
            return None
        if k <= n:
            lo, hi = clopper_pearson(k, n, level)
        else:
            lo, hi = (v / n for v in poisson_interval(k, level))
        return cls(k, n, k / n, lo, hi)

    @property
    def err_minus(self) -> float:
        return self.value - self.lo

    @property
    def err_plus(self) -> float:
        return self.hi - self.value


# -- aggregation -----------------------------------------------------------------


def pt_residuals(records: Iterable[MatchRecord]) -> np.ndarray:
    """Relative pT deviations of matched, correct-charge records."""
    return np.array(
        [
            (r.reco_pt - r.truth_pt) / r.truth_pt
            for r in records
            if r.classification is Classification.MATCHED and r.charge_correct
        ],
        dtype=float,
    )


def resolution(etas) -> float | None:
    """68th percentile of the absolute deviation from the median.

    Returns None for fewer than two samples.
    """
    etas = np.asarray(etas, dtype=float).ravel()
    if len(etas) < 2:
        return None
    dev = np.abs(etas - np.median(etas))
    return float(np.quantile(dev, RESOLUTION_QUANTILE, method="linear"))


@dataclass(frozen=True)
class MetricsReport:
    n_detectable: int
    n_matched: int
    n_matched_q: int
    n_clone: int
    n_fake: int
    eps_track: Rate | None
    eps_track_q: Rate | None
    r_wrong_q: Rate | None
    r_clone: Rate | None
    r_fake: Rate | None
    hit_eff: tuple[float, float] | None = None  # mean over matched, standard error
    hit_purity: tuple[float, float] | None = None
    pt_resolution: float | None = None
    n_resolution: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def empty(self) -> bool:
        return self.n_detectable == 0


def _mean_se(values):
    if not values:
        return None
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def _report(records: Sequence[MatchRecord], truths: Sequence[TruthRecord],
            level: float = ONE_SIGMA) -> MetricsReport:
    n_det = sum(1 for t in truths if t.detectable)
    matched = [r for r in records if r.classification is Classification.MATCHED]
    n_m = len(matched)
    n_mq = sum(1 for r in matched if r.charge_correct)
    n_clone = sum(1 for r in records if r.classification is Classification.CLONE)
    n_fake = sum(1 for r in records if r.classification is Classification.FAKE)
    etas = pt_residuals(matched)
    return MetricsReport(
        n_detectable=n_det,
        n_matched=n_m,
        n_matched_q=n_mq,
        n_clone=n_clone,
        n_fake=n_fake,
        eps_track=Rate.of(n_m, n_det, level),
        eps_track_q=Rate.of(n_mq, n_det, level),
        r_wrong_q=Rate.of(n_m - n_mq, n_det, level),
        r_clone=Rate.of(n_clone, n_det, level),
        r_fake=Rate.of(n_fake, n_det, level),
        hit_eff=_mean_se([r.hit_eff for r in matched]),
        hit_purity=_mean_se([r.hit_purity for r in matched]),
        pt_resolution=resolution(etas),
        n_resolution=len(etas),
    )


def aggregate(matches: Iterable[EventMatch], rule: DetectabilityRule | None = None,
              level: float = ONE_SIGMA) -> MetricsReport:
    """Pool per-event matches into one report.

    ``rule`` only re-decides which truth tracks count in the denominator; the
    matching itself was fixed when the records were made.
    """
    records, truths = [], []
    for m in matches:
        records.extend(m.records)
        if rule is None:
            truths.extend(m.truths)
        else:
            truths.extend(
                TruthRecord(t.event_id, t.truth_id, t.n_detectable_hits, t.pt, t.cos_theta,
                            t.charge, rule(t.n_detectable_hits))
                for t in m.truths
            )
    return _report(records, truths, level)


# -- binning ---------------------------------------------------------------------


def default_pt_edges() -> np.ndarray:
    return np.linspace(0.15, 1.5, 10)


def default_cos_edges() -> np.ndarray:
    return np.linspace(-0.93, 0.93, 11)


def check_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=float).ravel()
    if len(e) < 2 or not np.all(np.isfinite(e)) or np.any(np.diff(e) <= 0):
        raise ValueError(f"bin edges must be at least two strictly increasing numbers, got {edges!r}")
    return e


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    report: MetricsReport
    n_records: int


def _bin_index(values, edges):
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.where(values == edges[-1], len(edges) - 2, idx)  # last bin is closed
    return np.where((idx >= 0) & (idx < len(edges) - 1) & np.isfinite(values), idx, -1)


def binned(matches: Iterable[EventMatch], axis: str, edges,
           level: float = ONE_SIGMA) -> list[Bin]:
    """Reports in bins of the truth ``pt`` or ``cos_theta``.

    Reco records go to the bin of the truth track they were compared with;
    records without any truth hit cannot be placed and are left out. Bins
    are half open except the last, which includes its upper edge.
    """
    edges = check_edges(edges)
    key = {"pt": ("pt", "truth_pt"), "cos_theta": ("cos_theta", "truth_cos_theta")}
    if axis not in key:
        raise ValueError(f"axis must be 'pt' or 'cos_theta', got {axis!r}")
    t_attr, r_attr = key[axis]
    records, truths = [], []
    for m in matches:
        records.extend(m.records)
        truths.extend(m.truths)
    t_bin = _bin_index(np.array([getattr(t, t_attr) for t in truths], dtype=float), edges)
    r_bin = _bin_index(np.array([getattr(r, r_attr) for r in records], dtype=float), edges)
    out = []
    for b in range(len(edges) - 1):
        rs = [r for r, i in zip(records, r_bin) if i == b]
        ts = [t for t, i in zip(truths, t_bin) if i == b]
        out.append(Bin(float(edges[b]), float(edges[b + 1]), _report(rs, ts, level), len(rs)))
    return out


# -- output ------------------------------------------------------------------------


def _pct(rate: Rate | None) -> str:
    if rate is None:
        return "n/a"
    return f"{100 * rate.value:.2f} +{100 * rate.err_plus:.2f}/-{100 * rate.err_minus:.2f}"


def format_report(report: MetricsReport, label: str = "") -> str:
    """Human-readable block, one metric per row, rates in percent."""
    rows = [
        ("Track finding efficiency (%)", _pct(report.eps_track)),
        ("Track charge finding efficiency (%)", _pct(report.eps_track_q)),
        ("Wrong charge rate (%)", _pct(report.r_wrong_q)),
        ("Clone rate (%)", _pct(report.r_clone)),
        ("Fake rate (%)", _pct(report.r_fake)),
    ]
    if report.hit_eff is not None:
        rows.append(("Hit efficiency (%)", f"{100 * report.hit_eff[0]:.2f} +/- {100 * report.hit_eff[1]:.2f}"))
        rows.append(("Hit purity (%)", f"{100 * report.hit_purity[0]:.2f} +/- {100 * report.hit_purity[1]:.2f}"))
    if report.pt_resolution is not None:
        rows.append(("pT resolution (%)", f"{100 * report.pt_resolution:.3f}"))
    rows.append(("Detectable / matched / clone / fake",
                 f"{report.n_detectable} / {report.n_matched} / {report.n_clone} / {report.n_fake}"))
    width = max(len(r[0]) for r in rows)
    head = [label, "-" * len(label)] if label else []
    return "\n".join(head + [f"{name:<{width}}  {value}" for name, value in rows])


def format_binned(bins: Sequence[Bin], axis: str, label: str = "") -> str:
    head = f"{'bin':>17}  {'N_det':>6}  {'eff (%)':>20}  {'eff_q (%)':>20}  {'r(pT) (%)':>9}"
    lines = [label] if label else []
    lines.append(f"{axis}")
    lines.append(head)
    for b in bins:
        rep = b.report
        res = "n/a" if rep.pt_resolution is None else f"{100 * rep.pt_resolution:.3f}"
        lines.append(
            f"[{b.lo:7.3f},{b.hi:7.3f})  {rep.n_detectable:>6}  {_pct(rep.eps_track):>20}  "
            f"{_pct(rep.eps_track_q):>20}  {res:>9}"
        )
    return "\n".join(lines)


def report_rows(report: MetricsReport, prefix: str = "") -> list[tuple[str, object]]:
    """Flat (key, value) rows. Absent values are empty strings."""
    rows: list[tuple[str, object]] = [
        (prefix + "n_detectable", report.n_detectable),
        (prefix + "n_matched", report.n_matched),
        (prefix + "n_matched_q", report.n_matched_q),
        (prefix + "n_clone", report.n_clone),
        (prefix + "n_fake", report.n_fake),
    ]
    for name in ("eps_track", "eps_track_q", "r_wrong_q", "r_clone", "r_fake"):
        rate = getattr(report, name)
        for part in ("value", "lo", "hi"):
            rows.append((f"{prefix}{name}.{part}", "" if rate is None else repr(getattr(rate, part))))
    for name in ("hit_eff", "hit_purity"):
        v = getattr(report, name)
        rows.append((f"{prefix}{name}.mean", "" if v is None else repr(v[0])))
        rows.append((f"{prefix}{name}.se", "" if v is None else repr(v[1])))
    rows.append((prefix + "pt_resolution", "" if report.pt_resolution is None else repr(report.pt_resolution)))
    rows.append((prefix + "n_resolution", report.n_resolution))
    return rows


def write_report_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("key", "value"))
        w.writerows(rows)
