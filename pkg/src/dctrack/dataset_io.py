"""Hit-centric CSV reader/writer.

One row per hit. Column names follow the released drift-chamber dataset,
with an added ``eventIndex`` grouping key so a single file can carry many
events. Noise rows carry zeros in every track-level column.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import MDCGeometry, WireId, default_geometry
from .helix import HelixParams, KinematicState
from .simulation import Event, Hit, TruthTrack

__all__ = [
    "HIT_COLUMNS",
    "COLUMNS",
    "RECO_COLUMNS",
    "SchemaError",
    "RowError",
    "ValidationError",
    "Issue",
    "ValidationReport",
    "RecoTrack",
    "write_events",
    "read_events",
    "write_reco",
    "read_reco",
    "fmt_float",
]

log = logging.getLogger(__name__)

HIT_COLUMNS = (
    "middleX", "middleY", "layer", "slayer", "locallayer",
    "rawDriftDist", "rawDriftDistErr",
    "isSignal", "trackIndex", "scaledFltLen", "lrAmbig",
    "initialMomX", "initialMomY", "initialMomZ",
    "initialPosX", "initialPosY", "initialPosZ",
    "charge",
)
COLUMNS = ("eventIndex",) + HIT_COLUMNS

_INT_COLUMNS = {"eventIndex", "layer", "slayer", "locallayer", "isSignal", "trackIndex", "lrAmbig", "charge"}
_MIDPOINT_TOL = 1e-4  # cm


class SchemaError(ValueError):
    """Header is missing required columns."""


class RowError(ValueError):
    """A cell could not be parsed."""

    def __init__(self, line: int, column: str, value: str):
        super().__init__(f"line {line}: column {column!r}: cannot parse {value!r}")
        self.line = line
        self.column = column


class ValidationError(ValueError):
    """Raised in strict mode when validation finds problems."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("; ".join(str(i) for i in report.issues[:10]))
        self.report = report


@dataclass(frozen=True)
class Issue:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class ValidationReport:
    path: str = ""
    n_rows: int = 0
    issues: list[Issue] = field(default_factory=list)
    extra_columns: tuple[str, ...] = ()
    # (eventIndex, layer, cell) -> {column: raw string}
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, line: int, message: str):
        self.issues.append(Issue(line, message))


def fmt_float(x: float) -> str:
    """Nine significant digits, no negative zero."""
    s = f"{float(x):.9g}"
    return "0" if s in ("-0", "0") else s


def _row(event_id: int, h: Hit, truth: TruthTrack | None) -> list[str]:
    if truth is None:
        mom = pos = (0.0, 0.0, 0.0)
        charge = 0
    else:
        mom, pos, charge = truth.state.momentum, truth.state.position, truth.charge
    vals = [
        event_id, h.middle_x, h.middle_y, h.layer, h.slayer, h.locallayer,
        h.raw_drift_dist, h.raw_drift_dist_err, h.is_signal, h.track_index,
        h.scaled_flt_len, h.lr_ambig, *mom, *pos, charge,
    ]
    return [str(int(v)) if name in _INT_COLUMNS else fmt_float(v) for name, v in zip(COLUMNS, vals)]


def write_events(events, path) -> int:
    """Write events to ``path``; returns the number of hit rows."""
    n = 0
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for ev in sorted(events, key=lambda e: e.event_id):
                truth = {t.track_index: t for t in ev.truth}
                for h in sorted(ev.hits, key=lambda h: h.wire):
                    t = truth.get(h.track_index) if h.is_signal else None
                    w.writerow(_row(ev.event_id, h, t))
                    n += 1
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return n


def _parse(line: int, name: str, text: str):
    try:
        if name in _INT_COLUMNS:
            f = float(text)
            if not f.is_integer():
                raise ValueError
            return int(f)
        v = float(text)
        if not np.isfinite(v):
            raise ValueError
        return v
    except ValueError:
        raise RowError(line, name, text) from None


def read_events(path, geometry: MDCGeometry | None = None, strict: bool = False):
    """Read a hit CSV back into events.

    Returns
    -------
    events : list of Event
        Sorted by event id; hits sorted by (layer, cell).
    report : ValidationReport
        Invariant violations found while reading. With ``strict=True`` any
        finding raises :class:`ValidationError` instead.
    """
    geometry = geometry or default_geometry()
    report = ValidationReport(path=str(path))
    rows_by_event: dict[int, list] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        idx = {c: header.index(c) for c in COLUMNS}
        extra = tuple(c for c in header if c not in idx)
        report.extra_columns = extra
        extra_idx = [(c, header.index(c)) for c in extra]
        for line, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise RowError(line, "<row>", ",".join(cells))
            rec = {c: _parse(line, c, cells[i]) for c, i in idx.items()}
            rec["_line"] = line
            if extra_idx:
                rec["_extra"] = {c: cells[i] for c, i in extra_idx}
            rows_by_event.setdefault(rec["eventIndex"], []).append(rec)
            report.n_rows += 1

    events = [
        _build_event(eid, rows, geometry, report)
        for eid, rows in sorted(rows_by_event.items())
    ]
    if strict and report.issues:
        raise ValidationError(report)
    if report.issues:
        log.warning("%s: %d validation issue(s)", path, len(report.issues))
    return events, report


def _build_event(eid, rows, geometry, report):
    hits = []
    seen: dict[WireId, int] = {}
    track_state: dict[int, tuple] = {}
    for r in rows:
        line = r["_line"]
        lay = r["layer"]
        if not 0 <= lay < geometry.n_layers:
            report.add(line, f"layer {lay} outside [0, {geometry.n_layers - 1}]")
            continue
        spec = geometry.layers[lay]
        if r["slayer"] != spec.superlayer:
            report.add(line, f"slayer {r['slayer']} inconsistent with layer {lay}")
        if r["locallayer"] != spec.local_layer:
            report.add(line, f"locallayer {r['locallayer']} inconsistent with layer {lay}")
        cell = int(geometry.cells_from_midpoints([lay], r["middleX"], r["middleY"])[0])
        mx, my = geometry.midpoints_array([lay], [cell])
        if np.hypot(mx[0] - r["middleX"], my[0] - r["middleY"]) > _MIDPOINT_TOL:
            report.add(line, "middleX/middleY do not match any wire of the layer")
        wire = WireId(lay, cell)
        if wire in seen:
            report.add(line, f"second hit on wire {lay}:{cell} (first at line {seen[wire]})")
            continue
        seen[wire] = line
        sig, tid = r["isSignal"], r["trackIndex"]
        if sig not in (0, 1):
            report.add(line, f"isSignal={sig} not in {{0, 1}}")
        if (sig == 1) != (tid > 0):
            report.add(line, f"isSignal={sig} inconsistent with trackIndex={tid}")
        if r["lrAmbig"] not in (-1, 1):
            report.add(line, f"lrAmbig={r['lrAmbig']} not in {{-1, 1}}")
        if r["rawDriftDist"] < 0:
            report.add(line, "negative rawDriftDist")
        if sig == 1 and tid > 0:
            if r["charge"] not in (-1, 1):
                report.add(line, f"charge={r['charge']} on signal row")
            key = tuple(r[c] for c in HIT_COLUMNS[11:])
            prev = track_state.setdefault(tid, key)
            if prev != key:
                report.add(line, f"track-level columns of trackIndex {tid} differ between rows")
        hits.append(
            Hit(
                wire=wire,
                middle_x=r["middleX"],
                middle_y=r["middleY"],
                layer=lay,
                slayer=r["slayer"],
                locallayer=r["locallayer"],
                raw_drift_dist=r["rawDriftDist"],
                raw_drift_dist_err=r["rawDriftDistErr"],
                is_signal=sig,
                track_index=tid,
                scaled_flt_len=r["scaledFltLen"],
                lr_ambig=r["lrAmbig"],
            )
        )
        if "_extra" in r:
            report.extras[(eid, lay, cell)] = r["_extra"]
    hits.sort(key=lambda h: h.wire)
    truth = []
    for tid, key in sorted(track_state.items()):
        mom, pos, charge = key[0:3], key[3:6], key[6]
        try:
            state = KinematicState(np.array(pos), np.array(mom), int(charge))
        except ValueError as exc:
            report.add(0, f"event {eid} track {tid}: {exc}")
            continue
        own = tuple(h for h in hits if h.is_signal and h.track_index == tid)
        truth.append(TruthTrack(tid, state, own))
    return Event(eid, tuple(truth), tuple(hits))


# -- reconstructed-track interchange ----------------------------------------------

RECO_COLUMNS = (
    "eventIndex", "recoTrackId", "stage",
    "dr", "phi0", "kappa", "dz", "tanLambda",
    "chi2", "ndf", "converged", "nHits", "hitKeys",
)


@dataclass(frozen=True)
class RecoTrack:
    """A found or fitted track: hit assignment plus helix at the POCA."""

    reco_id: int
    hit_keys: frozenset
    params: HelixParams
    chi2: float = 0.0
    ndf: int = 0
    converged: bool = True

    @property
    def charge(self) -> int:
        return self.params.charge

    @property
    def pt(self) -> float:
        return self.params.pt


def _keys_str(keys) -> str:
    return ";".join(f"{w.global_layer}:{w.cell}" for w in sorted(keys))


def _keys_parse(text: str) -> frozenset:
    if not text:
        return frozenset()
    out = []
    for item in text.split(";"):
        lay, cell = item.split(":")
        out.append(WireId(int(lay), int(cell)))
    return frozenset(out)


def write_reco(rows, path) -> int:
    """Write ``(event_id, stage, RecoTrack)`` triples; returns the row count."""
    rows = sorted(rows, key=lambda r: (r[0], r[1], r[2].reco_id))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECO_COLUMNS)
        for eid, stage, t in rows:
            p = t.params
            w.writerow([
                eid, t.reco_id, stage,
                fmt_float(p.d_r), fmt_float(p.phi0), fmt_float(p.kappa),
                fmt_float(p.d_z), fmt_float(p.tan_lambda),
                fmt_float(t.chi2), t.ndf, int(bool(t.converged)),
                len(t.hit_keys), _keys_str(t.hit_keys),
            ])
    return len(rows)


def read_reco(path) -> dict:
    """Read a reco file into ``{stage: {event_id: [RecoTrack, ...]}}``."""
    out: dict[str, dict[int, list[RecoTrack]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RECO_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for line, r in enumerate(reader, start=2):
            try:
                params = HelixParams(
                    float(r["dr"]), float(r["phi0"]), float(r["kappa"]),
                    float(r["dz"]), float(r["tanLambda"]),
                )
                t = RecoTrack(
                    reco_id=int(r["recoTrackId"]),
                    hit_keys=_keys_parse(r["hitKeys"]),
                    params=params,
                    chi2=float(r["chi2"]),
                    ndf=int(r["ndf"]),
                    converged=bool(int(r["converged"])),
                )
                eid = int(r["eventIndex"])
            except ValueError as exc:
                raise RowError(line, "<row>", str(exc)) from None
            out.setdefault(r["stage"], {}).setdefault(eid, []).append(t)
    return out
