"""Command-line front end.

Subcommands::

    dctrack generate     simulate events and write the hit CSV plus a manifest
    dctrack reconstruct  run the finder (and fitter) over a hit CSV
    dctrack evaluate     match reco against truth and write metric files
    dctrack report       print metric files as tables

Every subcommand takes ``--config`` pointing at an INI file. Recognised
sections are ``[generate]``, ``[finder]``, ``[fitter]`` and ``[evaluate]``;
command-line flags win over the file.

Exit codes: 0 success, 2 configuration error, 3 input schema error,
4 event alignment error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import (
    RowError,
    SchemaError,
    ValidationError,
    read_events,
    read_reco,
    write_events,
    write_reco,
)
from .finder import HoughTrackFinder
from .fitter import HelixFitter
from .metrics import (
    DetectabilityRule,
    aggregate,
    binned,
    check_edges,
    default_cos_edges,
    default_pt_edges,
    format_binned,
    format_report,
    match_event,
    report_rows,
    write_report_rows,
)
from .reco import reconstruct
from .simulation import Category, SimConfig, generate_events

log = logging.getLogger("dctrack")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCHEMA = 3
EXIT_ALIGNMENT = 4

STAGES = ("finding", "fitting")


class ConfigError(Exception):
    pass


class AlignmentError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

_FINDER_KEYS = {
    "b_field": float, "n_phi_bins": int, "n_kappa_bins": int, "pt_min": float,
    "road_width": float, "min_votes": int, "min_axial_hits": int, "min_hits": int,
    "z_road": float, "tan_lambda_max": float, "n_tanl_bins": int, "dz_max": float,
    "dz_bin": float, "max_tracks": int, "n_starts": int, "start_margin": int,
    "n_sigma": float, "min_tight": float,
}
_FITTER_KEYS = {
    "b_field": float, "n_passes": int, "max_iter": int, "tol": float,
    "sigma_floor": float, "outlier_cut": float,
}
_GENERATE_KEYS = {
    "category": str, "events": int, "seed": int, "first_id": int, "noise_rate": float,
    "efficiency": float, "sigma_drift": float, "b_field": float,
}
_EVALUATE_KEYS = {"bins_pt": str, "bins_cos": str, "min_detectable_hits": int}


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is None:
        return cp
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return cp


def section(cp: configparser.ConfigParser, name: str, keys: dict) -> dict:
    """Typed options of one config section; unknown keys are an error."""
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = keys[key](raw)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {raw!r} is not a valid {keys[key].__name__}") from None
    return out


def parse_edges(text: str) -> np.ndarray:
    """Bin edges from ``"a,b,c,..."`` or ``"lo:hi:n"`` (n uniform bins)."""
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            edges = np.linspace(float(lo), float(hi), int(n) + 1)
        else:
            edges = np.array([float(v) for v in text.split(",") if v.strip()])
        return check_edges(edges)
    except ValueError as exc:
        raise ConfigError(f"bad bin edges {text!r}: {exc}") from None


def _merge(base: dict, args: argparse.Namespace, keys) -> dict:
    out = dict(base)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _check_out(path) -> Path:
    p = Path(path)
    if p.exists() and p.is_dir():
        raise ConfigError(f"output path is a directory: {p}")
    if not p.parent.exists():
        raise ConfigError(f"output directory does not exist: {p.parent}")
    return p


def _check_in(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cp = load_config(args.config)
    opts = _merge(section(cp, "generate", _GENERATE_KEYS), args, _GENERATE_KEYS)
    if "seed" not in opts:
        raise ConfigError("generate needs a seed (--seed or [generate] seed)")
    try:
        category = Category(opts.get("category", "single"))
    except ValueError:
        raise ConfigError(f"unknown category {opts.get('category')!r}; "
                          f"choose from {[c.value for c in Category]}") from None
    n = int(opts.get("events", 1000))
    if n < 0:
        raise ConfigError("events must be >= 0")
    try:
        sim = SimConfig(
            noise_rate=opts.get("noise_rate", 30.0),
            efficiency=opts.get("efficiency", 0.98),
            sigma_drift=opts.get("sigma_drift", 0.013),
            b_field=opts.get("b_field", 1.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _check_out(args.output)
    seed, first = int(opts["seed"]), int(opts.get("first_id", 0))

    events = generate_events(category, n, seed, sim, first_id=first)
    n_rows = write_events(events, out)
    resolved = {
        "category": category.value, "events": n, "seed": seed, "first_id": first,
        "noise_rate": sim.noise_rate, "efficiency": sim.efficiency,
        "sigma_drift": sim.sigma_drift, "b_field": sim.b_field,
    }
    blob = json.dumps(resolved, sort_keys=True).encode()
    manifest = {
        "config": resolved,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "n_events": n,
        "n_events_with_hits": sum(1 for e in events if e.hits),
        "n_hits": n_rows,
        "n_signal_hits": sum(h.is_signal for e in events for h in e.hits),
        "n_truth_tracks": sum(len(e.truth) for e in events),
        "event_ids": [first, first + n - 1] if n else [],
        "data_sha256": _file_hash(out),
        "version": __version__,
    }
    with open(manifest_path(out), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d events, %d hits to %s", n, n_rows, out)
    return EXIT_OK


def _event_ids_of(dataset, events) -> list[int]:
    """Event ids a dataset covers: from its manifest when present (events
    without hits have no rows), else from the rows."""
    m = manifest_path(dataset)
    if m.is_file():
        try:
            info = json.loads(m.read_text(encoding="utf-8"))
            lo, hi = info["event_ids"] if info.get("event_ids") else (0, -1)
            return list(range(int(lo), int(hi) + 1))
        except (ValueError, KeyError, TypeError):
            log.warning("ignoring unreadable manifest %s", m)
    return [e.event_id for e in events]


def _reco_chunk(events, finder, fitter, fit):
    rows = []
    for eid, finding, fitting in reconstruct(events, finder, fitter, fit=fit):
        rows.extend((eid, "finding", t) for t in finding)
        if fitting is not None:
            rows.extend((eid, "fitting", t) for t in fitting)
    return rows


def reconstruct_rows(events, finder, fitter, fit=True, jobs=1):
    """Reco rows for all events, optionally spread over worker processes.

    Events are independent, so chunks go to separate processes; the rows
    are sorted on write, which keeps the output independent of ``jobs``.
    """
    if jobs <= 1 or len(events) < 2:
        return _reco_chunk(events, finder, fitter, fit)
    chunks = [c for c in np.array_split(np.arange(len(events)), 4 * jobs) if len(c)]
    rows = []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(_reco_chunk, [events[i] for i in c], finder, fitter, fit)
            for c in chunks
        ]
        for f in futures:
            rows.extend(f.result())
    return rows


def cmd_reconstruct(args) -> int:
    cp = load_config(args.config)
    finder_opts = section(cp, "finder", _FINDER_KEYS)
    fitter_opts = section(cp, "fitter", _FITTER_KEYS)
    src = _check_in(args.input)
    out = _check_out(args.output)
    events, _ = read_events(src, strict=args.strict)
    try:
        finder = HoughTrackFinder(**finder_opts)
        fitter = None if args.no_fit else HelixFitter(**fitter_opts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    t0 = time.perf_counter()
    rows = reconstruct_rows(events, finder, fitter, not args.no_fit, args.jobs)
    dt = time.perf_counter() - t0
    write_reco(rows, out)
    ids = _event_ids_of(src, events)
    manifest = {
        "input": str(src),
        "input_sha256": _file_hash(src),
        "stages": ["finding"] if args.no_fit else list(STAGES),
        "event_ids": ids,
        "n_reco_rows": len(rows),
        "jobs": args.jobs,
        "seconds": round(dt, 3),
        "events_per_second": round(len(events) / dt, 1) if dt > 0 else None,
    }
    with open(manifest_path(out), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("reconstructed %d events in %.2f s (%.1f events/s)", len(events), dt,
             len(events) / dt if dt > 0 else float("inf"))
    return EXIT_OK


def _align(dataset, events, reco_path, reco) -> list[int]:
    data_ids = set(_event_ids_of(dataset, events))
    reco_ids = {eid for stage in reco.values() for eid in stage}
    offenders = sorted(reco_ids - data_ids)
    m = manifest_path(reco_path)
    if m.is_file():
        try:
            claimed = set(json.loads(m.read_text(encoding="utf-8"))["event_ids"])
        except (ValueError, KeyError, TypeError):
            claimed = None
        if claimed is not None:
            offenders = sorted(set(offenders) | (claimed ^ data_ids))
    if offenders:
        shown = ", ".join(str(i) for i in offenders[:20])
        more = "" if len(offenders) <= 20 else f" (+{len(offenders) - 20} more)"
        raise AlignmentError(f"event ids differ between dataset and reco: {shown}{more}")
    return sorted(data_ids)


def evaluate_files(dataset, reco_path, pt_edges=None, cos_edges=None, rule=None, strict=False):
    """Match a reco file against a dataset.

    Returns ``{stage: (report, pt_bins, cos_bins)}`` for each stage present.
    """
    events, _ = read_events(dataset, strict=strict)
    reco = read_reco(reco_path)
    ids = _align(dataset, events, reco_path, reco)
    by_id = {e.event_id: e for e in events}
    pt_edges = default_pt_edges() if pt_edges is None else pt_edges
    cos_edges = default_cos_edges() if cos_edges is None else cos_edges
    out = {}
    stages = [s for s in STAGES if s in reco] + sorted(set(reco) - set(STAGES))
    if not reco:
        stages = ["finding"]
    for stage in stages:
        per_event = reco.get(stage, {})
        matches = []
        for eid in ids:
            ev = by_id.get(eid)
            truth = ev.truth if ev is not None else ()
            matches.append(match_event(truth, per_event.get(eid, []), rule, event_id=eid))
        out[stage] = (
            aggregate(matches),
            binned(matches, "pt", pt_edges),
            binned(matches, "cos_theta", cos_edges),
        )
    return out


def _binned_rows(bins, axis):
    rows = []
    for i, b in enumerate(bins):
        pre = f"{axis}[{i}]."
        rows.append((pre + "lo", repr(b.lo)))
        rows.append((pre + "hi", repr(b.hi)))
        rows.extend(report_rows(b.report, pre))
    return rows


def cmd_evaluate(args) -> int:
    cp = load_config(args.config)
    opts = section(cp, "evaluate", _EVALUATE_KEYS)
    pt_text = args.bins_pt or opts.get("bins_pt")
    cos_text = args.bins_cos or opts.get("bins_cos")
    pt_edges = parse_edges(pt_text) if pt_text else None
    cos_edges = parse_edges(cos_text) if cos_text else None
    try:
        rule = DetectabilityRule(opts.get("min_detectable_hits", 6))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dataset, reco = _check_in(args.dataset), _check_in(args.reco)
    out_dir = Path(args.out_dir)
    if not out_dir.is_dir():
        raise ConfigError(f"output directory does not exist: {out_dir}")
    results = evaluate_files(dataset, reco, pt_edges, cos_edges, rule, args.strict)
    for stage, (rep, pt_bins, cos_bins) in results.items():
        rows = report_rows(rep) + _binned_rows(pt_bins, "pt") + _binned_rows(cos_bins, "cos_theta")
        write_report_rows(rows, out_dir / f"metrics_{stage}.csv")
        text = "\n\n".join([
            format_report(rep, f"{stage} metrics"),
            format_binned(pt_bins, "pT (GeV/c)"),
            format_binned(cos_bins, "cos theta"),
        ])
        (out_dir / f"metrics_{stage}.txt").write_text(text + "\n", encoding="utf-8")
        print(text)
        print()
    return EXIT_OK


_TABLE_ROWS = (
    ("Track finding efficiency (%)", "eps_track"),
    ("Track charge finding efficiency (%)", "eps_track_q"),
    ("Wrong charge rate (%)", "r_wrong_q"),
    ("Clone rate (%)", "r_clone"),
    ("Fake rate (%)", "r_fake"),
)


def _read_rows(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["key", "value"]:
            raise SchemaError(f"{path}: not a metrics file (header {header})")
        return {k: v for k, v in reader}


def format_comparison(columns: dict) -> str:
    """Side-by-side table of rates, one column per labelled metrics file."""

    def cell(kv, name):
        v = kv.get(f"{name}.value", "")
        if v == "":
            return "n/a"
        val, lo, hi = (float(kv[f"{name}.{p}"]) for p in ("value", "lo", "hi"))
        return f"{100 * val:.2f} +{100 * (hi - val):.2f}/-{100 * (val - lo):.2f}"

    labels = list(columns)
    names = [r[0] for r in _TABLE_ROWS] + ["Detectable truth tracks"]
    w0 = max(len(n) for n in names)
    widths = [max(22, len(lb)) for lb in labels]
    lines = [f"{'':<{w0}}  " + "  ".join(f"{lb:>{w}}" for lb, w in zip(labels, widths))]
    for title, key in _TABLE_ROWS:
        lines.append(f"{title:<{w0}}  " + "  ".join(
            f"{cell(columns[lb], key):>{w}}" for lb, w in zip(labels, widths)))
    lines.append(f"{names[-1]:<{w0}}  " + "  ".join(
        f"{columns[lb].get('n_detectable', ''):>{w}}" for lb, w in zip(labels, widths)))
    return "\n".join(lines)


def cmd_report(args) -> int:
    columns = {}
    for item in args.metrics:
        label, _, path = item.rpartition("=")
        p = _check_in(path)
        columns[label or p.stem] = _read_rows(p)
    print(format_comparison(columns))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dctrack", description="Drift-chamber tracking benchmark.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate events into a hit CSV")
    g.add_argument("output", help="hit CSV to write; a .manifest.json goes next to it")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--category", choices=[c.value for c in Category])
    g.add_argument("-n", "--events", type=int)
    g.add_argument("--first-id", dest="first_id", type=int)
    g.add_argument("--noise-rate", dest="noise_rate", type=float)
    g.add_argument("--efficiency", type=float)
    g.add_argument("--sigma-drift", dest="sigma_drift", type=float, help="cm")
    g.add_argument("--b-field", dest="b_field", type=float, help="T")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="find and fit tracks in a hit CSV")
    r.add_argument("input")
    r.add_argument("output", help="reco CSV to write")
    r.add_argument("--config")
    r.add_argument("--no-fit", action="store_true", help="write finder seeds only")
    r.add_argument("--strict", action="store_true", help="fail on any dataset validation issue")
    r.add_argument("-j", "--jobs", type=int, default=1, help="worker processes (default 1)")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="match reco against truth and compute metrics")
    e.add_argument("dataset")
    e.add_argument("reco")
    e.add_argument("--out-dir", default=".", help="where metrics_<stage>.csv/.txt go")
    e.add_argument("--config")
    e.add_argument("--bins-pt", help="'a,b,c' edges or 'lo:hi:n'")
    e.add_argument("--bins-cos", help="'a,b,c' edges or 'lo:hi:n'")
    e.add_argument("--strict", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print metrics files side by side")
    p.add_argument("metrics", nargs="+", help="metrics CSV, optionally LABEL=path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dctrack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, RowError, ValidationError) as exc:
        print(f"dctrack: schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except AlignmentError as exc:
        print(f"dctrack: alignment error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except OSError as exc:
        print(f"dctrack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
