"""Event reconstruction: Hough finding followed by an optional helix fit."""

from __future__ import annotations

import logging

import numpy as np

from .dataset_io import RecoTrack
from .finder import HoughTrackFinder, hit_matrix
from .fitter import HelixFitter, MIN_HITS
from .simulation import Event

__all__ = ["reconstruct_event", "reconstruct"]

log = logging.getLogger(__name__)


def reconstruct_event(event: Event, finder: HoughTrackFinder | None = None,
                      fitter: HelixFitter | None = None, fit: bool = True):
    """Find, and optionally fit, the tracks of one event.

    Returns
    -------
    finding : list of RecoTrack
        Finder candidates with their seed helices.
    fitting : list of RecoTrack or None
        Fitted tracks, same ids as ``finding``; None when ``fit`` is False.
        A fit that throws hits out as outliers keeps only the hits it used.
        Candidates too small to fit are carried over with their seed and
        ``converged`` set to False.
    """
    finder = finder if finder is not None else HoughTrackFinder()
    X = hit_matrix(event.hits)
    finder.fit(X)
    keys = [h.wire for h in event.hits]
    finding = []
    for i, c in enumerate(finder.candidates_):
        ids = sorted(c.hit_ids)
        finding.append(RecoTrack(i, frozenset(keys[j] for j in ids), c.seed, 0.0, 0, False))
    if not fit:
        return finding, None
    fitter = fitter if fitter is not None else HelixFitter(geometry=finder.geometry,
                                                           b_field=finder.b_field)
    fitting = []
    for i, c in enumerate(finder.candidates_):
        ids = np.array(sorted(c.hit_ids), dtype=int)
        if len(ids) < MIN_HITS:
            fitting.append(finding[i])
            continue
        res = fitter.fit(X[ids], seed=c.seed).result_
        used = ids[res.used] if res.used is not None else ids
        fitting.append(RecoTrack(i, frozenset(keys[j] for j in used), res.params,
                                 float(res.chi2), int(res.ndf), bool(res.converged)))
    return finding, fitting


def reconstruct(events, finder=None, fitter=None, fit: bool = True):
    """Reconstruct many events.

    Yields ``(event_id, finding, fitting)`` in input order.
    """
    finder = finder if finder is not None else HoughTrackFinder()
    for ev in events:
        finding, fitting = reconstruct_event(ev, finder, fitter, fit)
        yield ev.event_id, finding, fitting
