import numpy as np
import pytest

from dctrack.geometry import default_geometry
from dctrack.helix import KinematicState


@pytest.fixture(scope="session")
def geom():
    return default_geometry()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_state(rng, pt_range=(0.15, 1.5), cos_max=0.93, offset=0.0):
    """A kinematic state with uniform pT, cos(theta), phi and charge."""
    pt = rng.uniform(*pt_range)
    cos_t = rng.uniform(-cos_max, cos_max)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    tan_l = cos_t / np.sqrt(1.0 - cos_t**2)
    mom = np.array([pt * np.cos(phi), pt * np.sin(phi), pt * tan_l])
    pos = rng.normal(0.0, offset, 3) if offset else np.zeros(3)
    return KinematicState(pos, mom, int(rng.choice([-1, 1])))


def exact_hits(helix, geometry, err=0.013):
    """Feature rows for a helix with drift distances equal to the exact doca.

    Each crossed layer contributes its nearest wire; the (rare) crossings
    whose doca exceeds half a cell are skipped so nothing is clipped.
    """
    from dctrack.helix import internal_params, line_doca
    from dctrack.simulation import crossings

    layers, s_cross, pts = crossings(helix, geometry)
    cells = geometry.nearest_wires(layers, pts)
    west, east = geometry.endpoints_array(layers, cells)
    _, doca, _ = line_doca(tuple(internal_params(helix)), west, east, s_cross)
    keep = doca < 0.5 * geometry.pitch[layers]
    mx, my = geometry.midpoints_array(layers[keep], cells[keep])
    return np.column_stack([mx, my, layers[keep], doca[keep], np.full(keep.sum(), err)])
