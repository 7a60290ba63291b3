"""Wire layout of a cylindrical multilayer drift chamber.

The default layout is the 43-layer / 11-superlayer BESIII MDC. Per-layer
radii and lengths are interpolated linearly across each superlayer's quoted
range, since only ranges are published. Stereo twists are configurable; the
default twists each stereo wire by three cell pitches end to end.

Units are cm and rad throughout. Wire ``cell`` 0 of every layer is centred
at azimuth 0 at z = 0; the west end sits at z = -half_length and the east
end at z = +half_length.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SuperlayerSpec",
    "LayerSpec",
    "WireId",
    "MDCGeometry",
    "DEFAULT_SUPERLAYERS",
    "default_geometry",
    "load_geometry",
]

_TIE_TOL = 1e-9  # cm; distances closer than this count as a tie


@dataclass(frozen=True)
class SuperlayerSpec:
    """One row of the layer table: wire counts plus radius/length ranges."""

    wires: tuple[int, ...]
    radius_range: tuple[float, float]  # cm
    length_range: tuple[float, float]  # cm, full wire length
    stereo_class: str  # "A", "U" or "V"
    twist_pitches: float = 3.0

    def __post_init__(self):
        if self.stereo_class not in ("A", "U", "V"):
            raise ValueError(f"unknown stereo class {self.stereo_class!r}")
        if len(self.wires) == 0:
            raise ValueError("superlayer needs at least one layer")


# BESIII MDC; radii and lengths converted from mm to cm.
DEFAULT_SUPERLAYERS: tuple[SuperlayerSpec, ...] = (
    SuperlayerSpec((40, 44, 48, 56), (7.9, 11.5), (78.0, 81.6), "U"),
    SuperlayerSpec((64, 72, 80, 80), (12.7, 16.2), (82.8, 86.4), "V"),
    SuperlayerSpec((76, 76, 88, 88), (19.7, 24.6), (109.2, 127.2), "A"),
    SuperlayerSpec((100, 100, 112, 112), (26.2, 31.1), (144.2, 161.2), "A"),
    SuperlayerSpec((128, 128, 140, 140), (32.7, 37.5), (178.2, 195.2), "A"),
    SuperlayerSpec((160,) * 4, (40.0, 44.8), (217.4, 219.2), "U"),
    SuperlayerSpec((176,) * 4, (46.4, 51.4), (219.8, 221.6), "V"),
    SuperlayerSpec((208,) * 4, (53.0, 57.9), (222.2, 224.0), "U"),
    SuperlayerSpec((240,) * 4, (59.5, 64.2), (224.6, 226.4), "V"),
    SuperlayerSpec((256,) * 4, (66.7, 71.6), (227.6, 229.4), "A"),
    SuperlayerSpec((288,) * 3, (73.2, 76.3), (230.0, 230.6), "A"),
)


@dataclass(frozen=True)
class LayerSpec:
    global_layer: int
    superlayer: int
    local_layer: int
    n_wires: int
    radius: float
    half_length: float
    stereo_class: str
    twist: float

    @property
    def pitch(self) -> float:
        """Azimuthal cell pitch at the layer radius (cm)."""
        return 2.0 * np.pi * self.radius / self.n_wires

    @property
    def is_axial(self) -> bool:
        return self.stereo_class == "A"


@dataclass(frozen=True, order=True)
class WireId:
    global_layer: int
    cell: int


def _interp(lo: float, hi: float, i: int, n: int) -> float:
    if n == 1:
        return lo
    return lo + (hi - lo) * i / (n - 1)


class MDCGeometry:
    """Immutable wire geometry with vectorised per-layer lookup tables.

    Parameters
    ----------
    superlayers : sequence of SuperlayerSpec, optional
        Layer table, innermost superlayer first. Defaults to the BESIII MDC.
    """

    def __init__(self, superlayers=DEFAULT_SUPERLAYERS):
        layers = []
        for sl, spec in enumerate(superlayers):
            n_local = len(spec.wires)
            for loc, n in enumerate(spec.wires):
                twist = 0.0
                if spec.stereo_class != "A":
                    sign = -1.0 if spec.stereo_class == "U" else 1.0
                    twist = sign * spec.twist_pitches * 2.0 * np.pi / n
                layers.append(
                    LayerSpec(
                        global_layer=len(layers),
                        superlayer=sl,
                        local_layer=loc,
                        n_wires=int(n),
                        radius=_interp(*spec.radius_range, loc, n_local),
                        half_length=0.5 * _interp(*spec.length_range, loc, n_local),
                        stereo_class=spec.stereo_class,
                        twist=twist,
                    )
                )
        radii = [ls.radius for ls in layers]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("layer radii must increase strictly with layer index")
        self.superlayers = tuple(superlayers)
        self.layers: tuple[LayerSpec, ...] = tuple(layers)

        self.radius = np.array(radii)
        self.half_length = np.array([ls.half_length for ls in layers])
        self.n_wires = np.array([ls.n_wires for ls in layers])
        self.twist = np.array([ls.twist for ls in layers])
        self.pitch = 2.0 * np.pi * self.radius / self.n_wires
        self.is_axial = np.array([ls.is_axial for ls in layers])
        self.superlayer = np.array([ls.superlayer for ls in layers])
        self.local_layer = np.array([ls.local_layer for ls in layers])
        # flat wire index: offset[layer] + cell
        self.wire_offset = np.concatenate([[0], np.cumsum(self.n_wires)])

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def total_wires(self) -> int:
        return int(self.wire_offset[-1])

    def layer_spec(self, global_layer: int) -> LayerSpec:
        if not 0 <= global_layer < self.n_layers:
            raise ValueError(
                f"global layer {global_layer} outside [0, {self.n_layers - 1}]"
            )
        return self.layers[global_layer]

    def _check(self, w: WireId):
        ls = self.layer_spec(w.global_layer)
        if not 0 <= w.cell < ls.n_wires:
            raise ValueError(f"cell {w.cell} outside layer {w.global_layer} (n={ls.n_wires})")

    # -- vectorised internals -------------------------------------------------

    def endpoints_array(self, layers, cells):
        """West and east endpoints, each of shape (n, 3), for arrays of wires."""
        layers = np.asarray(layers, dtype=int)
        cells = np.asarray(cells, dtype=int)
        r = self.radius[layers]
        hl = self.half_length[layers]
        phi = 2.0 * np.pi * cells / self.n_wires[layers]
        half = 0.5 * self.twist[layers]
        west = np.stack([r * np.cos(phi - half), r * np.sin(phi - half), -hl], axis=-1)
        east = np.stack([r * np.cos(phi + half), r * np.sin(phi + half), hl], axis=-1)
        return west, east

    def midpoints_array(self, layers, cells):
        west, east = self.endpoints_array(layers, cells)
        mid = 0.5 * (west + east)
        return mid[..., 0], mid[..., 1]

    def flat_index(self, layers, cells):
        return self.wire_offset[np.asarray(layers, dtype=int)] + np.asarray(cells, dtype=int)

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=int)
        layers = np.searchsorted(self.wire_offset, flat, side="right") - 1
        return layers, flat - self.wire_offset[layers]

    def cells_from_midpoints(self, layers, x, y):
        """Recover cell indices from wire mid-point coordinates."""
        layers = np.asarray(layers, dtype=int)
        n = self.n_wires[layers]
        phi = np.arctan2(y, x)
        return np.rint(phi / (2.0 * np.pi / n)).astype(int) % n

    def _segment_distance(self, layers, cells, points):
        west, east = self.endpoints_array(layers, cells)
        seg = east - west
        t = np.einsum("...i,...i->...", points - west, seg) / np.einsum(
            "...i,...i->...", seg, seg
        )
        t = np.clip(t, 0.0, 1.0)
        diff = points - (west + t[..., None] * seg)
        return np.sqrt(np.einsum("...i,...i->...", diff, diff))

    def nearest_wires(self, layers, points, window: int = 3):
        """Vectorised :meth:`nearest_wire` for ``points`` of shape (n, 3).

        Candidates are the ``2 * window + 1`` cells around the azimuth the
        wire takes at the point's z; points far off the layer cylinder fall
        back to an exhaustive scan.
        """
        layers = np.asarray(layers, dtype=int)
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = self.n_wires[layers]
        hl = self.half_length[layers]
        tz = np.clip((points[:, 2] + hl) / (2.0 * hl), 0.0, 1.0)
        offset = np.arctan((2.0 * tz - 1.0) * np.tan(0.5 * self.twist[layers]))
        phi = np.arctan2(points[:, 1], points[:, 0]) - offset
        guess = np.rint(phi / (2.0 * np.pi / n)).astype(int)
        ks = np.arange(-window, window + 1)
        cand = (guess[:, None] + ks[None, :]) % n[:, None]
        d = self._segment_distance(
            np.broadcast_to(layers[:, None], cand.shape), cand, points[:, None, :]
        )
        best = _pick_lowest_tied(cand, d)

        rho = np.hypot(points[:, 0], points[:, 1])
        far = np.abs(rho - self.radius[layers]) > 2.0 * self.pitch[layers]
        for i in np.flatnonzero(far):
            best[i] = self.nearest_wire(int(layers[i]), points[i], exhaustive=True).cell
        return best

    # -- public scalar API ---------------------------------------------------

    def wire_endpoints(self, w: WireId):
        """Return ``(east, west)`` 3-D endpoints of a wire."""
        self._check(w)
        west, east = self.endpoints_array([w.global_layer], [w.cell])
        return east[0], west[0]

    def wire_midpoint(self, w: WireId):
        self._check(w)
        x, y = self.midpoints_array([w.global_layer], [w.cell])
        return np.array([x[0], y[0]])

    def nearest_wire(self, global_layer: int, position, exhaustive: bool = False) -> WireId:
        """Wire of ``global_layer`` whose segment is closest to ``position``.

        Ties (within 1e-9 cm) go to the lower cell index.
        """
        ls = self.layer_spec(global_layer)
        p = np.asarray(position, dtype=float)
        if not exhaustive:
            cell = self.nearest_wires([global_layer], p[None, :])[0]
            return WireId(global_layer, int(cell))
        cells = np.arange(ls.n_wires)
        d = self._segment_distance(np.full(ls.n_wires, global_layer), cells, p[None, :])
        return WireId(global_layer, int(_pick_lowest_tied(cells[None, :], d[None, :])[0]))

    def to_config(self) -> configparser.ConfigParser:
        cfg = configparser.ConfigParser()
        for i, sl in enumerate(self.superlayers):
            cfg[f"superlayer.{i}"] = {
                "wires": ",".join(str(n) for n in sl.wires),
                "radius": f"{sl.radius_range[0]},{sl.radius_range[1]}",
                "length": f"{sl.length_range[0]},{sl.length_range[1]}",
                "stereo": sl.stereo_class,
                "twist_pitches": repr(sl.twist_pitches),
            }
        return cfg


def _pick_lowest_tied(cells, dist):
    dmin = dist.min(axis=1, keepdims=True)
    tied = dist <= dmin + _TIE_TOL
    masked = np.where(tied, cells, np.iinfo(np.int64).max)
    return masked.min(axis=1)


_DEFAULT = None


def default_geometry() -> MDCGeometry:
    """Shared instance of the built-in BESIII layout."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = MDCGeometry()
    return _DEFAULT


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def load_geometry(path) -> MDCGeometry:
    """Read a layer table from an INI file.

    Each ``[superlayer.N]`` section carries ``wires`` (comma list), ``radius``
    and ``length`` (``lo,hi`` in cm), ``stereo`` (A/U/V) and optionally
    ``twist_pitches``. Sections are ordered by N.
    """
    cfg = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cfg.read_file(fh)
    sections = [s for s in cfg.sections() if s.startswith("superlayer.")]
    if not sections:
        raise ValueError(f"{path}: no [superlayer.N] sections")
    sections.sort(key=lambda s: int(s.split(".", 1)[1]))
    sls = []
    for s in sections:
        sec = cfg[s]
        try:
            radius = _floats(sec["radius"])
            length = _floats(sec["length"])
            sls.append(
                SuperlayerSpec(
                    wires=tuple(int(v) for v in _floats(sec["wires"])),
                    radius_range=(radius[0], radius[-1]),
                    length_range=(length[0], length[-1]),
                    stereo_class=sec.get("stereo", "A").strip().upper(),
                    twist_pitches=sec.getfloat("twist_pitches", 3.0),
                )
            )
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"{Path(path)}: bad section [{s}]: {exc}") from exc
    return MDCGeometry(sls)
