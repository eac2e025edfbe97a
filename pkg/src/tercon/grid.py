"""Spatial discretization of a lon/lat bounding box into square or hex cells.

Cells live in raw decimal degrees (planar approximation, no geodesic
correction). Squares are axis-aligned with row-major indexing; hexes are a
flat-top axial tiling anchored at the box origin, indexed in (r, q) scan
order. Point-to-cell assignment is half-open, so every point maps to at
most one cell. The grid "domain" is the union of enumerated cells; it
equals the box exactly when cell_size divides the box evenly, and overhangs
it slightly otherwise (partial edge cells are kept whole).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon, box as _box

# Flat-top hex with area cell_size^2: circumradius = cell_size * HEX_RADIUS_FACTOR.
# Keeps SQUARE and HEX cells area-matched at equal cell_size.
HEX_RADIUS_FACTOR = math.sqrt(2.0 / (3.0 * math.sqrt(3.0)))

# Axial neighbor offsets for flat-top hexes.
_HEX_NEIGHBORS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


class GridShape(enum.Enum):
    SQUARE = "square"
    HEX = "hex"


class Neighborhood(enum.Enum):
    ROOK = "rook"
    QUEEN = "queen"


@dataclass(frozen=True)
class GridSpec:
    """Bounding box plus cell geometry choices."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float
    cell_size: float = 0.5
    shape: GridShape = GridShape.SQUARE
    neighborhood: Neighborhood = Neighborhood.ROOK

    def validate(self) -> None:
        for name in ("min_lon", "min_lat", "max_lon", "max_lat", "cell_size"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if self.max_lon <= self.min_lon or self.max_lat <= self.min_lat:
            raise ValueError(
                "degenerate box: require max_lon > min_lon and max_lat > min_lat"
            )
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.cell_size > self.max_lon - self.min_lon:
            raise ValueError("cell_size exceeds box width")


class NeighborGraph:
    """Symmetric, irreflexive adjacency over dense cell ids."""

    def __init__(self, adjacency: list[list[int]]):
        self.adjacency = [sorted(set(nbrs)) for nbrs in adjacency]

    @property
    def n_cells(self) -> int:
        return len(self.adjacency)

    def neighbors(self, cell: int) -> list[int]:
        return self.adjacency[cell]

    def degree(self, cell: int) -> int:
        return len(self.adjacency[cell])

    def edges(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as (i, j) with i < j."""
        return [(i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def greedy_coloring(self) -> list[list[int]]:
        """Color classes (lists of cells) such that no class contains an edge.

        Greedy over increasing cell id; deterministic for a given graph.
        """
        color = [-1] * self.n_cells
        for i in range(self.n_cells):
            used = {color[j] for j in self.adjacency[i] if color[j] >= 0}
            c = 0
            while c in used:
                c += 1
            color[i] = c
        n_colors = max(color, default=-1) + 1
        classes: list[list[int]] = [[] for _ in range(n_colors)]
        for i, c in enumerate(color):
            classes[c].append(i)
        return classes


class Grid:
    """A built grid: cell enumeration, point location, and adjacency."""

    def __init__(self, spec: GridSpec):
        spec.validate()
        self.spec = spec
        if spec.shape is GridShape.SQUARE:
            self._init_square()
        else:
            self._init_hex()
        self.graph = self._build_graph()

    # ---- construction ----

    def _init_square(self) -> None:
        s = self.spec
        self.n_cols = int(math.ceil((s.max_lon - s.min_lon) / s.cell_size - 1e-9))
        self.n_rows = int(math.ceil((s.max_lat - s.min_lat) / s.cell_size - 1e-9))
        self.n_cells = self.n_cols * self.n_rows
        # domain upper edges; == box edges when cell_size divides evenly
        self._hi_lon = max(s.max_lon, s.min_lon + self.n_cols * s.cell_size)
        self._hi_lat = max(s.max_lat, s.min_lat + self.n_rows * s.cell_size)

    def _init_hex(self) -> None:
        s = self.spec
        r_hex = s.cell_size * HEX_RADIUS_FACTOR
        self._hex_r = r_hex
        w, h = s.max_lon - s.min_lon, s.max_lat - s.min_lat
        bbox = _box(s.min_lon, s.min_lat, s.max_lon, s.max_lat)
        kept = []
        q_lo = int(math.floor(-r_hex / (1.5 * r_hex))) - 1
        q_hi = int(math.ceil((w + r_hex) / (1.5 * r_hex))) + 1
        row_h = math.sqrt(3.0) * r_hex
        for q in range(q_lo, q_hi + 1):
            r_lo = int(math.floor(-0.5 - q / 2.0)) - 1
            r_hi = int(math.ceil((h + 0.5 * row_h) / row_h - q / 2.0)) + 1
            for r in range(r_lo, r_hi + 1):
                if Polygon(self._hex_ring(q, r)[:-1]).intersects(bbox):
                    kept.append((q, r))
        kept.sort(key=lambda qr: (qr[1], qr[0]))
        self._axial = kept
        self._axial_index = {qr: i for i, qr in enumerate(kept)}
        self.n_cells = len(kept)

    def _build_graph(self) -> NeighborGraph:
        adj: list[list[int]] = [[] for _ in range(self.n_cells)]
        if self.spec.shape is GridShape.SQUARE:
            queen = self.spec.neighborhood is Neighborhood.QUEEN
            for row in range(self.n_rows):
                for col in range(self.n_cols):
                    i = row * self.n_cols + col
                    for dc, dr in ((1, 0), (0, 1)) + (((1, 1), (1, -1)) if queen else ()):
                        c2, r2 = col + dc, row + dr
                        if 0 <= c2 < self.n_cols and 0 <= r2 < self.n_rows:
                            j = r2 * self.n_cols + c2
                            adj[i].append(j)
                            adj[j].append(i)
        else:
            for i, (q, r) in enumerate(self._axial):
                for dq, dr in _HEX_NEIGHBORS:
                    j = self._axial_index.get((q + dq, r + dr))
                    if j is not None:
                        adj[i].append(j)
        return NeighborGraph(adj)

    # ---- geometry ----

    def _hex_center(self, q: int, r: int) -> tuple[float, float]:
        s, rr = self.spec, self._hex_r
        return (s.min_lon + 1.5 * rr * q, s.min_lat + math.sqrt(3.0) * rr * (r + q / 2.0))

    def _hex_ring(self, q: int, r: int) -> list[tuple[float, float]]:
        cx, cy = self._hex_center(q, r)
        rr = self._hex_r
        ring = [
            (cx + rr * math.cos(math.radians(a)), cy + rr * math.sin(math.radians(a)))
            for a in range(0, 360, 60)
        ]
        ring.append(ring[0])
        return ring

    def polygon(self, cell: int) -> list[tuple[float, float]]:
        """Closed counterclockwise (lon, lat) ring of the cell."""
        if self.spec.shape is GridShape.SQUARE:
            s = self.spec
            col, row = cell % self.n_cols, cell // self.n_cols
            x0 = s.min_lon + col * s.cell_size
            y0 = s.min_lat + row * s.cell_size
            x1, y1 = x0 + s.cell_size, y0 + s.cell_size
            return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        return self._hex_ring(*self._axial[cell])

    def centroid(self, cell: int) -> tuple[float, float]:
        if self.spec.shape is GridShape.SQUARE:
            s = self.spec
            col, row = cell % self.n_cols, cell // self.n_cols
            return (
                s.min_lon + (col + 0.5) * s.cell_size,
                s.min_lat + (row + 0.5) * s.cell_size,
            )
        return self._hex_center(*self._axial[cell])

    # ---- point location ----

    def locate(self, lon: float, lat: float) -> int | None:
        """Cell id containing (lon, lat), or None when outside the domain.

        Half-open assignment: a point exactly on a shared edge belongs to
        the cell on the +lon/+lat side.
        """
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise ValueError(f"non-finite coordinates ({lon!r}, {lat!r})")
        s = self.spec
        if self.spec.shape is GridShape.SQUARE:
            if lon < s.min_lon or lat < s.min_lat or lon >= self._hi_lon or lat >= self._hi_lat:
                return None
            col = min(int((lon - s.min_lon) // s.cell_size), self.n_cols - 1)
            row = min(int((lat - s.min_lat) // s.cell_size), self.n_rows - 1)
            return row * self.n_cols + col
        q, r = self._axial_round(lon, lat)
        return self._axial_index.get((q, r))

    def _axial_round(self, lon: float, lat: float) -> tuple[int, int]:
        # fractional axial coords, then cube rounding
        rr = self._hex_r
        dx, dy = lon - self.spec.min_lon, lat - self.spec.min_lat
        qf = (2.0 / 3.0) * dx / rr
        rf = (-dx / 3.0 + math.sqrt(3.0) / 3.0 * dy) / rr
        sf = -qf - rf
        q, r, s_ = round(qf), round(rf), round(sf)
        dq, dr, ds = abs(q - qf), abs(r - rf), abs(s_ - sf)
        if dq > dr and dq > ds:
            q = -r - s_
        elif dr > ds:
            r = -q - s_
        return int(q), int(r)

    def locate_many(self, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
        """Vectorized locate; -1 marks out-of-domain points."""
        lons = np.asarray(lons, dtype=float)
        lats = np.asarray(lats, dtype=float)
        if not (np.isfinite(lons).all() and np.isfinite(lats).all()):
            raise ValueError("non-finite coordinates")
        s = self.spec
        if self.spec.shape is GridShape.SQUARE:
            ok = (lons >= s.min_lon) & (lats >= s.min_lat)
            ok &= (lons < self._hi_lon) & (lats < self._hi_lat)
            col = np.minimum(
                ((lons - s.min_lon) // s.cell_size).astype(int), self.n_cols - 1
            )
            row = np.minimum(
                ((lats - s.min_lat) // s.cell_size).astype(int), self.n_rows - 1
            )
            return np.where(ok, row * self.n_cols + col, -1)
        out = np.empty(lons.shape, dtype=int)
        flat_lon, flat_lat = lons.ravel(), lats.ravel()
        flat_out = out.ravel()
        for i in range(flat_lon.size):
            cell = self.locate(float(flat_lon[i]), float(flat_lat[i]))
            flat_out[i] = -1 if cell is None else cell
        return out


def build_grid(spec: GridSpec) -> Grid:
    """Validate the spec and enumerate cells plus their neighbor graph."""
    return Grid(spec)


def grid_to_geojson(grid: Grid, properties: dict[int, dict] | None = None) -> dict:
    """FeatureCollection with one polygon feature per cell.

    `properties[cell_id]` entries are merged into each feature's properties
    next to the mandatory "cell_id".
    """
    features = []
    for cell in range(grid.n_cells):
        props: dict = {"cell_id": cell}
        if properties and cell in properties:
            props.update(properties[cell])
        features.append(
            {
                "type": "Feature",
                "properties": props,
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[x, y] for x, y in grid.polygon(cell)]],
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}
