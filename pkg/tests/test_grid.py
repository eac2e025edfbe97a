import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tercon.grid import (
    HEX_RADIUS_FACTOR,
    Grid,
    GridShape,
    GridSpec,
    Neighborhood,
    build_grid,
    grid_to_geojson,
)


def square_spec(w=4.0, h=3.0, size=1.0, nbhd=Neighborhood.ROOK):
    return GridSpec(0.0, 0.0, w, h, cell_size=size, neighborhood=nbhd)


def hex_spec(w=4.0, h=4.0, size=1.0):
    return GridSpec(0.0, 0.0, w, h, cell_size=size, shape=GridShape.HEX)


class TestSpecValidation:
    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            GridSpec(0, 0, 0, 1).validate()

    def test_nonpositive_cell_size(self):
        with pytest.raises(ValueError):
            GridSpec(0, 0, 1, 1, cell_size=0.0).validate()

    def test_cell_size_exceeding_width(self):
        with pytest.raises(ValueError):
            GridSpec(0, 0, 1, 1, cell_size=2.0).validate()

    def test_non_finite(self):
        with pytest.raises(ValueError):
            GridSpec(0, 0, math.inf, 1).validate()


class TestSquareEnumeration:
    def test_exact_division(self):
        g = build_grid(square_spec(4.0, 3.0, 1.0))
        assert (g.n_cols, g.n_rows, g.n_cells) == (4, 3, 12)

    def test_partial_cells_use_ceil(self):
        g = build_grid(GridSpec(0, 0, 4.3, 3.0, cell_size=1.0))
        assert (g.n_cols, g.n_rows) == (5, 3)

    def test_fp_safe_division(self):
        # 1.0 / 0.1 must give 10 columns, not 11
        g = build_grid(GridSpec(0, 0, 1.0, 1.0, cell_size=0.1))
        assert (g.n_cols, g.n_rows) == (10, 10)

    def test_row_major_ids(self):
        g = build_grid(square_spec(3.0, 2.0, 1.0))
        assert g.centroid(0) == (0.5, 0.5)
        assert g.centroid(1) == (1.5, 0.5)
        assert g.centroid(3) == (0.5, 1.5)


class TestLocate:
    def test_half_open_edges(self):
        g = build_grid(square_spec(2.0, 2.0, 1.0))
        assert g.locate(0.0, 0.0) == 0
        assert g.locate(1.0, 0.0) == 1  # shared edge goes to +lon side
        assert g.locate(0.0, 1.0) == 2
        assert g.locate(2.0, 1.0) is None  # domain upper edge is exclusive
        assert g.locate(0.5, 2.0) is None

    def test_outside(self):
        g = build_grid(square_spec())
        assert g.locate(-0.01, 0.5) is None
        assert g.locate(0.5, -0.01) is None

    def test_non_finite_rejected(self):
        g = build_grid(square_spec())
        with pytest.raises(ValueError):
            g.locate(math.nan, 0.5)

    def test_centroid_relocates_square(self):
        g = build_grid(GridSpec(0, 0, 4.3, 3.1, cell_size=0.7))
        for cell in range(g.n_cells):
            assert g.locate(*g.centroid(cell)) == cell

    def test_centroid_relocates_hex(self):
        g = build_grid(hex_spec())
        for cell in range(g.n_cells):
            assert g.locate(*g.centroid(cell)) == cell

    def test_locate_many_matches_scalar(self):
        for spec in (square_spec(3.0, 2.0, 0.5), hex_spec(3.0, 3.0, 0.8)):
            g = build_grid(spec)
            rng = np.random.default_rng(0)
            lons = rng.uniform(-0.5, 3.5, size=200)
            lats = rng.uniform(-0.5, 3.5, size=200)
            vec = g.locate_many(lons, lats)
            for i in range(lons.size):
                scalar = g.locate(lons[i], lats[i])
                assert vec[i] == (-1 if scalar is None else scalar)

    @settings(max_examples=60, deadline=None)
    @given(
        lon=st.floats(0.0, 4.0, exclude_max=True, allow_nan=False),
        lat=st.floats(0.0, 3.0, exclude_max=True, allow_nan=False),
    )
    def test_any_box_point_lands_in_some_cell(self, lon, lat):
        g = build_grid(square_spec(4.0, 3.0, 0.7))
        cell = g.locate(lon, lat)
        assert cell is not None
        x0, y0 = g.polygon(cell)[0]
        assert x0 <= lon and y0 <= lat
        assert lon < x0 + 0.7 + 1e-12 and lat < y0 + 0.7 + 1e-12


class TestHex:
    def test_area_matches_square_cell(self):
        size = 0.5
        r = size * HEX_RADIUS_FACTOR
        hex_area = 3.0 * math.sqrt(3.0) / 2.0 * r * r
        assert hex_area == pytest.approx(size * size, rel=1e-12)

    def test_tiling_is_disjoint_and_covers(self):
        g = build_grid(hex_spec(3.0, 3.0, 0.9))
        rng = np.random.default_rng(1)
        pts = rng.uniform(0.05, 2.95, size=(300, 2))
        cells = g.locate_many(pts[:, 0], pts[:, 1])
        assert (cells >= 0).all()

    def test_interior_cells_have_six_neighbors(self):
        g = build_grid(hex_spec(6.0, 6.0, 1.0))
        center = g.locate(3.0, 3.0)
        assert g.graph.degree(center) == 6

    def test_neighbors_share_an_edge_distance(self):
        g = build_grid(hex_spec(5.0, 5.0, 1.0))
        step = math.sqrt(3.0) * g._hex_r
        for i, j in g.graph.edges():
            ci, cj = np.array(g.centroid(i)), np.array(g.centroid(j))
            assert np.linalg.norm(ci - cj) == pytest.approx(step, rel=1e-9)


class TestGraph:
    def test_rook_degrees(self):
        g = build_grid(square_spec(3.0, 3.0, 1.0))
        degs = sorted(g.graph.degree(i) for i in range(9))
        assert degs == [2, 2, 2, 2, 3, 3, 3, 3, 4]

    def test_queen_adds_diagonals(self):
        g = build_grid(square_spec(3.0, 3.0, 1.0, nbhd=Neighborhood.QUEEN))
        center = 4
        assert g.graph.degree(center) == 8

    def test_symmetric_irreflexive(self):
        for spec in (square_spec(), hex_spec(), square_spec(nbhd=Neighborhood.QUEEN)):
            g = build_grid(spec)
            for i in range(g.n_cells):
                assert i not in g.graph.neighbors(i)
                for j in g.graph.neighbors(i):
                    assert i in g.graph.neighbors(j)

    def test_edges_unique_ordered(self):
        g = build_grid(square_spec())
        edges = g.graph.edges()
        assert len(edges) == len(set(edges))
        assert all(i < j for i, j in edges)

    def test_coloring_is_proper(self):
        for spec in (square_spec(5, 4, 1.0), hex_spec(), square_spec(nbhd=Neighborhood.QUEEN)):
            g = build_grid(spec)
            classes = g.graph.greedy_coloring()
            seen = sorted(c for cls in classes for c in cls)
            assert seen == list(range(g.n_cells))
            for cls in classes:
                cls_set = set(cls)
                for c in cls:
                    assert not cls_set.intersection(g.graph.neighbors(c))

    def test_rook_grid_is_two_colorable(self):
        g = build_grid(square_spec(4, 4, 1.0))
        assert len(g.graph.greedy_coloring()) == 2


class TestGeoJson:
    def test_feature_per_cell_and_closed_rings(self):
        for spec in (square_spec(), hex_spec()):
            g = build_grid(spec)
            geo = grid_to_geojson(g)
            assert geo["type"] == "FeatureCollection"
            assert len(geo["features"]) == g.n_cells
            for feat in geo["features"]:
                ring = feat["geometry"]["coordinates"][0]
                assert ring[0] == ring[-1]
                assert len(ring) >= 4

    def test_rings_counterclockwise(self):
        g = build_grid(square_spec())
        for feat in grid_to_geojson(g)["features"]:
            ring = feat["geometry"]["coordinates"][0]
            area2 = sum(
                ring[i][0] * ring[i + 1][1] - ring[i + 1][0] * ring[i][1]
                for i in range(len(ring) - 1)
            )
            assert area2 > 0

    def test_properties_merged(self):
        g = build_grid(square_spec(2, 2, 1.0))
        geo = grid_to_geojson(g, {0: {"state": 2}})
        props = geo["features"][0]["properties"]
        assert props == {"cell_id": 0, "state": 2}
        assert geo["features"][1]["properties"] == {"cell_id": 1}

    def test_json_serializable(self):
        geo = grid_to_geojson(build_grid(hex_spec()))
        json.dumps(geo)
