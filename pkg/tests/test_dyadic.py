"""Dyadic indexing, set predicates, approximation schemes, and the
declarative set-file format."""

import math

import numpy as np
import pytest

from gff_thinlab.dyadic import (
    BoxSet,
    DyadicScheme,
    DyadicWord,
    GeometricSet,
    PointSet,
    RasterSet,
    SegmentSet,
    ShiftedScheme,
    approximate,
    cell_at,
    children,
    load_set_file,
    neighborhood_volume,
    parse_set_text,
    root_cell,
    validate_das,
)
from gff_thinlab.errors import ConfigurationError, InputError, ResolutionError
from gff_thinlab.green_field import LatticeDomain, build_greens


# ---------------------------------------------------------------------------
# words and cells


def test_word_codes_follow_child_bits():
    root = DyadicWord(2)
    assert root.code == 1
    assert root.child(1).code == (1 << 2) | 1
    assert root.child(3).child(2).code == ((((1 << 2) | 3) << 2) | 2)


def test_letter_bits_axis0_most_significant():
    # letter 1 in d=2 is binary 01: axis 0 stays low, axis 1 goes high
    w = DyadicWord(2).child(1)
    assert tuple(w.coords()) == (0, 1)
    assert tuple(DyadicWord(2).child(2).coords()) == (1, 0)
    w3 = DyadicWord(3).child(4)  # binary 100
    assert tuple(w3.coords()) == (1, 0, 0)


@pytest.mark.parametrize("d,depth", [(2, 3), (3, 2), (4, 2)])
def test_cell_at_roundtrips_coords(d, depth):
    rng = np.random.default_rng(5)
    for _ in range(20):
        coords = rng.integers(0, 1 << depth, size=d)
        cell = cell_at(d, coords, depth)
        assert cell.depth == depth
        assert np.array_equal(cell.coords, coords)
        assert np.allclose(cell.lo, coords * 2.0**-depth)
        assert cell.volume() == 2.0 ** (-d * depth)


def test_children_are_lexicographic_and_tile_parent():
    kids = children(root_cell(2))
    corners = [tuple(c.coords) for c in kids]
    assert corners == sorted(corners)
    assert len(kids) == 4
    assert math.isclose(sum(c.volume() for c in kids), 1.0)


def test_word_and_cell_validation():
    with pytest.raises(InputError):
        DyadicWord(2).child(4)
    with pytest.raises(InputError):
        cell_at(2, [0, 0, 0], 1)
    with pytest.raises(InputError):
        cell_at(2, [-1, 0], 1)
    with pytest.raises(InputError):
        cell_at(2, [2, 0], 1)
    with pytest.raises(InputError):
        children(DyadicWord(2), d=3)


# ---------------------------------------------------------------------------
# set predicates


def test_point_box_membership_and_trim():
    A = GeometricSet([PointSet((0.5, 0.25))])
    assert A.intersects_box((0.0, 0.0), (0.5, 0.5))
    assert A.intersects_box((0.5, 0.25), (1.0, 1.0))
    assert not A.intersects_box((0.6, 0.0), (1.0, 1.0))
    # a point sitting on a trim plane is discounted
    assert not A.intersects_box((0.0, 0.0), (1.0, 1.0), trim_planes=[(0, 0.5)])
    assert A.intersects_box((0.0, 0.0), (1.0, 1.0), trim_planes=[(0, 0.3)])


def test_segment_clipping_against_boxes():
    seg = GeometricSet([SegmentSet((0.1, 0.1), (0.9, 0.9))])
    assert seg.intersects_box((0.4, 0.4), (0.6, 0.6))
    assert not seg.intersects_box((0.0, 0.6), (0.2, 0.9))
    # touching a box only at one corner point still counts (closed sets)
    assert seg.intersects_box((0.0, 0.0), (0.1, 0.1))


def test_primitive_distances_are_exact():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
    p = PointSet((0.0, 1.0))
    assert np.allclose(p.distance(pts), [1.0, 1.0, math.sqrt(0.5)])
    s = SegmentSet((0.0, 0.0), (1.0, 0.0))
    assert np.allclose(s.distance(np.array([[0.5, 0.3], [2.0, 0.0]])), [0.3, 1.0])
    b = BoxSet((0.25, 0.25), (0.75, 0.75))
    assert np.allclose(b.distance(np.array([[0.5, 0.5], [1.0, 0.5]])), [0.0, 0.25])


def test_mixed_dimension_primitives_rejected():
    with pytest.raises(InputError):
        GeometricSet([PointSet((0.5, 0.5)), PointSet((0.5, 0.5, 0.5))])


def test_raster_set_matches_geometric_counts():
    dom = LatticeDomain(2, 64)
    seg = GeometricSet([SegmentSet((0.25, 0.5), (0.75, 0.5))])
    ras = RasterSet(dom, seg.rasterize(dom))
    for n in (2, 3, 4):
        assert approximate(ras, n).count == approximate(seg, n).count
    with pytest.raises(InputError):
        RasterSet(dom, np.zeros((dom.m, dom.m), dtype=bool))


# ---------------------------------------------------------------------------
# approximation


def test_midline_segment_box_counts():
    # closed dyadic cells meeting the segment y=1/2, x in [1/4, 3/4]:
    # two rows of 2^(n-1)+2 cells once the endpoints sit on level-n corners
    seg = GeometricSet([SegmentSet((0.25, 0.5), (0.75, 0.5))])
    for n in (2, 3, 4):
        ap = approximate(seg, n)
        assert ap.count == 2 * (2 ** (n - 1) + 2)
        assert math.isclose(ap.volume, ap.count * 4.0**-n)


def test_point_counts_interior_vs_corner():
    generic = GeometricSet([PointSet((0.3117, 0.6231))])
    for n in (1, 2, 3):
        assert approximate(generic, n).count == 1
    corner = GeometricSet([PointSet((0.5, 0.5))])
    assert approximate(corner, 1).count == 4
    assert approximate(corner, 2).count == 4


def test_count_growth_is_subadditive():
    sets = [
        GeometricSet([SegmentSet((0.2, 0.3), (0.8, 0.7))]),
        GeometricSet([BoxSet((0.3, 0.3), (0.6, 0.55))]),
    ]
    for A in sets:
        prev = approximate(A, 1).count
        for n in range(2, 6):
            cur = approximate(A, n).count
            assert cur <= 4 * prev
            prev = cur


def test_empty_set_and_resolution_guard():
    empty = GeometricSet([])
    ap = approximate(empty, 3, dom=LatticeDomain(2, 16))
    assert ap.count == 0 and ap.volume == 0.0
    with pytest.raises(ResolutionError):
        approximate(GeometricSet([PointSet((0.5, 0.5))]), 5, dom=LatticeDomain(2, 16))


def test_shifted_scheme_trim_swallows_break_planes():
    # the half-offset grid's own planes carry no pieces: a point on one
    # is invisible to the scheme, a point off them is seen exactly once
    sch = ShiftedScheme(2)
    on_plane = GeometricSet([PointSet((0.25, 0.5))])
    assert approximate(on_plane, 1, scheme=sch).count == 0
    off_plane = GeometricSet([PointSet((0.3, 0.5))])
    assert approximate(off_plane, 1, scheme=sch).count == 1


def test_scheme_pieces_tile_unit_volume():
    for n in (1, 2, 3):
        dy = DyadicScheme(2).pieces(n)
        assert len(dy) == 4**n
        assert math.isclose(sum(p.volume() for p in dy), 1.0)
        sh = ShiftedScheme(2).pieces(n)
        assert len(sh) == ((1 << n) + 1) ** 2
        assert math.isclose(sum(p.volume() for p in sh), 1.0)
    assert DyadicScheme(2).trim_planes(2) == []
    assert len(ShiftedScheme(2).trim_planes(2)) == 2 * (1 << 2)


def test_interior_indicator_covers_box():
    dom = LatticeDomain(2, 16)
    box = GeometricSet([BoxSet((0.0, 0.0), (1.0, 1.0))])
    ap = approximate(box, 1, dom=dom)
    w = ap.interior_indicator(dom)
    assert w.shape == dom.interior_shape
    assert (w == 1.0).all()
    # a single cell marks exactly its interior slab
    lone = approximate(GeometricSet([PointSet((0.1, 0.1))]), 2, dom=dom)
    w1 = lone.interior_indicator(dom)
    assert w1.sum() == w1[:4, :4].sum() > 0


# ---------------------------------------------------------------------------
# neighborhood volume


def test_neighborhood_volume_of_point_is_disk():
    dom = LatticeDomain(2, 256)
    A = GeometricSet([PointSet((0.5, 0.5))])
    vol = neighborhood_volume(A, 0.1, dom)
    assert abs(vol - math.pi * 0.01) < 0.05 * math.pi * 0.01


def test_neighborhood_volume_saturates_at_box():
    dom = LatticeDomain(2, 64)
    A = GeometricSet([BoxSet((0.0, 0.0), (1.0, 1.0))])
    assert math.isclose(neighborhood_volume(A, 0.5, dom), 1.0)
    assert neighborhood_volume(GeometricSet([]), 0.5, dom) == 0.0


def test_neighborhood_volume_mesh_guard():
    dom = LatticeDomain(2, 32)
    with pytest.raises(ResolutionError):
        neighborhood_volume(GeometricSet([PointSet((0.5, 0.5))]), 1.5 * dom.h, dom)


# ---------------------------------------------------------------------------
# scheme validation


@pytest.mark.parametrize("make", [DyadicScheme, ShiftedScheme])
def test_validate_das_accepts_shipped_schemes(make):
    dom = LatticeDomain(2, 32)
    sch = make(2)
    rep = validate_das(sch, dom, 3)
    assert rep.ok, rep.failure
    assert rep.scheme_name == sch.name
    assert 0 < rep.fitted_C <= sch.C + 1e-9
    assert [r["n"] for r in rep.levels] == [1, 2, 3]
    for r in rep.levels:
        assert r["max_overlap"] == 0.0


def test_validate_das_reports_cell_statistics():
    dom = LatticeDomain(2, 32)
    op = build_greens(dom)
    rep = validate_das(DyadicScheme(2), dom, 4, op=op)
    assert set(rep.bv2_stats) == {2, 3, 4}
    for lo, hi in rep.bv2_stats.values():
        assert 0 < lo <= hi < 10
    assert set(rep.uxy_stats) == {3, 4}
    for v in rep.uxy_stats.values():
        assert np.isfinite(v)


# ---------------------------------------------------------------------------
# set files


def test_parse_set_text_kinds_and_comments():
    text = """
    # comment line
    point 0.5 0.5
    segment 0.25 0.5 0.75 0.5   # trailing comment
    box 0.1 0.1 0.2 0.3
    """
    A = parse_set_text(text, 2)
    kinds = [type(p).__name__ for p in A.primitives]
    assert kinds == ["PointSet", "SegmentSet", "BoxSet"]


@pytest.mark.parametrize(
    "bad",
    [
        "circle 0.5 0.5 0.1",
        "point 0.5",
        "segment 0.1 0.2 0.3",
        "point 1.5 0.5",
    ],
)
def test_parse_set_text_rejects_bad_lines(bad):
    with pytest.raises(ConfigurationError) as err:
        parse_set_text(bad, 2)
    assert "line 1" in str(err.value)


def test_load_set_file_roundtrip(tmp_path):
    path = tmp_path / "cross.set"
    path.write_text("segment 0.25 0.5 0.75 0.5\nsegment 0.5 0.25 0.5 0.75\n")
    A = load_set_file(path, 2)
    assert len(A.primitives) == 2
    assert approximate(A, 2).count > 0
