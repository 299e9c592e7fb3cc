import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from orthomatch.gridmap import (
    ElevationGrid,
    OrthoMap,
    PixmapError,
    Pose2D,
    crop_window,
    load_elevation_csv,
    load_map,
    mask_path_for,
    normalize_angle,
    render_orthomosaic,
    rotate_nearest,
    save_elevation_csv,
    save_map,
    to_grayscale,
    write_pixmap,
)

gray_pixels = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12))
rgb_pixels = st.tuples(st.integers(1, 10), st.integers(1, 10)).flatmap(
    lambda hw: hnp.arrays(np.uint8, (hw[0], hw[1], 3))
)


def test_orthomap_defaults_and_invariants():
    m = OrthoMap(np.zeros((3, 5), np.uint8))
    assert (m.width_px, m.height_px, m.channels, m.resolution) == (5, 3, 1, 0.1)
    assert m.mask.shape == (3, 5) and m.mask.all()
    with pytest.raises(ValueError):
        OrthoMap(np.zeros((0, 4), np.uint8))
    with pytest.raises(ValueError):
        OrthoMap(np.zeros((2, 2), np.uint8), resolution=0.0)
    with pytest.raises(ValueError):
        OrthoMap(np.full((2, 2), 300.0))
    with pytest.raises(ValueError):
        OrthoMap(np.zeros((2, 2), np.uint8), mask=np.ones((2, 3), bool))


def test_pixels_are_read_only():
    src = np.zeros((2, 2), np.uint8)
    m = OrthoMap(src)
    src[0, 0] = 9
    assert m.pixels[0, 0] == 0
    with pytest.raises(ValueError):
        m.pixels[0, 0] = 1


@pytest.mark.parametrize("theta,expected", [(math.pi, -math.pi), (-math.pi, -math.pi), (3 * math.pi, -math.pi),
                                            (2 * math.pi, 0.0), (math.pi / 2, math.pi / 2)])
def test_normalize_angle(theta, expected):
    assert normalize_angle(theta) == pytest.approx(expected, abs=1e-12)


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_pose_heading_in_half_open_range(theta):
    h = Pose2D(0, 0, theta).heading
    assert -math.pi <= h < math.pi
    assert math.isclose(math.cos(h), math.cos(theta), abs_tol=1e-9)


def test_world_pixel_conversion():
    m = OrthoMap(np.zeros((4, 4), np.uint8), resolution=0.5, origin=(10.0, -2.0))
    assert m.pixel_to_world(2, 3) == (11.0, -0.5)
    assert m.world_to_pixel(11.0, -0.5) == (2.0, 3.0)


# --- pixmap I/O


def test_load_all_black(tmp_path):
    p = tmp_path / "black.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    m = load_map(p, 0.1)
    assert m.width_px == 2 and m.height_px == 2 and m.resolution == 0.1
    assert not m.pixels.any() and m.mask.all()


def test_header_with_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n# depth\n255\n\x01\x02\x03")
    assert load_map(p).pixels.tolist() == [[1, 2, 3]]


@pytest.mark.parametrize("payload,message", [
    (b"P5\n2 2\n255\n\x00\x00\x00", "malformed pixmap"),
    (b"P5\n2 2\n", "malformed pixmap"),
    (b"P2\n1 1\n255\n0", "malformed pixmap"),
    (b"P5\nx 2\n255\n\x00\x00", "malformed pixmap"),
    (b"P5\n1 1\n65535\n\x00\x00", "malformed pixmap"),
    (b"P5\n0 4\n255\n", "malformed pixmap"),
    (b"P5\n100000 100000\n255\n\x00", "dimensions overflow"),
])
def test_bad_pixmaps(tmp_path, payload, message):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(PixmapError, match=message):
        load_map(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_map(tmp_path / "nope.pgm")


def test_mask_sidecar_name():
    assert mask_path_for("dir/local_0003.pgm").name == "local_0003.mask.pgm"


@given(gray_pixels, st.data())
def test_gray_round_trip_with_mask(tmp_path_factory, pixels, data):
    mask = data.draw(hnp.arrays(bool, pixels.shape))
    m = OrthoMap(pixels, 0.25, mask)
    path = tmp_path_factory.mktemp("rt") / "m.pgm"
    save_map(m, path)
    assert load_map(path, 0.25) == m
    assert mask_path_for(path).exists() == (not mask.all())


@given(rgb_pixels)
def test_rgb_round_trip(tmp_path_factory, pixels):
    m = OrthoMap(pixels)
    path = tmp_path_factory.mktemp("rt") / "m.ppm"
    save_map(m, path)
    back = load_map(path)
    assert back == m and back.channels == 3


def test_save_removes_stale_sidecar(tmp_path):
    path = tmp_path / "m.pgm"
    save_map(OrthoMap(np.zeros((2, 2), np.uint8), mask=[[True, False], [True, True]]), path)
    assert mask_path_for(path).exists()
    save_map(OrthoMap(np.zeros((2, 2), np.uint8)), path)
    assert not mask_path_for(path).exists()


def test_mask_size_mismatch_rejected(tmp_path):
    path = tmp_path / "m.pgm"
    write_pixmap(path, np.zeros((2, 2), np.uint8))
    write_pixmap(mask_path_for(path), np.zeros((3, 3), np.uint8))
    with pytest.raises(PixmapError):
        load_map(path)


# --- grayscale


@pytest.mark.parametrize("rgb,expected", [((255, 255, 255), 255), ((255, 0, 0), 76), ((0, 255, 0), 150),
                                          ((0, 0, 255), 29), ((0, 0, 0), 0)])
def test_luminance(rgb, expected):
    m = OrthoMap(np.array([[rgb]], np.uint8))
    assert to_grayscale(m).pixels[0, 0] == expected


@given(rgb_pixels)
def test_grayscale_matches_rounded_luma_and_is_idempotent(pixels):
    mask = np.ones(pixels.shape[:2], bool)
    mask[0, 0] = False
    g = to_grayscale(OrthoMap(pixels, mask=mask))
    r, gg, b = (pixels[..., i].astype(int) for i in range(3))
    expected = [[int(math.floor(0.299 * r[i, j] + 0.587 * gg[i, j] + 0.114 * b[i, j] + 0.5))
                 for j in range(pixels.shape[1])] for i in range(pixels.shape[0])]
    assert g.pixels.tolist() == expected
    assert to_grayscale(g) is g
    assert np.array_equal(g.mask, mask)


# --- elevation grids


def test_render_single_cell():
    grid = ElevationGrid([[0.0]], [[(10, 20, 30)]], 0.1)
    m = render_orthomosaic(grid, 0.1)
    assert m.pixels.tolist() == [[[10, 20, 30]]] and m.mask.all()


def test_render_empty_cell_masked():
    grid = ElevationGrid([[1.0, np.nan]], [[(5, 5, 5), (9, 9, 9)]], 0.1)
    m = render_orthomosaic(grid, 0.1)
    assert m.mask.tolist() == [[True, False]]
    assert m.pixels[0, 1].tolist() == [0, 0, 0]


def test_render_block_replication():
    rng = np.random.default_rng(3)
    colors = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
    m = render_orthomosaic(ElevationGrid(np.zeros((4, 4)), colors, 0.1), 0.05)
    assert m.width_px == 8 and m.height_px == 8
    expected = np.repeat(np.repeat(colors, 2, axis=0), 2, axis=1)
    assert np.array_equal(m.pixels, expected)


def test_render_dimensions_round_up():
    m = render_orthomosaic(ElevationGrid(np.zeros((3, 5)), np.zeros((3, 5, 3)), 0.1), 0.3)
    # exact arithmetic: 5 * 0.1 / 0.3 = 5/3 and 3 * 0.1 / 0.3 = 1
    expected = (math.ceil(Fraction(5, 10) / Fraction(3, 10)), math.ceil(Fraction(3, 10) / Fraction(3, 10)))
    assert (m.width_px, m.height_px) == expected == (2, 1)


def test_render_all_empty():
    with pytest.raises(ValueError, match="no surface to render"):
        render_orthomosaic(ElevationGrid.empty(3, 2))


@given(hnp.arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6))).filter(lambda a: a.any()))
def test_render_mask_exactly_over_empty_cells(occupied):
    heights = np.where(occupied, 1.0, np.nan)
    m = render_orthomosaic(ElevationGrid(heights, np.full(occupied.shape + (3,), 7), 0.2), 0.2)
    assert np.array_equal(m.mask, occupied)


def test_elevation_csv_round_trip(tmp_path):
    heights = np.array([[0.5, np.nan], [np.nan, -1.25]])
    colors = np.array([[[1, 2, 3], [0, 0, 0]], [[0, 0, 0], [7, 8, 9]]])
    path = tmp_path / "e.csv"
    save_elevation_csv(ElevationGrid(heights, colors), path)
    assert path.read_text().splitlines()[0] == "col,row,height,r,g,b"
    back = load_elevation_csv(path, 2, 2)
    assert np.array_equal(back.occupied, ~np.isnan(heights))
    assert back.heights[0, 0] == 0.5 and back.colors[1, 1].tolist() == [7, 8, 9]


def test_elevation_csv_rejects_outside_cell(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("col,row,height,r,g,b\n3,0,1.0,0,0,0\n")
    with pytest.raises(ValueError):
        load_elevation_csv(path, 2, 2)


# --- windows


def test_crop_identity_and_single_pixel():
    rng = np.random.default_rng(0)
    m = OrthoMap(rng.integers(0, 256, (5, 7)).astype(np.uint8), 0.2, rng.random((5, 7)) > 0.3)
    assert crop_window(m, 0, 0, 7, 5) == m
    one = crop_window(m, 0, 0, 1, 1)
    assert one.pixels.shape == (1, 1) and one.pixels[0, 0] == m.pixels[0, 0]


def test_crop_carries_mask_and_origin():
    mask = np.ones((4, 4), bool)
    mask[2, 3] = False
    m = OrthoMap(np.arange(16, dtype=np.uint8).reshape(4, 4), 0.5, mask)
    c = crop_window(m, 2, 1, 2, 2)
    assert c.pixels.tolist() == [[6, 7], [10, 11]]
    assert c.mask.tolist() == [[True, True], [True, False]]
    assert c.origin == (1.0, 0.5) and c.resolution == 0.5


@pytest.mark.parametrize("u,v,w,h", [(6, 0, 2, 1), (0, 0, 8, 1), (-1, 0, 1, 1), (0, 4, 1, 2), (0, 0, 0, 1)])
def test_crop_out_of_bounds(u, v, w, h):
    with pytest.raises(ValueError, match="window out of bounds"):
        crop_window(OrthoMap(np.zeros((5, 7), np.uint8)), u, v, w, h)


def test_rotate_quarter_turn():
    src = np.arange(9, dtype=np.uint8).reshape(3, 3)
    out, mask = rotate_nearest(src, np.ones((3, 3), bool), math.pi / 2, (1.0, 1.0), (3, 3))
    # output offset (i, j) samples the source at (-j, i) from the center
    assert out.tolist() == [[2, 5, 8], [1, 4, 7], [0, 3, 6]]
    assert mask.all()


def test_rotate_marks_outside_invalid():
    src = np.full((4, 4), 9, np.uint8)
    out, mask = rotate_nearest(src, np.ones((4, 4), bool), math.pi / 4, (1.5, 1.5), (4, 4))
    assert not mask.all() and mask[1:3, 1:3].all()
    assert (out[~mask] == 0).all()
