import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from orthomatch.gridmap import OrthoMap, crop_window
from orthomatch.matching import (
    DegeneratePatch,
    KernelKind,
    Method,
    NoValidPlacement,
    ScoreField,
    heatmap,
    hot_lut,
    load_score_field,
    make_kernel,
    match_template,
    match_template_parallel,
    save_heatmap,
    save_score_field,
    score_ncc,
    score_sad,
    score_ssd,
    score_wncc,
    template_mean,
    window_mean,
)


def pair(shape=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 256, shape).astype(np.uint8),
            rng.integers(0, 256, shape).astype(np.uint8))


non_constant = hnp.arrays(np.uint8, st.tuples(st.integers(2, 9), st.integers(2, 9))).filter(
    lambda a: a.min() != a.max()
)


# --- means


def test_template_mean_examples():
    assert template_mean(np.full((4, 4), 7)) == 7
    assert template_mean(np.array([[0, 255]])) == 127.5
    t, _ = pair()
    assert template_mean(t) == pytest.approx(oracles.mean(t), abs=1e-12)
    with pytest.raises(ValueError):
        template_mean(np.zeros((0, 3)))


def test_template_mean_ignores_mask():
    m = OrthoMap(np.array([[0, 100]], np.uint8), mask=[[False, True]])
    assert template_mean(m) == 50


def test_window_mean():
    img = np.full((6, 6), 42, np.uint8)
    assert window_mean(img, 1, 2, 3, 3) == 42
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (9, 7))
    assert window_mean(img, 0, 0, 7, 9) == template_mean(img)
    assert window_mean(img, 2, 3, 4, 5) == pytest.approx(oracles.mean(img[3:8, 2:6]), abs=1e-12)
    with pytest.raises(ValueError, match="out of bounds"):
        window_mean(img, 5, 0, 3, 3)


# --- kernels


def test_paper_literal_probes():
    assert make_kernel("paper-literal", 4, 4).at(2, 2) == 2
    assert make_kernel("paper-literal", 8, 8).at(1, 1) == 7


@pytest.mark.parametrize("m,n", [(4, 4), (8, 8), (5, 3), (7, 10), (1, 1), (16, 9)])
def test_paper_literal_matches_hand_transcription(m, n):
    k = make_kernel(KernelKind.PAPER_LITERAL, m, n)
    w = oracles.literal_weight(m, n)
    for t in range(1, n + 1):
        for s in range(1, m + 1):
            assert k.at(s, t) == w(s, t)


@pytest.mark.parametrize("m,n", [(3, 3), (4, 4), (5, 8), (64, 64), (17, 6)])
def test_corrected_center_and_corners(m, n):
    k = make_kernel("corrected", m, n)
    assert k.weights.max() == 1.0
    assert k.at((m + 1) // 2, (n + 1) // 2) == 1.0
    for s, t in [(1, 1), (m, 1), (1, n), (m, n)]:
        assert k.at(s, t) == 0.0


@given(st.integers(1, 20), st.integers(1, 20))
def test_corrected_shape_properties(m, n):
    w = make_kernel("corrected", m, n).weights
    assert w.shape == (n, m) and w.min() >= 0 and w.max() == 1.0
    assert np.allclose(w, w[::-1, :]) and np.allclose(w, w[:, ::-1])
    # moving one step away from the center along either axis never raises the weight
    cy, cx = (n - 1) / 2, (m - 1) / 2
    for t in range(n):
        for s in range(m):
            if abs(s + 1 - cx) > abs(s - cx) and s + 1 < m:
                assert w[t, s + 1] <= w[t, s] + 1e-15
            if abs(t + 1 - cy) > abs(t - cy) and t + 1 < n:
                assert w[t + 1, s] <= w[t, s] + 1e-15


def test_uniform_kernel_and_validation():
    assert (make_kernel("uniform", 3, 2).weights == 1).all()
    with pytest.raises(ValueError):
        make_kernel("uniform", 0, 3)
    with pytest.raises(ValueError):
        make_kernel("gaussian", 3, 3)


# --- single-window scorers


def test_ssd_sad_examples():
    t, r = pair()
    assert score_ssd(t, t) == 0 and score_sad(t, t) == 0
    assert score_ssd([[10]], [[13]]) == 9 and score_sad([[10]], [[13]]) == 3
    assert score_ssd(r, t) == oracles.ssd(r, t)
    assert score_sad(r, t) == oracles.sad(r, t)
    with pytest.raises(ValueError, match="dimension mismatch"):
        score_ssd(np.zeros((2, 3)), np.zeros((3, 2)))


def test_ssd_sad_not_gain_bias_invariant():
    t, r = pair()
    shifted = np.clip(0.5 * t.astype(float) + 40, 0, 255)
    assert score_ssd(r, shifted) != score_ssd(r, t)
    assert score_sad(r, shifted) != score_sad(r, t)


def test_ncc_examples():
    t, r = pair()
    assert score_ncc(t, t) == pytest.approx(1.0, abs=1e-12)
    assert score_ncc(255 - t.astype(int), t) == pytest.approx(-1.0, abs=1e-12)
    assert score_ncc(r, t) == pytest.approx(oracles.pearson(r, t), abs=1e-12)


@given(non_constant, st.data())
def test_ncc_matches_pearson_oracle(t, data):
    r = data.draw(hnp.arrays(np.uint8, t.shape).filter(lambda a: a.min() != a.max()))
    s = score_ncc(r, t)
    assert s == pytest.approx(oracles.pearson(r, t), abs=1e-9)
    assert -1.0 <= s <= 1.0


def test_degenerate_patches():
    t, _ = pair()
    flat = np.full(t.shape, 9)
    k = make_kernel("corrected", 8, 8)
    for fn in (lambda a, b: score_ncc(a, b), lambda a, b: score_wncc(a, b, k)):
        with pytest.raises(DegeneratePatch, match="degenerate patch"):
            fn(flat, t)
        with pytest.raises(DegeneratePatch):
            fn(t, flat)


def test_wncc_uniform_self_match_is_one():
    t, _ = pair()
    assert score_wncc(t, t, make_kernel("uniform", 8, 8)) == pytest.approx(1.0, abs=1e-12)


@given(non_constant, st.data(), st.sampled_from(["corrected", "uniform", "paper-literal"]))
def test_wncc_matches_double_loop(t, data, kind):
    r = data.draw(hnp.arrays(np.uint8, t.shape).filter(lambda a: a.min() != a.max()))
    n, m = t.shape
    k = make_kernel(kind, m, n)
    expected = oracles.wncc(r, t, lambda s, tt: k.at(s, tt))
    assert score_wncc(r, t, k) == pytest.approx(expected, rel=1e-9, abs=1e-12)
    assert score_wncc(r, t, k) >= 0


@given(non_constant, st.data(), st.floats(0.05, 20), st.floats(-300, 300))
def test_correlations_gain_bias_invariant(t, data, a, b):
    r = data.draw(hnp.arrays(np.uint8, t.shape).filter(lambda x: x.min() != x.max()))
    k = make_kernel("corrected", t.shape[1], t.shape[0])
    t2 = a * t.astype(float) + b
    assert score_ncc(r, t2) == pytest.approx(score_ncc(r, t), abs=1e-9)
    assert score_wncc(r, t2, k) == pytest.approx(score_wncc(r, t, k), abs=1e-9)


def test_wncc_kernel_shape_checked():
    t, r = pair()
    with pytest.raises(ValueError):
        score_wncc(r, t, make_kernel("uniform", 4, 4))


# --- exhaustive search


def test_planted_template_ncc_and_uniform_wncc():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (40, 50)).astype(np.uint8)
    tpl = crop_window(OrthoMap(img), 12, 7, 10, 8)
    res = match_template(img, tpl, "NCC")
    assert (res.best_u, res.best_v) == (12, 7) and res.best_score == 1.0
    res = match_template(img, tpl, "WNCC", make_kernel("uniform", 10, 8))
    assert (res.best_u, res.best_v) == (12, 7) and res.best_score == 1.0
    res = match_template(img, tpl, "WNCC", make_kernel("corrected", 10, 8))
    assert (res.best_u, res.best_v) == (12, 7)


def test_constant_map_sad_tie_breaks_to_origin():
    res = match_template(np.full((5, 6), 3, np.uint8), [[3]], "SAD")
    assert (res.best_u, res.best_v) == (0, 0)
    assert (res.field.scores == 0).all()
    assert res.field.placements_w == 6 and res.field.placements_h == 5


def test_ties_prefer_smallest_v_then_u():
    img = np.zeros((6, 6), np.uint8)
    img[4, 1] = img[1, 4] = img[1, 5] = 200
    res = match_template(img, [[200]], "SSD")
    assert (res.best_u, res.best_v) == (4, 1)


def test_inclusive_search_range():
    res = match_template(np.arange(30, dtype=np.uint8).reshape(5, 6), np.ones((2, 3)), "SAD")
    assert res.field.scores.shape == (4, 4)


def test_degenerate_windows_get_sentinel():
    img = np.zeros((10, 10), np.uint8)
    img[:, 5:] = np.arange(50).reshape(10, 5)
    tpl = img[2:5, 6:9]
    for method, kernel in [("NCC", None), ("WNCC", make_kernel("corrected", 3, 3))]:
        res = match_template(img, tpl, method, kernel)
        assert res.field.scores[0, 0] == -math.inf
        assert not res.field.valid[:, :3].any()
        assert np.isfinite(res.field.scores[:, 5:]).all()


def test_no_valid_placement():
    with pytest.raises(NoValidPlacement):
        match_template(np.full((5, 5), 9, np.uint8), [[1, 2], [3, 4]], "NCC")


def test_search_errors():
    img, _ = pair((6, 6))
    with pytest.raises(ValueError, match="larger than map"):
        match_template(img, np.ones((7, 2)), "SSD")
    with pytest.raises(ValueError, match="requires a weight kernel"):
        match_template(img, img[:3, :3], "WNCC")
    with pytest.raises(DegeneratePatch):
        match_template(img, np.ones((2, 2)), "NCC")
    with pytest.raises(ValueError):
        match_template_parallel(img, img[:2, :2], "SSD", workers=0)


@pytest.mark.parametrize("method", list(Method))
def test_field_matches_oracle_64_16(method):
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    tpl = rng.integers(0, 256, (16, 16)).astype(np.uint8)
    k = make_kernel("corrected", 16, 16)
    res = match_template(img, tpl, method, k)
    ref = oracles.score_field(img, tpl, method.value, k.weights)
    assert np.allclose(res.field.scores, ref, rtol=0, atol=1e-6)
    assert (res.best_u, res.best_v) == oracles.tie_broken_optimum(ref, method.maximize)


def test_float_images_take_float_path():
    rng = np.random.default_rng(2)
    img = rng.random((20, 20)) * 255
    tpl = img[3:9, 4:8] * 0.5 + 10
    for method in Method:
        res = match_template(img, tpl, method, make_kernel("corrected", 4, 6))
        ref = oracles.score_field(img, tpl, method.value, make_kernel("corrected", 4, 6).weights)
        assert np.allclose(res.field.scores, ref, atol=1e-6)


def test_rgb_inputs_are_converted():
    rng = np.random.default_rng(4)
    rgb = OrthoMap(rng.integers(0, 256, (20, 24, 3)).astype(np.uint8))
    tpl = crop_window(rgb, 6, 3, 8, 8)
    assert (match_template(rgb, tpl, "NCC").best_u, match_template(rgb, tpl, "NCC").best_v) == (6, 3)


@pytest.mark.parametrize("method", list(Method))
@pytest.mark.parametrize("workers", [1, 2, 3, 8])
def test_parallel_is_bit_identical(method, workers):
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (50, 37)).astype(np.uint8)
    tpl = img[10:19, 5:17]
    k = make_kernel("corrected", 12, 9)
    a = match_template(img, tpl, method, k)
    b = match_template_parallel(img, tpl, method, k, workers)
    assert np.array_equal(a.field.scores, b.field.scores)
    assert a == b


def test_scores_are_read_only():
    res = match_template(pair((10, 10))[0], np.ones((2, 2)), "SAD")
    with pytest.raises(ValueError):
        res.field.scores[0, 0] = 1


# --- export


def test_score_field_round_trip(tmp_path):
    scores = np.array([[0.5, -math.inf], [1.0, 0.25], [0.0, 0.125]])
    f = ScoreField(scores, Method.WNCC)
    path = tmp_path / "f.sfld"
    save_score_field(f, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SFLD" and struct.unpack("<III", raw[4:16]) == (2, 3, 3)
    assert len(raw) == 16 + 4 * 6
    assert load_score_field(path) == f


def test_score_field_rejects_garbage(tmp_path):
    path = tmp_path / "f.sfld"
    path.write_bytes(b"SFLD" + struct.pack("<III", 4, 4, 0) + bytes(8))
    with pytest.raises(ValueError, match="size mismatch"):
        load_score_field(path)
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_score_field(path)


def test_heatmap_normalization():
    up = heatmap(ScoreField(np.array([[0.0, 0.5, 1.0, -math.inf]]), Method.NCC))
    assert up.tolist() == [[0, 128, 255, 0]]
    down = heatmap(ScoreField(np.array([[0.0, 10.0, math.inf]]), Method.SSD))
    assert down.tolist() == [[255, 0, 0]]
    assert heatmap(ScoreField(np.array([[2.0, 2.0]]), Method.SAD)).tolist() == [[255, 255]]


def test_hot_lut_and_color_heatmap(tmp_path):
    lut = hot_lut()
    assert lut.shape == (256, 3) and lut[0].tolist() == [0, 0, 0] and lut[255].tolist() == [255, 255, 255]
    assert (np.diff(lut.astype(int), axis=0) >= 0).all()
    f = ScoreField(np.array([[0.0, 1.0]]), Method.NCC)
    save_heatmap(f, tmp_path / "h.ppm", color=True)
    assert (tmp_path / "h.ppm").read_bytes().startswith(b"P6")
    save_heatmap(f, tmp_path / "h.pgm")
    assert (tmp_path / "h.pgm").read_bytes().startswith(b"P5")
