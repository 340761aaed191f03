import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import knn_bruteforce
from stdnet.density import (DotAnnotations, adaptive_sigmas, density_for, fixed_sigmas, hflip, knn_mean_distance,
                            render_density)


def random_ann(rng, n, h=24, w=20, frame_id=0):
    pts = np.column_stack([rng.uniform(0, w, n) * (1 - 1e-9), rng.uniform(0, h, n) * (1 - 1e-9)])
    return DotAnnotations(frame_id, pts, (h, w))


def test_annotation_bounds_name_frame():
    with pytest.raises(ValueError, match="frame 7"):
        DotAnnotations(7, [[70, 3]], (64, 64))
    with pytest.raises(ValueError):
        DotAnnotations(0, [[1, -0.1]], (8, 8))
    assert len(DotAnnotations(0, np.zeros((0, 2)), (8, 8))) == 0


def test_knn_examples():
    pts = [(0, 0), (3, 0), (0, 4)]
    assert knn_mean_distance(pts, 2)[0] == 3.5
    np.testing.assert_array_equal(knn_mean_distance([(1, 1), (1, 1)], 3), [0, 0])
    assert np.isnan(knn_mean_distance([(1, 1)], 3)[0])
    with pytest.raises(ValueError):
        knn_mean_distance(pts, 0)


def test_knn_matches_bruteforce(rng):
    for n in (5, 10, 17):
        pts = rng.uniform(0, 30, (n, 2))
        for k in (1, 3, 6):
            np.testing.assert_allclose(knn_mean_distance(pts, k), knn_bruteforce(pts.tolist(), k), rtol=1e-12)


def test_adaptive_sigma_examples():
    ann = DotAnnotations(0, [(0, 0), (3, 0), (0, 4)], (10, 10))
    assert adaptive_sigmas(ann, 0.3, 2)[0] == pytest.approx(1.05, abs=1e-12)
    assert adaptive_sigmas(DotAnnotations(0, [(2, 2)], (5, 5)))[0] == 3.0
    grid = [(x, y) for x in range(0, 10, 2) for y in range(0, 4, 2)]
    ann = DotAnnotations(0, grid, (10, 10))
    want = np.maximum(0.3 * np.array(knn_bruteforce(grid, 3)), 0.5)
    np.testing.assert_allclose(adaptive_sigmas(ann), want, rtol=1e-12)
    dup = DotAnnotations(0, [(1, 1), (1, 1)], (5, 5))
    np.testing.assert_array_equal(adaptive_sigmas(dup), [0.5, 0.5])
    with pytest.raises(ValueError):
        adaptive_sigmas(ann, beta=0)


def test_render_examples():
    d = render_density(DotAnnotations(0, [(12, 12)], (25, 25)), [3.0])
    assert abs(d.count - 1) < 1e-9
    assert np.unravel_index(d.values.argmax(), d.shape) == (12, 12)
    z = render_density(DotAnnotations(0, np.zeros((0, 2)), (6, 6)), [])
    assert z.count == 0 and not z.values.any()
    with pytest.raises(ValueError):
        render_density(DotAnnotations(0, [(1, 1)], (4, 4)), [0.0])
    with pytest.raises(ValueError):
        render_density(DotAnnotations(0, [(1, 1)], (4, 4)), [1.0, 2.0])


def test_superposition(rng):
    ann = random_ann(rng, 3)
    sig = [0.7, 2.0, 4.5]
    total = render_density(ann, sig)
    parts = sum(render_density(DotAnnotations(0, [p], ann.image_size), [s]).values for p, s in zip(ann.points, sig))
    np.testing.assert_allclose(total.values, parts, rtol=0, atol=1e-15)
    assert abs(total.count - 3) < 1e-9


def test_count_preserved_on_random_sets(rng):
    for i in range(100):
        ann = random_ann(rng, int(rng.integers(0, 30)), frame_id=i)
        for mode in ("fixed:3", "adaptive:0.3,3"):
            d = density_for(ann, mode)
            assert abs(d.count - len(ann)) < 1e-9
            assert d.values.min() >= 0


def test_border_and_corner_points_keep_unit_mass():
    for p in [(0, 0), (9.99, 0), (0, 7.5), (9.5, 7.99)]:
        assert abs(render_density(DotAnnotations(0, [p], (8, 10)), [5.0]).count - 1) < 1e-12


def test_tiny_sigma_keeps_unit_mass():
    d = render_density(DotAnnotations(0, [(3.5, 3.5)], (8, 8)), [1e-3])
    assert abs(d.count - 1) < 1e-12


def test_hflip_examples():
    assert tuple(hflip(DotAnnotations(0, [(0, 5)], (10, 10))).points[0]) == (9, 5)
    assert tuple(hflip(DotAnnotations(0, [(4.5, 2)], (10, 10))).points[0]) == (4.5, 2)


def test_hflip_equivariance(rng):
    for _ in range(20):
        w = int(rng.integers(5, 30))
        # half on pixel centres, half anywhere up to the last centre
        pts = np.column_stack([rng.integers(0, w, 8).astype(float), rng.uniform(0, 15, 8)])
        pts[:4, 0] = rng.uniform(0, w - 1, 4)
        ann = DotAnnotations(0, pts, (15, w))
        for mode in ("fixed:2", "adaptive:0.3,3"):
            np.testing.assert_allclose(density_for(hflip(ann), mode).values,
                                       density_for(ann, mode).values[:, ::-1], rtol=0, atol=1e-12)


def test_monotone_spread():
    ann = DotAnnotations(0, [(20, 20)], (41, 41))
    peaks = [render_density(ann, [s]).values.max() for s in (0.5, 1.0, 1.5, 2.0, 3.0, 4.0)]
    assert all(a > b for a, b in zip(peaks, peaks[1:]))


def test_density_for_modes():
    ann = DotAnnotations(0, [(3, 3), (5, 5)], (10, 10))
    np.testing.assert_array_equal(density_for(ann, "fixed:3").values, render_density(ann, fixed_sigmas(ann)).values)
    with pytest.raises(ValueError):
        density_for(ann, "gauss")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 15.999), st.floats(0, 11.999)), max_size=12),
       st.floats(0.3, 6.0))
def test_count_preservation_property(pts, sigma):
    ann = DotAnnotations(0, np.array(pts).reshape(-1, 2), (12, 16))
    assert abs(density_for(ann, f"fixed:{sigma}").count - len(pts)) < 1e-9
    assert abs(density_for(ann, "adaptive:0.3,3").count - len(pts)) < 1e-9
