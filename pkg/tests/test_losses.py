import math

import numpy as np
import pytest

from oracles import conv2d_same_loops
from stdnet import checks
from stdnet.density import DotAnnotations, render_density
from stdnet.losses import PRLConfig, compute_loss, l1_pixel, mae_mse, pixelwise_l2, prl, smooth, smoothing_kernel

# brute-force values for the shifted-blob scenario (sigma 1 blobs at (6,6) and (7,7), 12x12)
SCENARIO = {1: 1.0035997641060728, 2: 0.833067033013792, 3: 0.7600897976324316}
CENTRE_Z2 = 0.2041799555716581


def scenario_maps():
    gt = render_density(DotAnnotations(0, [(6, 6)], (12, 12)), [1.0]).values
    pred = render_density(DotAnnotations(0, [(7, 7)], (12, 12)), [1.0]).values
    return pred, gt


def test_config_validation():
    with pytest.raises(ValueError):
        PRLConfig(n_p=2)
    with pytest.raises(ValueError):
        PRLConfig(n_p=1, lambdas=(-1,))
    with pytest.raises(ValueError):
        PRLConfig(sigma=0)


def test_l2_examples(rng):
    assert pixelwise_l2([np.ones((3, 3))], [np.ones((3, 3))])[0].total == 0
    rep, g = pixelwise_l2([np.array([[3.0]])], [np.array([[1.0]])])
    assert rep.total == 2 and g[0][0, 0] == 2
    p, q = rng.standard_normal((2, 2, 5, 4))
    oracle = sum((a - b) ** 2 for a, b in zip(p.ravel().tolist(), q.ravel().tolist())) / 4
    assert pixelwise_l2(list(p), list(q))[0].total == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(Exception):
        pixelwise_l2([np.zeros((2, 2))], [np.zeros((2, 3))])


def test_kernel_examples():
    np.testing.assert_array_equal(smoothing_kernel(1), [[1.0]])
    k = smoothing_kernel(2, 1.0)
    assert k[1, 1] == pytest.approx(1 / (1 + 4 * math.exp(-0.5) + 4 * math.exp(-1)), abs=1e-15)
    assert k[1, 1] == pytest.approx(CENTRE_Z2, abs=1e-15)
    for z in range(1, 6):
        k = smoothing_kernel(z, 1.3)
        assert k.shape == (2 * z - 1,) * 2
        assert abs(k.sum() - 1) < 1e-12
        np.testing.assert_array_equal(k, k[::-1])
        np.testing.assert_array_equal(k, k.T)
    with pytest.raises(ValueError):
        smoothing_kernel(0)


def test_smooth_matches_loop_oracle(rng):
    d = rng.standard_normal((7, 9))
    for z in (2, 3):
        k = smoothing_kernel(z)
        np.testing.assert_allclose(smooth(d, k), conv2d_same_loops(d, k), rtol=0, atol=1e-13)


def test_scenario_values():
    pred, gt = scenario_maps()
    rep, _ = prl([pred], [gt])
    for z, want in SCENARIO.items():
        assert rep.component(z) == pytest.approx(want, abs=1e-12)
    assert rep.component(2) < rep.component(1) and rep.component(3) < rep.component(1)
    assert rep.total == pytest.approx(sum(l * v for _, l, v in rep.per_patch), abs=1e-12)
    assert rep.total == pytest.approx(1 * SCENARIO[1] + 15 * SCENARIO[2] + 3 * SCENARIO[3], abs=1e-10)


def test_prl_examples(rng):
    p, q = rng.standard_normal((2, 3, 6, 6))
    one = PRLConfig(n_p=1, lambdas=(1,))
    assert prl(list(p), list(q), one)[0].total == l1_pixel(list(p), list(q))
    assert prl(list(p), list(p))[0].total == 0


def test_contraction(rng):
    for _ in range(100):
        d = rng.standard_normal((int(rng.integers(3, 15)), int(rng.integers(3, 15))))
        for z in (1, 2, 3):
            assert np.abs(smooth(d, smoothing_kernel(z, float(rng.uniform(0.5, 2))))).sum() <= np.abs(d).sum() + 1e-12


def test_compute_loss_dispatch(rng):
    p, q = [rng.standard_normal((4, 4))], [rng.standard_normal((4, 4))]
    assert compute_loss("prl", p, q)[0].kind == "prl"
    assert compute_loss("l2", p, q)[0].kind == "pixelwise_l2"
    with pytest.raises(ValueError):
        compute_loss("huber", p, q)


@pytest.mark.parametrize("name", ["pixelwise_l2", "prl", "prl_conv_stack"])
def test_loss_gradchecks(name):
    assert checks.run([name])[name].passed


def test_mae_mse():
    mae, mse = mae_mse([10, 12], [11, 14])
    assert mae == 1.5 and mse == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert mae_mse([3, 4], [3, 4]) == (0, 0)
    with pytest.raises(ValueError):
        mae_mse([], [])
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        a, b = mae_mse(rng.normal(size=n) * 10, rng.normal(size=n) * 10)
        assert a <= b + 1e-12
