import numpy as np
import pytest

from oracles import scalar_adam
from stdnet import checks
from stdnet.losses import prl
from stdnet.model import ModelConfig, count_params, forward, init_params, param_shapes, total_count
from stdnet.optim import AdamState, NonFiniteGradient, adam_step, lr_at
from stdnet.tensor import ShapeError

# hand audit of the tiny preset (conv weights + biases, gates without bias)
TINY_TABLE = {
    "backbone": (8 * 1 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16),
    "dsb": (8 * 16 + 8) + (8 * 20 + 8) + (8 * 24 + 8) + 3 * (4 * 8 * 9 + 4) + (16 * 28 + 16),
    "dtb": (8 * 16 + 8) + (8 * 20 + 8) + (8 * 24 + 8) + 3 * (4 * 8 * 3 + 4) + (16 * 28 + 16),
    "attn": 2 * (4 * 16),  # per gate: W1 [4, 16] + W2 [16, 4]
    "head": (16 * 16 * 9 + 16) + (8 * 16 * 9 + 8) + (1 * 8 + 1),
}


def tiny(**kw):
    return ModelConfig.tiny(**kw)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(T=0)
    with pytest.raises(ValueError):
        ModelConfig(backbone="resnet")
    with pytest.raises(ValueError):
        ModelConfig(upsample_scale=4)
    assert ModelConfig.from_dict({"preset": "tiny", "T": 3}).T == 3
    cfg = tiny(T=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shape_and_nonnegative(rng):
    cfg = tiny(T=3)
    params = init_params(cfg)
    for h, w in [(16, 16), (8, 24)]:
        d = forward(rng.standard_normal((3, 1, h, w)), cfg, params)
        assert d.shape == (h, w)
        assert d.values.min() >= 0


def test_forward_rejects_bad_input(rng):
    cfg = tiny(T=3)
    params = init_params(cfg)
    with pytest.raises(ShapeError):
        forward(rng.standard_normal((4, 1, 16, 16)), cfg, params)
    with pytest.raises(ShapeError):
        forward(rng.standard_normal((3, 1, 18, 16)), cfg, params)


def test_zero_output_weights_give_zero_map(rng):
    cfg = tiny(T=2)
    params = init_params(cfg)
    params["head.out.w"][:] = 0
    assert not forward(rng.standard_normal((2, 1, 8, 8)), cfg, params).values.any()


def test_forward_deterministic(rng):
    cfg = tiny(T=3, seed=5)
    clip = rng.standard_normal((3, 1, 16, 16))
    a = forward(clip, cfg, init_params(cfg)).values
    b = forward(clip, cfg, init_params(cfg)).values
    assert a.tobytes() == b.tobytes()
    assert forward(clip, tiny(T=3, seed=6), init_params(tiny(T=3, seed=6))).values.tobytes() != a.tobytes()


def test_flip_consistency_with_symmetric_kernels(rng):
    cfg = tiny(T=3, dtype="float64")
    params = init_params(cfg)
    for k, v in params.items():
        if k.endswith(".w") and v.ndim == 5:
            params[k] = 0.5 * (v + v[..., ::-1])
    params = {k: v + 0.05 if k.endswith(".b") else v for k, v in params.items()}
    clip = rng.uniform(0, 1, (3, 1, 16, 16))
    gt = rng.uniform(0, 0.1, (16, 16))
    out = forward(clip, cfg, params).values
    out_f = forward(clip[..., ::-1], cfg, params).values
    np.testing.assert_allclose(out_f, out[:, ::-1], rtol=0, atol=1e-12)
    a = prl([out], [gt])[0].total
    b = prl([out_f], [gt[:, ::-1]])[0].total
    assert a == pytest.approx(b, abs=1e-10)


def test_full_model_gradcheck_probe():
    r = checks.run(["model"])["model"]
    assert r.passed and r.n_checked > 0


def test_param_count_tiny_matches_hand_audit():
    cfg = tiny()
    c = count_params(cfg)
    want = TINY_TABLE["backbone"] + 4 * (TINY_TABLE["dsb"] + TINY_TABLE["dtb"] + 2 * TINY_TABLE["attn"]) + TINY_TABLE["head"]
    assert want == 21113
    assert c["total"] == want == total_count(init_params(cfg))
    assert c["per_group"]["backbone"] == TINY_TABLE["backbone"]
    assert c["per_group"]["head"] == TINY_TABLE["head"]
    assert sum(c["per_layer"].values()) == c["total"]


def test_param_count_full():
    c = count_params(ModelConfig.full())
    assert c["per_group"]["backbone"] == 7_635_264
    assert c["total"] == 18_166_081
    assert c["total"] == sum(int(np.prod(s)) for s in param_shapes(ModelConfig.full()).values())
    assert len(c["stages"]) == 12
    for st in c["stages"]:
        assert st["ratio"] < 12 / 27 + 1e-12
        assert st["kernel_ratio"] == 12 / 27


def test_lr_schedule():
    assert lr_at(0) == 1e-4
    assert lr_at(29) == 1e-4
    assert lr_at(30) == 5e-5
    assert lr_at(65) == 2.5e-5
    vals = [lr_at(e) for e in range(300)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    for e in range(30, 300, 30):
        assert lr_at(e) == lr_at(e - 1) / 2
    with pytest.raises(ValueError):
        lr_at(-1)


def test_adam_matches_scalar_oracle():
    p = {"t": np.array([1.0])}
    s = AdamState(lr=1e-4)
    adam_step(p, {"t": np.array([0.5])}, s)
    assert p["t"][0] == pytest.approx(0.999900000002, abs=1e-15)
    assert p["t"][0] == pytest.approx(scalar_adam(1.0, [0.5]), abs=1e-15)
    adam_step(p, {"t": np.array([-0.25])}, s)
    assert p["t"][0] == pytest.approx(0.9998733662987078, abs=1e-15)
    rng = np.random.default_rng(3)
    gs = rng.standard_normal(20)
    p = {"t": np.array([0.3])}
    s = AdamState(lr=1e-3)
    for g in gs:
        adam_step(p, {"t": np.array([g])}, s)
    assert p["t"][0] == pytest.approx(scalar_adam(0.3, gs.tolist(), lr=1e-3), abs=1e-13)


def test_adam_zero_grad_and_nonfinite():
    p = {"a": np.array([1.0, 2.0])}
    s = AdamState()
    adam_step(p, {"a": np.zeros(2)}, s)
    np.testing.assert_array_equal(p["a"], [1, 2])
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"a": np.array([np.nan, 1.0])}, s)
    np.testing.assert_array_equal(p["a"], [1, 2])
    assert s.t == 1
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.zeros(3)}, s)
