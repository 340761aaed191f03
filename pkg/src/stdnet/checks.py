"""Named gradient checks for every backward pass (double precision, central differences).

Used by the ``gradcheck`` CLI command and the test suite.
"""
from __future__ import annotations

import numpy as np

from . import attention as att
from . import blocks
from . import model as M
from .blocks import BlockConfig
from .conv import conv_backward_raw, conv_forward
from .losses import PRLConfig, pixelwise_l2, prl
from .tensor import GradCheckReport, gradcheck

EPS = 1e-5
TOL = 1e-4


def check_arrays(loss_and_grads, arrays: dict, eps=EPS, tol=TOL, max_coords=None, rng=None):
    """Gradcheck a scalar function of several named arrays, one array at a time.

    ``loss_and_grads(arrays) -> (value, {name: grad})``.  With ``max_coords``
    only that many randomly chosen coordinates per array are probed.
    """
    _, grads = loss_and_grads(arrays)
    worst = GradCheckReport(0.0, True, 0)
    for name in arrays:
        base = arrays[name]

        def f(v, name=name):
            trial = dict(arrays)
            trial[name] = v
            return loss_and_grads(trial)[0]

        idx = None
        if max_coords is not None and base.size > max_coords:
            flat = rng.choice(base.size, max_coords, replace=False)
            idx = [np.unravel_index(i, base.shape) for i in flat]
        r = gradcheck(f, base, analytic=grads[name], eps=eps, tol=tol, indices=idx)
        if r.max_rel_err >= worst.max_rel_err:
            worst = GradCheckReport(r.max_rel_err, True, worst.n_checked, (name, r.worst_index))
        worst.n_checked += r.n_checked
    worst.passed = worst.max_rel_err < tol
    return worst


def _conv_case(kind, seed):
    rng = np.random.default_rng(seed)
    kshape = {"3d": (3, 3, 3), "2d": (1, 3, 3), "1d": (3, 1, 1)}[kind]
    r = 2
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((3, 2, *kshape))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((3, 4, 5, 5))

    def fn(a):
        y = conv_forward(a["x"], a["w"], a["b"], r)
        gx, gw, gb = conv_backward_raw(a["x"], a["w"], proj, r)
        return float((y * proj).sum()), {"x": gx, "w": gw, "b": gb}

    return check_arrays(fn, {"x": x, "w": w, "b": b})


def _small_block(in_c=2):
    return BlockConfig(in_channels=in_c, bottleneck_channels=2, growth_channels=2,
                       dilation_rates=(1, 2), fuse_to=3)


def _randomize_biases(params, rng):
    # zero biases put dead units exactly on the ReLU kink; move off it
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(0.05, 0.2, params[k].shape)
    return params


def _block_case(kind, seed):
    rng = np.random.default_rng(seed)
    cfg = _small_block()
    params = _randomize_biases(blocks.init_block(cfg, kind, "blk", rng), rng)
    x = rng.standard_normal((2, 3, 6, 6))
    proj = rng.standard_normal((cfg.fuse_to, 3, 6, 6))

    def fn(a):
        p = {k: a[k] for k in params}
        y, cache = blocks.block_forward(a["x"], cfg, p, kind, "blk")
        gx, g = blocks.block_backward(proj, cfg, p, "blk", cache)
        return float((y * proj).sum()), {"x": gx, **g}

    return check_arrays(fn, {"x": x, **params})


def _dstb_case(seed):
    rng = np.random.default_rng(seed)
    s = _small_block(2)
    t = BlockConfig(in_channels=3, bottleneck_channels=2, growth_channels=2, dilation_rates=(1, 2), fuse_to=2)
    params = _randomize_biases(blocks.init_dstb(s, t, "d", rng, reduction=2), rng)
    x = rng.standard_normal((2, 2, 6, 6))
    proj = rng.standard_normal((2, 2, 6, 6))

    def fn(a):
        p = {k: a[k] for k in params}
        y, cache = blocks.dstb_forward(a["x"], s, t, p, "d", return_cache=True)
        gx, g = blocks.dstb_backward(proj, s, t, p, cache, "d")
        return float((y * proj).sum()), {"x": gx, **g}

    return check_arrays(fn, {"x": x, **params})


def _attention_case(seed):
    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, True, 0)
    for mode, shape in (("temporal", (4, 3, 5, 5)), ("spatial", (4, 3, 5, 5)), ("spatial", (4, 5, 5))):
        p = att.init_attention(4, 2, rng)
        x = rng.standard_normal(shape) + 0.5
        proj = rng.standard_normal(shape)

        def fn(a, mode=mode, proj=proj):
            ap = att.AttentionParams(a["w1"], a["w2"])
            if mode == "spatial" and a["x"].ndim == 3:
                alpha, cache = att.attention_gate(att.gap_spatial(a["x"]), ap, cache=True)
                y = att.channel_scale(a["x"], alpha)
                gx, galpha = att.channel_scale_backward(proj, a["x"], alpha)
                ga, gw1, gw2 = att.attention_gate_backward(galpha, ap, cache)
                gx = gx + att.gap_backward(ga, a["x"].shape)
            else:
                y, _, cache = att.attention_forward(a["x"], ap, mode)
                gx, gw1, gw2 = att.attention_backward(proj, ap, cache)
            return float((y * proj).sum()), {"x": gx, "w1": gw1, "w2": gw2}

        r = check_arrays(fn, {"x": x, "w1": p.w1, "w2": p.w2})
        if r.max_rel_err >= worst.max_rel_err:
            worst = r
    return worst


def _l2_case(seed):
    rng = np.random.default_rng(seed)
    gt = [rng.random((6, 7)), rng.random((6, 7))]

    def fn(a):
        rep, g = pixelwise_l2([a["p0"], a["p1"]], gt)
        return rep.total, {"p0": g[0], "p1": g[1]}

    return check_arrays(fn, {"p0": rng.random((6, 7)), "p1": rng.random((6, 7))})


def _prl_case(seed):
    rng = np.random.default_rng(seed)
    gt = [rng.random((8, 8)), rng.random((8, 8))]
    cfg = PRLConfig()

    def fn(a):
        rep, g = prl([a["p0"], a["p1"]], gt, cfg)
        return rep.total, {"p0": g[0], "p1": g[1]}

    return check_arrays(fn, {"p0": rng.random((8, 8)), "p1": rng.random((8, 8))})


def _prl_conv_stack_case(seed):
    """PRL of conv(3x3) -> ReLU -> conv(3x3) on a 1x1x8x8 input."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 8, 8))
    gt = rng.random((8, 8))
    arrays = {"w1": rng.standard_normal((2, 1, 1, 3, 3)), "b1": rng.uniform(0.05, 0.2, 2),
              "w2": rng.standard_normal((1, 2, 1, 3, 3)) * 0.5, "b2": rng.uniform(0.05, 0.2, 1)}

    def fn(a):
        h, c1 = conv_forward(x, a["w1"], a["b1"], return_cols=True)
        hr = np.maximum(h, 0)
        y, c2 = conv_forward(hr, a["w2"], a["b2"], return_cols=True)
        rep, (g,) = prl([y[0, 0]], [gt])
        g = g[None, None]
        ghr, gw2, gb2 = conv_backward_raw(hr, a["w2"], g, cols=c2)
        _, gw1, gb1 = conv_backward_raw(x, a["w1"], ghr * (h > 0), cols=c1)
        return rep.total, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}

    return check_arrays(fn, arrays)


def model_probe(seed=0, n_probe=6, loss="prl"):
    """Tiny end-to-end model (input clip -> PRL scalar) on a seeded probe of ``n_probe`` weights."""
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig.tiny(T=3, dtype="float64", seed=seed)
    params = _randomize_biases(M.init_params(cfg), rng)
    clip = rng.random((3, 1, 16, 16))
    gt = rng.random((16, 16)) * 0.05
    out, cache = M.forward(clip, cfg, params, return_cache=True)
    _, (g,) = (prl if loss == "prl" else pixelwise_l2)([out], [gt])
    grads = M.backward(g, cfg, params, cache)
    names = list(params)
    probe = []
    for _ in range(n_probe):
        name = names[rng.integers(len(names))]
        probe.append((name, tuple(int(rng.integers(s)) for s in params[name].shape)))
    vec = np.array([params[n][i] for n, i in probe])
    ana = np.array([grads[n][i] for n, i in probe])

    def f(v):
        p = dict(params)
        for (n, i), val in zip(probe, v):
            if p[n] is params[n]:
                p[n] = params[n].copy()
            p[n][i] = val
        out = M.forward(clip, cfg, p).values
        return (prl if loss == "prl" else pixelwise_l2)([out], [gt])[0].total

    return gradcheck(f, vec, analytic=ana, eps=EPS, tol=TOL)


CHECKS = {
    "conv3d": lambda: _conv_case("3d", 1),
    "conv2d": lambda: _conv_case("2d", 2),
    "conv1d": lambda: _conv_case("1d", 3),
    "dsb": lambda: _block_case("dsb", 4),
    "dtb": lambda: _block_case("dtb", 5),
    "dstb": lambda: _dstb_case(6),
    "attention": lambda: _attention_case(7),
    "pixelwise_l2": lambda: _l2_case(8),
    "prl": lambda: _prl_case(9),
    "prl_conv_stack": lambda: _prl_conv_stack_case(10),
    "model": lambda: model_probe(11),
}


def run(names=None):
    names = list(CHECKS) if names is None else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s) {unknown}; available: {sorted(CHECKS)}")
    return {n: CHECKS[n]() for n in names}
