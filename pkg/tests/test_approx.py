import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _fd import numeric_grad, rel_error
from selfaug_pbrl.approx import (
    MLP,
    AdamState,
    CheckpointError,
    MLPSpec,
    NonFiniteGradientError,
    ScalarAdam,
    ShapeError,
    _pykernels,
    adam_step,
    backward,
    forward,
    input_gradient,
    kernels,
    load_network,
    save_network,
)
from selfaug_pbrl.approx.mlp import ACTIVATIONS

SPECS = [
    MLPSpec(5, 3, hidden_layers=h, hidden_units=u, activation=act, output_squash=sq)
    for act in ACTIVATIONS
    for sq in (None, "tanh")
    for h, u in ((1, 4), (2, 8))
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.activation}-{s.output_squash}-{s.hidden_layers}x{s.hidden_units}")
def test_param_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(0)
    net = MLP.create(spec, rng)
    x = rng.normal(size=(6, spec.input_dims))
    w = rng.normal(size=(6, spec.output_dims))
    analytic = backward(net.params, spec, x, w)
    numeric = numeric_grad(lambda: float(np.sum(w * forward(net.params, spec, x))), net.params)
    assert rel_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("spec", SPECS[:4], ids=str)
def test_input_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(1)
    net = MLP.create(spec, rng)
    x = rng.normal(size=(3, spec.input_dims))
    w = rng.normal(size=(3, spec.output_dims))
    gx = input_gradient(net.params, spec, x, w)
    (nx,) = numeric_grad(lambda: float(np.sum(w * forward(net.params, spec, x))), [x])
    assert rel_error([gx], [nx]) < 1e-4


def test_output_shape_and_single_vector():
    spec = MLPSpec(4, 2, 2, 8)
    net = MLP.create(spec, np.random.default_rng(0))
    assert net(np.zeros((512, 4))).shape == (512, 2)
    assert net(np.zeros(4)).shape == (1, 2)
    with pytest.raises(ShapeError):
        net(np.zeros((3, 5)))


def test_tanh_squash_bounds():
    spec = MLPSpec(3, 1, 1, 4, output_squash="tanh")
    net = MLP.create(spec, np.random.default_rng(0))
    out = net(np.random.default_rng(1).normal(scale=100, size=(100, 3)))
    assert np.all(np.abs(out) <= 1.0)


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        MLPSpec(3, 1, activation="gelu")
    with pytest.raises(ValueError):
        MLPSpec(0, 1)


def _adam_reference(p, g, m, v, t, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh, vh = m / (1 - b1**t), v / (1 - b2**t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    ref = [x.copy() for x in p]
    ms = [np.zeros_like(x) for x in p]
    vs = [np.zeros_like(x) for x in p]
    state = AdamState.for_params(p, lr=1e-3)
    for t in range(1, 6):
        g = [rng.normal(size=x.shape) for x in p]
        adam_step(p, g, state)
        for i in range(2):
            ref[i], ms[i], vs[i] = _adam_reference(ref[i], g[i], ms[i], vs[i], t)
    for a, b in zip(p, ref):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.array([0.5, -3.0])], AdamState.for_params(p, lr=0.01))
    np.testing.assert_allclose(p[0], [0.99, -1.99], atol=1e-7)


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, 2.0])]
    adam_step(p, [np.zeros(2)], AdamState.for_params(p))
    assert np.array_equal(p[0], [1.0, 2.0])


def test_nonfinite_gradient_names_layer_and_leaves_params():
    p = [np.ones(2), np.ones(3)]
    state = AdamState.for_params(p)
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(p, [np.zeros(2), np.array([0.0, np.nan, 0.0])], state)
    assert info.value.layer_index == 1
    assert state.step == 0 and np.array_equal(p[1], np.ones(3))


def test_scalar_adam_matches_array_adam():
    s = ScalarAdam(0.3, lr=0.01)
    p = [np.array([0.3])]
    st_ = AdamState.for_params(p, lr=0.01)
    for g in (0.5, -1.0, 2.0):
        s.update(g)
        adam_step(p, [np.array([g])], st_)
    assert s.value == pytest.approx(p[0][0], abs=1e-14)


def test_checkpoint_roundtrip(tmp_path):
    spec = MLPSpec(4, 2, 2, 8, "relu", "tanh")
    net = MLP.create(spec, np.random.default_rng(0))
    opt = AdamState.for_params(net.params)
    adam_step(net.params, [np.ones_like(q) for q in net.params], opt)
    path = tmp_path / "a" / "net.ckpt"
    save_network(path, net, opt, {"task": "point_reach"})
    net2, opt2, meta = load_network(path)
    assert net2.spec == spec and meta == {"task": "point_reach"}
    for a, b in zip(net.params + opt.m + opt.v, net2.params + opt2.m + opt2.v):
        assert np.array_equal(a, b)
    assert opt2.step == 1


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_network(bad)


# -- kernel backends --------------------------------------------------------


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31))
def test_compiled_kernels_bit_identical(n, d, seed):
    from selfaug_pbrl.approx import _ckernels

    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    g = rng.normal(size=(n, d))
    assert np.array_equal(_ckernels.leaky_relu(z, 0.01), _pykernels.leaky_relu(z, 0.01))
    assert np.array_equal(_ckernels.leaky_relu_backward(z, g, 0.01), _pykernels.leaky_relu_backward(z, g, 0.01))
    pc, mc, vc = z.copy(), np.zeros_like(z), np.zeros_like(z)
    pp, mp, vp = z.copy(), np.zeros_like(z), np.zeros_like(z)
    for t in (1, 2, 3):
        _ckernels.adam_update(pc, g, mc, vc, 1e-3, 0.9, 0.999, 1e-8, t)
        _pykernels.adam_update(pp, g, mp, vp, 1e-3, 0.9, 0.999, 1e-8, t)
    assert np.array_equal(pc, pp) and np.array_equal(mc, mp) and np.array_equal(vc, vp)
    q = rng.normal(size=(3, d))
    k = int(rng.integers(1, n + 1))
    assert np.array_equal(_ckernels.kth_nearest_distance(q, z, k), _pykernels.kth_nearest_distance(q, z, k))


def test_kth_nearest_against_sorting():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 4))
    q = rng.normal(size=(5, 4))
    brute = np.sort(np.linalg.norm(q[:, None] - pts[None], axis=2), axis=1)[:, 2]
    np.testing.assert_allclose(kernels.kth_nearest_distance(q, pts, 3), brute, rtol=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, SELFAUG_PBRL_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from selfaug_pbrl.approx import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
