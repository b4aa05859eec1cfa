"""Network substrate: conv oracle equivalence, shapes, gradients, freezing."""

import numpy as np
import pytest

from latentvox import net
from latentvox.errors import ConfigError, ShapeMismatchError


def conv3d_reference(x, w, b, stride, padding="same"):
    """Direct 7-loop convolution; the oracle the fast path must match."""
    n, d, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[4]
    if padding == "same":
        do, ho, wo = (-(-d // stride), -(-h // stride), -(-wd // stride))
        pads = [max((o - 1) * stride + k - i, 0)
                for o, i in ((do, d), (ho, h), (wo, wd))]
        x = np.pad(x, ((0, 0), (pads[0] // 2, pads[0] - pads[0] // 2),
                       (pads[1] // 2, pads[1] - pads[1] // 2),
                       (pads[2] // 2, pads[2] - pads[2] // 2), (0, 0)))
    else:
        do, ho, wo = ((d - k) // stride + 1, (h - k) // stride + 1,
                      (wd - k) // stride + 1)
    y = np.zeros((n, do, ho, wo, cout), dtype=x.dtype)
    for bi in range(n):
        for zi in range(do):
            for yi in range(ho):
                for xi in range(wo):
                    patch = x[bi, zi * stride:zi * stride + k,
                              yi * stride:yi * stride + k,
                              xi * stride:xi * stride + k, :]
                    for co in range(cout):
                        y[bi, zi, yi, xi, co] = np.sum(patch * w[..., co])
    if b is not None:
        y = y + b
    return y


@pytest.mark.parametrize("cin,cout,stride,side", [
    (2, 5, 1, 6),   # cin < cout -> im2col path
    (2, 5, 2, 7),
    (5, 2, 1, 6),   # cin >= cout -> shift-gemm path
    (5, 2, 2, 5),
    (3, 3, 2, 8),
])
def test_conv_forward_matches_reference(rng, cin, cout, stride, side):
    spec = net.conv3d(cin, cout, kernel=3, stride=stride)
    p = net.init_layer_params(spec, rng, dtype=np.float64)
    x = rng.standard_normal((2, side, side, side, cin))
    y, _ = net.layer_forward(spec, p, x, train=False, frozen=False)
    y_ref = conv3d_reference(x, p["w"], p["b"], stride)
    np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-12)


def test_conv_no_bias(rng):
    spec = net.conv3d(3, 4, kernel=3, stride=1, has_bias=False)
    p = net.init_layer_params(spec, rng, dtype=np.float64)
    assert "b" not in p
    x = rng.standard_normal((1, 5, 5, 5, 3))
    y, _ = net.layer_forward(spec, p, x, train=False, frozen=False)
    np.testing.assert_allclose(y, conv3d_reference(x, p["w"], None, 1),
                               rtol=1e-12, atol=1e-12)


def scalar_loss_and_grads(spec, p, x, probe, train=True):
    """loss = sum(y * probe); returns (loss, dparams, dx)."""
    y, cache = net.layer_forward(spec, p, x, train=train, frozen=False)
    loss = float(np.sum(y * probe))
    dparams, dx = net.layer_backward(spec, p, cache, probe)
    return loss, dparams, dx


def central_fd(f, arr, h=1e-5):
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def _layer_instance(kind, rng):
    if kind == "Conv3D":
        spec = net.conv3d(2, 3, kernel=3, stride=int(rng.integers(1, 3)))
        x = rng.standard_normal((2, 5, 5, 5, 2))
    elif kind == "FullyConnected":
        spec = net.fully_connected(7, 4)
        x = rng.standard_normal((3, 7))
    elif kind == "LeakyReLU":
        spec = net.leaky_relu(0.1)
        x = rng.standard_normal((3, 6))
        x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep clear of the kink
    elif kind == "BatchNorm":
        spec = net.batch_norm(3)
        x = rng.standard_normal((4, 3, 3, 3, 3))
    elif kind == "Sigmoid":
        spec = net.sigmoid()
        x = rng.standard_normal((3, 6))
    elif kind == "Flatten":
        spec = net.flatten()
        x = rng.standard_normal((2, 3, 3, 3, 2))
    else:
        spec = net.upsample3d(2)
        x = rng.standard_normal((2, 3, 3, 3, 2))
    p = net.init_layer_params(spec, rng, dtype=np.float64)
    for key in p:
        if key in ("gamma", "running_var"):
            p[key] = rng.uniform(0.5, 1.5, p[key].shape)
        else:
            p[key] = rng.standard_normal(p[key].shape) * 0.3
    return spec, p, x


@pytest.mark.parametrize("kind", net.KINDS)
def test_layer_gradients_finite_difference(kind, rng):
    spec, p, x = _layer_instance(kind, rng)
    y, cache = net.layer_forward(spec, p, x, train=True, frozen=False)
    probe = rng.standard_normal(y.shape)
    loss0, dparams, dx = scalar_loss_and_grads(spec, p, x, probe)

    def f():
        yy, _ = net.layer_forward(spec, p, x, train=True, frozen=False)
        return float(np.sum(yy * probe))

    for key in net.TRAINABLE_KEYS.get(kind, ()):
        if key not in p:
            continue
        fd = central_fd(f, p[key])
        assert rel_err(dparams[key], fd) < 1e-6, f"{kind}.{key}"
    fd_x = central_fd(f, x)
    assert rel_err(dx, fd_x) < 1e-6, f"{kind}.input"


def test_shape_inference_and_validation(rng):
    layers = [net.conv3d(4, 8, stride=2), net.leaky_relu(), net.batch_norm(8),
              net.flatten(), net.fully_connected(8 * 4 ** 3, 10)]
    shapes = net.infer_shapes(layers, (8, 8, 8, 4))
    assert shapes[0] == ((8, 8, 8, 4), (4, 4, 4, 8))
    assert shapes[-1] == ((8 * 4 ** 3,), (10,))
    model = net.init_network(layers, rng)
    with pytest.raises(ShapeMismatchError):
        net.forward(model, np.zeros((1, 8, 8, 8, 3), dtype=np.float32))


def test_same_padding_ceil_mode():
    # 7 wide, stride 2 -> ceil(7/2) = 4 outputs
    spec = net.conv3d(1, 1, kernel=3, stride=2)
    assert net.layer_out_shape(spec, (7, 7, 7, 1)) == (4, 4, 4, 1)


def test_upsample_then_conv_roundtrip_shapes():
    layers = [net.upsample3d(2), net.conv3d(4, 2, stride=1)]
    shapes = net.infer_shapes(layers, (3, 3, 3, 4))
    assert shapes[-1][1] == (6, 6, 6, 2)


def test_network_digest_tracks_params(rng):
    layers = [net.conv3d(2, 3), net.batch_norm(3)]
    m = net.init_network(layers, rng)
    d0 = m.digest()
    assert m.copy().digest() == d0
    m.params[0]["w"][0, 0, 0, 0, 0] += 1.0
    assert m.digest() != d0


def test_frozen_layers_receive_no_updates(rng):
    layers = [net.conv3d(2, 3), net.leaky_relu(), net.batch_norm(3)]
    m = net.init_network(layers, rng)
    net.set_frozen(m, [0], True)
    before = {k: v.copy() for k, v in m.params[0].items()}
    x = rng.standard_normal((2, 4, 4, 4, 2)).astype(np.float32)
    y, caches = net.forward(m, x, train=True)
    grads, _ = net.backward(m, caches, np.ones_like(y))
    assert grads[0] is None  # frozen layer produces no gradient entry
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[0][k], v)


def test_frozen_batchnorm_keeps_running_stats(rng):
    layers = [net.batch_norm(3)]
    m = net.init_network(layers, rng)
    m.params[0]["running_mean"][:] = 0.25
    m.params[0]["running_var"][:] = 2.0
    net.set_frozen(m, [0], True)
    x = rng.standard_normal((8, 3)).astype(np.float32) * 3 + 1
    y, _ = net.forward(m, x, train=True)
    np.testing.assert_array_equal(m.params[0]["running_mean"], 0.25)
    np.testing.assert_array_equal(m.params[0]["running_var"], 2.0)
    # inference-mode normalization was used
    expected = (x - 0.25) / np.sqrt(2.0 + 1e-5)
    np.testing.assert_allclose(y, expected, rtol=1e-5, atol=1e-6)


def test_unknown_layer_kind_rejected():
    with pytest.raises(ConfigError):
        net.LayerSpec("Conv9D")


def test_mark_retrained_only_touches_unfrozen_reference_layers(rng):
    layers = [net.conv3d(1, 2), net.conv3d(2, 2), net.conv3d(2, 2)]
    m = net.init_network(layers, rng)
    m.provenance = [net.PROV_FRESH, net.PROV_REFERENCE, net.PROV_REFERENCE]
    net.set_frozen(m, [2], True)
    net.mark_retrained(m)
    assert m.provenance == [net.PROV_FRESH, net.PROV_RETRAINED, net.PROV_REFERENCE]
