import numpy as np
import pytest

from nenni.approx import fit_approx
from nenni.masking import InjectionConfig
from nenni.network import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    ReLU,
    RseConfig,
    SeedStream,
    conv2d_direct,
    forward,
    input_grad,
    loss_and_grads,
    predict,
)
from nenni.projection import sample_projection


def tiny_conv_model(seed=0, in_size=6, channels=(2, 3), n_classes=2):
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [
        Conv2D(rng.normal(0, 0.5, (c1, 1, 3, 3)), rng.normal(0, 0.1, c1), layer_id="conv0"),
        ReLU(),
        Conv2D(rng.normal(0, 0.5, (c2, c1, 3, 3)), rng.normal(0, 0.1, c2), layer_id="conv1"),
        ReLU(),
        Flatten(),
    ]
    side = in_size - 4
    layers.append(
        Dense(rng.normal(0, 0.5, (n_classes, c2 * side * side)), rng.normal(0, 0.1, n_classes),
              layer_id="dense0")
    )
    return Model(layers=layers, input_shape=(1, in_size, in_size), n_classes=n_classes)


def attach_approx(model, calib, k_frac=0.5, target=("conv0", "conv1")):
    from nenni.harness import distill_layer_columns  # shared calibration helper

    for lid in target:
        layer = model.get_layer(lid)
        cols, targets_unused = distill_layer_columns(model, calib, lid, max_cols=2000, seed=1)
        if isinstance(layer, Conv2D):
            d = int(np.prod(layer.kernel.shape[1:]))
            W = layer.kernel.reshape(layer.kernel.shape[0], -1)
        else:
            d = layer.W.shape[1]
            W = layer.W
        k = max(1, int(round(d * k_frac)))
        proj = sample_projection(k, d, 3, seed=7)
        params, _ = fit_approx(W, layer.b, cols, proj, layer_id=lid)
        layer.approx = params
    return model


# ---------------------------------------------------------------------------
# plain forward semantics


def test_identity_network_returns_input():
    model = Model([Dense(np.eye(4), np.zeros(4), layer_id="d")], (4,), 4)
    x = np.array([0.3, -1.2, 5.0, 0.0])
    assert np.array_equal(forward(model, x), x)


def test_all_ones_conv_sums_window():
    model = Model(
        [Conv2D(np.ones((1, 1, 3, 3)), np.zeros(1), layer_id="c"), Flatten(),
         Dense(np.eye(16), np.zeros(16), layer_id="d")],
        (1, 6, 6),
        16,
    )
    out = forward(model, np.ones((1, 6, 6)))
    assert np.allclose(out, 9.0)


def test_im2col_matches_direct_convolution_oracle():
    rng = np.random.default_rng(3)
    for stride, padding in [(1, 0), (1, 1), (2, 0), (2, 1)]:
        kernel = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        x = rng.normal(size=(4, 2, 7, 7))
        h = (7 + 2 * padding - 3) // stride + 1
        conv = Conv2D(kernel, bias, stride=stride, padding=padding, layer_id="c")
        n_out = 3 * h * h
        model = Model(
            [conv, Flatten(), Dense(np.eye(n_out), np.zeros(n_out), layer_id="d")],
            (2, 7, 7),
            n_out,
        )
        got = forward(model, x).reshape(4, 3, h, h)
        want = conv2d_direct(x, kernel, bias, stride, padding)
        assert np.allclose(got, want, atol=1e-10)


def test_shape_chain_validation():
    with pytest.raises(ValueError, match="expected input"):
        Model([Dense(np.eye(3), np.zeros(3), layer_id="d")], (4,), 3)
    with pytest.raises(ValueError, match="at least one layer"):
        Model([], (4,), 4)
    model = tiny_conv_model()
    with pytest.raises(ValueError, match="does not match model"):
        forward(model, np.ones((1, 5, 5)))


def test_unknown_layer_id_in_config_rejected():
    model = tiny_conv_model()
    cfg = InjectionConfig.ratio(0.5, target_layers={"nope"})
    with pytest.raises(ValueError, match="unknown layer ids"):
        forward(model, np.zeros((1, 6, 6)), cfg)
    cfg2 = InjectionConfig.ratio(0.5, target_layers={"conv0"})
    with pytest.raises(ValueError, match="no approximation parameters"):
        forward(model, np.zeros((1, 6, 6)), cfg2)


# ---------------------------------------------------------------------------
# injection semantics


def _calib_batch(rng, n=24, size=6):
    return rng.random((n, 1, size, size))


def test_ratio_zero_is_bit_identical_to_none():
    rng = np.random.default_rng(5)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((8, 1, 6, 6))
    plain = forward(model, x)
    cfg = InjectionConfig.ratio(0.0, target_layers={"conv0", "conv1"})
    injected = forward(model, x, cfg)
    assert np.array_equal(plain, injected)


def test_full_injection_uses_approximation_everywhere():
    rng = np.random.default_rng(6)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((2, 1, 6, 6))
    cfg = InjectionConfig.ratio(1.0, target_layers={"conv0"})
    _, trace = forward(model, x, cfg, trace=True)
    t0 = trace.layers[0]
    assert t0.mask.sum() == 0
    assert np.array_equal(t0.z_out.reshape(2, -1), t0.z_tilde.reshape(2, -1))


def test_skip_strategy_equivalent_to_full_compute():
    rng = np.random.default_rng(7)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((4, 1, 6, 6))
    for mode in [("ratio", 0.6), ("structured", 1, 3)]:
        cfg = InjectionConfig(mode=mode, target_layers=frozenset({"conv0", "conv1"}))
        full = forward(model, x, cfg)
        skipped = forward(model, x, cfg, skip_nonessential=True)
        assert np.allclose(full, skipped, rtol=1e-12, atol=1e-12)


def test_skip_equivalence_dense_layer():
    rng = np.random.default_rng(8)
    d, n = 10, 8
    W = rng.normal(size=(n, d))
    b = rng.normal(size=n)
    model = Model([Dense(W, b, layer_id="d0")], (d,), n)
    calib = rng.normal(size=(40, d))
    proj = sample_projection(5, d, 3, seed=2)
    params, _ = fit_approx(W, b, calib, proj, layer_id="d0")
    model.layers[0].approx = params
    cfg = InjectionConfig.ratio(0.5, target_layers={"d0"})
    x = rng.normal(size=(6, d))
    assert np.allclose(
        forward(model, x, cfg), forward(model, x, cfg, skip_nonessential=True),
        rtol=1e-12, atol=1e-12,
    )


def test_forward_deterministic_in_fixed_mode():
    rng = np.random.default_rng(9)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((3, 1, 6, 6))
    cfg = InjectionConfig.ratio(0.9, target_layers={"conv0", "conv1"})
    assert np.array_equal(forward(model, x, cfg), forward(model, x, cfg))


def test_per_forward_resampling_needs_stream_and_is_reproducible():
    rng = np.random.default_rng(10)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((3, 1, 6, 6))
    cfg = InjectionConfig.ratio(0.9, target_layers={"conv0", "conv1"}, resample="per_forward")
    with pytest.raises(ValueError, match="SeedStream"):
        forward(model, x, cfg)
    a = forward(model, x, cfg, stream=SeedStream(1, "t"))
    b = forward(model, x, cfg, stream=SeedStream(1, "t"))
    c = forward(model, x, cfg, stream=SeedStream(2, "t"))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # successive queries on one stream differ
    stream = SeedStream(1, "t")
    q1 = forward(model, x, cfg, stream=stream)
    q2 = forward(model, x, cfg, stream=stream)
    assert not np.array_equal(q1, q2)


def test_trace_records_injection_internals():
    rng = np.random.default_rng(11)
    model = attach_approx(tiny_conv_model(), _calib_batch(rng))
    x = rng.random((2, 1, 6, 6))
    cfg = InjectionConfig.ratio(0.5, target_layers={"conv0"})
    _, trace = forward(model, x, cfg, trace=True)
    assert len(trace.layers) == len(model.layers)
    t0 = trace.layers[0]
    assert t0.z is not None and t0.z_tilde is not None and t0.mask is not None
    n_total = t0.mask[0].size
    assert int(t0.mask[0].sum()) == n_total - int(round(0.5 * n_total))
    # untargeted conv has no mask
    assert trace.layers[2].mask is None


# ---------------------------------------------------------------------------
# gradients


def test_binary_logistic_analytic_gradient():
    rng = np.random.default_rng(12)
    d = 7
    w = rng.normal(size=d)
    model = Model([Dense(np.stack([w, np.zeros(d)]), np.zeros(2), layer_id="d")], (d,), 2)
    x = rng.normal(size=d)
    # label 0 makes the loss log(1 + exp(-w.x)): gradient (sigma(w.x) - 1) w
    g = input_grad(model, x, 0)
    sig = 1.0 / (1.0 + np.exp(-w @ x))
    assert np.allclose(g, (sig - 1.0) * w, atol=1e-12)


def test_gradient_zero_at_flat_minimum():
    d = 5
    W = np.vstack([np.ones(d), np.ones(d)])  # identical rows: loss constant in x
    model = Model([Dense(W, np.zeros(2), layer_id="d")], (d,), 2)
    g = input_grad(model, np.random.default_rng(0).normal(size=d), 0)
    assert np.max(np.abs(g)) < 1e-8


def finite_diff_input(model, x, y, h=1e-3):
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        lp, _, _ = loss_and_grads(model, x, y, reduction="sum")
        xf[i] = old - h
        lm, _, _ = loss_and_grads(model, x, y, reduction="sum")
        xf[i] = old
        flat[i] = (lp - lm) / (2 * h)
    return g


def finite_diff_params(model, x, y, h=1e-3):
    out = []
    for layer in model.layers:
        if not isinstance(layer, (Dense, Conv2D)):
            out.append(None)
            continue
        wname = "W" if isinstance(layer, Dense) else "kernel"
        grads = {}
        for name in (wname, "b"):
            arr = getattr(layer, name)
            g = np.zeros_like(arr)
            flat_arr = arr.reshape(-1)
            flat_g = g.reshape(-1)
            for i in range(flat_arr.size):
                old = flat_arr[i]
                flat_arr[i] = old + h
                lp, _, _ = loss_and_grads(model, x, y, reduction="sum")
                flat_arr[i] = old - h
                lm, _, _ = loss_and_grads(model, x, y, reduction="sum")
                flat_arr[i] = old
                flat_g[i] = (lp - lm) / (2 * h)
            grads["W" if name == wname else "b"] = g
        out.append(grads)
    return out


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


def test_gradients_match_finite_differences():
    model = tiny_conv_model(seed=20)
    rng = np.random.default_rng(21)
    x = rng.random((1, 6, 6))
    y = 1
    _, dx, grads = loss_and_grads(model, x, y, reduction="sum")
    fd = finite_diff_input(model, x.copy(), y)
    assert rel_err(dx, fd) < 1e-4
    fd_params = finite_diff_params(model, x, y)
    for g, f in zip(grads, fd_params):
        if g is None:
            continue
        assert rel_err(g["W"], f["W"]) < 1e-4
        assert rel_err(g["b"], f["b"]) < 1e-4


def test_injected_gradient_flows_only_through_essential_path():
    rng = np.random.default_rng(22)
    d, n = 6, 4
    W = rng.normal(size=(n, d))
    b = rng.normal(size=n)
    model = Model([Dense(W, b, layer_id="d0"),
                   Dense(rng.normal(size=(2, n)), np.zeros(2), layer_id="d1")], (d,), 2)
    calib = rng.normal(size=(30, d))
    proj = sample_projection(3, d, 3, seed=3)
    model.layers[0].approx, _ = fit_approx(W, b, calib, proj, layer_id="d0")
    cfg = InjectionConfig.ratio(0.5, target_layers={"d0"})
    x = rng.normal(size=d)
    _, trace = forward(model, x, cfg, trace=True)
    mask = trace.layers[0].mask[0]
    g = input_grad(model, x, 0, cfg)
    # oracle: gradient of the fixed-mask linear composition (z_tilde constant)
    logits = forward(model, x, cfg)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    dlogits = p.copy()
    dlogits[0] -= 1
    d_hidden = model.layers[1].W.T @ dlogits
    expected = W.T @ (d_hidden * mask)
    assert np.allclose(g, expected, atol=1e-10)


def test_rse_noise_paths():
    model = tiny_conv_model(seed=23)
    rng = np.random.default_rng(24)
    x = rng.random((2, 1, 6, 6))
    plain = forward(model, x)
    silent = forward(model, x, RseConfig(sigma=0.0))
    assert np.array_equal(plain, silent)
    noisy1 = forward(model, x, RseConfig(sigma=0.5), stream=SeedStream(3, "rse"))
    noisy2 = forward(model, x, RseConfig(sigma=0.5), stream=SeedStream(3, "rse"))
    assert np.array_equal(noisy1, noisy2)
    stream = SeedStream(3, "rse")
    a = forward(model, x, RseConfig(sigma=0.5), stream=stream)
    b = forward(model, x, RseConfig(sigma=0.5), stream=stream)
    assert not np.array_equal(a, b)


def test_predict_shapes():
    model = tiny_conv_model(seed=25)
    rng = np.random.default_rng(25)
    assert predict(model, rng.random((5, 1, 6, 6))).shape == (5,)
    assert predict(model, rng.random((1, 6, 6))).shape == (1,)
