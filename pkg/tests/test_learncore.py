import numpy as np
import pytest

from cahsor import learncore as lc


def numeric_grad(f, x, eps=1e-3):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f()
        flat[i] = keep - eps
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return np.linalg.norm(a - b) / denom


def test_affine_identity_forward():
    store = lc.ParamStore()
    layer = lc.Affine(store, "a", 3, 3, np.random.default_rng(0))
    layer.w.value[...] = np.eye(3, dtype=np.float32)
    layer.b.value[...] = 0
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(layer.forward(x), x)


def test_relu_forward():
    out = lc.Relu().forward(np.array([[-1.0, 0.0, 2.0]], dtype=np.float32))
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])


def test_conv_identity_kernel():
    store = lc.ParamStore()
    conv = lc.Conv2d(store, "c", 1, 1, np.random.default_rng(0), kernel=1, stride=1)
    conv.w.value[...] = 1.0
    conv.b.value[...] = 0.0
    x = np.random.default_rng(1).random((2, 5, 5, 1)).astype(np.float32)
    assert np.allclose(conv.forward(x), x)


def test_affine_hand_gradient():
    store = lc.ParamStore()
    layer = lc.Affine(store, "a", 2, 2, np.random.default_rng(0))
    x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    y = layer.forward(x, need_grad=True)
    layer.backward(np.ones_like(y))
    # d(sum of outputs)/dW[i, j] = sum_b x[b, i]
    assert np.array_equal(layer.w.grad, np.array([[4.0, 4.0], [6.0, 6.0]], dtype=np.float32))
    assert np.array_equal(layer.b.grad, np.array([2.0, 2.0], dtype=np.float32))


def test_zero_output_gradient_gives_zero_param_gradients():
    store = lc.ParamStore()
    layer = lc.Affine(store, "a", 3, 4, np.random.default_rng(0))
    x = np.random.default_rng(1).random((5, 3)).astype(np.float32)
    y = layer.forward(x, need_grad=True)
    layer.backward(np.zeros_like(y))
    assert np.all(layer.w.grad == 0)
    assert np.all(layer.b.grad == 0)


def test_backward_before_forward_errors():
    store = lc.ParamStore()
    layer = lc.Affine(store, "a", 2, 2, np.random.default_rng(0))
    with pytest.raises(lc.GraphError):
        layer.backward(np.zeros((1, 2)))


def test_shape_mismatch_names_layer():
    store = lc.ParamStore()
    layer = lc.Affine(store, "speed_fc", 4, 2, np.random.default_rng(0))
    with pytest.raises(lc.GraphError, match="speed_fc"):
        layer.forward(np.zeros((3, 5), dtype=np.float32))


@pytest.mark.parametrize(
    "build,x_shape",
    [
        (lambda s, r: lc.Affine(s, "a", 4, 3, r, dtype=np.float64), (5, 4)),
        (lambda s, r: lc.Relu(), (5, 4)),
        (lambda s, r: lc.Conv2d(s, "c", 2, 3, r, kernel=3, stride=2, dtype=np.float64), (2, 8, 8, 2)),
        (lambda s, r: lc.Conv2d(s, "c", 3, 2, r, kernel=3, stride=1, dtype=np.float64), (2, 6, 6, 3)),
        (lambda s, r: lc.Flatten(), (2, 3, 3, 2)),
        (lambda s, r: lc.BatchStandardize(), (6, 4)),
    ],
    ids=["affine", "relu", "conv_s2", "conv_s1", "flatten", "standardize"],
)
def test_layer_gradients_match_finite_differences(build, x_shape):
    rng = np.random.default_rng(7)
    store = lc.ParamStore()
    layer = build(store, rng)
    x = rng.normal(0.0, 1.0, size=x_shape)
    # weight the output so gradients are non-uniform
    w_out = rng.normal(0.0, 1.0, size=layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * w_out).sum())

    y = layer.forward(x, need_grad=True)
    gx = layer.backward(w_out.astype(y.dtype))
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-4
    for p in layer.params:
        an = p.grad.copy()
        assert rel_err(an, numeric_grad(loss, p.value)) < 1e-4, p.name


def test_barlow_pair_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    r1 = rng.normal(0.0, 1.0, size=(6, 5))
    r2 = rng.normal(0.0, 1.0, size=(6, 5))
    res = lc.barlow_pair(r1, r2, gamma=5e-3, need_grad=True)
    g1 = numeric_grad(lambda: lc.barlow_pair(r1, r2, 5e-3).loss, r1)
    g2 = numeric_grad(lambda: lc.barlow_pair(r1, r2, 5e-3).loss, r2)
    assert rel_err(res.grad1, g1) < 1e-4
    assert rel_err(res.grad2, g2) < 1e-4


def test_adam_zero_gradient_keeps_parameters():
    store = lc.ParamStore()
    layer = lc.Affine(store, "a", 2, 2, np.random.default_rng(0))
    before = layer.w.value.copy()
    store.zero_grad()
    store.adam_step()
    assert np.array_equal(layer.w.value, before)


def test_adam_first_step_magnitude_is_lr():
    store = lc.ParamStore()
    p = store.register(lc.Param("x", np.array([1.0], dtype=np.float32)))
    p.grad[...] = 3.7
    store.adam_step(lr=1e-2)
    assert abs(1.0 - p.value[0]) == pytest.approx(1e-2, rel=1e-4)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        store = lc.ParamStore()
        layer = lc.Affine(store, "a", 3, 3, rng)
        x = rng.normal(size=(4, 3)).astype(np.float32)
        for _ in range(10):
            store.zero_grad()
            y = layer.forward(x, need_grad=True)
            layer.backward(y)  # d/dy of 0.5*sum(y^2)
            store.adam_step()
        return layer.w.value.copy()

    assert np.array_equal(run(), run())


def test_adam_nonfinite_gradient_names_param():
    store = lc.ParamStore()
    p = store.register(lc.Param("heads.roll.w", np.zeros(2, dtype=np.float32)))
    p.grad[...] = np.nan
    with pytest.raises(lc.NonFiniteError, match="heads.roll.w"):
        store.adam_step()


def test_batch_standardize_cases():
    z = lc.batch_standardize(np.array([[1.0], [3.0]], dtype=np.float32))
    assert np.allclose(z, [[-1.0], [1.0]], atol=1e-4)
    z2 = lc.batch_standardize(np.full((4, 3), 2.5, dtype=np.float32))
    assert np.array_equal(z2, np.zeros((4, 3), dtype=np.float32))


def test_correlation_diagonal_after_standardize():
    rng = np.random.default_rng(11)
    x = rng.normal(2.0, 3.0, size=(8, 4))
    z = lc.batch_standardize(x)
    c = lc.cross_correlation(z, z)
    assert np.allclose(np.diag(c), 1.0, atol=1e-6)


def test_cross_correlation_hand_case():
    rho1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    rho2 = np.array([[1.0, 1.0], [-1.0, -1.0]])
    c = lc.cross_correlation(rho1, rho2)
    assert np.allclose(c, [[1.0, 1.0], [-1.0, -1.0]], atol=1e-9)


def test_cross_correlation_column_permutation():
    rng = np.random.default_rng(2)
    r1 = rng.normal(size=(6, 4))
    r2 = rng.normal(size=(6, 4))
    perm = [2, 0, 3, 1]
    c = lc.cross_correlation(r1, r2)
    cp = lc.cross_correlation(r1, r2[:, perm])
    assert np.allclose(cp, c[:, perm], atol=1e-12)


def test_cross_correlation_zero_column_guarded():
    r1 = np.zeros((4, 2))
    r2 = np.ones((4, 2))
    c = lc.cross_correlation(r1, r2)
    assert np.all(np.isfinite(c))
    assert np.allclose(c[0], 0.0)


def test_barlow_identity_is_zero():
    assert lc.barlow_loss(np.eye(7), gamma=5e-3) == 0.0


def test_barlow_hand_value():
    c = np.array([[1.0, 1.0], [-1.0, -1.0]])
    assert lc.barlow_loss(c, gamma=5e-3) == pytest.approx(4.01, abs=1e-9)


def test_barlow_transpose_symmetry():
    rng = np.random.default_rng(4)
    c = rng.normal(size=(6, 6))
    assert lc.barlow_loss(c, 5e-3) == lc.barlow_loss(c.T.copy(), 5e-3)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    arrays = {
        "enc.w": rng.normal(size=(3, 3, 2, 4)).astype(np.float32),
        "enc.b": rng.normal(size=4).astype(np.float32),
        "head.w": rng.normal(size=(8, 1)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    lc.save_checkpoint(path, arrays, meta={"dims": [8, 4]})
    loaded, meta = lc.load_checkpoint(path)
    assert meta == {"dims": [8, 4]}
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k]), k


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(lc.GraphError):
        lc.load_checkpoint(path)


def test_concat_round_trip():
    a = np.ones((3, 2), dtype=np.float32)
    b = np.full((3, 4), 2.0, dtype=np.float32)
    y, widths = lc.concat_forward([a, b])
    assert y.shape == (3, 6)
    ga, gb = lc.concat_backward(y, widths)
    assert np.array_equal(ga, a)
    assert np.array_equal(gb, b)
