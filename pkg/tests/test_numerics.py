import numpy as np
import pytest

from sleepseq import numerics as nm


def _rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_scalar_square_gradient():
    x = nm.parameter(np.array(3.0))
    y = nm.mul(x, x)
    y.backward()
    assert float(y.data) == 9.0
    assert float(x.grad) == pytest.approx(6.0)


def test_softmax_symmetry():
    s = nm.softmax(nm.constant(np.zeros((1, 3))), axis=1)
    assert np.allclose(s.data, 1.0 / 3.0)


def test_matmul_identity():
    x = _rand((4, 4), 1)
    out = nm.matmul(nm.constant(x), nm.constant(np.eye(4)))
    assert np.allclose(out.data, x)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(nm.ShapeMismatch) as err:
        nm.matmul(nm.constant(np.zeros((2, 3))), nm.constant(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_cross_entropy_perfect_prediction():
    onehot = np.eye(5)[[0, 2, 4]]
    logits = nm.constant(onehot * 50.0)  # saturated softmax
    loss = nm.cross_entropy_with_logits(logits, onehot)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_backward_requires_forward_graph():
    leaf = nm.constant(np.array(1.0))
    with pytest.raises(nm.GraphNotEvaluated):
        leaf.backward()
    with nm.no_grad():
        out = nm.mul(nm.parameter(np.array(2.0)), 3.0)
    with pytest.raises(nm.GraphNotEvaluated):
        out.backward()


def test_finite_trap():
    nm.set_finite_trap(True)
    big = nm.constant(np.array([1e308]))
    with np.errstate(over="ignore"):
        with pytest.raises(nm.NonFiniteValue):
            nm.mul(big, big)


def test_frozen_parameter_gets_no_gradient():
    w = nm.parameter(_rand((3, 3), 2))
    frozen = nm.Tensor(_rand((3, 3), 3), requires_grad=False)
    x = nm.constant(_rand((2, 3), 4))
    out = nm.reduce_sum(nm.matmul(nm.matmul(x, frozen), w))
    out.backward()
    assert frozen.grad is None
    assert w.grad is not None and np.any(w.grad != 0)


def test_gradient_flows_through_frozen_intermediate():
    # freezing a downstream weight must not block gradients to upstream ones
    upstream = nm.parameter(_rand((3, 3), 5))
    frozen = nm.Tensor(_rand((3, 3), 6), requires_grad=False)
    x = nm.constant(_rand((2, 3), 7))
    out = nm.reduce_sum(nm.matmul(nm.matmul(x, upstream), frozen))
    out.backward()
    assert upstream.grad is not None and np.any(upstream.grad != 0)


def test_dropout_modes():
    x = nm.parameter(np.ones((4, 4)))
    assert nm.dropout(x, 0.5, training=False) is x
    assert nm.dropout(x, 0.0, training=True) is x
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    out = nm.dropout(x, 0.5, mask=mask, training=True)
    assert out.data[0, 0] == pytest.approx(2.0)
    assert np.all(out.data.reshape(-1)[1:] == 0.0)
    nm.reduce_sum(out).backward()
    assert x.grad[0, 0] == pytest.approx(2.0)
    assert np.all(x.grad.reshape(-1)[1:] == 0.0)


def test_weighted_sum_matches_direct():
    rng = np.random.default_rng(8)
    alphas = rng.random((3, 4))
    vectors = [rng.standard_normal((3, 6)) for _ in range(4)]
    out = nm.weighted_sum(nm.constant(alphas), [nm.constant(v) for v in vectors])
    expected = sum(alphas[:, t : t + 1] * vectors[t] for t in range(4))
    assert np.allclose(out.data, expected, atol=1e-12)


def test_reduction_dtype_and_value():
    x = nm.constant(np.full((10,), 0.1, dtype=np.float32))
    s = nm.reduce_sum(x)
    assert s.data.dtype == np.float32
    assert float(s.data) == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# per-op finite-difference checks (64-bit, eps 1e-3, rel err <= 1e-3)
# ---------------------------------------------------------------------------

TOL = 1e-3
EPS = 1e-3


def _check(build, params):
    worst, _ = nm.finite_difference_check(build, params, eps=EPS)
    assert worst <= TOL, f"gradient mismatch: {worst}"


def test_grad_matmul_2d():
    a = nm.parameter(_rand((4, 3), 10))
    b = nm.parameter(_rand((3, 5), 11))
    _check(lambda: nm.reduce_sum(nm.tanh(nm.matmul(a, b))), {"a": a, "b": b})


def test_grad_matmul_3d():
    a = nm.parameter(_rand((2, 4, 3), 12))
    b = nm.parameter(_rand((3, 5), 13))
    _check(lambda: nm.reduce_sum(nm.sigmoid(nm.matmul(a, b))), {"a": a, "b": b})


def test_grad_elementwise_chain():
    x = nm.parameter(_rand((3, 4), 14))

    def build():
        h = nm.mul(nm.sigmoid(x), nm.tanh(x))
        h = nm.add(h, nm.relu(x))
        h = nm.sub(h, nm.softplus(x))
        return nm.reduce_sum(nm.mul(h, h))

    _check(build, {"x": x})


def test_grad_concat_slice_reshape():
    a = nm.parameter(_rand((2, 3), 15))
    b = nm.parameter(_rand((2, 4), 16))

    def build():
        cat = nm.concat([a, b], axis=1)          # (2, 7)
        left = nm.slice_axis(cat, 1, 1, 5)       # (2, 4)
        row = nm.take_index(cat, 0, 0)           # (7,)
        flat = nm.reshape(left, (8,))
        return nm.add(nm.reduce_sum(nm.tanh(flat)), nm.reduce_sum(nm.mul(row, row)))

    _check(build, {"a": a, "b": b})


def test_grad_softmax_and_weighted_sum():
    scores = nm.parameter(_rand((2, 4), 17))
    vecs = [nm.parameter(_rand((2, 3), 18 + t)) for t in range(4)]

    def build():
        alphas = nm.softmax(scores, axis=1)
        pooled = nm.weighted_sum(alphas, vecs)
        return nm.reduce_sum(nm.mul(pooled, pooled))

    params = {"scores": scores}
    params.update({f"v{t}": v for t, v in enumerate(vecs)})
    _check(build, params)


def test_grad_cross_entropy():
    logits = nm.parameter(_rand((4, 5), 30))
    onehot = np.eye(5)[[0, 1, 3, 4]]
    _check(lambda: nm.cross_entropy_with_logits(logits, onehot), {"logits": logits})


def test_grad_l2_norm_squared():
    x = nm.parameter(_rand((3, 3), 31))
    _check(lambda: nm.mul(nm.l2_norm_squared(x), 0.5), {"x": x})


def test_grad_mean_and_bias_broadcast():
    w = nm.parameter(_rand((3, 4), 32))
    bias = nm.parameter(_rand((4,), 33))
    x = nm.constant(_rand((5, 3), 34))
    _check(
        lambda: nm.reduce_mean(nm.tanh(nm.add(nm.matmul(x, w), bias))),
        {"w": w, "bias": bias},
    )


def test_determinism_same_ops_same_bits():
    def run():
        a = nm.constant(_rand((8, 8), 40))
        b = nm.parameter(_rand((8, 8), 41))
        out = nm.reduce_sum(nm.softmax(nm.matmul(a, b), axis=1))
        out.backward()
        return out.data.copy(), b.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)
