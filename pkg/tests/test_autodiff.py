import numpy as np
import pytest

from ssbl.autodiff import (
    AdamState,
    Tensor,
    abs_mean,
    adam_step,
    add,
    backward,
    concat_channels,
    conv3d,
    forward_diff,
    gradcheck,
    l1_mean,
    leaky_relu,
    mul,
    no_grad,
    softmax_channels,
    total,
    topological_order,
    upsample_nearest2x,
)


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop 3x3x3 cross-correlation."""
    cin, nx, ny, nz = x.shape
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    out_n = [(n + 2 * pad - 3) // stride + 1 for n in (nx, ny, nz)]
    out = np.zeros((w.shape[0], *out_n))
    for o in range(w.shape[0]):
        for i in range(out_n[0]):
            for j in range(out_n[1]):
                for k in range(out_n[2]):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3, k * stride:k * stride + 3]
                    out[o, i, j, k] = (patch * w[o]).sum() + b[o]
    return out


def test_conv_ones_counts():
    out = conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert out.value[0, 1, 1, 1] == 27
    assert out.value[0, 0, 1, 1] == 18
    assert out.value[0, 0, 0, 1] == 12 and out.value[0, 0, 0, 0] == 8


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 4, 3))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    assert np.array_equal(out.value, x)


def test_conv_stride_two_shape():
    out = conv3d(Tensor(np.ones((1, 8, 8, 8))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)), stride=2)
    assert out.shape == (1, 4, 4, 4)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x, w, b = rng.normal(size=(2, 6, 5, 4)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
    assert np.allclose(out.value, conv_oracle(x, w, b, stride, 1), atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv3d(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)), stride=3)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck(stride):
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(2, 1, 3, 3, 3)), rng.normal(size=2)
    r = gradcheck(lambda x, w, b: total(mul(conv3d(x, w, b, stride=stride), conv3d(x, w, b, stride=stride))),
                  [x, w, b])
    assert r.max_rel_error < 1e-5


def test_leaky_relu_values_and_gradient():
    out = leaky_relu(Tensor(np.array([2.0, -2.0])), 0.2)
    assert np.allclose(out.value, [2.0, -0.4])
    r = gradcheck(lambda x: total(leaky_relu(x, 0.2)), [np.array([-1.0, 0.7, -0.3])])
    assert r.max_rel_error < 1e-6
    x = Tensor(np.array([-1.0]), requires_grad=True)
    backward(total(leaky_relu(x, 0.2)))
    assert np.isclose(x.grad[0], 0.2, atol=1e-5)


def test_upsample_values_and_adjoint():
    out = upsample_nearest2x(Tensor(np.full((1, 1, 1, 1), 5.0)))
    assert out.shape == (1, 2, 2, 2) and np.all(out.value == 5)
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    backward(total(upsample_nearest2x(x)))
    assert x.grad[0, 0, 0, 0] == 8
    rng = np.random.default_rng(1)
    w = rng.normal(size=(1, 6, 6, 6))
    r = gradcheck(lambda x: total(mul(upsample_nearest2x(x), Tensor(w))), [rng.normal(size=(1, 3, 3, 3))])
    assert r.max_rel_error < 1e-6


def test_concat_shape_routing_and_gradcheck():
    a = Tensor(np.zeros((2, 3, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros((3, 3, 3, 3)), requires_grad=True)
    out = concat_channels(a, b)
    assert out.shape == (5, 3, 3, 3)
    w = np.arange(5, dtype=float)[:, None, None, None] * np.ones((5, 3, 3, 3))
    backward(total(mul(out, Tensor(w))))
    assert np.all(a.grad[1] == 1) and np.all(b.grad[2] == 4)
    with pytest.raises(ValueError):
        concat_channels(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 3))))
    rng = np.random.default_rng(2)
    wt = rng.normal(size=(3, 2, 2, 2))
    r = gradcheck(lambda a, b: total(mul(mul(concat_channels(a, b), Tensor(wt)), concat_channels(a, b))),
                  [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))])
    assert r.max_rel_error < 1e-6


def test_softmax_contracts():
    out = softmax_channels(Tensor(np.zeros((2, 1, 1, 1)))).value
    assert np.allclose(out[:, 0, 0, 0], 0.5)
    out = softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(2, 1, 1, 1))).value
    assert np.isfinite(out).all() and np.allclose(out[:, 0, 0, 0], [1, 0])
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 2, 2, 2))
    r = gradcheck(lambda x: total(mul(softmax_channels(x), Tensor(w))), [rng.normal(size=(3, 2, 2, 2))])
    assert r.max_rel_error < 1e-6


def test_l1_mean_cases():
    a = np.random.default_rng(4).normal(size=(1, 3, 3, 3))
    assert float(l1_mean(Tensor(a), Tensor(a)).value) == 0
    assert np.isclose(float(l1_mean(Tensor(a), Tensor(a - 0.75)).value), 0.75)
    b = np.random.default_rng(5).normal(size=a.shape)
    oracle = sum(abs(p - q) for p, q in zip(a.ravel(), b.ravel())) / a.size
    assert np.isclose(float(l1_mean(Tensor(a), Tensor(b)).value), oracle, rtol=1e-12)
    r = gradcheck(l1_mean, [a, b])
    assert r.max_rel_error < 1e-6


def test_l1_subgradient_at_zero_is_zero():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    backward(l1_mean(a, Tensor(np.ones((1, 2, 2, 2)))))
    assert np.all(a.grad == 0)


def test_backward_linear_and_fan_out():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.array([0.5, 0.1, 2.0]), requires_grad=True)
    backward(total(mul(w, Tensor(x))))
    assert np.array_equal(w.grad, x)
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    h = mul(a, a)
    # h is consumed three times; the gradient is the sum of the three adjoints
    backward(total(add(add(h, h), mul(h, Tensor(np.array([4.0, 5.0]))))))
    assert np.allclose(a.grad, (1 + 1 + np.array([4.0, 5.0])) * 2 * a.value)


def test_backward_rejects_non_scalar_and_leaves_untouched():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(mul(x, x))
    c = Tensor(np.ones(3))
    backward(total(mul(x, c)))
    assert c.grad is None


def test_topological_order_inputs_precede():
    a = Tensor(np.ones(2), requires_grad=True)
    b = mul(a, a)
    c = add(b, a)
    d = total(c)
    order = topological_order(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = mul(a, a)
    assert not b.requires_grad and b.parents == ()


def test_forward_diff_and_abs_mean_gradcheck():
    rng = np.random.default_rng(6)
    r = gradcheck(lambda x: abs_mean(forward_diff(x, 2)), [rng.normal(size=(2, 3, 4, 3))])
    assert r.max_rel_error < 1e-6


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    s = AdamState(lr=1e-4)
    adam_step([p], s)
    assert np.isclose(p.value[0], -1e-4, rtol=1e-6)
    assert p.grad is None and s.step == 1


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    s = AdamState()
    before = p.value.copy()
    adam_step([p], s)
    assert np.array_equal(p.value, before) and s.step == 1


def test_adam_descends_quadratic():
    p = Tensor(np.array([1.0]), dtype=np.float64, requires_grad=True)
    s = AdamState(lr=1e-2)
    for _ in range(100):
        backward(total(mul(p, p)))
        adam_step([p], s)
    assert abs(p.value[0]) < 1.0


def test_determinism_of_forward_and_grads():
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(2, 6, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    results = []
    for _ in range(2):
        wt = Tensor(w.astype(np.float32), requires_grad=True)
        out = conv3d(Tensor(x.astype(np.float32)), wt, Tensor(b.astype(np.float32)))
        backward(total(mul(out, out)))
        results.append((out.value.tobytes(), wt.grad.tobytes()))
    assert results[0] == results[1]
