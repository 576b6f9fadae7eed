import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import adam_scalar, conv2d_loops, maxpool_loops
from umfa import ops
from umfa.optim import AdamState, adam_step
from umfa.tensor import Tape, Tensor, backward, precision


def t4(rows):
    return Tensor(np.array(rows, dtype=np.float32)[None, None])


def finite(shape):
    return arrays(np.float32, shape, elements=st.floats(-100, 100, width=32))


# --- Tensor / Tape -----------------------------------------------------------


def test_tensor_rejects_empty_dims():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 0, 2, 2)))
    with pytest.raises(ValueError):
        Tensor(3.0)


def test_default_storage_is_float32():
    assert Tensor([[[[1.0]]]]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([[[[1.0]]]]).dtype == np.float64


def test_no_tape_means_no_recording():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = ops.relu(x)
    assert not y.requires_grad


def test_tape_records_in_execution_order_and_replays_reversed():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    seen = []
    with Tape() as tape:
        y = ops.relu(x)
        z = ops.sigmoid(y)
        loss = ops.sum(z)
    assert [n.op for n in tape.nodes] == ["relu", "sigmoid", "sum"]
    for node in tape.nodes:
        inner = node.backward
        node.backward = lambda g, inner=inner, op=node.op: (seen.append(op), inner(g))[1]
    tape.backward(loss)
    assert seen == ["sum", "sigmoid", "relu"]


def test_backward_of_sum_is_all_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))


def test_backward_of_square():
    x = Tensor([[[[3.0]]]], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x * x)
    tape.backward(loss)
    assert x.grad.tolist() == [[[[6.0]]]]


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_every_reachable_leaf_gets_grad_and_grad_shape_matches():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    frozen = Tensor(rng.normal(size=(3, 2, 3, 3)))
    with Tape() as tape:
        loss = ops.mean(ops.conv2d(a, w, b, padding=1) + ops.conv2d(a, frozen, padding=1))
    tape.backward(loss)
    for t in (a, w, b):
        assert t.grad is not None and t.grad.shape == t.shape
    assert frozen.grad is None


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.sigmoid(ops.conv2d(x, w, padding=1)))
        tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# --- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    out = ops.conv2d(t4([[1, 2], [3, 4]]), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[1, 2], [3, 4]])


def test_conv_zero_input_gives_bias():
    w = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 3)))
    out = ops.conv2d(Tensor(np.zeros((1, 3, 8, 8))), w, Tensor([0.5, 0.5]), padding=1)
    assert np.all(out.data == 0.5)


def test_conv_ramp_center_is_45():
    x = t4(np.arange(1, 10).reshape(3, 3))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), padding=1)
    assert out.data[0, 0, 1, 1] == 45.0
    np.testing.assert_array_equal(out.data, conv2d_loops(x.data, np.ones((1, 1, 3, 3)), [0.0], padding=1))


@pytest.mark.parametrize("k,stride,padding", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0)])
def test_conv_matches_loop_oracle(k, stride, padding):
    rng = np.random.default_rng(k * 10 + stride + padding)
    x = rng.normal(size=(2, 3, 7, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, k, k)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    want = conv2d_loops(x, w, b, stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_conv_row_blocking_matches_single_block(monkeypatch):
    rng = np.random.default_rng(3)
    x, w = Tensor(rng.normal(size=(1, 4, 12, 12))), Tensor(rng.normal(size=(5, 4, 3, 3)))
    full = ops.conv2d(x, w, padding=1).data
    monkeypatch.setattr(ops, "_COLS_BUDGET", 40)
    np.testing.assert_array_equal(ops.conv2d(x, w, padding=1).data, full)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ops.ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)|\(3, 5, 3, 3\).*\(1, 2, 4, 4\)"):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))


# --- pooling / upsampling / concat ----------------------------------------------


def test_maxpool_examples():
    assert ops.maxpool2d(t4([[1, 2], [3, 4]])).data.tolist() == [[[[4.0]]]]
    np.testing.assert_array_equal(ops.maxpool2d(Tensor(np.full((1, 1, 4, 4), 7.0))).data, np.full((1, 1, 2, 2), 7.0))
    x = t4([[1, 2, 5, 6], [3, 4, 7, 8], [9, 2, 1, 1], [5, 5, 0, 0]])
    assert ops.maxpool2d(x).data[0, 0].tolist() == [[4, 8], [9, 1]]
    np.testing.assert_array_equal(ops.maxpool2d(x).data, maxpool_loops(x.data))


def test_maxpool_rejects_odd():
    with pytest.raises(ops.ShapeError):
        ops.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_tie_grad_goes_to_first_in_row_major_order():
    x = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.maxpool2d(x))
    tape.backward(loss)
    assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]


@settings(max_examples=40, deadline=None)
@given(finite((2, 3, 4, 6)))
def test_maxpool_matches_oracle(x):
    np.testing.assert_array_equal(ops.maxpool2d(Tensor(x)).data, maxpool_loops(x))


def test_upsample_examples():
    assert ops.upsample_nearest(t4([[5]])).data[0, 0].tolist() == [[5, 5], [5, 5]]
    assert ops.upsample_nearest(t4([[1, 2], [3, 4]])).data[0, 0].tolist() == [
        [1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


@settings(max_examples=40, deadline=None)
@given(finite((1, 2, 3, 5)))
def test_pool_of_upsample_is_identity(x):
    np.testing.assert_array_equal(ops.maxpool2d(ops.upsample_nearest(Tensor(x))).data, x)


def test_concat_example_and_errors():
    a = Tensor(np.array([1, 2], dtype=np.float32).reshape(1, 2, 1, 1))
    b = Tensor(np.array([3, 4, 5], dtype=np.float32).reshape(1, 3, 1, 1))
    assert ops.concat_channels(a, b).data.ravel().tolist() == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError):
        Tensor(np.ones((1, 0, 1, 1)))
    with pytest.raises(ops.ShapeError):
        ops.concat_channels(a, Tensor(np.ones((1, 1, 2, 1))))


@settings(max_examples=30, deadline=None)
@given(finite((1, 2, 3, 3)), finite((1, 4, 3, 3)))
def test_concat_slices_recover_inputs(a, b):
    out = ops.concat_channels(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out[:, :2], a)
    np.testing.assert_array_equal(out[:, 2:], b)


# --- relu / moments ------------------------------------------------------------


def test_relu_examples():
    assert ops.relu(Tensor([[[[-1.0, 0.0, 2.0]]]])).data.ravel().tolist() == [0, 0, 2]
    x = Tensor(-np.ones((1, 2, 3, 3)) - 0.5, requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.relu(x))
    tape.backward(loss)
    assert np.all(ops.relu(x).data == 0) and np.all(x.grad == 0)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.relu(x))
    tape.backward(loss)
    assert np.all(x.grad == 0)


def test_channel_moments_hand_values():
    mu, std = ops.channel_moments(t4([[1, 2], [3, 4]]), eps=0.0)
    assert mu.data.item() == pytest.approx(2.5)
    assert std.data.item() == pytest.approx(np.sqrt(1.25), rel=1e-6)
    mu, std = ops.channel_moments(Tensor(np.full((1, 1, 3, 3), 0.7)), eps=1e-5)
    assert mu.data.item() == pytest.approx(0.7, rel=1e-6)
    assert std.data.item() == pytest.approx(np.sqrt(1e-5), rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (1, 2, 4, 4), elements=st.floats(-10, 10, width=32)), st.randoms())
def test_channel_moments_permutation_invariant(x, random):
    perm = list(range(16))
    random.shuffle(perm)
    y = x.reshape(1, 2, 16)[:, :, perm].reshape(x.shape)
    with precision(np.float64):
        m1, s1 = ops.channel_moments(Tensor(x))
        m2, s2 = ops.channel_moments(Tensor(y))
    np.testing.assert_allclose(m1.data, m2.data, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s1.data, s2.data, rtol=1e-10)


# --- Adam ---------------------------------------------------------------------


def _param(value, grad):
    p = Tensor(np.full((1, 1, 1, 1), value), requires_grad=True)
    p.grad = np.full((1, 1, 1, 1), grad, dtype=np.float32)
    return p


def test_adam_first_step_is_lr_sized():
    p = _param(0.0, 1.0)
    state = AdamState(lr=1e-4)
    adam_step([p], state)
    assert abs(-p.data.item() - 1e-4) < 1e-4 * 1e-3
    assert state.t == 1
    assert np.all(p.grad == 0)
    assert state.m[0].shape == p.shape and state.v[0].shape == p.shape


def test_adam_zero_grad_leaves_param():
    p = _param(2.5, 0.0)
    adam_step([p], AdamState(lr=0.1))
    assert p.data.item() == 2.5


def test_adam_missing_grad_rejected():
    p = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        adam_step([p], AdamState())


def test_adam_quadratic_matches_scalar_reference():
    with precision(np.float64):
        p = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        state = AdamState(lr=0.1)
        traj = []
        for _ in range(50):
            with Tape() as tape:
                d = p - 3.0
                loss = ops.sum(d * d)
            tape.backward(loss)
            adam_step([p], state)
            traj.append(p.data.item())
    ref = adam_scalar(0.0, lambda th: 2 * (th - 3), 50, 0.1)
    np.testing.assert_allclose(traj, ref, rtol=1e-12)
    assert state.t == 50
    # Adam overshoots near step 40, so compare window means rather than endpoints
    errs = np.abs(np.array(traj) - 3).reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(errs) < 0), errs
