import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoflow import numerics as nx
from protoflow.numerics import AdamState, DimensionError, Tape, Tensor

from conftest import GRAD_TOL, autodiff_vs_fd, rand_tensor


def test_matmul_values():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(nx.matmul(eye, b).data, b.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad(rng):
    a, b = rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 2)
    w = Tensor(rng.normal(size=(3, 2)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.matmul(a, b), w)), [a, b]) < GRAD_TOL


def test_elementwise_values():
    assert nx.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert nx.exp(Tensor([0.0])).data.tolist() == [1.0]
    assert nx.elementwise(Tensor([1.0, -2.0]), "neg").data.tolist() == [-1.0, 2.0]
    assert nx.elementwise(Tensor([1.0, -2.0]), "scale", 3).data.tolist() == [3.0, -6.0]
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.zeros((2, 1))), Tensor(np.zeros((1, 3))))


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_grads(rng, kind):
    a, b = rand_tensor(rng, 5), rand_tensor(rng, 5)
    w = Tensor(rng.normal(size=5))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.elementwise(a, kind, b), w)), [a, b]) < GRAD_TOL


def test_row_broadcast_grad(rng):
    a, b = rand_tensor(rng, 4, 3), rand_tensor(rng, 1, 3)
    c = rand_tensor(rng, 4, 1)
    w = Tensor(rng.normal(size=(4, 3)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.mul(nx.add(a, b), c), w)), [a, b, c]) < GRAD_TOL


@pytest.mark.parametrize("kind", ["exp", "neg", "scale"])
def test_unary_grads(rng, kind):
    a = rand_tensor(rng, 6)
    w = Tensor(rng.normal(size=6))
    arg = 2.5 if kind == "scale" else None
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.elementwise(a, kind, arg), w)), [a]) < GRAD_TOL


def test_leaky_relu():
    assert nx.leaky_relu(Tensor([2.0, -2.0]), 0.2).data.tolist() == [2.0, -0.4]
    assert nx.leaky_relu(Tensor([0.0]), 0.2).data.tolist() == [0.0]
    with pytest.raises(ValueError):
        nx.leaky_relu(Tensor([1.0]), 1.5)


def test_leaky_relu_and_elu_grads(rng):
    x = rng.uniform(0.1, 1.0, size=8) * rng.choice([-1, 1], size=8)   # away from the kink
    a = Tensor(x, requires_grad=True)
    w = Tensor(rng.normal(size=8))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.leaky_relu(a, 0.2), w)), [a]) < GRAD_TOL
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.elu(a), w)), [a]) < GRAD_TOL


def test_softmax_rows_values():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[np.log(1), np.log(3)]])).data,
                               [[0.25, 0.75]], atol=1e-15)


def test_softmax_rows_grad(rng):
    a = rand_tensor(rng, 3, 5)
    w = Tensor(rng.normal(size=(3, 5)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.softmax_rows(a), w)), [a]) < GRAD_TOL


@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(x, c):
    s = nx.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    shifted = x.copy()
    shifted[0] += c
    np.testing.assert_allclose(nx.softmax_rows(Tensor(shifted)).data, s, atol=1e-12, rtol=0)


def test_segment_mean_values():
    h = Tensor([[1.0, 3.0], [3.0, 5.0]])
    assert nx.segment_mean(h, [0, 0], 1).data.tolist() == [[2.0, 4.0]]
    assert nx.segment_mean(Tensor([[7.0, 7.0]]), [0], 1).data.tolist() == [[7.0, 7.0]]
    with pytest.raises(ValueError, match="empty"):
        nx.segment_mean(h, [0, 0], 2)


def test_segment_mean_grad(rng):
    h = rand_tensor(rng, 6, 3)
    seg = [0, 0, 1, 2, 2, 2]
    w = Tensor(rng.normal(size=(3, 3)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.segment_mean(h, seg, 3), w)), [h]) < GRAD_TOL
    with Tape() as tape:
        loss = nx.sum_all(nx.segment_mean(h, seg, 3))
    h.grad = None
    nx.backward(loss, tape)
    np.testing.assert_allclose(h.grad[:, 0], [0.5, 0.5, 1.0, 1 / 3, 1 / 3, 1 / 3])


@given(st.lists(st.integers(0, 3), min_size=4, max_size=30), st.integers(0, 2**31))
def test_segment_mean_centering(seg, seed):
    seg = np.array(sorted(set(range(4)) | set(seg)) + seg)
    h = np.random.default_rng(seed).normal(size=(len(seg), 3)) * 10
    m = nx.segment_mean(Tensor(h), seg, 4).data
    centred = h - m[seg]
    for s in range(4):
        np.testing.assert_allclose(centred[seg == s].sum(axis=0), 0.0, atol=1e-9)


def test_segment_sum_softmax_gather_grads(rng):
    x = rand_tensor(rng, 7, 2)
    scores = rand_tensor(rng, 7, 1)
    seg = np.array([0, 1, 1, 2, 2, 2, 0])
    w = Tensor(rng.normal(size=(3, 2)))

    def loss():
        alpha = nx.segment_softmax(scores, seg, 3)
        return nx.sum_all(nx.mul(nx.segment_sum(nx.mul(x, alpha), seg, 3), w))

    assert autodiff_vs_fd(loss, [x, scores]) < GRAD_TOL
    a = rand_tensor(rng, 4, 3)
    idx = [3, 0, 0, 2, 3]
    w2 = Tensor(rng.normal(size=(5, 3)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.gather_rows(a, idx), w2)), [a]) < GRAD_TOL


def test_segment_softmax_sums_to_one(rng):
    seg = rng.integers(0, 5, size=40)
    seg[:5] = np.arange(5)
    alpha = nx.segment_softmax(Tensor(rng.normal(size=(40, 1)) * 30), seg, 5).data.reshape(-1)
    np.testing.assert_allclose(np.bincount(seg, alpha), 1.0, atol=1e-12)


def test_pairwise_distance_grad(rng):
    z, p = rand_tensor(rng, 3, 4), rand_tensor(rng, 5, 4)
    w = Tensor(rng.normal(size=(3, 5)))
    assert autodiff_vs_fd(lambda: nx.sum_all(nx.mul(nx.pairwise_distance(z, p), w)), [z, p]) < GRAD_TOL


def test_mse_loss():
    x = Tensor([1.0, 2.0])
    assert nx.mse_loss(x, Tensor([1.0, 2.0])).item() == 0.0
    assert nx.mse_loss(Tensor([0.0, 2.0]), Tensor([0.0, 0.0])).item() == 2.0
    with pytest.raises(DimensionError):
        nx.mse_loss(x, Tensor([1.0]))


def test_mse_grad(rng):
    p, t = rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)
    assert autodiff_vs_fd(lambda: nx.mse_loss(p, t), [p, t]) < GRAD_TOL


def test_nll_values():
    assert nx.nll_from_probs(Tensor([[1.0, 0.0, 0.0]]), [0]).item() == 0.0
    assert nx.nll_from_probs(Tensor([[0.5, 0.5]]), [1]).item() == pytest.approx(np.log(2), abs=1e-15)


def test_nll_clamps_zero_probability():
    before = nx.counters["nll_clamped"]
    loss = nx.nll_from_probs(Tensor([[1.0, 0.0]]), [1])
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(-np.log(1e-30))
    assert nx.counters["nll_clamped"] == before + 1


def test_nll_grad_on_simplex_rows(rng):
    raw = rng.uniform(0.1, 1.0, size=(4, 3))
    probs = Tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True)
    assert autodiff_vs_fd(lambda: nx.nll_from_probs(probs, [0, 2, 1, 1]), [probs]) < GRAD_TOL


def test_backward_basics():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_all(x)
    nx.backward(loss, tape)
    assert x.grad.tolist() == [1.0, 1.0, 1.0]

    y = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.mse_loss(y, Tensor([0.0]))
    nx.backward(loss, tape)
    assert y.grad.tolist() == [4.0]


def test_backward_rejects_non_scalar_and_leaves_unreachable_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    other = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        y = nx.scale(x, 2.0)
        _ = nx.scale(other, 3.0)
        loss = nx.sum_all(y)
    with pytest.raises(DimensionError):
        nx.backward(y, tape)
    nx.backward(loss, tape)
    assert other.grad is None


def test_grad_sums_over_consumers():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_all(nx.add(nx.mul(x, x), nx.scale(x, 2.0)))
    nx.backward(loss, tape)
    assert x.grad.tolist() == [8.0]


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    loss = nx.sum_all(x * 2.0)
    with Tape() as tape:
        pass
    with pytest.raises(ValueError, match="not recorded"):
        nx.backward(loss, tape)


def test_backward_is_deterministic(rng):
    a, b = rand_tensor(rng, 6, 5), rand_tensor(rng, 5, 3)
    grads = []
    for _ in range(2):
        a.grad = b.grad = None
        with Tape() as tape:
            loss = nx.sum_all(nx.softmax_rows(nx.elu(nx.matmul(a, b))))
        nx.backward(loss, tape)
        grads.append((a.grad.tobytes(), b.grad.tobytes()))
    assert grads[0] == grads[1]


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True, name="w")
    before = p.data.copy()
    p.grad = np.zeros(2)
    nx.adam_step([p], AdamState(lr=0.1))
    assert p.data.tobytes() == before.tobytes()
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    nx.adam_step([p], AdamState(lr=0.1, beta1=0.9, beta2=0.999))
    # m_hat / sqrt(v_hat) = 1, so the step equals lr up to eps
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_missing_grad_names_param():
    p = Tensor(np.zeros(2), requires_grad=True, name="enc.0.bias")
    with pytest.raises(ValueError, match="enc.0.bias"):
        nx.adam_step([p], AdamState())


def test_step_schedule():
    assert nx.step_lr(3e-4, 40) == pytest.approx(7.5e-5, rel=1e-15)
    assert nx.step_lr(3e-4, 19) == 3e-4
    state = AdamState(lr=3e-4, epoch=45)
    assert state.current_lr == pytest.approx(7.5e-5)


def test_adam_counter_increments():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState()
    for i in range(3):
        p.grad = np.ones(1)
        nx.adam_step([p], state)
        assert state.t == i + 1
        assert state.m[0].shape == p.shape
