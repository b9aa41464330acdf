import numpy as np

import pytest

from relso import diffcore as dc
from relso.exceptions import NumericalError, ShapeError, TapeError

TOLERANCE = 1e-5


def weighted(fn, shape, seed=1):
    """Scalar reduction of ``fn`` with fixed random weights"""
    w = np.random.default_rng(seed).normal(size=shape)
    return lambda *xs: (fn(*xs) * w).sum()


def test_gradcheck_add_mul_broadcast(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    fn = weighted(lambda x, y: x * y + x - y, (3, 4))
    assert dc.gradcheck(fn, [a, b]) < TOLERANCE


def test_gradcheck_batched_matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    fn = weighted(lambda x, y: x @ y, (2, 3, 5))
    assert dc.gradcheck(fn, [a, b]) < TOLERANCE


def test_gradcheck_elementwise(rng):
    x = rng.normal(size=(4, 3))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    for op in (dc.relu, dc.tanh, dc.softplus, dc.exp, dc.abs_):
        assert dc.gradcheck(weighted(op, x.shape), [x]) < TOLERANCE, op.__name__


def test_gradcheck_softmax_masked(rng):
    x = rng.normal(size=(2, 5))
    mask = np.array([[True, True, False, True, False], [True, False, False, False, True]])
    fn = weighted(lambda t: dc.softmax(t, mask=mask), x.shape)
    assert dc.gradcheck(fn, [x]) < TOLERANCE


def test_gradcheck_layer_norm(rng):
    x, gamma, beta = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    fn = weighted(dc.layer_norm, (3, 6))
    assert dc.gradcheck(fn, [x, gamma, beta]) < TOLERANCE


def test_gradcheck_conv1d(rng):
    x, weight, bias = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    fn = weighted(dc.conv1d, (2, 5, 4))
    assert dc.gradcheck(fn, [x, weight, bias]) < TOLERANCE


def test_gradcheck_batch_norm_training(rng):
    x, gamma, beta = rng.normal(size=(4, 3, 2)), rng.normal(size=2), rng.normal(size=2)

    def fn(t, g, b):
        return dc.batch_norm(t, g, b, np.zeros(2), np.ones(2), training=True, update_stats=False)

    assert dc.gradcheck(weighted(fn, x.shape), [x, gamma, beta]) < TOLERANCE


def test_gradcheck_batch_norm_eval(rng):
    x, gamma, beta = rng.normal(size=(4, 3, 2)), rng.normal(size=2), rng.normal(size=2)
    running_mean, running_var = np.array([0.3, -0.2]), np.array([1.5, 0.7])

    def fn(t, g, b):
        return dc.batch_norm(t, g, b, running_mean, running_var, training=False)

    assert dc.gradcheck(weighted(fn, x.shape), [x, gamma, beta]) < TOLERANCE
    np.testing.assert_array_equal(running_mean, [0.3, -0.2])
    np.testing.assert_array_equal(running_var, [1.5, 0.7])


def test_softplus_values():
    y = dc.softplus(dc.Tensor([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(y.data, [0.0, np.log(2.0), 800.0], atol=1e-12)


def test_gradcheck_losses(rng):
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, 2, 0], [4, 3, 3]])
    mask = np.array([[True, True, False], [True, True, True]])
    assert dc.gradcheck(lambda t: dc.cross_entropy(t, targets, mask), [logits]) < TOLERANCE

    pred, target = rng.normal(size=4), rng.normal(size=4)
    assert dc.gradcheck(dc.squared_error, [pred, target]) < TOLERANCE


def test_gradcheck_shape_plumbing(rng):
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(2, 4))
    index = np.array([0, 2, 2])

    def fn(a, b):
        joined = dc.concat([a, b], axis=0)
        picked = joined[index].reshape(4, 3).transpose()
        return (picked * picked).sum(axis=(0, 1)) + dc.l2_norm(a, axis=1).mean() + a.mean(axis=0).sum()

    assert dc.gradcheck(fn, [x, y]) < TOLERANCE


def test_gradcheck_embedding(rng):
    weight = rng.normal(size=(5, 3))
    indices = np.array([[0, 1, 1], [4, 4, 2]])
    fn = weighted(lambda w: dc.embedding(w, indices), (2, 3, 3))
    assert dc.gradcheck(fn, [weight]) < TOLERANCE


def test_two_branches_accumulate():
    with dc.Tape() as tape:
        x = dc.Tensor([2.0], requires_grad=True)
        y = (x * x + x * 3.0).sum()
        grads = tape.backward(y)
    np.testing.assert_allclose(grads[x], [7.0])


def test_cross_entropy_gradient_uniform_logits():
    with dc.Tape() as tape:
        logits = dc.Tensor([[0.0, 0.0]], requires_grad=True)
        loss = dc.cross_entropy(logits, np.array([0]))
        grads = tape.backward(loss)
    assert loss.item() == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(grads[logits], [[-0.5, 0.5]])


def test_backward_twice_raises():
    with dc.Tape() as tape:
        x = dc.Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        grads = tape.backward(y)
        np.testing.assert_allclose(grads[x], [2.0, 4.0])
        with pytest.raises(TapeError):
            tape.backward(y)


def test_backward_needs_scalar():
    with dc.Tape() as tape:
        x = dc.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(TapeError):
            tape.backward(x * x)


def test_backward_inputs_restrict_accumulation():
    with dc.Tape() as tape:
        param = dc.Tensor([3.0], requires_grad=True)
        z = dc.Tensor([2.0], requires_grad=True)
        loss = (param * z).sum()
        grads = tape.backward(loss, inputs=[z])
    assert list(grads) == [z]
    np.testing.assert_allclose(z.grad, [3.0])
    assert param.grad is None


def test_no_grad_records_nothing():
    with dc.Tape() as tape:
        x = dc.Tensor(np.ones(3), requires_grad=True)
        with dc.no_grad():
            y = dc.tanh(x * 2.0).sum()
        assert len(tape) == 0
        assert not y.requires_grad


def test_non_finite_output_raises():
    with pytest.raises(NumericalError):
        dc.exp(dc.Tensor([1000.0]))


def test_softmax_fully_masked_row():
    with pytest.raises(ShapeError):
        dc.softmax(dc.Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False, False, False]]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.matmul(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((4, 2))))


def test_adam_first_step_moves_by_lr():
    store = dc.ParamStore()
    store.add("w", np.zeros(2))
    dc.adam_step(store, {"w": np.array([1.0, -2.0])}, lr=0.01)
    np.testing.assert_allclose(store["w"].data, [-0.01, 0.01], rtol=1e-6)
    assert store.step == 1


def test_adam_zero_gradient_leaves_params():
    store = dc.ParamStore()
    store.add("w", np.array([0.5, -1.5]))
    for _ in range(3):
        dc.adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, [0.5, -1.5])


def test_adam_rejects_unknown_and_misshaped():
    store = dc.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        dc.adam_step(store, {"v": np.zeros(2)})
    with pytest.raises(ShapeError):
        dc.adam_step(store, {"w": np.zeros(3)})


def test_sgd_step():
    store = dc.ParamStore()
    store.add("w", np.ones(2))
    dc.sgd_step(store, {"w": np.array([1.0, 2.0])}, lr=0.5)
    np.testing.assert_allclose(store["w"].data, [0.5, 0.0])


def test_clip_grad_norm():
    grads, total = dc.clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)

    grads, total = dc.clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)
    np.testing.assert_allclose(grads["a"], [0.3, 0.4])


def test_param_store_state_round_trip():
    store = dc.ParamStore()
    store.add("w", np.arange(4.0).reshape(2, 2))
    before = store.fingerprint()
    state = store.state_dict()
    dc.sgd_step(store, {"w": np.ones((2, 2))}, lr=1.0)
    assert store.fingerprint() != before
    store.load_state_dict(state)
    assert store.fingerprint() == before
    with pytest.raises(ShapeError):
        store.load_state_dict({"w": np.zeros(3)})


def test_param_store_load_needs_every_name():
    store = dc.ParamStore()
    store.add("w", np.zeros(2))
    store.add("b", np.zeros(1))
    with pytest.raises(KeyError, match="missing parameters \\[b\\]"):
        store.load_state_dict({"w": np.ones(2)})
    with pytest.raises(KeyError, match="unknown parameters \\[v\\]"):
        store.load_state_dict({"w": np.ones(2), "b": np.ones(1), "v": np.ones(1)})
    np.testing.assert_array_equal(store["w"].data, [0.0, 0.0])
