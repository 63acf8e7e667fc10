import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vcreg import numeric as nm
from vcreg.errors import CheckpointError, ConfigError, ContractError, DimensionError, DomainError


def leaf(x):
    return nm.Tensor(np.array(x, dtype=float), requires_grad=True)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 4))
    assert np.array_equal((nm.Tensor(np.eye(3)) @ nm.Tensor(a)).data, a)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    np.testing.assert_allclose(nm.matmul(nm.Tensor(a), nm.Tensor(b)).data, naive_matmul(a, b), atol=1e-14)


def test_matmul_grad_is_broadcast_column_sums(rng):
    a, b = leaf(rng.normal(size=(2, 3))), nm.Tensor(rng.normal(size=(3, 4)))
    nm.backward(nm.tsum(a @ b))
    expected = np.broadcast_to(b.data.sum(axis=1), (2, 3))
    np.testing.assert_allclose(a.grad, expected, atol=1e-14)
    assert nm.gradcheck(lambda t: nm.tsum(t[0] @ b), [a]) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nm.matmul(nm.Tensor(np.ones((2, 3))), nm.Tensor(np.ones((2, 2))))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    out = nm.softmax_rows(nm.Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_logit_no_overflow():
    out = nm.softmax_rows(nm.Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 1.0 and out[0, 1] < 1e-300


def test_softmax_matches_direct_formula(rng):
    m = rng.uniform(-2, 2, size=(4, 4))
    direct = np.exp(m) / np.exp(m).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(nm.softmax_rows(nm.Tensor(m)).data, direct, atol=1e-12, rtol=0)


def test_softmax_empty_is_domain_error():
    with pytest.raises(DomainError):
        nm.softmax_rows(nm.Tensor(np.zeros((0, 3))))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(m):
    out = nm.softmax_rows(nm.Tensor(m)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- MLP


def test_identity_layer_passes_input_through(rng):
    layer = nm.Layer(nm.Tensor(np.eye(3)), nm.Tensor(np.zeros(3)), activation="none")
    x = rng.normal(size=(5, 3))
    assert np.array_equal(nm.mlp_forward(nm.Tensor(x), nm.MlpParams([layer])).data, x)


def test_relu_layer():
    layer = nm.Layer(nm.Tensor(np.eye(2)), nm.Tensor(np.zeros(2)), activation="relu")
    out = nm.mlp_forward(nm.Tensor([[-1.0, 2.0]]), nm.MlpParams([layer]))
    assert out.data.tolist() == [[0.0, 2.0]]


def test_two_layer_mlp_gradcheck(rng):
    mlp = nm.init_mlp((3, 5, 2), rng, norm="layer_norm")
    x = nm.Tensor(rng.uniform(-1, 1, size=(4, 3)))
    w = rng.normal(size=(4, 2))
    err = nm.gradcheck(lambda ts: nm.tsum(nm.mlp_forward(ts[0], mlp) * w), [x, *mlp.named_parameters().values()])
    assert err < 1e-4


def test_mlp_chain_break_is_config_error(rng):
    a = nm.Layer(nm.parameter((3, 4), rng), nm.constant(0, (4,)))
    b = nm.Layer(nm.parameter((5, 2), rng), nm.constant(0, (2,)))
    with pytest.raises(ConfigError):
        nm.MlpParams([a, b])


def test_mlp_input_width_mismatch(rng):
    with pytest.raises(DimensionError):
        nm.mlp_forward(nm.Tensor(np.ones((2, 4))), nm.init_mlp((3, 2), rng))


# ---------------------------------------------------------------- backward


def test_square_gradient():
    x = leaf(3.0)
    nm.backward(x * x)
    assert x.grad == 6.0


def test_softmax_dot_constant_matches_finite_differences(rng):
    x = leaf(rng.uniform(-1, 1, size=(1, 5)))
    c = rng.normal(size=(1, 5))
    assert nm.gradcheck(lambda ts: nm.tsum(nm.softmax_rows(ts[0]) * c), [x]) < 1e-5


def test_leaf_without_requires_grad_gets_no_grad():
    x, c = leaf(2.0), nm.Tensor(5.0)
    nm.backward(x * c)
    assert c.grad is None and x.grad == 5.0


def test_non_scalar_backward_is_contract_error():
    with pytest.raises(ContractError):
        nm.backward(leaf([1.0, 2.0]) * 2.0)


def test_second_backward_is_contract_error():
    x = leaf(1.0)
    y = x * 2.0
    nm.backward(y)
    with pytest.raises(ContractError):
        nm.backward(y)


def test_independent_leaf_has_exact_zero_gradient(rng):
    x, unused = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    nm.zero_grad([x, unused])
    nm.backward(nm.tsum(x * x))
    assert np.array_equal(unused.grad, np.zeros(3))


def test_shared_subexpression_accumulates():
    x = leaf(2.0)
    y = x * x
    nm.backward(y * y + y)   # x^4 + x^2
    assert x.grad == 4 * 8 + 2 * 2


def test_no_grad_records_nothing():
    x = leaf(1.0)
    with nm.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_forward_is_bit_deterministic(rng):
    mlp = nm.init_mlp((3, 8, 4), rng, norm="layer_norm")
    x = nm.Tensor(rng.normal(size=(6, 3)))
    assert np.array_equal(nm.mlp_forward(x, mlp).data, nm.mlp_forward(x, mlp).data)


def test_take_out_of_range_is_contract_error():
    with pytest.raises(ContractError):
        nm.take(nm.Tensor(np.ones((3, 2))), np.array([0, 3]))
    with pytest.raises(ContractError):
        nm.take(nm.Tensor(np.ones((3, 2))), np.array([-1]))


# ---------------------------------------------------------------- per-op gradient checks

OPS = {
    "add_broadcast": lambda t: nm.tsum((t[0] + t[1][0]) ** 2),
    "sub": lambda t: nm.tsum((t[0] - t[1]) ** 2),
    "mul": lambda t: nm.tsum(t[0] * t[1]),
    "div": lambda t: nm.tsum(t[0] / (t[1] * t[1] + 1.0)),
    "exp_log": lambda t: nm.tsum(nm.log(nm.exp(t[0]) + 1.0)),
    "sqrt": lambda t: nm.tsum(nm.sqrt(t[0] * t[0] + 0.5)),
    "abs": lambda t: nm.tsum(nm.tabs(t[0] + 5.0)),
    "transpose_reshape": lambda t: nm.tsum(nm.reshape(t[0].T, (-1,)) * np.arange(12.0)),
    "mean_axis": lambda t: nm.tsum(nm.mean(t[0], axis=0) ** 2),
    "max_axis": lambda t: nm.tsum(nm.tmax(t[0], axis=1) * np.array([1.0, 2.0, 3.0, 4.0])),
    "take": lambda t: nm.tsum(nm.take(t[0], np.array([[0, 2], [2, 1]])) ** 2),
    "take_along_rows": lambda t: nm.tsum(nm.take_along_rows(t[0], np.array([[0, 2], [1, 1], [2, 0], [0, 0]])) ** 2),
    "concat": lambda t: nm.tsum(nm.concat([t[0], t[1]], axis=1) ** 2),
    "softmax_axis0": lambda t: nm.tsum(nm.softmax(t[0], axis=0) * np.arange(12.0).reshape(4, 3)),
    "logsumexp": lambda t: nm.tsum(nm.logsumexp(t[0], axis=1) ** 2),
    "norm_rows": lambda t: nm.tsum(nm.norm_rows(t[0], axis=1)),
    "layer_norm": lambda t: nm.tsum(nm.layer_norm(t[0], t[1][0], t[1][1]) * np.arange(12.0).reshape(4, 3)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradcheck(name, rng):
    a = nm.Tensor(rng.uniform(-1, 1, size=(4, 3)))
    b = nm.Tensor(rng.uniform(-1, 1, size=(4, 3)))
    assert nm.gradcheck(OPS[name], [a, b]) < 1e-4


# ---------------------------------------------------------------- SGD


def test_sgd_arithmetic():
    p = leaf(1.0)
    p.grad = np.array(2.0)
    nm.sgd_step([p], 0.1)
    assert p.data == pytest.approx(0.8, abs=1e-15) and p.grad == 0.0


def test_sgd_zero_lr_is_noop(rng):
    p = leaf(rng.normal(size=4))
    before = p.data.copy()
    p.grad = rng.normal(size=4)
    nm.sgd_step([p], 0.0)
    assert np.array_equal(p.data, before)


def test_sgd_missing_grad_is_contract_error():
    with pytest.raises(ContractError):
        nm.sgd_step([leaf(1.0)], 0.1)


def test_sgd_converges_on_quadratic_bowl():
    target = np.array([1.0, -2.0, 0.5])
    p = leaf(np.zeros(3))
    losses = []
    for _ in range(50):
        nm.zero_grad([p])
        loss = nm.tsum((p - target) ** 2)
        losses.append(float(loss.data))
        nm.backward(loss)
        nm.sgd_step([p], 0.05)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    # closed form: error shrinks by (1 - 2 lr) per step
    np.testing.assert_allclose(p.data, target * (1 - 0.9 ** 50), atol=1e-12)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    params = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,)), "s": np.array(np.pi)}
    nm.save_checkpoint(tmp_path / "c.ckpt", params, {"note": "x"})
    loaded, meta = nm.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    for k, v in params.items():
        assert loaded[k].shape == v.shape and loaded[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_corruption(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    nm.save_checkpoint(path, {"w": rng.normal(size=(2, 2))})
    raw = path.read_bytes()
    for bad in (b"NOTACKPT" + raw[8:], raw[:-3], raw + b"\0",
                raw[:8] + struct.pack("<I", 99) + raw[12:]):
        path.write_bytes(bad)
        with pytest.raises(CheckpointError):
            nm.load_checkpoint(path)


def test_assign_parameters_checks_names_and_shapes(rng):
    target = {"w": nm.Tensor(np.zeros((2, 2)))}
    with pytest.raises(CheckpointError):
        nm.assign_parameters(target, {"w": np.zeros((3, 2))})
    with pytest.raises(CheckpointError):
        nm.assign_parameters(target, {"v": np.zeros((2, 2))})
    nm.assign_parameters(target, {"w": np.ones((2, 2))})
    assert target["w"].data.sum() == 4.0
