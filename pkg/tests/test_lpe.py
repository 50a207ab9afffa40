import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polabs import lpe, nn
from polabs.nn import DenseNet, Layer

SPEC = [(3, 5, "tanh"), (5, 4, "relu"), (4, 2, "softmax")]


def test_hand_example_with_identity_stub():
    stub = DenseNet([Layer(np.eye(3), np.zeros(3), "identity")])
    model = lpe.LpeModel([(2, 2, "identity")], [stub])
    policy = DenseNet([Layer([[1.0, 2.0], [3.0, 4.0]], [5.0, 6.0], "identity")])
    rows = lpe.layer_rows(policy.shape_spec(), nn.flatten(policy))[0][0]
    assert np.array_equal(rows, [[1, 3, 5], [2, 4, 6]])
    assert np.array_equal(lpe.encode(model, policy), [1.5, 3.5, 5.5])


def test_zero_policy_gives_single_row_evaluation():
    model = lpe.LpeModel.init(SPEC, 0, repr_dim=30, hidden=8)
    code = lpe.encode(model, np.zeros(nn.param_count(SPEC)))
    expect = np.concatenate([enc(np.zeros(fan_in + 1)) for (fan_in, _, _), enc in zip(SPEC, model.encoders)])
    assert np.allclose(code, expect, atol=1e-15)


def test_dims_split_with_remainder_last():
    assert lpe.split_dims(256, 3) == [85, 85, 86]
    model = lpe.LpeModel.init(SPEC, 0)
    assert model.layer_dims == [85, 85, 86] and model.dim == 256
    with pytest.raises(ValueError):
        lpe.split_dims(2, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1_000_000))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    model = lpe.LpeModel.init(SPEC, 7, repr_dim=24, hidden=16)
    policy = DenseNet.init([3, 5, 4, 2], ["tanh", "relu", "softmax"], rng)
    for layer in policy.layers:
        layer.b[...] = rng.normal(size=layer.b.shape)
    before = lpe.encode(model, policy)
    for _ in range(10):
        for layer in policy.layers:
            perm = rng.permutation(layer.b.size)
            layer.W, layer.b = layer.W[:, perm], layer.b[perm]
        assert np.max(np.abs(lpe.encode(model, policy) - before)) <= 1e-9


def test_batch_consistency():
    model = lpe.LpeModel.init(SPEC, 1, repr_dim=12, hidden=8)
    rng = np.random.default_rng(2)
    thetas = rng.normal(size=(6, nn.param_count(SPEC)))
    emb, _ = lpe.encode_batch(model, thetas)
    assert np.allclose(emb[0], lpe.encode(model, thetas[0]), atol=1e-15)
    perm = rng.permutation(6)
    assert np.allclose(lpe.encode_batch(model, thetas[perm])[0], emb[perm], atol=1e-15)


def test_encoder_gradient_finite_difference():
    model = lpe.LpeModel.init(SPEC, 3, repr_dim=9, hidden=6, hidden_act="tanh")
    rng = np.random.default_rng(4)
    thetas = rng.normal(size=(4, nn.param_count(SPEC)))
    w = rng.normal(size=(4, 9))

    emb, tape = lpe.encode_batch(model, thetas)
    analytic = lpe.backward(model, tape, w)
    numeric = nn.numeric_grad(lambda: float((w * lpe.encode_batch(model, thetas)[0]).sum()), model.params(), 1e-5)
    assert max(nn.relative_error(a, b) for a, b in zip(analytic, numeric)) <= 1e-4


def test_architecture_checks_and_serialization():
    model = lpe.LpeModel.init(SPEC, 5, repr_dim=12, hidden=8)
    with pytest.raises(lpe.ArchitectureMismatch):
        lpe.encode(model, np.zeros(7))
    with pytest.raises(lpe.ArchitectureMismatch):
        lpe.LpeModel.from_json(model.to_json(), policy_spec=[(3, 2, "tanh")])
    back = lpe.LpeModel.from_json(model.to_json(), policy_spec=SPEC)
    x = np.random.default_rng(0).normal(size=nn.param_count(SPEC))
    assert np.array_equal(lpe.encode(back, x), lpe.encode(model, x))
