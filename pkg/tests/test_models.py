import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperaug.autodiff import ShapeError, Tape, grad, precision
from hyperaug.models import ModelSpec, error_rate, forward, init_params, load_checkpoint, loss_ce, save_checkpoint
from hyperaug.oracles import central_difference


def _zeros_like(params):
    return params.replace([np.zeros_like(a) for a in params.arrays()])


def test_zero_weights_give_uniform_probabilities(f64):
    spec = ModelSpec()
    params = _zeros_like(init_params(spec))
    logits = forward(spec, params, np.random.default_rng(0).uniform(size=(3, 1, 28, 28))).data
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, 0.1, atol=1e-15)


def test_linear_layer_on_one_hot_returns_weight_column(f64):
    spec = ModelSpec(kind="mlp", input_shape=(1, 2, 3), num_classes=4, hidden=())
    params = init_params(spec, seed=1)
    x = np.zeros((1, 1, 2, 3))
    x[0, 0, 1, 2] = 1.0  # flat index 5
    out = forward(spec, params, x).data[0]
    np.testing.assert_allclose(out, params["fc1.weight"][:, 5], atol=1e-15)


def _mlp_loop_oracle(params, x):
    """Two-layer MLP with explicit loops over units."""
    w1, b1, w2, b2 = (np.asarray(params[n]) for n in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"))
    out = []
    for img in x.reshape(len(x), -1):
        hidden = []
        for j in range(w1.shape[0]):
            acc = b1[j]
            for i in range(w1.shape[1]):
                acc += w1[j, i] * img[i]
            hidden.append(max(acc, 0.0))
        row = []
        for k in range(w2.shape[0]):
            acc = b2[k]
            for j in range(w2.shape[1]):
                acc += w2[k, j] * hidden[j]
            row.append(acc)
        out.append(row)
    return np.array(out)


def _ce_loop_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def test_mlp_forward_and_loss_match_loop_oracle(f64):
    spec = ModelSpec(kind="mlp", input_shape=(1, 4, 4), num_classes=5, hidden=(7,))
    params = init_params(spec, seed=2)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(6, 1, 4, 4))
    labels = rng.integers(0, 5, size=6)
    logits = forward(spec, params, x)
    oracle = _mlp_loop_oracle(params, x)
    np.testing.assert_allclose(logits.data, oracle, atol=1e-6)
    assert loss_ce(logits, labels).data == pytest.approx(_ce_loop_oracle(oracle, labels), abs=1e-6)


def test_uniform_logits_loss_is_log_ten(f64):
    assert loss_ce(np.zeros((4, 10)), [0, 3, 7, 9]).data == pytest.approx(2.302585, abs=1e-6)
    assert loss_ce(np.zeros((4, 10)), [0, 3, 7, 9]).data == pytest.approx(math.log(10), abs=1e-15)


def test_confident_correct_logit_has_near_zero_loss(f64):
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50.0
    assert loss_ce(logits, [1, 2]).data < 1e-20


def test_loss_gradient_matches_finite_differences(f64):
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=(5, 6))
    labels = rng.integers(0, 6, size=5)
    tape = Tape()
    z = tape.variable(z0)
    (g,) = grad(loss_ce(z, labels), [z])
    fd = central_difference(lambda a: float(loss_ce(a, labels).data), z0, eps=1e-4)
    assert np.linalg.norm(g.data - fd) / np.linalg.norm(fd) < 1e-4


def test_smallcnn_default_size():
    spec = ModelSpec()
    assert init_params(spec).total_dim >= 10_000
    assert forward(spec, init_params(spec), np.zeros((2, 1, 28, 28))).shape == (2, 10)


def test_forward_is_deterministic():
    spec = ModelSpec(input_shape=(3, 16, 16), num_classes=4)
    params = init_params(spec, seed=5)
    x = np.random.default_rng(6).uniform(size=(3, 3, 16, 16))
    assert np.array_equal(forward(spec, params, x).data, forward(spec, params, x).data)


def test_error_rate_examples():
    logits = np.eye(4)
    assert error_rate(logits, [0, 1, 2, 3]) == 0.0
    assert error_rate(logits, [1, 2, 3, 0]) == 1.0
    assert error_rate(logits, [0, 1, 3, 3]) == 0.25


def test_error_rate_ties_go_to_lowest_class():
    assert error_rate(np.zeros((2, 3)), [0, 0]) == 0.0
    assert error_rate(np.zeros((2, 3)), [1, 2]) == 1.0


@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_error_rate_is_one_minus_accuracy(seed, n):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, 5))
    labels = rng.integers(0, 5, size=n)
    err = error_rate(logits, labels)
    correct = int(np.sum(np.argmax(logits, axis=1) == labels))
    assert 0.0 <= err <= 1.0
    assert round(err * n) == n - correct
    assert abs(err - (1.0 - correct / n)) <= np.finfo(float).eps


def test_input_shape_mismatch_raises():
    spec = ModelSpec()
    with pytest.raises(ShapeError):
        forward(spec, init_params(spec), np.zeros((1, 3, 28, 28)))


def test_out_of_range_label_raises():
    with pytest.raises(ValueError):
        loss_ce(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        loss_ce(np.zeros((2, 3)), [-1, 0])


@pytest.mark.parametrize("kwargs", [{"kind": "resnet"}, {"num_classes": 1}, {"input_shape": (1, 30, 30)}, {"input_shape": (28, 28)}])
def test_invalid_spec_raises(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec(input_shape=(3, 8, 8), num_classes=4, channels=(4, 6), hidden=(12,))
    with precision("float32"):
        params = init_params(spec, seed=7)
        save_checkpoint(tmp_path / "model", spec, params)
        spec2, params2 = load_checkpoint(tmp_path / "model")
    assert spec2 == spec
    assert params2.names == params.names
    np.testing.assert_array_equal(params2.flatten(), params.flatten())
    assert (tmp_path / "model.bin").stat().st_size == 4 * params.total_dim


def test_truncated_checkpoint_raises(tmp_path):
    spec = ModelSpec(kind="mlp", input_shape=(1, 2, 2), num_classes=2, hidden=(3,))
    save_checkpoint(tmp_path / "m", spec, init_params(spec))
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m")
