import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from bregnet.autodiff import Tensor, grad_check
from bregnet.data import synth_generate
from bregnet.errors import ContractError, NumericalError
from bregnet.model import NetworkConfig, build_network
from bregnet.training import (
    OptimizerState,
    cross_entropy,
    evaluate,
    momentum_step,
    mse_loss,
    penalty_matrix,
    train,
    weighted_cross_entropy,
    write_trace,
)


def logsumexp_ce(logits, labels, weights=None):
    # plain numpy oracle: mean of w[y] * (logsumexp(z) - z[y])
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    per = lse - logits[np.arange(len(labels)), labels]
    w = np.ones(logits.shape[1]) if weights is None else weights
    return float(np.mean(w[labels] * per))


def test_penalty_examples():
    assert penalty_matrix([100, 50, 25]).diag.tolist() == [0.25, 0.5, 1.0]
    assert penalty_matrix([10, 10]).diag.tolist() == [1.0, 1.0]
    assert penalty_matrix([30, 1]).diag.tolist() == [1 / 30, 1.0]
    np.testing.assert_array_equal(penalty_matrix([4, 2]).dense(), [[0.5, 0.0], [0.0, 1.0]])


def test_penalty_rejects_empty_class():
    with pytest.raises(ContractError):
        penalty_matrix([5, 0, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=1, max_size=12))
def test_penalty_max_is_exactly_one(counts):
    d = penalty_matrix(counts).diag
    assert d.max() == 1.0
    assert np.all((d > 0) & (d <= 1))


def test_weighted_ce_examples():
    logits = Tensor([[0.0, 0.0]])
    assert weighted_cross_entropy(logits, [0], penalty_matrix([1, 1])).item() == pytest.approx(0.693147, abs=1e-6)
    half = weighted_cross_entropy(logits, [0], penalty_matrix([2, 1])).item()
    assert half == pytest.approx(0.5 * math.log(2), abs=1e-15)
    assert half == pytest.approx(0.346574, abs=1e-6)


def test_weighted_ce_label_range():
    with pytest.raises(ContractError):
        weighted_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3], penalty_matrix([1, 1, 1]))


def test_identity_weights_equal_plain_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, k = rng.integers(1, 20), rng.integers(2, 8)
        logits = rng.standard_normal((n, k)) * 5
        labels = rng.integers(0, k, n)
        w = weighted_cross_entropy(Tensor(logits), labels, penalty_matrix([7] * k)).item()
        assert abs(w - logsumexp_ce(logits, labels)) <= 1e-12
        assert abs(w - cross_entropy(Tensor(logits), labels).item()) <= 1e-12


def test_weighted_ce_matches_oracle_with_weights():
    rng = np.random.default_rng(1)
    counts = [40, 10, 25, 5]
    logits = rng.standard_normal((9, 4))
    labels = rng.integers(0, 4, 9)
    H = penalty_matrix(counts)
    assert weighted_cross_entropy(Tensor(logits), labels, H).item() == pytest.approx(
        logsumexp_ce(logits, labels, H.diag), abs=1e-13)


def test_doubling_a_weight_doubles_that_contribution():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((1, 3))
    base = weighted_cross_entropy(Tensor(logits), [1], np.array([0.2, 0.3, 1.0])).item()
    doubled = weighted_cross_entropy(Tensor(logits), [1], np.array([0.2, 0.6, 1.0])).item()
    assert doubled == 2 * base


def test_loss_gradients():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, 6)
    H = penalty_matrix([40, 10, 25, 5])
    assert grad_check(lambda t: weighted_cross_entropy(t, labels, H), Tensor(rng.standard_normal((6, 4))),
                      1e-5) < 1e-6
    target = Tensor(rng.uniform(-1, 1, (5, 2)))
    assert grad_check(lambda t: mse_loss(t, target), Tensor(rng.standard_normal((5, 2))), 1e-5) < 1e-6


def test_mse_examples():
    assert mse_loss(Tensor([[0.3, 0.2]]), Tensor([[0.3, 0.2]])).item() == 0.0
    assert mse_loss(Tensor([[1.0, 1.0]]), Tensor([[0.0, 0.0]])).item() == 1.0
    rng = np.random.default_rng(4)
    p, t = rng.standard_normal((7, 2)), rng.standard_normal((7, 2))
    total = 0.0
    for i in range(7):
        for j in range(2):
            total += (p[i, j] - t[i, j]) ** 2
    assert mse_loss(Tensor(p), Tensor(t)).item() == pytest.approx(total / 14, abs=1e-12)
    with pytest.raises(ContractError):
        mse_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))


def test_momentum_weight_decay_only():
    new, _ = momentum_step({"w": Tensor([1.0])}, {"w": Tensor([0.0])}, OptimizerState())
    assert new["w"].item() == pytest.approx(0.999999, abs=1e-15)


def test_momentum_no_decay_no_grad_is_fixed_point():
    new, _ = momentum_step({"w": Tensor([3.0, -2.0])}, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0))
    np.testing.assert_array_equal(new["w"].data, [3.0, -2.0])


def test_momentum_two_steps_against_scalar_recurrence():
    lr, mu, lam, g, theta = 0.01, 0.9, 1e-4, 0.37, 1.5
    state = OptimizerState(lr, mu, lam)
    params = {"w": Tensor([theta])}
    v = 0.0
    for _ in range(2):
        params, state = momentum_step(params, {"w": Tensor([g])}, state)
        v = mu * v + g + lam * theta
        theta = theta - lr * v
    assert state.velocity["w"][0] == pytest.approx(v, abs=1e-15)
    assert params["w"].item() == pytest.approx(theta, abs=1e-15)
    # lambda-free part of the second velocity is 1.9 g
    v2_no_decay = OptimizerState(lr, mu, 0.0)
    p = {"w": Tensor([1.5])}
    for _ in range(2):
        p, v2_no_decay = momentum_step(p, {"w": Tensor([g])}, v2_no_decay)
    assert v2_no_decay.velocity["w"][0] == pytest.approx(1.9 * g, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(-1e3, 1e3))
def test_zero_learning_rate_is_identity(values, g):
    theta = np.array(values)
    new, _ = momentum_step({"w": Tensor(theta)}, {"w": np.full(theta.shape, g)}, OptimizerState(lr=0.0))
    np.testing.assert_array_equal(new["w"].data, theta)


def test_momentum_rejects_non_finite_gradient():
    with pytest.raises(NumericalError):
        momentum_step({"w": Tensor([1.0])}, {"w": np.array([np.nan])}, OptimizerState())


def _tiny(seed=0, num_classes=2, **kw):
    return build_network(NetworkConfig(stem_channels=4, stages=((1, 4), (1, 8)), input_shape=(1, 8, 8),
                                       num_classes=num_classes, seed=seed, **kw))


def test_zero_epochs_leaves_network_unchanged():
    net = _tiny()
    before = {k: v.data.copy() for k, v in net.params.items()}
    data = synth_generate(n_per_class=4, image_size=8, seed=0)
    result = train(net, data, epochs=0)
    assert result.trace == []
    for k, v in result.net.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_same_seed_same_parameters():
    data = synth_generate(n_per_class=10, image_size=8, seed=1)
    a = train(_tiny(), data, epochs=2, seed=3, batch_size=8).net
    b = train(_tiny(), data, epochs=2, seed=3, batch_size=8).net
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    for k in a.buffers:
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()


def test_separable_data_reaches_95_percent():
    data = synth_generate(n_per_class=32, image_size=8, noise=0.1, seed=5)
    flat = data.images.reshape(len(data), -1)
    oracle = LogisticRegression(C=1e4, max_iter=5000).fit(flat, data.labels)
    assert oracle.score(flat, data.labels) == 1.0
    net = _tiny(seed=2)
    best = 0.0
    for record in train(net, data, epochs=50, seed=0, batch_size=16).trace:
        assert math.isfinite(record.train_loss)
    _, best = evaluate(net, data)
    assert best >= 0.95


def test_weighted_loss_uses_class_counts():
    data = synth_generate(class_counts=[12, 4], image_size=8, seed=0)
    result = train(_tiny(), data, loss="weighted", epochs=1, batch_size=8)
    assert result.penalty.diag.tolist() == [4 / 12, 1.0]


def test_task_mismatch_rejected():
    data = synth_generate(n_per_class=4, image_size=8, task="dimensional")
    with pytest.raises(ContractError):
        train(_tiny(), data, loss="regular", epochs=1)
    with pytest.raises(ContractError):
        train(_tiny(head="regression"), synth_generate(n_per_class=4, image_size=8), loss="mse", epochs=1)


def test_divergence_is_reported():
    data = synth_generate(n_per_class=8, image_size=8, seed=0)
    with pytest.raises(NumericalError, match="epoch 1"):
        train(_tiny(), data, optimizer=OptimizerState(lr=1e200), epochs=3, batch_size=8)


def test_regression_training_and_trace(tmp_path):
    data = synth_generate(n_per_class=16, image_size=8, task="dimensional", seed=0)
    result = train(_tiny(head="regression"), data, loss="mse", epochs=2, batch_size=8, val_data=data)
    assert len(result.trace) == 2
    path = tmp_path / "trace.csv"
    write_trace(result.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_metric,val_loss,val_metric"
    assert len(lines) == 3
