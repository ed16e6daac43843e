"""Acceptance criteria 1-11, one test group per criterion.

The terminal summary prints one PASS/FAIL/SKIP line per criterion (see
conftest.py).  Run alone with ``pytest tests/test_acceptance.py``.
"""

import math
import os
import time

import numpy as np
import pytest

from bregnet.autodiff import Tensor
from bregnet.bypass import BypassKind, bypass_grads, bypass_values
from bregnet.data import load_fer2013_csv, synth_generate
from bregnet.gradcheck import run_suite
from bregnet.metrics import (
    categorical_metrics,
    cc,
    ccc,
    dimensional_report,
    rmse,
    sagr,
    skew_normalize,
)
from bregnet.model import (
    DESK_DEFAULT,
    NetworkConfig,
    build_network,
    clamp_dimensional,
    count_parameters,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from bregnet.training import cross_entropy, evaluate, penalty_matrix, train, weighted_cross_entropy

FER_ENV = "BREGNET_FER2013_CSV"


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


def _desk_small(kind=BypassKind.H3, head="classification", num_classes=2, seed=0, shape=(1, 16, 16)):
    # three BReG blocks: one per stage, the last two downsampling
    return NetworkConfig(stem_channels=8, stages=((1, 8), (1, 16), (1, 16)), bypass=kind, head=head,
                         num_classes=num_classes, input_shape=shape, seed=seed)


# 1 ----------------------------------------------------------------------

@acceptance(1, "bypass derivatives and gradient bounds")
@pytest.mark.parametrize("kind", list(BypassKind))
def test_bypass_finite_differences(kind):
    x = np.random.default_rng(2024).uniform(-10, 10, 1000)
    h = 1e-5
    numeric = (bypass_values(kind, x + h) - bypass_values(kind, x - h)) / (2 * h)
    analytic = bypass_grads(kind, x)
    assert (np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max() < 1e-6


@acceptance(1, "bypass derivatives and gradient bounds")
def test_bypass_bounds_on_grid():
    grid = np.linspace(-100, 100, 100_000)
    d1 = bypass_grads(BypassKind.H1, grid)
    d2 = bypass_grads(BypassKind.H2, grid)
    d3 = bypass_grads(BypassKind.H3, grid)
    assert np.all((d1 > 0) & (d1 < 1))
    assert np.all(np.abs(d2) < math.pi / 2)
    assert np.all((d3 > 0) & (d3 <= 1))


# 2 ----------------------------------------------------------------------

@acceptance(2, "engine-wide gradient check")
def test_engine_gradcheck():
    start = time.perf_counter()
    rows = dict(run_suite(seed=0))
    elapsed = time.perf_counter() - start
    network = rows.pop("breg_network")
    assert network < 1e-4
    assert {"weighted_cross_entropy", "mse_loss", "conv2d", "batch_norm_train", "softmax"} <= set(rows)
    assert all(err < 1e-5 for err in rows.values()), rows
    assert elapsed < 60


# 3 ----------------------------------------------------------------------

@acceptance(3, "balanced weights reduce to plain cross-entropy")
def test_balanced_weighted_equals_plain():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, k = int(rng.integers(1, 33)), int(rng.integers(2, 10))
        logits = rng.standard_normal((n, k)) * 4
        labels = rng.integers(0, k, n)
        counts = [int(rng.integers(1, 1000))] * k
        m = logits.max(axis=1, keepdims=True)
        plain = np.mean(np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0] - logits[np.arange(n), labels])
        weighted = weighted_cross_entropy(Tensor(logits), labels, penalty_matrix(counts)).item()
        assert abs(weighted - plain) <= 1e-12
        assert abs(weighted - cross_entropy(Tensor(logits), labels).item()) <= 1e-12


# 4 ----------------------------------------------------------------------

@acceptance(4, "penalty matrix")
def test_penalty_matrix_values():
    H = penalty_matrix([100, 50, 25])
    assert H.diag.tolist() == [0.25, 0.5, 1.0]
    np.testing.assert_array_equal(H.dense(), np.diag([0.25, 0.5, 1.0]))
    rng = np.random.default_rng(4)
    for _ in range(1000):
        d = penalty_matrix(rng.integers(1, 10**6, int(rng.integers(1, 20)))).diag
        assert d.max() == 1.0


# 5 ----------------------------------------------------------------------

@acceptance(5, "metric oracles")
def test_dimensional_metric_fixtures():
    assert rmse([0.1, 0.4], [0.3, 0.0]) == pytest.approx(math.sqrt(0.1), abs=1e-10)
    assert ccc([0.5, 1.5], [0.0, 1.0]) == pytest.approx(2 / 3, abs=1e-10)
    g = np.array([0.3, -0.2, 0.9, 0.1])
    assert cc(g + 0.5, g) == pytest.approx(1.0, abs=1e-10)
    assert cc(-g, g) == pytest.approx(-1.0, abs=1e-10)
    assert sagr([0.5, 0.5], [0.1, -0.1]) == 0.5
    assert sagr([0.0], [0.0]) == 1.0


@acceptance(5, "metric oracles")
def test_categorical_metric_fixture():
    vals = categorical_metrics(np.array([[40, 10], [5, 45]]), strict=True)
    hand = {"accuracy": 0.85, "kappa": 0.7, "f1": 113 / 133, "ppv": 169 / 198,
            "mcc": 7 / math.sqrt(99), "alpha": 1398 / 1995}
    for name, expected in hand.items():
        assert abs(vals[name] - expected) < 1e-10, name


@acceptance(5, "metric oracles")
def test_ccc_cc_property_and_sagr_identity():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        p = rng.standard_normal(n) * rng.uniform(0.1, 2) + rng.uniform(-1, 1)
        g = rng.uniform(-1, 1) * p + rng.standard_normal(n)
        assert abs(ccc(p, g)) <= abs(cc(p, g)) + 1e-15
        assert sagr(p, p) == 1.0


# 6 ----------------------------------------------------------------------

def _accuracy(p, g):
    return float(np.mean(p == g))


@acceptance(6, "skew normalization")
def test_skew_balanced_unchanged():
    rng = np.random.default_rng(6)
    gt = np.repeat([0, 1, 2, 3], 30)
    pred = rng.integers(0, 4, gt.size)
    res = skew_normalize(_accuracy, pred, gt, trials=200, seed=0)
    assert res.normalized == res.original


@acceptance(6, "skew normalization")
def test_skew_constant_predictor():
    gt = np.array([0] * 90 + [1] * 10)
    res = skew_normalize(_accuracy, np.zeros(100, dtype=int), gt, trials=200, seed=0)
    assert res.original == pytest.approx(0.9)
    assert 0.45 <= res.normalized <= 0.55


@acceptance(6, "skew normalization")
def test_skew_reproducible():
    rng = np.random.default_rng(7)
    gt = np.array([0] * 70 + [1] * 20 + [2] * 10)
    pred = rng.integers(0, 3, 100)
    a = skew_normalize(_accuracy, pred, gt, trials=200, seed=17)
    b = skew_normalize(_accuracy, pred, gt, trials=200, seed=17)
    assert a.per_trial == b.per_trial and a.normalized == b.normalized


# 7 ----------------------------------------------------------------------

@acceptance(7, "trainability of every bypass kind")
@pytest.mark.parametrize("kind", list(BypassKind))
def test_trainability(kind):
    train_set = synth_generate("blobs", n_per_class=64, image_size=16, noise=0.3, seed=70)
    val_set = synth_generate("blobs", n_per_class=32, image_size=16, noise=0.3, seed=71, split="val")
    net = build_network(_desk_small(kind))
    assert len(net.blocks) == 3
    start = time.perf_counter()
    # train() aborts on any non-finite value, so completion means every step stayed finite
    trace = train(net, train_set, epochs=50, seed=0, batch_size=32, val_data=val_set).trace
    elapsed = time.perf_counter() - start
    assert all(math.isfinite(r.train_loss) for r in trace)
    reached = [r.epoch for r in trace if r.val_metric >= 0.95]
    assert reached and reached[0] <= 50
    assert trace[-1].val_metric >= 0.95
    assert elapsed < 300


# 8 ----------------------------------------------------------------------

def _minority_recall(net, data):
    pred = predict(net, data.images).data.argmax(axis=1)
    return float(np.mean(pred[data.labels == 1] == 1))


@acceptance(8, "weighted loss raises minority recall")
def test_weighted_loss_direction():
    wins = []
    for s in range(5):
        train_set = synth_generate("blobs", class_counts=[300, 10], image_size=16, noise=0.5, seed=100 + s)
        val_set = synth_generate("blobs", n_per_class=100, image_size=16, noise=0.5, seed=200 + s, split="val")
        recall = {}
        for loss in ("regular", "weighted"):
            net = build_network(_desk_small(seed=s))
            train(net, train_set, loss=loss, epochs=10, seed=s, batch_size=32)
            recall[loss] = _minority_recall(net, val_set)
        wins.append(recall["weighted"] > recall["regular"])
        print(f"seed pair {s}: regular {recall['regular']:.3f} weighted {recall['weighted']:.3f}")
    assert sum(wins) >= 4


# 9 ----------------------------------------------------------------------

@acceptance(9, "dimensional regression pipeline")
def test_dimensional_pipeline():
    train_set = synth_generate("blobs", n_per_class=512, image_size=16, noise=0.05, task="dimensional", seed=10)
    val_set = synth_generate("blobs", n_per_class=128, image_size=16, noise=0.05, task="dimensional", seed=11,
                             split="val")
    net = build_network(_desk_small(head="regression"))
    start = time.perf_counter()
    train(net, train_set, loss="mse", epochs=30, seed=0, batch_size=32)
    elapsed = time.perf_counter() - start
    pred = clamp_dimensional(predict(net, val_set.images).data)
    metrics = dimensional_report(pred, val_set.labels).to_dict()["metrics"]
    print({k: round(v, 4) for k, v in metrics.items()})
    assert len(metrics) == 8
    for axis in ("valence", "arousal"):
        assert metrics[f"rmse_{axis}"] < 0.15
        assert metrics[f"sagr_{axis}"] > 0.9
    assert elapsed < 300


# 10 ---------------------------------------------------------------------

@acceptance(10, "determinism and serialization")
def test_same_seed_identical_checkpoints(tmp_path):
    data = synth_generate("blobs", n_per_class=24, image_size=16, noise=0.3, seed=1)
    blobs = []
    for i in range(2):
        net = build_network(_desk_small(seed=3))
        train(net, data, epochs=2, seed=9, batch_size=16)
        path = tmp_path / f"run{i}.breg"
        save_checkpoint(net, path)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]


@acceptance(10, "determinism and serialization")
def test_checkpoint_round_trip(tmp_path):
    net = build_network(DESK_DEFAULT)
    rng = np.random.default_rng(10)
    for k in net.buffers:
        net.buffers[k] = rng.uniform(0.1, 2, net.buffers[k].shape)
    save_checkpoint(net, tmp_path / "a.breg")
    back = load_checkpoint(tmp_path / "a.breg")
    for k, v in net.state_arrays().items():
        assert back.state_arrays()[k].tobytes() == v.tobytes()
    x = rng.standard_normal((2, 1, 48, 48))
    assert predict(back, x).data.tobytes() == predict(net, x).data.tobytes()


@acceptance(10, "determinism and serialization")
def test_parameter_count_hand_tally():
    # per-layer tally for stem 16, stages (3,16) (3,32) (3,64), 1x48x48 input, 7 classes
    tally = {
        "stem conv 3x3 1->16 + bias": 9 * 1 * 16 + 16,
        "stem bn 16": 2 * 16,
        "stage0 3 blocks x (2 conv 3x3 16->16 + 2 bn)": 3 * (2 * (9 * 16 * 16 + 16) + 2 * 32),
        "stage1 block0 conv 16->32, conv 32->32, 2 bn, proj 1x1 16->32": (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32)
        + 2 * 64 + (16 * 32 + 32),
        "stage1 blocks1-2": 2 * (2 * (9 * 32 * 32 + 32) + 2 * 64),
        "stage2 block0 conv 32->64, conv 64->64, 2 bn, proj 1x1 32->64": (9 * 32 * 64 + 64) + (9 * 64 * 64 + 64)
        + 2 * 128 + (32 * 64 + 64),
        "stage2 blocks1-2": 2 * (2 * (9 * 64 * 64 + 64) + 2 * 128),
        "head fc 64->7 + bias": 64 * 7 + 7,
    }
    assert count_parameters(build_network(DESK_DEFAULT)) == sum(tally.values())


# 11 ---------------------------------------------------------------------

@acceptance(11, "FER2013 ingestion and smoke training")
@pytest.mark.skipif(not os.environ.get(FER_ENV), reason=f"set {FER_ENV} to the official fer2013.csv")
def test_fer2013_end_to_end():
    splits = load_fer2013_csv(os.environ[FER_ENV])
    sizes = {s: len(d) for s, d in splits.items()}
    assert sum(sizes.values()) == 35_887
    assert all(n > 0 for n in sizes.values())
    train_set, val_set = splits["train"], splits["val"]
    net = build_network(_desk_small(num_classes=7, shape=(1, 48, 48)))
    train(net, train_set, epochs=20, seed=0, batch_size=64)
    _, val_acc = evaluate(net, val_set)
    majority = np.bincount(val_set.labels, minlength=7).max() / len(val_set)
    print(f"validation accuracy {val_acc:.4f} vs majority baseline {majority:.4f}")
    assert val_acc > majority
