"""Finite-difference checks for every differentiable piece of the engine."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .bypass import BypassKind, bypass_apply
from .layers import batch_norm, conv2d, fully_connected, global_avg_pool, relu, softmax
from .model import BlockConfig, NetworkConfig, breg_block_forward, build_network, init_block_params
from .training import mse_loss, penalty_matrix, weighted_cross_entropy

EPSILON = 1e-5


def _away_from_zero(rng, shape, margin=1e-2):
    # keep ReLU inputs off the kink so central differences stay valid
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _projected(rng, out_shape):
    # fixed random weighting turns any tensor-valued op into a scalar loss
    r = Tensor(rng.standard_normal(out_shape))
    return lambda out: ad.sum(out * r)


def check_bypass(kind, rng, n=10):
    x = rng.uniform(-3, 3, size=n)
    return grad_check(lambda t: ad.sum(bypass_apply(kind, t)), Tensor(x), EPSILON)


def check_conv2d(rng, stride=1, padding=1):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    oh = (5 + 2 * padding - 3) // stride + 1
    proj = _projected(rng, (2, 3, oh, oh))
    return grad_check(lambda ts: proj(conv2d(ts[0], ts[1], ts[2], stride, padding)), [x, w, b], EPSILON)


def check_relu(rng):
    proj = _projected(rng, (4, 6))
    return grad_check(lambda t: proj(relu(t)), Tensor(_away_from_zero(rng, (4, 6))), EPSILON)


def check_batch_norm(rng, training):
    x = rng.standard_normal((4, 3, 3, 3)) * 2 + 0.5
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    proj = _projected(rng, x.shape)
    return grad_check(
        lambda ts: proj(batch_norm(ts[0], ts[1], ts[2], mean, var, training)[0]), [x, gamma, beta], EPSILON
    )


def check_global_avg_pool(rng):
    proj = _projected(rng, (2, 3))
    return grad_check(lambda t: proj(global_avg_pool(t)), Tensor(rng.standard_normal((2, 3, 4, 4))), EPSILON)


def check_fully_connected(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    proj = _projected(rng, (3, 4))
    return grad_check(lambda ts: proj(fully_connected(ts[0], ts[1], ts[2])), [x, w, b], EPSILON)


def check_softmax(rng):
    proj = _projected(rng, (3, 5))
    return grad_check(lambda t: proj(softmax(t)), Tensor(rng.standard_normal((3, 5))), EPSILON)


def check_weighted_cross_entropy(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    H = penalty_matrix([40, 10, 25, 5])
    return grad_check(lambda t: weighted_cross_entropy(t, labels, H), Tensor(logits), EPSILON)


def check_mse(rng):
    target = Tensor(rng.uniform(-1, 1, (5, 2)))
    return grad_check(lambda t: mse_loss(t, target), Tensor(rng.standard_normal((5, 2))), EPSILON)


def check_block(kind, rng, downsample=True, use_batch_norm=True):
    cfg = BlockConfig(kind, 2, 3 if downsample else 2, downsample, use_batch_norm)
    params, _ = init_block_params(cfg, rng)
    names = list(params)
    x = rng.standard_normal((3, 2, 5, 5))
    out_hw = 3 if downsample else 5
    proj = _projected(rng, (3, cfg.out_channels, out_hw, out_hw))

    def f(ts):
        return proj(breg_block_forward(ts[0], cfg, dict(zip(names, ts[1:])), training=True))

    return grad_check(f, [x] + [params[k] for k in names], EPSILON)


def small_network_config(kind=BypassKind.H3, seed=0):
    """Two blocks (one downsampling), 3 classes, under 500 parameters."""
    return NetworkConfig(stem_channels=2, stages=((1, 2), (1, 4)), bypass=kind, num_classes=3,
                         input_shape=(1, 6, 6), seed=seed)


def check_network(rng, kind=BypassKind.H3):
    net = build_network(small_network_config(kind))
    names = list(net.params)
    x = rng.standard_normal((3, 1, 6, 6))
    labels = rng.integers(0, 3, size=3)
    H = penalty_matrix([5, 3, 2])

    def f(ts):
        logits = net.forward(x, training=True, params=dict(zip(names, ts)))
        return weighted_cross_entropy(logits, labels, H)

    return grad_check(f, [net.params[k].data for k in names], EPSILON)


def run_suite(seed=0):
    """Ordered ``[(name, max relative error), ...]`` for the whole engine."""
    rng = np.random.default_rng(seed)
    rows = [(f"bypass_{k.value}", check_bypass(k, rng)) for k in BypassKind]
    rows += [
        ("conv2d", check_conv2d(rng, 1, 1)),
        ("conv2d_stride2", check_conv2d(rng, 2, 1)),
        ("relu", check_relu(rng)),
        ("batch_norm_train", check_batch_norm(rng, True)),
        ("batch_norm_eval", check_batch_norm(rng, False)),
        ("global_avg_pool", check_global_avg_pool(rng)),
        ("fully_connected", check_fully_connected(rng)),
        ("softmax", check_softmax(rng)),
        ("weighted_cross_entropy", check_weighted_cross_entropy(rng)),
        ("mse_loss", check_mse(rng)),
    ]
    rows += [(f"breg_block_{k.value}", check_block(k, rng)) for k in BypassKind]
    rows.append(("breg_network", check_network(rng)))
    return rows
