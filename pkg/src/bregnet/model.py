"""BReG residual blocks and the network builder.

A block computes ``relu(H(x) + F(x))`` where ``H`` is a bounded-gradient
bypass function and ``F`` is conv3x3-[BN]-ReLU-conv3x3-[BN].  In a
downsampling block the first conv of ``F`` has stride 2 and the bypass
output is brought to the new shape by a 1x1 stride-2 projection.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .bypass import DEFAULT_BYPASS, BypassKind, bypass_apply
from .errors import BuildError, ContractError, DataFormatError
from .layers import BatchNorm2d, Conv2d, Linear, global_avg_pool

CLASSIFICATION = "classification"
REGRESSION = "regression"
HEADS = (CLASSIFICATION, REGRESSION)

CHECKPOINT_MAGIC = b"BREG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockConfig:
    bypass: BypassKind = DEFAULT_BYPASS
    in_channels: int = 16
    out_channels: int = 16
    downsample: bool = False
    use_batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bypass", BypassKind.parse(self.bypass))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("block channel counts must be positive")
        if self.downsample and self.out_channels < self.in_channels:
            raise ContractError("a downsampling block cannot reduce the channel count")


@dataclass(frozen=True)
class NetworkConfig:
    stem_channels: int = 16
    stages: tuple = ((3, 16), (3, 32), (3, 64))
    bypass: BypassKind = DEFAULT_BYPASS
    head: str = CLASSIFICATION
    num_classes: int = 7
    input_shape: tuple = (1, 48, 48)
    use_batch_norm: bool = True
    seed: int = 0
    stem_convs: int = 1
    standardize_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bypass", BypassKind.parse(self.bypass))
        object.__setattr__(self, "stages", tuple((int(b), int(c)) for b, c in self.stages))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == CLASSIFICATION and self.num_classes < 2:
            raise ContractError("classification head needs at least 2 classes")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ContractError(f"input_shape must be [channels, height, width], got {list(self.input_shape)}")
        if self.stem_channels < 1 or self.stem_convs < 1:
            raise ContractError("stem needs at least one conv with at least one channel")
        if not self.stages:
            raise ContractError("at least one stage is required")
        for i, (blocks, ch) in enumerate(self.stages):
            if blocks < 1 or ch < 1:
                raise ContractError(f"stage {i}: block count and channels must be positive")
        widths = [c for _, c in self.stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ContractError(f"stage channel counts must be non-decreasing, got {widths}")
        if self.seed < 0:
            raise ContractError("seed must be non-negative")

    @property
    def output_dim(self):
        return self.num_classes if self.head == CLASSIFICATION else 2

    def to_dict(self):
        d = asdict(self)
        d["bypass"] = self.bypass.value
        d["stages"] = [list(s) for s in self.stages]
        d["input_shape"] = list(self.input_shape)
        if self.head == REGRESSION:
            d["num_classes"] = 2
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Desk-scale default and the 39-weighted-layer reference configuration.
DESK_DEFAULT = NetworkConfig()
BREG_NET_39 = NetworkConfig(stem_channels=47, stem_convs=2,
                            stages=((6, 47), (6, 94), (6, 188)))


class BRegBlock:
    def __init__(self, name, cfg):
        self.name = name
        self.cfg = cfg
        p = f"{name}." if name else ""
        stride = 2 if cfg.downsample else 1
        cin, cout = cfg.in_channels, cfg.out_channels
        self.conv1 = Conv2d(p + "conv1", cin, cout, 3, stride=stride, padding=1)
        self.conv2 = Conv2d(p + "conv2", cout, cout, 3, stride=1, padding=1)
        self.bn1 = BatchNorm2d(p + "bn1", cout) if cfg.use_batch_norm else None
        self.bn2 = BatchNorm2d(p + "bn2", cout) if cfg.use_batch_norm else None
        self.proj = None
        if cfg.downsample or cin != cout:
            self.proj = Conv2d(p + "proj", cin, cout, 1, stride=stride, padding=0)

    @property
    def layers(self):
        return [l for l in (self.conv1, self.bn1, self.conv2, self.bn2, self.proj) if l is not None]

    @property
    def weighted_depth(self):
        # projection shortcuts are not counted, as in ResNet-N naming
        return 2

    def output_hw(self, h, w):
        return self.conv1.output_hw(h, w)

    def __call__(self, x, params, buffers, training=False):
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(
                f"block {self.name or '<anon>'}: expected {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        shortcut = bypass_apply(self.cfg.bypass, x)
        if self.proj is not None:
            shortcut = self.proj(shortcut, params)
        f = self.conv1(x, params)
        if self.bn1 is not None:
            f = self.bn1(f, params, buffers, training)
        f = ad.relu(f)
        f = self.conv2(f, params)
        if self.bn2 is not None:
            f = self.bn2(f, params, buffers, training)
        return ad.relu(shortcut + f)


def breg_block_forward(x, cfg, params, buffers=None, training=False):
    """One block with unprefixed parameter names (``conv1.weight``, ...)."""
    block = BRegBlock("", cfg)
    if buffers is None:
        buffers = {}
        for layer in block.layers:
            buffers.update(layer.init_buffers())
    return block(ad.as_tensor(x), params, buffers, training)


def init_block_params(cfg, rng):
    params, buffers = {}, {}
    for layer in BRegBlock("", cfg).layers:
        params.update(layer.init(rng))
        buffers.update(layer.init_buffers())
    return params, buffers


class _Stem:
    def __init__(self, cfg):
        self.units = []
        cin = cfg.input_shape[0]
        for i in range(cfg.stem_convs):
            name = "stem" if cfg.stem_convs == 1 else f"stem{i}"
            conv = Conv2d(f"{name}.conv", cin, cfg.stem_channels, 3, padding=1)
            bn = BatchNorm2d(f"{name}.bn", cfg.stem_channels) if cfg.use_batch_norm else None
            self.units.append((conv, bn))
            cin = cfg.stem_channels
        self.weighted_depth = cfg.stem_convs

    @property
    def layers(self):
        return [l for unit in self.units for l in unit if l is not None]

    def __call__(self, x, params, buffers, training=False):
        for conv, bn in self.units:
            x = conv(x, params)
            if bn is not None:
                x = bn(x, params, buffers, training)
            x = ad.relu(x)
        return x


class Network:
    """Built network: an ordered module list plus its parameters.

    ``params`` maps names to trainable Tensors; ``buffers`` maps names to the
    batch-norm running statistics.  Both are replaced wholesale by training.
    """

    def __init__(self, config, modules, params, buffers):
        self.config = config
        self.modules = modules
        self.params = params
        self.buffers = buffers

    @property
    def stem(self):
        return self.modules[0]

    @property
    def blocks(self):
        return self.modules[1:-1]

    @property
    def head(self):
        return self.modules[-1]

    @property
    def layers(self):
        out = []
        for m in self.modules:
            out.extend(m.layers if hasattr(m, "layers") else [m])
        return out

    @property
    def depth(self):
        """Weighted layers: stem convs + two per block + the dense head."""
        return self.stem.weighted_depth + sum(b.weighted_depth for b in self.blocks) + 1

    def forward(self, x, training=False, params=None):
        x = ad.as_tensor(x)
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ContractError(f"input batch must have shape [n, {', '.join(map(str, expected))}], got {list(x.shape)}")
        params = self.params if params is None else {**self.params, **params}
        if self.config.standardize_input:
            shape = (1, -1, 1, 1)
            x = (x - self.buffers["input.mean"].reshape(shape)) * (1.0 / self.buffers["input.std"].reshape(shape))
        h = self.stem(x, params, self.buffers, training)
        for block in self.blocks:
            h = block(h, params, self.buffers, training)
        return self.head(global_avg_pool(h), params)

    __call__ = forward

    def state_arrays(self):
        """All named arrays (parameters then buffers) in a stable order."""
        out = {k: self.params[k].data for k in self.params}
        out.update(self.buffers)
        return out


def build_network(cfg):
    if not isinstance(cfg, NetworkConfig):
        raise ContractError("build_network expects a NetworkConfig")
    stem = _Stem(cfg)
    modules = [stem]
    _, h, w = cfg.input_shape
    cin = cfg.stem_channels
    for s, (n_blocks, ch) in enumerate(cfg.stages):
        for b in range(n_blocks):
            downsample = s > 0 and b == 0
            if downsample and (h < 2 or w < 2):
                raise BuildError(
                    f"stage {s}: input of {h}x{w} is too small to downsample "
                    f"(input shape {list(cfg.input_shape)})"
                )
            bcfg = BlockConfig(cfg.bypass, cin, ch, downsample, cfg.use_batch_norm)
            block = BRegBlock(f"stage{s}.block{b}", bcfg)
            h, w = block.output_hw(h, w)
            modules.append(block)
            cin = ch
    modules.append(Linear("head", cin, cfg.output_dim))

    rng = np.random.default_rng(cfg.seed)
    params, buffers = {}, {}
    net = Network(cfg, modules, {}, {})
    for layer in net.layers:
        for name, arr in layer.init(rng).items():
            params[name] = Tensor(arr)
        buffers.update(layer.init_buffers())
    if cfg.standardize_input:
        c = cfg.input_shape[0]
        buffers["input.mean"], buffers["input.std"] = np.zeros(c), np.ones(c)
    net.params, net.buffers = params, buffers
    return net


def count_parameters(net):
    """Trainable element count; running statistics are excluded."""
    return int(sum(t.size for t in net.params.values()))


def predict(net, batch):
    """Inference-mode forward pass returning logits or raw regression values."""
    batch = ad.as_tensor(batch)
    with no_grad():
        return net.forward(batch, training=False)


def clamp_dimensional(values):
    """Evaluation-time clamp of valence/arousal predictions to [-1, 1]."""
    return np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)


# ---------------------------------------------------------------- checkpoint
#
# "BREG" | u32 version | u32 n | n bytes UTF-8 JSON config
# then until EOF, per array:
#   u32 name_len | name | u32 rank | rank x u64 extents | prod(extents) x f64
# All integers and floats little-endian.

def save_checkpoint(net, path):
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for name, arr in net.state_arrays().items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError("truncated checkpoint", path=path)
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise DataFormatError("not a BREG checkpoint (bad magic)", path=path)
    version, n = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", path=path)
    try:
        cfg = NetworkConfig.from_dict(json.loads(bytes(take(n)).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"bad config echo: {exc}", path=path) from None
    net = build_network(cfg)
    seen = set()
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name in net.params:
            target = net.params[name].shape
        elif name in net.buffers:
            target = net.buffers[name].shape
        else:
            raise DataFormatError(f"unknown array {name!r} in checkpoint", path=path)
        if tuple(shape) != tuple(target):
            raise DataFormatError(f"{name}: shape {list(shape)} != expected {list(target)}", path=path)
        if name in net.params:
            net.params[name] = Tensor(arr)
        else:
            net.buffers[name] = arr
        seen.add(name)
    missing = (set(net.params) | set(net.buffers)) - seen
    if missing:
        raise DataFormatError(f"checkpoint lacks arrays: {sorted(missing)}", path=path)
    return net
