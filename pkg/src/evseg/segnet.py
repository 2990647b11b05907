"""Tiny per-pixel convolutional classifier with analytic forward/backward.

Architecture: 3x3 conv -> ReLU -> 3x3 conv -> ReLU -> 1x1 head, all with
same padding, float64 throughout. The post-ReLU output of the second conv
is the feature map used for prototype alignment; the head maps it to
per-class logits. Backward passes are exact, which the finite-difference
suite relies on.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numeric import ShapeError

CHECKPOINT_MAGIC = b"SEGC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has the wrong version."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint config differs from the expected one."""


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int
    hidden_channels: int
    num_classes: int
    kernel_size: int = 3
    seed: int = 0

    def validate(self):
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are supported")


@dataclass
class SegNetParams:
    """All network weights. ``head_w`` is the 1x1 head as a (K, D) matrix."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def tensors(self):
        """Parameters in a fixed order, as (name, array) pairs."""
        return [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]

    def copy(self):
        return SegNetParams(**{name: arr.copy() for name, arr in self.tensors()})

    def to_vector(self):
        return np.concatenate([arr.ravel() for _, arr in self.tensors()])

    def from_vector(self, vec):
        """New params with this one's shapes and ``vec``'s values."""
        out = {}
        offset = 0
        for name, arr in self.tensors():
            size = arr.size
            out[name] = vec[offset : offset + size].reshape(arr.shape).copy()
            offset += size
        if offset != vec.size:
            raise ShapeError("vector length does not match parameter count")
        return SegNetParams(**out)

    def allfinite(self):
        return all(np.isfinite(arr).all() for _, arr in self.tensors())


@dataclass
class SegNetGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def tensors(self):
        return [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]

    def to_vector(self):
        return np.concatenate([arr.ravel() for _, arr in self.tensors()])

    @classmethod
    def zeros_like(cls, params: SegNetParams):
        return cls(**{name: np.zeros_like(arr) for name, arr in params.tensors()})

    def add_(self, other, scale=1.0):
        for (_, mine), (_, theirs) in zip(self.tensors(), other.tensors()):
            mine += scale * theirs
        return self


@dataclass
class ForwardTrace:
    """Intermediate maps kept for the backward pass."""

    input: np.ndarray
    pre1: np.ndarray
    post1: np.ndarray
    pre2: np.ndarray
    features: np.ndarray  # post-ReLU conv2 output, the head input
    logits: np.ndarray


def init_params(config: SegNetConfig) -> SegNetParams:
    """Seeded uniform init scaled by 1/sqrt(fan-in); biases zero."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    c, d, k = config.in_channels, config.hidden_channels, config.num_classes

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return SegNetParams(
        w1=uniform((d, c, 3, 3), c * 9),
        b1=np.zeros(d),
        w2=uniform((d, d, 3, 3), d * 9),
        b2=np.zeros(d),
        head_w=uniform((k, d), d),
        head_b=np.zeros(k),
    )


def _im2col(x):
    """(C, H, W) -> (C*9, H*W) patch matrix for a 3x3 same-padding conv."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    padded[:, 1 : h + 1, 1 : w + 1] = x
    cols = np.empty((c, 9, h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            cols[:, i * 3 + j] = padded[:, i : i + h, j : j + w]
    return cols.reshape(c * 9, h * w)


def _conv3x3(x, weight, bias):
    d = weight.shape[0]
    _, h, w = x.shape
    out = weight.reshape(d, -1) @ _im2col(x)
    return out.reshape(d, h, w) + bias[:, None, None]


def _conv3x3_backward(x, weight, dout, need_dx=True):
    d = weight.shape[0]
    c, h, w = x.shape
    cols = _im2col(x)
    dout_flat = dout.reshape(d, -1)
    dweight = (dout_flat @ cols.T).reshape(weight.shape)
    dbias = dout.sum(axis=(1, 2))
    if not need_dx:
        return dweight, dbias, None
    dcols = (weight.reshape(d, -1).T @ dout_flat).reshape(c, 9, h, w)
    dpadded = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            dpadded[:, i : i + h, j : j + w] += dcols[:, i * 3 + j]
    return dweight, dbias, dpadded[:, 1 : h + 1, 1 : w + 1]


def forward(params: SegNetParams, x) -> ForwardTrace:
    """Run the network on a (C, H, W) input; never mutates params."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != params.w1.shape[1]:
        raise ShapeError(
            f"expected input with {params.w1.shape[1]} channels, got shape {x.shape}"
        )
    pre1 = _conv3x3(x, params.w1, params.b1)
    post1 = np.maximum(pre1, 0.0)
    pre2 = _conv3x3(post1, params.w2, params.b2)
    features = np.maximum(pre2, 0.0)
    logits = np.tensordot(params.head_w, features, axes=(1, 0)) + params.head_b[
        :, None, None
    ]
    return ForwardTrace(
        input=x, pre1=pre1, post1=post1, pre2=pre2, features=features, logits=logits
    )


def backward(trace: ForwardTrace, params: SegNetParams, dlogits, dfeatures=None):
    """Exact parameter gradients for upstream dL/dlogits and optional dL/dfeatures.

    The feature path exists because alignment losses differentiate through
    the head input directly, bypassing the logits.
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape:
        raise ShapeError("dlogits shape does not match trace logits")
    k = dlogits.shape[0]
    dhead_w = np.tensordot(dlogits, trace.features, axes=((1, 2), (1, 2)))
    dhead_b = dlogits.sum(axis=(1, 2))
    dfeat = np.tensordot(params.head_w, dlogits.reshape(k, -1), axes=(0, 0)).reshape(
        trace.features.shape
    )
    if dfeatures is not None:
        dfeatures = np.asarray(dfeatures, dtype=np.float64)
        if dfeatures.shape != trace.features.shape:
            raise ShapeError("dfeatures shape does not match trace features")
        dfeat = dfeat + dfeatures
    dpre2 = dfeat * (trace.pre2 > 0.0)
    dw2, db2, dpost1 = _conv3x3_backward(trace.post1, params.w2, dpre2)
    dpre1 = dpost1 * (trace.pre1 > 0.0)
    dw1, db1, _ = _conv3x3_backward(trace.input, params.w1, dpre1, need_dx=False)
    return SegNetGrads(w1=dw1, b1=db1, w2=dw2, b2=db2, head_w=dhead_w, head_b=dhead_b)


@dataclass
class AdamWState:
    """First/second moment estimates plus the step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(
    params: SegNetParams,
    grads: SegNetGrads,
    state: AdamWState,
    lr: float = 6e-5,
    weight_decay: float = 1e-4,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
):
    """Decoupled-weight-decay adaptive update, in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    state.step += 1
    t = state.step
    grad_map = dict(grads.tensors())
    for name, p in params.tensors():
        g = grad_map[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def ema_update(teacher: SegNetParams, student: SegNetParams, decay: float):
    """teacher <- decay*teacher + (1-decay)*student, tensor by tensor."""
    from .numeric import ema_blend

    for (_, t_arr), (_, s_arr) in zip(teacher.tensors(), student.tensors()):
        t_arr[...] = ema_blend(t_arr, s_arr, decay)
    return teacher


def _config_dict(config: SegNetConfig):
    return {
        "in_channels": config.in_channels,
        "hidden_channels": config.hidden_channels,
        "num_classes": config.num_classes,
        "kernel_size": config.kernel_size,
        "seed": config.seed,
    }


def save_checkpoint(config: SegNetConfig, params: SegNetParams, path):
    header = json.dumps(_config_dict(config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in params.tensors():
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect: SegNetConfig | None = None):
    """Read a checkpoint; returns (config, params).

    Raises CheckpointError on structural damage and ConfigMismatchError when
    ``expect`` is given and differs from the stored config.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(blob) < 12 or view[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    if len(blob) < offset + header_len:
        raise CheckpointError("truncated config header")
    try:
        cfg_dict = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        config = SegNetConfig(**cfg_dict)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"unreadable config header: {exc}") from None
    offset += header_len
    arrays = []
    names = ["w1", "b1", "w2", "b2", "head_w", "head_b"]
    for name in names:
        if len(blob) < offset + 4:
            raise CheckpointError(f"truncated while reading rank of {name}")
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if rank > 4:
            raise CheckpointError(f"implausible rank {rank} for {name}")
        if len(blob) < offset + 4 * rank:
            raise CheckpointError(f"truncated while reading shape of {name}")
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"truncated while reading data of {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(
            shape
        )
        arrays.append(arr.astype(np.float64))
        offset += nbytes
    params = SegNetParams(*arrays)
    if expect is not None and _config_dict(expect) != _config_dict(config):
        raise ConfigMismatchError(
            f"checkpoint config {_config_dict(config)} != expected {_config_dict(expect)}"
        )
    return config, params
