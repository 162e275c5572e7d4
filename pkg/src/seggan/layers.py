"""Differentiable neural-network layers and the small module system they live in.

All spatial ops work on single images in channel-first (C, H, W) layout and
vectors for the fully connected path; batching is the training loop's job.
Convolutions are cross-correlations (no kernel flip).  Output spatial sizes
follow floor((H + 2*pad - k) / stride) + 1, the usual convention; positions a
strided kernel cannot reach are simply not produced and receive no gradient.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Node, constant, forward_record, parameter, reshape
from .tensor import DomainError, ShapeError, Tensor

__all__ = [
    "Module",
    "ModuleList",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "Dropout",
    "DoubleConv",
    "conv2d",
    "max_pool2d",
    "upsample_nearest2x",
    "conv_transpose2d",
    "linear",
    "relu",
    "sigmoid",
    "softmax",
    "dropout",
    "channel_scale",
    "flatten",
    "he_normal",
    "xavier_uniform",
]


# ---------------------------------------------------------------------------
# Weight init
# ---------------------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """He-normal init for layers feeding ReLU."""
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    """Xavier-uniform init for final / sigmoid-facing layers."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape))


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


def relu(x: Node) -> Node:
    mask = x.value.data > 0  # derivative at exactly 0 is 0
    value = Tensor(np.where(mask, x.value.data, 0.0), dtype=x.dtype)
    return forward_record("relu", value, [(x, lambda g: g * mask)])


def _sigmoid_arr(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Node) -> Node:
    s = _sigmoid_arr(x.value.data)
    value = Tensor(s, dtype=x.dtype)
    return forward_record("sigmoid", value, [(x, lambda g: g * s * (1.0 - s))])


def sigmoid_open(x: Node) -> Node:
    """Sigmoid clamped to the open interval (0, 1).

    Float rounding lets a saturated sigmoid return exactly 0.0 or 1.0; outputs
    whose contract is a strict probability (attention coefficients,
    discriminator scores) use this variant, which nudges boundary values to
    the nearest representable interior number.  The gradient keeps the plain
    sigmoid rule: at the clamped points the true slope is below float
    resolution anyway.
    """
    s = _sigmoid_arr(x.value.data)
    tiny = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    below_one = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(s, tiny, below_one)
    value = Tensor(s, dtype=x.dtype)
    return forward_record("sigmoid_open", value, [(x, lambda g: g * s * (1.0 - s))])


def softmax(x: Node, axis: int) -> Node:
    """Shift-stabilized softmax along `axis`."""
    a = x.value.data
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    value = Tensor(y, dtype=x.dtype)

    def rule(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return forward_record("softmax", value, [(x, rule)])


def dropout(x: Node, rate: float, rng: np.random.Generator, training: bool) -> Node:
    """Zero elements with probability `rate`, scaling survivors by 1/(1-rate).

    The sampled mask is captured by the backward rule, so the same mask is
    reused on the way back.  Inference mode returns the input node itself,
    which makes the identity exact.
    """
    if not (0.0 <= rate < 1.0):
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    m = keep.astype(x.dtype.type) * x.dtype.type(scale)
    value = Tensor(x.value.data * m, dtype=x.dtype)
    return forward_record("dropout", value, [(x, lambda g: g * m)])


def _conv_out_size(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"kernel {k} does not fit input {(h, w)} with pad {pad}")
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of one (C_in, H, W) image with (C_out, C_in, k, k) filters."""
    if x.value.ndim != 3:
        raise ShapeError(f"conv2d expects (C, H, W), got {x.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels supported")
    if x.shape[0] != c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[0]}, filters expect {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride/pad ({stride}, {pad})")
    c, h, w = x.shape
    oh, ow = _conv_out_size(h, w, k, stride, pad)

    xp = np.pad(x.value.data, ((0, 0), (pad, pad), (pad, pad)))
    ri = stride * np.arange(oh)[:, None] + np.arange(k)[None, :]  # (oh, k)
    cj = stride * np.arange(ow)[:, None] + np.arange(k)[None, :]  # (ow, k)
    patches = xp[:, ri[:, None, :, None], cj[None, :, None, :]]  # (C, oh, ow, k, k)
    cols = patches.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)
    wmat = weight.value.data.reshape(c_out, c * k * k)
    out = (wmat @ cols + bias.value.data[:, None]).reshape(c_out, oh, ow)

    def rule_x(g):
        d = g.reshape(c_out, oh * ow)
        dcols = wmat.T @ d
        dpatches = dcols.reshape(c, k, k, oh, ow).transpose(0, 3, 4, 1, 2)
        dxp = np.zeros_like(xp)
        ci = np.arange(c)[:, None, None, None, None]
        np.add.at(dxp, (ci, ri[None, :, None, :, None], cj[None, None, :, None, :]), dpatches)
        return dxp[:, pad : pad + h, pad : pad + w]

    def rule_w(g):
        d = g.reshape(c_out, oh * ow)
        return (d @ cols.T).reshape(weight.shape)

    def rule_b(g):
        return g.reshape(c_out, -1).sum(axis=1)

    return forward_record(
        "conv2d",
        Tensor(out, dtype=x.dtype),
        [(x, rule_x), (weight, rule_w), (bias, rule_b)],
    )


def max_pool2d(x: Node) -> Node:
    """2x2 stride-2 max pool; gradient goes to the first maximum in each window."""
    if x.value.ndim != 3:
        raise ShapeError(f"max_pool2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {(h, w)}")
    h2, w2 = h // 2, w // 2
    win = x.value.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        dwin = np.zeros((c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return dwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)

    return forward_record("max_pool2d", Tensor(out, dtype=x.dtype), [(x, rule)])


def upsample_nearest2x(x: Node) -> Node:
    """Replicate every pixel into a 2x2 block."""
    if x.value.ndim != 3:
        raise ShapeError(f"upsample expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    out = x.value.data.repeat(2, axis=1).repeat(2, axis=2)

    def rule(g):
        return g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    return forward_record("upsample_nearest2x", Tensor(out, dtype=x.dtype), [(x, rule)])


def conv_transpose2d(x: Node, weight: Node, bias: Node) -> Node:
    """Learned 2x upsampling: 2x2 stride-2 transposed convolution.

    Kernel and stride match, so each input pixel paints a disjoint 2x2 output
    block; weight layout is (C_in, C_out, 2, 2).
    """
    if x.value.ndim != 3:
        raise ShapeError(f"conv_transpose2d expects (C, H, W), got {x.shape}")
    c_in, c_out, k, k2 = weight.shape
    if (k, k2) != (2, 2):
        raise ShapeError("conv_transpose2d is fixed at 2x2 stride 2")
    if x.shape[0] != c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[0]}, filters expect {c_in}")
    c, h, w = x.shape
    xv, wv = x.value.data, weight.value.data
    t = np.tensordot(wv, xv, axes=([0], [0]))  # (C_out, 2, 2, H, W)
    out = t.transpose(0, 3, 1, 4, 2).reshape(c_out, 2 * h, 2 * w) + bias.value.data[:, None, None]

    def rule_x(g):
        gt = g.reshape(c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3)  # (C_out, 2, 2, H, W)
        return np.tensordot(wv, gt, axes=([1, 2, 3], [0, 1, 2]))

    def rule_w(g):
        gt = g.reshape(c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3)
        return np.tensordot(xv, gt, axes=([1, 2], [3, 4]))

    def rule_b(g):
        return g.sum(axis=(1, 2))

    return forward_record(
        "conv_transpose2d",
        Tensor(out, dtype=x.dtype),
        [(x, rule_x), (weight, rule_w), (bias, rule_b)],
    )


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """W x + b on a 1-D feature vector; weight layout (n_out, n_in)."""
    if x.value.ndim != 1:
        raise ShapeError(f"linear expects a vector, got {x.shape}")
    n_out, n_in = weight.shape
    if x.shape[0] != n_in:
        raise ShapeError(f"length mismatch: input {x.shape[0]}, weight expects {n_in}")
    xv, wv = x.value.data, weight.value.data
    out = wv @ xv + bias.value.data
    return forward_record(
        "linear",
        Tensor(out, dtype=x.dtype),
        [(x, lambda g: wv.T @ g), (weight, lambda g: np.outer(g, xv)), (bias, lambda g: g)],
    )


def channel_scale(x: Node, alpha: Node) -> Node:
    """Multiply every channel of (C, H, W) by a (1, H, W) coefficient map."""
    if alpha.shape != (1,) + tuple(x.shape[1:]):
        raise ShapeError(f"coefficient map {alpha.shape} does not align with {x.shape}")
    xv, av = x.value.data, alpha.value.data
    value = Tensor(xv * av, dtype=x.dtype)
    return forward_record(
        "channel_scale",
        value,
        [(x, lambda g: g * av), (alpha, lambda g: (g * xv).sum(axis=0, keepdims=True))],
    )


def flatten(x: Node) -> Node:
    return reshape(x, (x.value.size,))


# ---------------------------------------------------------------------------
# Module system
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container with deterministic traversal order.

    Assigning a trainable Node or a Module to an attribute registers it;
    `parameters()` walks the tree depth-first in registration order, which
    keeps optimizer state, checkpoints and checksums stable across runs.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Node) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix: str = "") -> list[tuple[str, Node]]:
        out = [(prefix + n, p) for n, p in self._params.items()]
        for n, child in self._children.items():
            out.extend(child.parameters(prefix + n + "."))
        return out

    def param_nodes(self) -> list[Node]:
        return [p for _, p in self.parameters()]

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.param_nodes())

    def set_training(self, flag: bool) -> None:
        object.__setattr__(self, "training", bool(flag))
        for child in self._children.values():
            child.set_training(flag)

    def bind_dropout_rng(self, rng: np.random.Generator) -> None:
        for child in self._children.values():
            child.bind_dropout_rng(rng)

    def load_param_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameters by dotted name; missing or extra names are errors."""
        params = dict(self.parameters())
        if set(params) != set(values):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise KeyError(f"parameter name mismatch: missing={missing}, extra={extra}")
        for name, node in params.items():
            node.value = Tensor(np.asarray(values[name]), dtype=node.dtype)


class ModuleList(Module):
    """Sequence of child modules registered under their indices."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, init="he"):
        super().__init__()
        self.stride, self.pad = stride, pad
        fan_in = c_in * k * k
        if init == "he":
            w = he_normal(rng, (c_out, c_in, k, k), fan_in)
        else:
            w = xavier_uniform(rng, (c_out, c_in, k, k), fan_in, c_out * k * k)
        self.weight = parameter(w, "weight")
        self.bias = parameter(Tensor(np.zeros(c_out)), "bias")

    def __call__(self, x: Node) -> Node:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.weight = parameter(he_normal(rng, (c_in, c_out, 2, 2), c_in * 4), "weight")
        self.bias = parameter(Tensor(np.zeros(c_out)), "bias")

    def __call__(self, x: Node) -> Node:
        return conv_transpose2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, init="he"):
        super().__init__()
        if init == "he":
            w = he_normal(rng, (n_out, n_in), n_in)
        else:
            w = xavier_uniform(rng, (n_out, n_in), n_in, n_out)
        self.weight = parameter(w, "weight")
        self.bias = parameter(Tensor(np.zeros(n_out)), "bias")

    def __call__(self, x: Node) -> Node:
        return linear(x, self.weight, self.bias)


class Dropout(Module):
    """Dropout layer whose generator is bound once by the owning trainer."""

    def __init__(self, rate: float):
        super().__init__()
        if not (0.0 <= rate < 1.0):
            raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = None

    def bind_dropout_rng(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def __call__(self, x: Node) -> Node:
        if not self.training or self.rate == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("dropout used in training mode without a bound rng")
        return dropout(x, self.rate, self.rng, training=True)


class DoubleConv(Module):
    """conv-relu-conv-relu block: the first conv moves channels, the second keeps them."""

    def __init__(self, c_in, c_out, rng, k=3, pad=1):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, k, rng, pad=pad)
        self.conv2 = Conv2d(c_out, c_out, k, rng, pad=pad)

    def __call__(self, x: Node) -> Node:
        return relu(self.conv2(relu(self.conv1(x))))
