"""Dense tensors with reverse-mode differentiation on top of numpy.

Every value is float64. A :class:`Tensor` records the operation that produced
it together with a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and accumulates gradients into leaves created with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, DimensionError, DomainError

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._consumed = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward_fn, op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output):
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The output must be a scalar and each graph may be differentiated once.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output._consumed:
        raise ContractError("backward already ran on this output; rebuild the graph first")
    if not output.requires_grad:
        return
    output._consumed = True
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(_topological_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    exponent = float(exponent)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a):
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- structural


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a, axis):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (a,), back, "max")


def take(a, index):
    """Gather along the first axis with an integer index array (any shape)."""
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ContractError("take expects integer indices")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ContractError(f"index out of range for axis of size {a.shape[0]}")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), back, "take")


def take_along_rows(a, index):
    """Per-row column gather: ``out[i, j] = a[i, index[i, j]]``."""
    index = np.asarray(index)
    if a.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"take_along_rows: {a.shape} with index {index.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        rows = np.broadcast_to(np.arange(a.shape[0])[:, None], index.shape)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _result(np.take_along_axis(a.data, index, axis=1), (a,), back, "take_rows")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------- reductions


def softmax(a, axis=-1):
    """Softmax along ``axis``, stabilised by subtracting the max."""
    if a.data.size == 0:
        raise DomainError("softmax of an empty tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def softmax_rows(m):
    if m.ndim != 2 or m.data.size == 0:
        raise DomainError(f"softmax_rows needs a non-empty matrix, got shape {m.shape}")
    return softmax(m, axis=1)


def logsumexp(a, axis=-1):
    mx = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    w = e / s
    return _result(out, (a,), lambda g: (np.expand_dims(g, axis) * w,), "logsumexp")


def norm_rows(a, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at zero is taken as zero."""
    out = np.sqrt((a.data ** 2).sum(axis=axis))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return _result(out, (a,), back, "norm")


def layer_norm(x, gain, shift, eps=1e-5):
    """Normalise over the last axis, then apply a learned gain and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, axis=-1, keepdims=True)
    return centred / sqrt(var + eps) * gain + shift


# ---------------------------------------------------------------- parameters


def parameter(shape, rng, scale=None):
    """Gaussian-initialised trainable tensor; default scale is 1/sqrt(fan_in)."""
    shape = tuple(shape)
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def constant(value, shape):
    return Tensor(np.full(shape, float(value)), requires_grad=True)


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    norm: str = "none"
    gain: Tensor | None = None
    shift: Tensor | None = None

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("layer_norm", "none"):
            raise ConfigError(f"unknown normalization {self.norm!r}")
        if self.norm == "layer_norm" and (self.gain is None or self.shift is None):
            raise ConfigError("layer_norm layer needs gain and shift")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def named_parameters(self, prefix):
        out = {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}
        if self.norm == "layer_norm":
            out[f"{prefix}gain"] = self.gain
            out[f"{prefix}shift"] = self.shift
        return out


@dataclass
class MlpParams:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def named_parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}."))
        return out


def init_mlp(dims, rng, activation="relu", norm="none", final_activation=None, final_norm=None,
             scale=1.0):
    """Build an MLP with widths ``dims[0] -> dims[1] -> ...``.

    Hidden layers use ``activation``/``norm``; the last layer uses the
    ``final_*`` overrides when given.
    """
    if len(dims) < 2:
        raise ConfigError("init_mlp needs at least input and output widths")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        act = final_activation if (last and final_activation is not None) else activation
        nrm = final_norm if (last and final_norm is not None) else norm
        layers.append(Layer(
            weight=parameter((d_in, d_out), rng, scale * np.sqrt(2.0 / d_in)),
            bias=constant(0.0, (d_out,)),
            activation=act,
            norm=nrm,
            gain=constant(1.0, (d_out,)) if nrm == "layer_norm" else None,
            shift=constant(0.0, (d_out,)) if nrm == "layer_norm" else None,
        ))
    return MlpParams(layers)


def mlp_forward(x, p):
    """Apply ``p`` row-wise to ``x`` (shape ``n x d_in``)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise DimensionError(f"MLP expects {p.in_dim} input columns, got shape {x.shape}")
    for layer in p.layers:
        x = x @ layer.weight + layer.bias
        if layer.norm == "layer_norm":
            x = layer_norm(x, layer.gain, layer.shift)
        if layer.activation == "relu":
            x = relu(x)
    return x


# ---------------------------------------------------------------- optimisation


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


def sgd_step(params, lr):
    """In-place ``p <- p - lr * grad``; gradients are zeroed afterwards."""
    if lr < 0 or not np.isfinite(lr):
        raise DomainError(f"learning rate must be a non-negative finite number, got {lr}")
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = np.zeros_like(p.data)
    return params


def gradcheck(fn, inputs, h=1e-5, floor=1e-3):
    """Compare analytic and central-difference gradients of a scalar ``fn``.

    ``fn`` receives the list of input tensors and returns a scalar tensor.
    Returns the worst relative error over all input entries, where each
    entry's error is divided by ``max(|analytic|, |numeric|, floor * scale)``
    and ``scale`` is the largest gradient magnitude over all inputs. The
    floor keeps entries whose true gradient is zero from dividing rounding
    noise by rounding noise.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = fn(inputs)
    backward(out)
    pairs = []
    for t in inputs:
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = float(fn(inputs).data)
            flat[i] = orig - h
            with no_grad():
                down = float(fn(inputs).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        pairs.append((analytic, numeric))
    scale = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    worst = 0.0
    for analytic, numeric in pairs:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, 1e-12))
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max(initial=0.0)))
    return worst


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"VCRCKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, meta=None):
    """Write ``{name: array}`` as a flat little-endian float64 archive.

    Layout: magic, u32 version, u32 metadata length, UTF-8 JSON metadata,
    u32 entry count, then per entry: u32 name length, name, u32 ndim,
    u64 dims, raw ``<f8`` values.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read an archive written by :func:`save_checkpoint`; returns ``(params, meta)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint {path} at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, meta_len = struct.unpack("<II", read(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    meta = json.loads(read(meta_len).decode())
    (count,) = struct.unpack("<I", read(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4))
        name = read(name_len).decode()
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path} at byte {pos}")
    return params, meta


def assign_parameters(targets, values, strict=True):
    """Copy arrays from ``values`` into the tensors of ``targets`` (both name-keyed)."""
    if strict:
        missing = sorted(set(targets) - set(values))
        extra = sorted(set(values) - set(targets))
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, tensor in targets.items():
        if name not in values:
            continue
        if values[name].shape != tensor.shape:
            raise CheckpointError(f"{name}: checkpoint shape {values[name].shape} != model shape {tensor.shape}")
        tensor.data = values[name].copy()
