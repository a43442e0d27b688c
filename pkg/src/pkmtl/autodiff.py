"""Define-by-run reverse-mode autodiff on float64 numpy arrays.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure computing the vector-Jacobian product.  A graph is rebuilt on
every forward pass and torn down by :func:`backward`.

    >>> p = Tensor([1.0, -2.0], requires_grad=True)
    >>> loss = 0.5 * (p * p).sum()
    >>> backward(loss, {"p": p})["p"]
    array([ 1., -2.])
"""

import json
import logging
import struct

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by an optimizer when a gradient contains NaN or inf."""


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def __len__(self):
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return total(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, _parents=parents if needs else (), _vjp=vjp if needs else None, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape} ({a!r}, {b!r})") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def scale_shift(x, scale, shift):
    """``scale * x + shift`` with scalar learnable ``scale`` and ``shift``."""
    scale, shift = as_tensor(scale), as_tensor(shift)
    if scale.data.size != 1 or shift.data.size != 1:
        raise ShapeError(f"scale_shift: scale/shift must be scalars, got {scale.shape} and {shift.shape}")
    s = scale.data.reshape(())

    def vjp(g):
        return g * s, np.sum(g * x.data).reshape(scale.shape), np.sum(g).reshape(shift.shape)

    return _make(s * x.data + shift.data.reshape(()), (x, scale, shift), vjp, "scale_shift")


# ---------------------------------------------------------------- reductions / structure

def total(x):
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x):
    n = x.data.size

    def vjp(g):
        return (np.full(x.shape, g / n),)

    return _make(np.mean(x.data), (x,), vjp, "mean")


def mean_time(x):
    """Mean over axis 1 of a ``(batch, time, channels)`` tensor."""
    if x.ndim != 3:
        raise ShapeError(f"mean_time: expected (B, T, C), got {x.shape}")
    t = x.shape[1]

    def vjp(g):
        return (np.repeat(g[:, None, :] / t, t, axis=1),)

    return _make(x.data.mean(axis=1), (x,), vjp, "mean_time")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    try:
        value = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[x.shape for x in xs]} along axis {axis}: {err}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(value, tuple(xs), vjp, "concat")


def take(x, idx):
    """Basic/advanced indexing with scatter-add backward."""

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp, "take")


def transpose(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- linear maps

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape} ({a!r}, {b!r})")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def affine(x, weight, bias):
    """``x @ weight + bias`` for ``x`` of shape (..., in)."""
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape} "
            f"({weight.name or 'weight'})"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        return (g2 @ weight.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    out = (x2 @ weight.data + bias.data).reshape(*lead, weight.shape[1])
    return _make(out, (x, weight, bias), vjp, "affine")


def conv1d(x, weight, bias, stride=1):
    """Valid 1-D convolution over time.

    Args:
        x: (batch, time, in_channels)
        weight: (kernel, in_channels, out_channels)
        bias: (out_channels,)
        stride: hop between output frames

    Returns:
        Tensor of shape (batch, (time - kernel) // stride + 1, out_channels).
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (B, T, C), got {x.shape}")
    k, cin, cout = weight.shape
    b, t, c = x.shape
    if c != cin or bias.shape != (cout,):
        raise ShapeError(f"conv1d: input channels {c} vs weight {weight.shape} ({weight.name or 'weight'})")
    if t < k:
        raise ShapeError(f"conv1d: sequence length {t} shorter than kernel {k}")
    # (B, T', C, K) -> (B, T', K, C)
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride]
    tout = win.shape[1]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b * tout, k * cin)
    wmat = weight.data.reshape(k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(b, tout, cout)

    def vjp(g):
        g2 = g.reshape(b * tout, cout)
        dw = (cols.T @ g2).reshape(k, cin, cout)
        dcols = (g2 @ wmat.T).reshape(b, tout, k, cin)
        dx = np.zeros_like(x.data)
        span = stride * (tout - 1) + 1
        for j in range(k):
            dx[:, j:j + span:stride] += dcols[:, :, j]
        return dx, dw, g2.sum(axis=0)

    return _make(out, (x, weight, bias), vjp, "conv1d")


# ---------------------------------------------------------------- normalisation / similarity

def l2_normalize(x, axis=-1):
    """Scale to unit L2 norm along ``axis``; all-zero slices map to zero."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        logger.warning("l2_normalize: %d zero-norm slice(s) mapped to zero", int(zero.sum()))
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe)

    def vjp(g):
        dot = np.sum(y * g, axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - y * dot) / safe),)

    return _make(y, (x,), vjp, "l2_normalize")


def cosine_matrix(a, b):
    """Cosine similarity of every row of ``a`` (N, d) with every row of ``b`` (M, d)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def cosine(a, b):
    """Row-wise cosine similarity of two (N, d) tensors; returns (N,)."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine: {a.shape} vs {b.shape}")
    na, nb = l2_normalize(a), l2_normalize(b)
    prod = mul(na, nb)
    if prod.ndim == 1:
        return total(prod)
    return _row_sum(prod)


def _row_sum(x):
    return _make(x.data.sum(axis=-1), (x,), lambda g: (np.repeat(g[..., None], x.shape[-1], axis=-1),), "row_sum")


# ---------------------------------------------------------------- probabilities

def log_softmax(x):
    """Row-wise log-softmax of a (N, C) or (C,) tensor."""
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax")


def softmax(x):
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), vjp, "softmax")


def nll(logp, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under row log-probs.

    ``weights`` (0/1 per row) excludes rows without a label; the mean is over
    included rows.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logp.ndim != 2 or targets.shape != (logp.shape[0],):
        raise ShapeError(f"nll: log-probs {logp.shape} with targets {targets.shape}")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = w.sum()
    if denom == 0:
        return Tensor(0.0)
    rows = np.arange(len(targets))
    safe_t = np.where(w > 0, targets, 0)
    value = -np.sum(w * logp.data[rows, safe_t]) / denom

    def vjp(g):
        out = np.zeros_like(logp.data)
        out[rows, safe_t] = -g * w / denom
        return (out,)

    return _make(value, (logp,), vjp, "nll")


def cross_entropy(logits, targets, weights=None):
    return nll(log_softmax(logits), targets, weights)


# ---------------------------------------------------------------- backward

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Back-propagate from a scalar ``loss``.

    Populates ``.grad`` on every leaf with ``requires_grad``.  If ``params``
    (name -> Tensor) is given, returns name -> gradient array, with zeros for
    parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is None:
        return None
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def zero_grad(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- optimizers

class SGD:
    """Plain gradient descent."""

    def __init__(self, lr=0.1):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.step_count = 0

    def step(self, params, grads):
        _check_grads(params, grads)
        for k, p in params.items():
            p.data = p.data - self.lr * grads[k]
        self.step_count += 1


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, params, grads):
        _check_grads(params, grads)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"lr": self.lr, "step": self.step_count, "m": self.m, "v": self.v}


def _check_grads(params, grads):
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"no gradient for parameter {k!r}")
        g = grads[k]
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {k!r}")


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PKMTLCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, config=None):
    """Write named float64 arrays plus a JSON config to ``path``.

    Layout (all integers little-endian)::

        magic      8 bytes  b"PKMTLCKP"
        version    u32
        cfg_len    u32, then cfg_len bytes of UTF-8 JSON
        n_entries  u32
        per entry: name_len u16, name (UTF-8), ndim u8, ndim x u32 dims,
                   prod(dims) x f64 row-major values
    """
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, config)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(blob[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return arrays, config
