"""Float32 tensor kernel: seeded randomness, numeric primitives, and a
reverse-mode autodiff tape.

Tensors are plain numpy arrays, float32 and row-major by default.  Every
public primitive accepts either arrays or ``Node`` objects; if at least one
argument is a Node the operation is recorded on a define-by-run tape so
``backward`` can later accumulate gradients.  Pure-array calls never touch
the tape, which makes inference paths free of autodiff overhead and lets a
single forward implementation serve both training and decoding.

Random streams come from ``Rng``, a thin wrapper over the Philox
counter-based bit generator; identical seeds yield identical streams on
every platform, and labeled substreams are derived by hashing the label
into a fresh key.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

DTYPE = np.float32

# Additive pre-softmax penalty used to disable attention entries.  Large
# enough that exp underflows to exactly 0.0 in float32 after row-max
# subtraction, small enough to stay finite.
NEG_BIG = -1.0e9

# Floor applied to probabilities before taking logs in scoring paths.
PROB_FLOOR = 1.0e-12


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` to a contiguous array of the kernel dtype."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    return arr


# ---------------------------------------------------------------------------
# random streams


class Rng:
    """Deterministic random stream with labeled substream derivation.

    Wraps the Philox counter-based generator keyed by a 64-bit seed.  The
    same seed and call sequence produce the same outputs everywhere.
    ``split`` derives an independent stream from a text label without
    consuming state from the parent, so experiment components can each own
    a reproducible stream hung off one root seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, label: str) -> "Rng":
        digest = hashlib.blake2b(
            label.encode("utf-8") + self.seed.to_bytes(8, "little"),
            digest_size=8,
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    @property
    def state(self):
        return self._gen.bit_generator.state

    def uniform(self, shape=None) -> np.ndarray | float:
        u = self._gen.random(size=shape)
        return u

    def normal(self, shape=None, std: float = 1.0, dtype=DTYPE):
        x = self._gen.standard_normal(size=shape) * std
        return np.asarray(x, dtype=dtype) if shape is not None else dtype(x)

    def gumbel(self, shape=None, dtype=DTYPE):
        """Standard Gumbel noise, -ln(-ln(u)), with u clamped away from {0, 1}."""
        u = np.clip(self._gen.random(size=shape), 1e-12, 1.0 - 1e-12)
        return np.asarray(-np.log(-np.log(u)), dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)


# ---------------------------------------------------------------------------
# autodiff tape


class Node:
    """A value on the autodiff tape.

    ``value`` is a numpy array, ``grad`` accumulates across ``backward``
    calls until reset.  Parents and the local backward closure describe the
    recorded operation.
    """

    __slots__ = ("value", "grad", "parents", "_backward")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


def value_of(x):
    """The plain array behind ``x`` (identity for non-Nodes)."""
    return x.value if isinstance(x, Node) else x


def _any_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _send(grads: dict, parent, g):
    if not isinstance(parent, Node):
        return
    g = _unbroadcast(g, parent.value.shape)
    key = id(parent)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` over the whole tape.

    ``root`` must hold a scalar.  Gradients from repeated calls add up;
    use ``zero_grads`` between optimization steps.
    """
    if not isinstance(root, Node):
        raise InvalidInputError("backward expects a tape Node")
    if np.size(root.value) != 1:
        raise InvalidInputError("backward root must be a scalar")

    # Iterative topological order; graphs can exceed the recursion limit.
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, copy=True)
        else:
            node.grad = node.grad + g
        if node._backward is not None:
            node._backward(g, grads)


def zero_grads(nodes) -> None:
    for n in nodes.values() if isinstance(nodes, dict) else nodes:
        n.grad = None


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    if not _any_node(a, b):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = Node(av + bv, (a, b))

    def bw(g, grads):
        _send(grads, a, g)
        _send(grads, b, g)

    out._backward = bw
    return out


def sub(a, b):
    if not _any_node(a, b):
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    out = Node(av - bv, (a, b))

    def bw(g, grads):
        _send(grads, a, g)
        _send(grads, b, -g)

    out._backward = bw
    return out


def mul(a, b):
    if not _any_node(a, b):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = Node(av * bv, (a, b))

    def bw(g, grads):
        _send(grads, a, g * bv)
        _send(grads, b, g * av)

    out._backward = bw
    return out


def div(a, b):
    if not _any_node(a, b):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = Node(av / bv, (a, b))

    def bw(g, grads):
        _send(grads, a, g / bv)
        _send(grads, b, -g * av / (bv * bv))

    out._backward = bw
    return out


def matmul(a, b):
    if not _any_node(a, b):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = Node(av @ bv, (a, b))

    def bw(g, grads):
        # Promote 1-D operands to matrices so one transpose rule covers
        # numpy's vector matmul conventions, then restore shapes.
        g2 = np.asarray(g)
        av2 = av.reshape(1, -1) if av.ndim == 1 else av
        bv2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(bv2, -1, -2)
        gb = np.swapaxes(av2, -1, -2) @ g2
        _send(grads, a, ga.reshape(av.shape) if av.ndim == 1 else ga)
        _send(grads, b, gb.reshape(bv.shape) if bv.ndim == 1 else gb)

    out._backward = bw
    return out


def exp(x):
    if not _any_node(x):
        return np.exp(x)
    out = Node(np.exp(value_of(x)), (x,))
    ov = out.value

    def bw(g, grads):
        _send(grads, x, g * ov)

    out._backward = bw
    return out


def log(x):
    if not _any_node(x):
        return np.log(x)
    xv = value_of(x)
    out = Node(np.log(xv), (x,))

    def bw(g, grads):
        _send(grads, x, g / xv)

    out._backward = bw
    return out


def sqrt(x):
    if not _any_node(x):
        return np.sqrt(x)
    out = Node(np.sqrt(value_of(x)), (x,))
    ov = out.value

    def bw(g, grads):
        _send(grads, x, g / (2.0 * ov))

    out._backward = bw
    return out


def tanh(x):
    if not _any_node(x):
        return np.tanh(x)
    out = Node(np.tanh(value_of(x)), (x,))
    ov = out.value

    def bw(g, grads):
        _send(grads, x, g * (1.0 - ov * ov))

    out._backward = bw
    return out


def absolute(x):
    if not _any_node(x):
        return np.abs(x)
    xv = value_of(x)
    out = Node(np.abs(xv), (x,))

    def bw(g, grads):
        _send(grads, x, g * np.sign(xv))

    out._backward = bw
    return out


def clip_min(x, floor: float):
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    if not _any_node(x):
        return np.maximum(x, floor)
    xv = value_of(x)
    out = Node(np.maximum(xv, floor), (x,))
    gate = (xv > floor).astype(xv.dtype)

    def bw(g, grads):
        _send(grads, x, g * gate)

    out._backward = bw
    return out


def sum_(x, axis=None, keepdims: bool = False):
    if not _any_node(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xv = value_of(x)
    out = Node(np.sum(xv, axis=axis, keepdims=keepdims), (x,))

    def bw(g, grads):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(grads, x, np.broadcast_to(g, xv.shape))

    out._backward = bw
    return out


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    if axis is None:
        count = xv.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= xv.shape[a]
    return div(sum_(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x, shape):
    if not _any_node(x):
        return np.reshape(x, shape)
    xv = value_of(x)
    out = Node(xv.reshape(shape), (x,))

    def bw(g, grads):
        _send(grads, x, np.asarray(g).reshape(xv.shape))

    out._backward = bw
    return out


def swapaxes(x, a: int, b: int):
    if not _any_node(x):
        return np.swapaxes(x, a, b)
    out = Node(np.swapaxes(value_of(x), a, b), (x,))

    def bw(g, grads):
        _send(grads, x, np.swapaxes(g, a, b))

    out._backward = bw
    return out


def concat(parts: Sequence, axis: int = 0):
    if not _any_node(*parts):
        return np.concatenate(parts, axis=axis)
    values = [value_of(p) for p in parts]
    out = Node(np.concatenate(values, axis=axis), tuple(parts))
    sizes = [v.shape[axis] for v in values]

    def bw(g, grads):
        offset = 0
        for part, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _send(grads, part, g[tuple(sl)])
            offset += n

    out._backward = bw
    return out


def getitem(x, key):
    """Indexing/slicing with scatter-add backward (covers gathers)."""
    if not _any_node(x):
        return np.asarray(x)[key]
    xv = value_of(x)
    out = Node(xv[key], (x,))

    def bw(g, grads):
        full = np.zeros_like(xv)
        np.add.at(full, key, g)
        _send(grads, x, full)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# composite numeric primitives


def softmax(logits, axis: int = -1):
    """Numerically stable softmax along ``axis``.

    Rejects non-finite input.  The row maximum is treated as a constant
    shift, which is exact because softmax is shift invariant.
    """
    lv = value_of(logits)
    if not np.all(np.isfinite(lv)):
        raise InvalidInputError("softmax: input contains non-finite values")
    m = np.max(lv, axis=axis, keepdims=True)
    e = exp(sub(logits, m))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(logits, axis: int = -1):
    lv = value_of(logits)
    if not np.all(np.isfinite(lv)):
        raise InvalidInputError("log_softmax: input contains non-finite values")
    m = np.max(lv, axis=axis, keepdims=True)
    shifted = sub(logits, m)
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def masked_softmax(scores, keep: np.ndarray, axis: int = -1):
    """Softmax with entries where ``keep == 0`` forced to exactly zero.

    Disabled entries get a large negative additive penalty before the
    stabilized softmax, so their exponentials underflow to 0.0 and each
    kept row still normalizes to 1.  ``keep`` is a constant {0,1} array.
    """
    keep = np.asarray(keep)
    penalized = add(mul(scores, keep), (1.0 - keep) * np.asarray(NEG_BIG, dtype=value_of(scores).dtype))
    return softmax(penalized, axis=axis)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Layer normalization over the trailing axis with learned gain/bias."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gain), bias)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    """Gaussian error linear unit (tanh approximation); smooth everywhere."""
    inner = mul(add(x, mul(mul(mul(x, x), x), 0.044715)), _GELU_C)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def gumbel_softmax(logits, tau: float, rng: Rng | None = None, noise=None, axis: int = -1):
    """Gumbel-Softmax relaxation: softmax((logits + g) / tau).

    ``g`` is standard Gumbel noise, g = -ln(-ln(u)).  Pass ``noise`` to pin
    the perturbation (tests use zeros; training freezes one draw per loss
    evaluation).  With zero noise this reduces to softmax(logits / tau).
    """
    if not tau > 0.0:
        raise InvalidConfigError(f"gumbel_softmax: tau must be > 0, got {tau}")
    lv = value_of(logits)
    if noise is None:
        if rng is None:
            noise = np.zeros_like(lv)
        else:
            noise = rng.gumbel(lv.shape, dtype=lv.dtype)
    return softmax(div(add(logits, noise), tau), axis=axis)


# ---------------------------------------------------------------------------
# verification and optimization


def gradcheck(f: Callable, params: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``f`` maps a list of parameter arrays (or Nodes) to a scalar; it must be
    deterministic, with any sampling noise frozen by the caller.  Runs in
    the dtype of ``params`` -- pass float64 copies for meaningful
    comparisons, since float32 function noise swamps the h=1e-3 quotient.
    Relative error per entry is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8).
    """
    params = [np.array(p, copy=True) for p in params]
    nodes = [Node(np.array(p, copy=True)) for p in params]
    loss = f(nodes)
    if not isinstance(loss, Node):
        raise InvalidInputError("gradcheck: f must return a tape Node when given Nodes")
    backward(loss)
    worst = 0.0
    for node, base in zip(nodes, params):
        analytic = node.grad if node.grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(value_of(f(params)))
            flat[i] = orig - h
            fm = float(value_of(f(params)))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


class Adam:
    """Adaptive-moment gradient descent over a dict of parameter Nodes."""

    def __init__(self, params: dict[str, Node], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise InvalidInputError("Adam: empty parameter set")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(n.value) for k, n in params.items()}
        self._v = {k: np.zeros_like(n.value) for k, n in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, node in self.params.items():
            if node.grad is None:
                continue
            g = node.grad
            self._m[k] = b1 * self._m[k] + (1.0 - b1) * g
            self._v[k] = b2 * self._v[k] + (1.0 - b2) * (g * g)
            mhat = self._m[k] / (1.0 - b1 ** self.t)
            vhat = self._v[k] / (1.0 - b2 ** self.t)
            node.value = (node.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(node.value.dtype)

    def zero_grad(self) -> None:
        zero_grads(self.params)
