"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a float64 numpy array. Operations on tensors that require
gradients record their parents and a backward closure; `backward(loss)` walks
the recorded graph in reverse topological order and accumulates gradients.
Inside `no_grad()` nothing is recorded; inference runs there.

Besides the element-wise basics this module carries the fused kernels the
transformer needs (masked softmax, layer norm, label-smoothed cross entropy),
sinusoidal positional encodings, and the Adam optimizer.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, EmptyLossError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

# Additive logit for hidden attention cells.
MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-5

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Within the block, operations record no parents and no backward closures (per thread)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A float64 array node in a reverse-mode autodiff graph."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        """
        Initialize a tensor.

        Args:
            data: array-like values (copied)
            requires_grad: whether gradients should be accumulated into `grad`
            name: optional label used in error messages (parameter name)
        """
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] = _noop

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"]) -> "Tensor":
        """Wrap a freshly computed array without copying it."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = _noop
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    # --- operators ---
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, scalar: float) -> "Tensor":
        return mul(self, 1.0 / scalar)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)


def _noop():
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, target_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `target_shape`."""
    if g.shape == target_shape:
        return g
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, target_shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------
# Element-wise and shape ops
# ------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data + b.data, (a, b))

    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor._result(-a.data, (a,))

    if out.requires_grad:
        def _bw():
            a._accumulate(-out.grad)
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data * b.data, (a, b))

    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with numpy broadcasting over leading (batch) dimensions.

    Args:
        a: tensor of shape [..., m, k]
        b: tensor of shape [..., k, n]

    Returns:
        tensor of shape [..., m, n]; gradient flows to both operands

    Raises:
        ShapeError: when the inner dimensions disagree
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor._result(np.matmul(a.data, b.data), (a, b))

    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
                b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._result(a.data.reshape(shape), (a,))

    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    out = Tensor._result(np.transpose(a.data, axes), (a,))

    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _bw():
            a._accumulate(np.transpose(out.grad, inverse))
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,))

    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    out = Tensor._result(np.where(positive, a.data, 0.0), (a,))

    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * positive)
        out._backward = _bw
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` for integer `ids` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor._result(weight.data[ids], (weight,))

    if out.requires_grad:
        def _bw():
            g = np.zeros_like(weight.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, weight.shape[-1]))
            weight._accumulate(g)
        out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity outside training or when rate is 0."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ------------------------------
# Fused kernels
# ------------------------------

def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis with hidden cells forced to probability 0.

    Hidden logits get MASK_VALUE added before normalization, so in float64
    their probability underflows to exactly 0.

    Args:
        scores: tensor [..., L_q, L_k]
        mask: boolean array broadcastable to scores, True = visible

    Returns:
        probabilities with the same shape as scores

    Raises:
        ShapeError: mask does not match the trailing score dimensions
        ConfigError: a row has no visible column
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != scores.shape[-2:]:
        raise ShapeError(f"masked_softmax: mask {mask.shape} does not fit scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise ConfigError("masked_softmax: attention mask has a fully hidden row")

    logits = scores.data + np.where(mask, 0.0, MASK_VALUE)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._result(probs, (scores,))

    if out.requires_grad:
        def _bw():
            g = out.grad
            inner = (g * probs).sum(axis=-1, keepdims=True)
            scores._accumulate(_unbroadcast(probs * (g - inner), scores.shape))
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor._result(xhat * gain.data + bias.data, (x, gain, bias))

    if out.requires_grad:
        def _bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=lead))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=lead))
            if x.requires_grad:
                dxhat = g * gain.data
                dx = inv * (dxhat
                            - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
                x._accumulate(dx)
        out._backward = _bw
    return out


def cross_entropy_label_smoothed(logits: Tensor, targets: np.ndarray, smoothing: float,
                                 ignore_mask: np.ndarray) -> Tensor:
    """
    Mean label-smoothed negative log-likelihood over non-ignored positions.

    The smoothed target distribution puts (1 - smoothing) on the gold token
    and smoothing / V on every token.

    Args:
        logits: tensor [T, V]
        targets: integer ids [T] (values at ignored positions are not read)
        smoothing: label smoothing rate in [0, 1)
        ignore_mask: boolean [T], True for positions excluded from the loss

    Returns:
        scalar tensor; gradient at ignored positions is exactly zero

    Raises:
        EmptyLossError: every position is ignored
        ShapeError: targets/ignore_mask do not match logits
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects [T, V] logits, got {logits.shape}")
    T, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    active = ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
    if targets.shape[0] != T or active.shape[0] != T:
        raise ShapeError(f"cross entropy: {T} logit rows but {targets.shape[0]} targets")
    n = int(active.sum())
    if n == 0:
        raise EmptyLossError("cross entropy: every position is ignored")
    safe = np.where(active, targets, 0)
    if ((safe < 0) | (safe >= V)).any():
        raise ShapeError(f"cross entropy: target id outside [0, {V})")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    q = np.full((T, V), smoothing / V)
    q[np.arange(T), safe] += 1.0 - smoothing
    per_position = -(q * log_probs).sum(axis=-1)
    loss = per_position[active].sum() / n
    out = Tensor._result(np.asarray(loss), (logits,))

    if out.requires_grad:
        def _bw():
            g = (np.exp(log_probs) - q) * (active[:, None] / n)
            logits._accumulate(g * out.grad)
        out._backward = _bw
    return out


def sinusoidal_positions(offset: int, count: int, d: int) -> Tensor:
    """
    Sin/cos encodings for absolute positions offset .. offset+count-1.

    Even dimensions hold sin(p / 10000^(2i/d)), odd ones the matching cos.

    Raises:
        ConfigError: d is odd
    """
    if d % 2 != 0:
        raise ConfigError(f"positional encoding dimension must be even, got {d}")
    positions = np.arange(offset, offset + count, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    angles = positions * freqs
    pe = np.empty((count, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)


# ------------------------------
# Backward pass
# ------------------------------

def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None):
    """
    Accumulate d(loss)/d(t) into `t.grad` for every tensor on the graph.

    Args:
        loss: scalar tensor produced by recorded operations
        params: optional tensors whose `grad` should exist afterwards even when
                they are not on a path to the loss (they get zeros)

    Raises:
        ShapeError: loss is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    # Iterative topological sort; recursion would be deep for long graphs.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if node._parents and node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is not None:
            node._backward()


# ------------------------------
# Optimizer
# ------------------------------

@dataclass
class AdamState:
    """Moments and step counter of the Adam optimizer."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: name -> parameter tensor (updated in place, identity preserved)
        grads: name -> gradient array; names missing here are left untouched
        state: optimizer state; moments are created lazily per name
        lr: learning rate (> 0)

    Raises:
        NonFiniteError: a gradient holds NaN or infinity (names the parameter)
        ShapeError: a gradient does not match its parameter
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, "
                             f"parameter has {params[name].shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total
