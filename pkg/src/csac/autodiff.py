"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the SAC family of losses needs is supported: broadcasting
elementwise arithmetic, 2-D matmul, a handful of pointwise nonlinearities,
reductions, slicing, concatenation and an elementwise minimum.

Gradient semantics: ``backward`` *accumulates* into the ``grad`` field of
every reachable leaf that requires grad. Callers clear gradients with
``zero_grad`` (or ``Adam.zero_grad``) before each backward pass, after which
``grad`` holds exactly d(loss)/d(leaf).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to our reflected operators (ndarray - Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic info -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    def __add__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return Tensor._make(a.data - b.data, (a, b), back)

    def __rsub__(self, other) -> "Tensor":
        return ensure_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb
        return Tensor._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                  if b.requires_grad else None)
            return ga, gb
        return Tensor._make(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other) -> "Tensor":
        return ensure_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def back(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb
        return Tensor._make(a.data @ b.data, (a, b), back)

    def __pow__(self, exponent: float) -> "Tensor":
        a = self

        def back(g):
            return (g * exponent * a.data ** (exponent - 1),)
        return Tensor._make(a.data ** exponent, (a,), back)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)
        return Tensor._make(a.data[index], (a,), back)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    # -- reverse pass ----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


# -- pointwise functions -------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._make(out, (x,), lambda g: (g * (out > 0.0),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * sig,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    take_a = a.data <= b.data

    def back(g):
        return (_unbroadcast(g * take_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~take_a, b.shape) if b.requires_grad else None)
    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), back)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- multilayer perceptron ------------------------------------------------

_ACTIVATIONS = {"relu": (relu, lambda z: np.maximum(z, 0.0)),
                "tanh": (tanh, np.tanh)}


class Mlp:
    """Fully connected network; hidden layers use ``activation``, output is linear."""

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu"):
        if len(layer_sizes) < 2 or any(int(s) <= 0 for s in layer_sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(parameter(rng.uniform(-bound, bound, (fan_in, fan_out))))
            self.biases.append(parameter(rng.uniform(-bound, bound, (fan_out,))))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _check(self, x_shape: tuple) -> None:
        if len(x_shape) != 2 or x_shape[1] != self.input_size:
            raise ValueError(
                f"input shape {x_shape} does not match network input width "
                f"{self.input_size} (expected (batch, {self.input_size}))")

    def forward(self, x, frozen: bool = False) -> Tensor:
        """Differentiable forward pass.

        With ``frozen=True`` the parameters enter the graph as constants, so
        gradients flow to ``x`` but never accumulate into this network.
        """
        x = ensure_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        self._check(x.shape)
        act = _ACTIVATIONS[self.activation][0]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = Tensor(w.data), Tensor(b.data)
            h = h @ w + b
            if i < last:
                h = act(h)
        return h

    __call__ = forward

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass on raw arrays."""
        x = _as_array(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        self._check(x.shape)
        act = _ACTIVATIONS[self.activation][1]
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = act(h)
        return h

    def copy_from(self, other: "Mlp") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            if mine.shape != theirs.shape:
                raise ValueError("cannot copy between networks of different shapes")
            mine.data = theirs.data.copy()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, arr in zip(params, arrays):
            arr = _as_array(arr)
            if arr.shape != p.shape:
                raise ValueError(f"parameter shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


# -- tanh-squashed Gaussian -----------------------------------------------

def log1m_tanh_sq(u: Tensor) -> Tensor:
    """log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable in the tails."""
    return (math.log(2.0) - u - softplus(-2.0 * u)) * 2.0


def sample_squashed_gaussian(mean: Tensor, log_std: Tensor, noise) -> tuple[Tensor, Tensor]:
    """Reparameterized draw ``tanh(mean + std * noise)`` and its log-density.

    ``log_std`` is clamped to [LOG_STD_MIN, LOG_STD_MAX]. Returns the action
    (batch, d) and the log-probability (batch,) including the tanh
    change-of-variables term.
    """
    mean, log_std = ensure_tensor(mean), ensure_tensor(log_std)
    noise = _as_array(noise)
    if noise.shape != mean.shape or log_std.shape != mean.shape:
        raise ValueError(f"noise/log_std shape {noise.shape}/{log_std.shape} "
                         f"!= mean shape {mean.shape}")
    if not (np.all(np.isfinite(mean.data)) and np.all(np.isfinite(log_std.data))):
        raise ValueError("non-finite mean or log_std in policy head")
    log_std = clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    pre = mean + exp(log_std) * noise
    action = tanh(pre)
    gauss = -0.5 * noise * noise - _HALF_LOG_2PI - log_std
    log_prob = (gauss - log1m_tanh_sq(pre)).sum(axis=-1)
    return action, log_prob


def squashed_gaussian_log_prob(action: np.ndarray, mean: np.ndarray,
                               log_std: np.ndarray) -> np.ndarray:
    """Closed-form log-density of ``tanh(N(mean, std^2))`` at ``action`` (numpy)."""
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    pre = np.arctanh(action)
    z = (pre - mean) / np.exp(log_std)
    gauss = -0.5 * z * z - _HALF_LOG_2PI - log_std
    return (gauss - np.log1p(-action * action)).sum(axis=-1)


# -- Adam -----------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps, 0,
                               [np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> bool:
        """Apply one update from the params' ``grad`` fields.

        Returns False (and leaves everything untouched) when any gradient is
        non-finite. Missing gradients count as zero.
        """
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        return adam_step(self.params, grads, self.state)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> bool:
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            logger.warning("Adam step rejected: non-finite gradient for parameter of shape %s",
                           p.shape)
            return False
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return True


# -- finite differences ---------------------------------------------------

def numerical_gradient(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``param``."""
    param.data = np.ascontiguousarray(param.data)
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn()
        flat[i] = orig - h
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
