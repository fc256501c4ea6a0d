"""Dense float64 tensors with reverse-mode autodiff, small MLPs, and Adam.

Everything is 64-bit and evaluated in a fixed documented order: a forward
pass walks layers first-to-last, ``backward`` walks the recorded graph in
reverse topological order, and the optimizer updates parameters in the
order ``parameters()`` returns them. Identical seeds therefore give
bitwise-identical trajectories.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InvalidSpecError(ValueError):
    """A network or optimizer specification is malformed."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (bad tape state, missing grads)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Operations on tensors record a computation graph while grad mode is
    enabled; ``backward`` on a scalar result fills ``grad`` on every
    reachable tensor with ``requires_grad`` and then frees the graph.
    Data is always C-contiguous (row-major).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------
    @staticmethod
    def _from_op(data, parents, grad_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
        return out

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), grad_fn)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

        return Tensor._from_op(a.data - b.data, (a, b), grad_fn)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        a = self

        def grad_fn(g):
            return (-g,)

        return Tensor._from_op(-a.data, (a,), grad_fn)

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

        def grad_fn(g):
            return (g @ b.data.T, a.data.T @ g)

        return Tensor._from_op(a.data @ b.data, (a, b), grad_fn)

    # -- elementwise functions -------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def grad_fn(g):
            return (g * out_data,)

        return Tensor._from_op(out_data, (a,), grad_fn)

    def log(self) -> "Tensor":
        a = self

        def grad_fn(g):
            return (g / a.data,)

        return Tensor._from_op(np.log(a.data), (a,), grad_fn)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def grad_fn(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._from_op(out_data, (a,), grad_fn)

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def grad_fn(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._from_op(out_data, (a,), grad_fn)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0.0

        def grad_fn(g):
            return (g * mask,)

        return Tensor._from_op(a.data * mask, (a,), grad_fn)

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self
        mask = (a.data >= lo) & (a.data <= hi)

        def grad_fn(g):
            return (g * mask,)

        return Tensor._from_op(np.clip(a.data, lo, hi), (a,), grad_fn)

    # -- reductions and shape --------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def grad_fn(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a.shape).copy(),)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        count = a.size if axis is None else a.shape[axis]

        def grad_fn(g):
            if axis is None:
                return (np.broadcast_to(g / count, a.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp / count, a.shape).copy(),)

        return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.shape

        def grad_fn(g):
            return (g.reshape(old_shape),)

        return Tensor._from_op(a.data.reshape(shape), (a,), grad_fn)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def backward(scalar_loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Fills ``grad`` (accumulating) on every tensor with ``requires_grad``
    reachable from the loss, then clears the recorded graph.
    """
    if scalar_loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {scalar_loss.shape}")
    if not scalar_loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring gradients")

    # Iterative post-order; graphs can be deep for many-sample objectives.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(scalar_loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    scalar_loss.grad = np.ones_like(scalar_loss.data)
    for node in reversed(topo):
        grad_fn = node._grad_fn
        if grad_fn is None:
            continue
        grads = grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # Accumulation allocates; gradient arrays are never mutated in place.
            parent.grad = g if parent.grad is None else parent.grad + g
        node._parents = ()
        node._grad_fn = None


# ---------------------------------------------------------------------------
# MLPs


ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")

_ACT_FNS = {
    "tanh": Tensor.tanh,
    "relu": Tensor.relu,
    "sigmoid": Tensor.sigmoid,
    "identity": lambda t: t,
}

_ACT_FNS_NP = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class MlpSpec:
    """Widths, per-layer activations, and the init seed of a dense network."""

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        acts = tuple(str(a) for a in self.activations)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2:
            raise InvalidSpecError("need at least input and output widths")
        if any(w <= 0 for w in widths):
            raise InvalidSpecError(f"layer widths must be positive, got {widths}")
        if len(acts) != len(widths) - 1:
            raise InvalidSpecError(
                f"need one activation per layer: {len(widths) - 1} layers, {len(acts)} activations"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise InvalidSpecError(f"unknown activation {a!r}")

    @classmethod
    def make(cls, widths, hidden: str = "tanh", output: str = "identity", seed: int = 0) -> "MlpSpec":
        widths = tuple(widths)
        acts = (hidden,) * (len(widths) - 2) + (output,)
        return cls(widths, acts, seed)


class Mlp:
    """A stack of affine layers with fixed per-layer activations."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor], activations: tuple[str, ...]):
        self.weights = weights
        self.biases = biases
        self.activations = tuple(activations)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, x.shape[0])
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"input extent {x.shape[-1]} != first layer width {self.in_width}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w + b
            x = _ACT_FNS[act](x)
        if squeeze:
            x = x.reshape(x.shape[1])
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-only forward pass; same arithmetic, no tape."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"input extent {x.shape[-1]} != first layer width {self.in_width}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _ACT_FNS_NP[act](x @ w.data + b.data)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = bool(flag)
            if not flag:
                p.grad = None

    def copy(self, requires_grad: bool | None = None) -> "Mlp":
        weights, biases = [], []
        for w, b in zip(self.weights, self.biases):
            rw = w.requires_grad if requires_grad is None else requires_grad
            rb = b.requires_grad if requires_grad is None else requires_grad
            weights.append(Tensor(w.data.copy(), requires_grad=rw))
            biases.append(Tensor(b.data.copy(), requires_grad=rb))
        return Mlp(weights, biases, self.activations)

    def param_bytes(self) -> bytes:
        """Concatenated little-endian float64 payload, fixed layer order."""
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
        return b"".join(chunks)


def build_mlp(spec: MlpSpec) -> Mlp:
    """Initialize an MLP: weights uniform in [-s, s] with s = sqrt(6/(fan_in+fan_out)),
    biases zero. Deterministic in ``spec.seed``."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(*spec)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        scale = math.sqrt(6.0 / (fan_in + fan_out))
        g = rng_mod.stream(spec.seed, f"mlp-init/layer{i}")
        w = g.uniform(-scale, scale, size=(fan_in, fan_out))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(weights, biases, spec.activations)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    """Bias-corrected adaptive-moment state for a fixed parameter list."""

    step_count: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    hyper: dict


def init_adam(
    params: list[Tensor],
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptimizerState:
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise InvalidSpecError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
    if epsilon <= 0.0:
        raise InvalidSpecError(f"epsilon must be positive, got {epsilon}")
    if learning_rate <= 0.0:
        raise InvalidSpecError(f"learning rate must be positive, got {learning_rate}")
    return OptimizerState(
        step_count=0,
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
        hyper={"learning_rate": learning_rate, "beta1": beta1, "beta2": beta2, "epsilon": epsilon},
    )


def adam_step(params: list[Tensor], state: OptimizerState) -> None:
    """One in-place update; parameters are visited in list order."""
    if len(params) != len(state.first_moment):
        raise ContractError(
            f"state tracks {len(state.first_moment)} parameters, got {len(params)}"
        )
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient; run backward first")
    lr = state.hyper["learning_rate"]
    b1 = state.hyper["beta1"]
    b2 = state.hyper["beta2"]
    eps = state.hyper["epsilon"]
    t = state.step_count + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step_count = t


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
