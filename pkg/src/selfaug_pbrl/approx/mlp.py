"""Fixed-topology multilayer perceptrons with hand-written reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "relu", "tanh", "identity")
SQUASHES = (None, "tanh")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    input_dims: int
    output_dims: int
    hidden_layers: int = 3
    hidden_units: int = 256
    activation: str = "leaky_relu"
    output_squash: str | None = None

    def __post_init__(self):
        if self.input_dims < 1 or self.output_dims < 1:
            raise ValueError("input_dims and output_dims must be positive")
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ValueError("need at least one hidden layer with one unit")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_squash not in SQUASHES:
            raise ValueError(f"unknown output squash {self.output_squash!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dims] + [self.hidden_units] * self.hidden_layers + [self.output_dims]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        sizes = self.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dims": self.input_dims,
            "output_dims": self.output_dims,
            "hidden_layers": self.hidden_layers,
            "hidden_units": self.hidden_units,
            "activation": self.activation,
            "output_squash": self.output_squash,
        }


def init_params(spec: MLPSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """He-uniform weights, zero biases."""
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / shape[0])
            params.append(rng.uniform(-limit, limit, size=shape))
        else:
            params.append(np.zeros(shape))
    return params


def zeros_like(params: list[np.ndarray]) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in params]


def check_params(params, spec: MLPSpec):
    shapes = spec.param_shapes()
    if len(params) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
    for i, (p, shape) in enumerate(zip(params, shapes)):
        if p.shape != shape:
            raise ShapeError(f"parameter {i} has shape {p.shape}, expected {shape}")


def _activate(name, z):
    if name == "leaky_relu":
        return kernels.leaky_relu(z, LEAKY_SLOPE)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_backward(name, z, a, grad):
    if name == "leaky_relu":
        return kernels.leaky_relu_backward(z, grad, LEAKY_SLOPE)
    if name == "relu":
        return grad * (z > 0.0)
    if name == "tanh":
        return grad * (1.0 - a * a)
    return grad


def _as_batch(x, spec: MLPSpec):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dims:
        raise ShapeError(f"input has shape {x.shape}, expected (batch, {spec.input_dims})")
    return x


def forward_cached(params, spec: MLPSpec, x):
    """Forward pass returning the output and the per-layer cache for ``backward_cached``."""
    x = _as_batch(x, spec)
    n_layers = len(params) // 2
    pre = []
    post = [x]
    a = x
    for i in range(n_layers):
        z = a @ params[2 * i] + params[2 * i + 1]
        pre.append(z)
        if i < n_layers - 1:
            a = _activate(spec.activation, z)
        elif spec.output_squash == "tanh":
            a = np.tanh(z)
        else:
            a = z
        post.append(a)
    return a, (pre, post)


def forward(params, spec: MLPSpec, x) -> np.ndarray:
    """Evaluate the network on a batch (or a single vector, returned as a 1-row batch)."""
    out, _ = forward_cached(params, spec, x)
    return out


def backward_cached(params, spec: MLPSpec, cache, upstream, need_input_grad=False, need_param_grads=True):
    """Gradients of ``sum(upstream * output)`` w.r.t. the parameters (and optionally the input).

    With ``need_param_grads=False`` only the input gradient is computed and
    the returned parameter list holds ``None`` entries.
    """
    pre, post = cache
    out = post[-1]
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(f"upstream gradient has shape {g.shape}, expected {out.shape}")
    if spec.output_squash == "tanh":
        g = g * (1.0 - out * out)
    n_layers = len(params) // 2
    grads = [None] * len(params)
    for i in reversed(range(n_layers)):
        if need_param_grads:
            grads[2 * i] = post[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params[2 * i].T
        if i > 0:
            g = _activate_backward(spec.activation, pre[i - 1], post[i], g)
    if need_input_grad:
        return grads, g
    return grads


def backward(params, spec: MLPSpec, x, upstream) -> list[np.ndarray]:
    _, cache = forward_cached(params, spec, x)
    return backward_cached(params, spec, cache, upstream)


def input_gradient(params, spec: MLPSpec, x, upstream) -> np.ndarray:
    _, cache = forward_cached(params, spec, x)
    _, gx = backward_cached(params, spec, cache, upstream, need_input_grad=True)
    return gx


class MLP:
    """A spec plus its parameter arrays; thin convenience wrapper over the functions above."""

    def __init__(self, spec: MLPSpec, params: list[np.ndarray]):
        check_params(params, spec)
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec: MLPSpec, rng: np.random.Generator) -> "MLP":
        return cls(spec, init_params(spec, rng))

    def __call__(self, x) -> np.ndarray:
        return forward(self.params, self.spec, x)

    def forward_cached(self, x):
        return forward_cached(self.params, self.spec, x)

    def backward_cached(self, cache, upstream, need_input_grad=False, need_param_grads=True):
        return backward_cached(self.params, self.spec, cache, upstream, need_input_grad, need_param_grads)

    def copy(self) -> "MLP":
        return MLP(self.spec, [p.copy() for p in self.params])

    def load_from(self, other: "MLP"):
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)
