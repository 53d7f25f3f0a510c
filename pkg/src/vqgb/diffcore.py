"""Dense feed-forward networks with hand-written reverse-mode gradients.

Weights live in a single flat float64 parameter vector so that optimizers and
finite-difference checks can treat encoder and decoder blocks uniformly.
Matrices are plain row-major ``numpy`` arrays; a layer computes
``h @ W.T + b`` with ``W`` of shape ``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    """Raised when array dimensions do not match a network layout."""


class TapeStateError(RuntimeError):
    """Raised when a gradient tape is replayed after it was consumed."""


class NumericError(FloatingPointError):
    """Raised when a function evaluation produces a non-finite value."""


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeError(f"need at least two positive widths, got {widths}")
        acts = tuple(self.activations)
        n_hidden = len(widths) - 2
        if len(acts) == 1 and n_hidden > 1:
            acts = acts * n_hidden
        if len(acts) != n_hidden:
            raise ShapeError(f"{n_hidden} hidden layers but {len(acts)} activations")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def build(cls, n_in: int, hidden: list[int] | tuple[int, ...], n_out: int,
              activation: str = "tanh") -> "MlpSpec":
        widths = (n_in, *hidden, n_out)
        return cls(widths, (activation,) * len(hidden))

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.layer_widths) - 2

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i + 1] * w[i] + w[i + 1] for i in range(len(w) - 1))

    def layer_activation(self, i: int) -> str:
        return self.activations[i] if i < len(self.activations) else "identity"


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into the flat parameter vector."""
    params = np.asarray(params)
    if params.ndim != 1 or params.size != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    out = []
    pos = 0
    w = spec.layer_widths
    for i in range(len(w) - 1):
        n_w = w[i + 1] * w[i]
        W = params[pos:pos + n_w].reshape(w[i + 1], w[i])
        pos += n_w
        b = params[pos:pos + w[i + 1]]
        pos += w[i + 1]
        out.append((W, b))
    return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.n_params)
    for W, _ in unpack(spec, params):
        fan_out, fan_in = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, a: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - h * h)
    if name == "relu":
        return g * (a > 0.0)
    return g


@dataclass
class GradTape:
    """Cached forward values of one MLP evaluation.

    A tape supports exactly one backward replay; a second call raises
    :class:`TapeStateError`.
    """

    spec: MlpSpec
    params: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False
    consumed: bool = False


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray, *,
                record: bool = False):
    """Evaluate the network on a vector or a batch of row vectors.

    Returns the output, or ``(output, tape)`` when ``record`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.n_in:
        raise ShapeError(f"input shape {x.shape} incompatible with width {spec.n_in}")
    layers = unpack(spec, params)
    tape = GradTape(spec, params, squeeze=squeeze) if record else None
    for i, (W, b) in enumerate(layers):
        a = h @ W.T + b
        h_next = _act(spec.layer_activation(i), a)
        if tape is not None:
            tape.inputs.append(h)
            tape.preacts.append(a)
            tape.outputs.append(h_next)
        h = h_next
    y = h[0] if squeeze else h
    return (y, tape) if record else y


def mlp_backward(tape: GradTape, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<upstream, output>`` w.r.t. the parameters and the input."""
    if tape.consumed:
        raise TapeStateError("gradient tape already consumed")
    spec = tape.spec
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output")
    tape.consumed = True
    grad = np.zeros(spec.n_params)
    grad_layers = unpack(spec, grad)
    layers = unpack(spec, tape.params)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grad_layers[i]
        g = _act_grad(spec.layer_activation(i), tape.preacts[i], tape.outputs[i], g)
        gW += g.T @ tape.inputs[i]
        gb += g.sum(axis=0)
        g = g @ W
    gx = g[0] if tape.squeeze else g
    return grad, gx


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray,
               eps: float = 1e-5, coords: np.ndarray | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f(point)`` returns ``(value, gradient)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; ``coords`` restricts the
    check to a subset of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.array(point, dtype=np.float64)
    value, grad = f(point.copy())
    if not np.isfinite(value):
        raise NumericError("non-finite function value at the check point")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    idx = np.arange(point.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        old = point[i]
        point[i] = old + eps
        fp = f(point.copy())[0]
        point[i] = old - eps
        fm = f(point.copy())[0]
        point[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return float(worst)
