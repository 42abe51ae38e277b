"""Dense MLP with hand-written backpropagation, optimizers and a gradient checker.

Everything here works on plain numpy arrays. An :class:`MlpParams` holds one
weight matrix of shape ``(out, in)`` and one bias vector per linear layer; the
activation is applied after every layer except the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _activate_grad(name, z, a):
    # derivative expressed through pre-activation z and activation a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MlpParams:
    """Weights and biases of a fully connected network."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` used by the optimizers."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays):
        arrays = list(arrays)
        return MlpParams(arrays[0::2], arrays[1::2], self.activation)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def __eq__(self, other):
        if not isinstance(other, MlpParams) or self.activation != other.activation:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


def init_mlp(layer_dims, seed, activation="relu"):
    """Fan-in scaled uniform initialisation; biases start at zero."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2 or min(layer_dims) < 1:
        raise ValueError(f"layer_dims must hold >= 2 positive sizes, got {layer_dims}")
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0) if activation == "relu" else 1.0
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = gain * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def identity_mlp(dim, activation="identity"):
    """Single square layer with identity weights and zero bias."""
    return MlpParams([np.eye(dim)], [np.zeros(dim)], activation)


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"input has dimension {x.shape[-1] if x.ndim else 0}, "
            f"network expects {params.input_dim}"
        )
    return x, single


def _forward_cache(params, x):
    pre, post = [], [x]
    a = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if k == last else _activate(params.activation, z)
        pre.append(z)
        post.append(a)
    return pre, post


def mlp_forward(params, x):
    """Apply the network to one vector ``(d,)`` or a batch ``(n, d)``."""
    x, single = _as_batch(params, x)
    out = _forward_cache(params, x)[1][-1]
    return out[0] if single else out


def mlp_backward(params, x, output_gradient):
    """Backpropagate ``output_gradient`` through the network.

    For a batch, parameter gradients are summed over rows and the input
    gradient keeps one row per sample.

    Returns
    -------
    param_gradients : MlpParams
        Same layout as ``params``.
    input_gradient : ndarray
        Same shape as ``x``.
    """
    x, single = _as_batch(params, x)
    g = np.asarray(output_gradient, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != (x.shape[0], params.output_dim):
        raise ValueError(
            f"output gradient has shape {np.shape(output_gradient)}, "
            f"expected {(params.output_dim,) if single else (x.shape[0], params.output_dim)}"
        )
    pre, post = _forward_cache(params, x)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        if k != n_layers - 1:
            g = g * _activate_grad(params.activation, pre[k], post[k + 1])
        gw[k] = g.T @ post[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    return MlpParams(gw, gb, params.activation), (g[0] if single else g)


def mlp_value_and_input_gradient(params, x, output_gradient=None):
    """Batched forward pass plus the gradient of ``sum(output * output_gradient)``
    with respect to the inputs only (no parameter gradients are formed).

    ``output_gradient`` defaults to ones, which for a scalar head gives the
    per-row input gradient of the output.
    """
    x, single = _as_batch(params, x)
    pre, post = _forward_cache(params, x)
    out = post[-1]
    g = np.ones_like(out) if output_gradient is None else np.asarray(output_gradient, dtype=float).reshape(out.shape)
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _activate_grad(params.activation, pre[k], post[k + 1])
        g = g @ params.weights[k]
    return (out[0], g[0]) if single else (out, g)


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step is refused because a gradient is not finite."""


@dataclass
class OptimizerState:
    """Learning rate, moment accumulators and step counter.

    ``method`` is ``"adam"`` (default) or ``"sgd"``. Accumulators are created
    lazily on the first step so one state can serve any parameter layout.
    """

    learning_rate: float = 1e-3
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.method!r}")


def optimizer_step(state, params, gradients, learning_rate=None):
    """One descent step over a sequence of arrays.

    Returns the updated arrays and a new state; inputs are left untouched.
    A non-finite gradient refuses the step with :class:`NonFiniteGradientError`.
    ``learning_rate`` overrides the state's rate for this step (schedules).
    """
    params = [np.asarray(p, dtype=float) for p in params]
    gradients = [np.asarray(g, dtype=float) for g in gradients]
    if len(params) != len(gradients):
        raise ValueError(f"{len(params)} parameter arrays but {len(gradients)} gradients")
    for k, (p, g) in enumerate(zip(params, gradients)):
        if p.shape != g.shape:
            raise ValueError(f"array {k}: parameter {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
            raise NonFiniteGradientError(f"non-finite gradient in array {k} at flat index {bad}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    t = state.step + 1
    if state.method == "sgd":
        new = [p - lr * g for p, g in zip(params, gradients)]
        return new, OptimizerState(state.learning_rate, "sgd", state.beta1, state.beta2, state.eps, t)

    m = state.first_moment or [np.zeros_like(p) for p in params]
    v = state.second_moment or [np.zeros_like(p) for p in params]
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mk + (1 - b1) * g for mk, g in zip(m, gradients)]
    v = [b2 * vk + (1 - b2) * g * g for vk, g in zip(v, gradients)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps) for p, mk, vk in zip(params, m, v)]
    return new, OptimizerState(state.learning_rate, "adam", b1, b2, state.eps, t, m, v)


def gradient_check(fun: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                   point: Sequence[float], step: float = 1e-5) -> float:
    """Largest relative gap between ``grad`` and central differences of ``fun``.

    The gap for coordinate ``i`` is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x = np.array(point, dtype=float)
    analytic = np.asarray(grad(x.copy()), dtype=float).ravel()
    if analytic.shape != (x.size,):
        raise ValueError(f"gradient has {analytic.size} entries for a point of size {x.size}")
    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        up = fun(probe.reshape(x.shape))
        probe[i] -= 2 * step
        down = fun(probe.reshape(x.shape))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"loss is not finite when probing coordinate {i}")
        numeric = (up - down) / (2 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
