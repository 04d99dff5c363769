"""Deterministic float64 numerics shared by the generator and the reward model.

Parameters live in one flat vector; each layer stores its weight matrix
(row-major, shape ``(in, out)``) followed by its bias, so a batch of inputs
``x`` of shape ``(B, in)`` maps through ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class NonFiniteError(FloatingPointError):
    """A NaN/inf showed up where a finite number is required."""


# --------------------------------------------------------------------------
# random streams

def derive_stream_id(*parts) -> int:
    """Stable 64-bit id from an arbitrary tuple of labels/ints."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream: Philox keyed by (root_seed, stream_id).

    Two streams with the same triple replay the same draws; distinct
    ``stream_id`` values give independent sequences regardless of the order
    in which they are consumed.
    """

    root_seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.root_seed & (2**64 - 1), self.stream_id & (2**64 - 1)], dtype=np.uint64)
        counter = np.array([self.counter & (2**64 - 1), 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.root_seed, derive_stream_id(self.stream_id, *parts), 0)

    def advance(self, n: int = 1) -> "RngStream":
        return replace(self, counter=self.counter + n)


# --------------------------------------------------------------------------
# parameters and the MLP

def param_count(shape_spec: Sequence[tuple[int, int]]) -> int:
    return sum((i + 1) * o for i, o in shape_spec)


@dataclass
class ParamVector:
    values: np.ndarray
    shape_spec: list[tuple[int, int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shape_spec = [(int(i), int(o)) for i, o in self.shape_spec]
        if self.values.shape != (param_count(self.shape_spec),):
            raise ConfigurationError(
                f"parameter vector has length {self.values.size}, "
                f"shape spec needs {param_count(self.shape_spec)}"
            )

    @property
    def n_in(self) -> int:
        return self.shape_spec[0][0]

    @property
    def n_out(self) -> int:
        return self.shape_spec[-1][1]

    def layers(self):
        """(W, b) views into ``values``; writing to them writes the vector."""
        out, k = [], 0
        for i, o in self.shape_spec:
            W = self.values[k:k + i * o].reshape(i, o)
            k += i * o
            b = self.values[k:k + o]
            k += o
            out.append((W, b))
        return out

    def split(self, n_layers: int) -> tuple["ParamVector", "ParamVector"]:
        """Two views: the first ``n_layers`` layers and the rest."""
        k = param_count(self.shape_spec[:n_layers])
        return (ParamVector(self.values[:k], self.shape_spec[:n_layers]),
                ParamVector(self.values[k:], self.shape_spec[n_layers:]))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.shape_spec))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, list(self.shape_spec))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), list(self.shape_spec))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def mlp_shape(n_in: int, hidden: Sequence[int], n_out: int) -> list[tuple[int, int]]:
    widths = [n_in, *hidden, n_out]
    return list(zip(widths[:-1], widths[1:]))


def init_params(shape_spec, rng: RngStream, zero_last: bool = False) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator()
    p = ParamVector(np.zeros(param_count(shape_spec)), shape_spec)
    for idx, (W, _) in enumerate(p.layers()):
        if zero_last and idx == len(shape_spec) - 1:
            continue
        fan_in, fan_out = W.shape
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = gen.uniform(-lim, lim, size=W.shape)
    return p


def _act(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    raise ConfigurationError(f"unknown activation {activation!r}")


def _dact(z, a, activation):
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


def _check_input(params: ParamVector, x: np.ndarray):
    if x.shape[-1] != params.n_in:
        raise ConfigurationError(f"input width {x.shape[-1]} != first layer width {params.n_in}")


def mlp_forward(params: ParamVector, x, activation: str = "tanh") -> np.ndarray:
    """Hidden layers use ``activation``; the output layer is linear.

    Accepts a single vector or a batch with the feature axis last.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    layers = params.layers()
    h = x
    for W, b in layers[:-1]:
        h = _act(h @ W + b, activation)
    W, b = layers[-1]
    return h @ W + b


def mlp_forward_cached(params: ParamVector, x, activation: str = "tanh"):
    """Forward pass that also returns what :func:`mlp_backward_cached` needs."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    layers = params.layers()
    hs, zs = [x], []
    h = x
    for W, b in layers[:-1]:
        z = h @ W + b
        h = _act(z, activation)
        zs.append(z)
        hs.append(h)
    W, b = layers[-1]
    return h @ W + b, (hs, zs, activation)


def mlp_backward_cached(params: ParamVector, cache, upstream):
    hs, zs, activation = cache
    layers = params.layers()
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != params.n_out:
        raise ConfigurationError(f"upstream width {g.shape[-1]} != output width {params.n_out}")
    single = g.ndim == 1
    if single:
        g = g[None, :]
        hs = [h[None, :] for h in hs]
        zs = [z[None, :] for z in zs]
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        h_in = hs[li]
        grads.append((h_in.T @ g, g.sum(axis=0)))
        g = g @ W.T
        if li > 0:
            g = g * _dact(zs[li - 1], hs[li], activation)
    flat = np.concatenate([part.ravel() for pair in reversed(grads) for part in pair])
    dx = g[0] if single else g
    return ParamVector(flat, params.shape_spec), dx


def mlp_backward(params: ParamVector, x, upstream_grad, activation: str = "tanh"):
    """Gradients of ``sum(output * upstream_grad)`` w.r.t. params and input.

    Batched inputs have their parameter gradients summed over the batch.
    """
    _, cache = mlp_forward_cached(params, x, activation)
    return mlp_backward_cached(params, cache, upstream_grad)


# --------------------------------------------------------------------------
# optimizer and EMA

@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamVector, grads: ParamVector):
    """Bias-corrected Adam. Returns ``(new_state, new_params)``; inputs untouched."""
    g = grads.values
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ConfigurationError("Adam: parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NonFiniteError(
            f"Adam update aborted at step {state.step_count + 1}: "
            f"{bad.size} non-finite gradient entries (first index {bad[0]})"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    return new_state, params.with_values(new_values)


def ema_update(ema: ParamVector, theta: ParamVector, tau: float) -> ParamVector:
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"EMA decay must lie in [0, 1], got {tau}")
    if ema.values.shape != theta.values.shape:
        raise ConfigurationError("EMA and parameter vectors differ in length")
    return ema.with_values(tau * ema.values + (1.0 - tau) * theta.values)


# --------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    checked: np.ndarray = field(repr=False)

    def __float__(self):
        return self.max_rel_error


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-5,
    coords=None,
) -> GradCheckReport:
    """Compare ``fn``'s analytic gradient with central differences.

    ``fn(x)`` returns ``(value, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``coords`` restricts the
    check to a subset of indices (large parameter vectors).
    """
    if step <= 0:
        raise ConfigurationError("grad_check step must be positive")
    x = np.array(point, dtype=np.float64)
    value, grad = fn(x.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("grad_check: non-finite value or gradient at the base point")
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    flat = x.reshape(-1)
    errs = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp, _ = fn(x.copy())
        flat[i] = orig - step
        fm, _ = fn(x.copy())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite evaluation at coordinate {i}")
        num = (fp - fm) / (2 * step)
        a = grad.reshape(-1)[i]
        errs[n] = abs(a - num) / max(1.0, abs(a))
    worst = int(np.argmax(errs)) if errs.size else 0
    return GradCheckReport(float(errs.max()) if errs.size else 0.0, int(idx[worst]) if errs.size else -1, idx)
