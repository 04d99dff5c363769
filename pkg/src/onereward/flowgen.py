"""Conditional rectified-flow generator.

Time runs from ``s = 0`` (pure noise) to ``s = 1`` (data); the straight-line
interpolant is ``x_s = (1 - s) * eps + s * data`` with constant target
velocity ``data - eps``. The velocity net sees

    [state, masked source, mask, s, prompt one-hot (3 classes + NULL), task one-hot]

and guidance mixes the prompted and NULL-prompt velocities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import (
    AdamState,
    ConfigurationError,
    NonFiniteError,
    ParamVector,
    RngStream,
    adam_step,
    init_params,
    mlp_backward_cached,
    mlp_forward,
    mlp_forward_cached,
    mlp_shape,
)
from .tasks import N_CLASSES, REMOVE, Condition, ContractViolation, sample_training_example

NULL_PROMPT = N_CLASSES  # index of the NULL bit in the prompt one-hot
PROMPT_WIDTH = N_CLASSES + 1
TASK_WIDTH = 3


def input_width(dim: int) -> int:
    return 3 * dim + 1 + PROMPT_WIDTH + TASK_WIDTH


def prompt_index(prompt) -> int:
    if prompt is None or prompt == REMOVE:
        return NULL_PROMPT
    return int(prompt)


@dataclass
class CondBatch:
    """Conditions stacked along a leading batch axis."""

    source: np.ndarray  # (B, D)
    mask: np.ndarray  # (B, D)
    prompt: np.ndarray  # (B,) in 0..NULL_PROMPT
    task: np.ndarray  # (B,)

    @classmethod
    def from_conditions(cls, conds: Sequence[Condition]) -> "CondBatch":
        return cls(
            np.stack([c.source for c in conds]),
            np.stack([c.mask for c in conds]),
            np.array([prompt_index(c.prompt) for c in conds]),
            np.array([c.task_id for c in conds]),
        )

    def __len__(self):
        return self.source.shape[0]

    def with_null_prompt(self) -> "CondBatch":
        return CondBatch(self.source, self.mask, np.full_like(self.prompt, NULL_PROMPT), self.task)

    def take(self, idx) -> "CondBatch":
        return CondBatch(self.source[idx], self.mask[idx], self.prompt[idx], self.task[idx])


def as_batch(cond) -> CondBatch:
    if isinstance(cond, CondBatch):
        return cond
    if isinstance(cond, Condition):
        return CondBatch.from_conditions([cond])
    return CondBatch.from_conditions(list(cond))


def features(x: np.ndarray, s, cb: CondBatch) -> np.ndarray:
    B, D = x.shape
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    if np.any(s < 0) or np.any(s > 1):
        raise ContractViolation("time must lie in [0, 1]")
    out = np.zeros((B, input_width(D)))
    out[:, :D] = x
    out[:, D:2 * D] = cb.source * (1.0 - cb.mask)
    out[:, 2 * D:3 * D] = cb.mask
    out[:, 3 * D] = s
    out[np.arange(B), 3 * D + 1 + cb.prompt] = 1.0
    out[np.arange(B), 3 * D + 1 + PROMPT_WIDTH + cb.task] = 1.0
    return out


def init_generator(dim: int, hidden=(128, 128), rng: RngStream | None = None) -> ParamVector:
    return init_params(mlp_shape(input_width(dim), hidden, dim), rng or RngStream(0))


def velocity(theta: ParamVector, x, s, cb: CondBatch, activation="tanh") -> np.ndarray:
    return mlp_forward(theta, features(np.atleast_2d(x), s, cb), activation)


def cfg_velocity(theta: ParamVector, x, s, cond, w: float, activation="tanh") -> np.ndarray:
    """Guided velocity ``(1 - w) * v_null + w * v_cond``.

    Rows whose prompt is already NULL return ``v_null`` unchanged for any w.
    """
    v, _ = _cfg_forward(theta, np.atleast_2d(x), s, as_batch(cond), w, activation, keep_cache=False)
    return v


def _cfg_forward(theta, x, s, cb, w, activation, keep_cache):
    if w < 0:
        raise ContractViolation("guidance scale must be non-negative")
    B = x.shape[0]
    feats = np.concatenate([features(x, s, cb), features(x, s, cb.with_null_prompt())])
    if keep_cache:
        out, cache = mlp_forward_cached(theta, feats, activation)
    else:
        out, cache = mlp_forward(theta, feats, activation), None
    v_cond, v_null = out[:B], out[B:]
    null_rows = cb.prompt == NULL_PROMPT
    v = (1.0 - w) * v_null + w * v_cond
    v[null_rows] = v_null[null_rows]
    return v, (cache, null_rows, w)


def _cfg_backward(theta, state, upstream):
    cache, null_rows, w = state
    g_cond = w * upstream
    g_null = (1.0 - w) * upstream
    g_cond[null_rows] = 0.0
    g_null[null_rows] = upstream[null_rows]
    grads, _ = mlp_backward_cached(theta, cache, np.concatenate([g_cond, g_null]))
    return grads


# --------------------------------------------------------------------------
# training objective

def fm_loss(theta: ParamVector, data, cond, rng: RngStream, cfg_dropout: float = 0.1,
            activation="tanh"):
    """Rectified-flow regression loss and its exact gradient.

    ``loss = mean_b || v(x_s, s, c) - (data - eps) ||^2`` with
    ``s ~ U[0, 1]`` and the prompt replaced by NULL with prob ``cfg_dropout``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    cb = as_batch(cond)
    B, D = data.shape
    g = rng.generator()
    eps = g.standard_normal((B, D))
    s = g.random(B)
    drop = g.random(B) < cfg_dropout
    prompt = np.where(drop, NULL_PROMPT, cb.prompt)
    cb = CondBatch(cb.source, cb.mask, prompt, cb.task)
    x_s = (1.0 - s)[:, None] * eps + s[:, None] * data
    target = data - eps
    v, cache = mlp_forward_cached(theta, features(x_s, s, cb), activation)
    r = v - target
    loss = float(np.sum(r * r) / B)
    if not np.isfinite(loss):
        raise NonFiniteError(f"flow-matching loss is non-finite on a batch of {B} (max |data| {np.abs(data).max():.3g})")
    grads, _ = mlp_backward_cached(theta, cache, 2.0 * r / B)
    return loss, grads


# --------------------------------------------------------------------------
# sampling

@dataclass
class SampleTrace:
    initial_noise: np.ndarray
    step_count: int
    guidance_scale: float
    final: np.ndarray
    start_time: float = 0.0


def euler_sample(theta: ParamVector, cond, steps: int, w: float, noise, start_time: float = 0.0,
                 start_state=None, activation="tanh") -> SampleTrace:
    """Integrate the guided ODE on the uniform grid from ``start_time`` to 1.

    ``start_state`` defaults to ``noise``; candidate generation passes a
    partly-noised source to emulate a later denoising start.
    """
    if steps < 1:
        raise ContractViolation("need at least one Euler step")
    cb = as_batch(cond)
    noise = np.asarray(noise, dtype=np.float64)
    single = noise.ndim == 1
    x = np.atleast_2d(noise if start_state is None else start_state).astype(np.float64, copy=True)
    h = (1.0 - start_time) / steps
    for j in range(steps):
        s = start_time + j * h
        x = x + h * cfg_velocity(theta, x, s, cb, w, activation)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"Euler state became non-finite at step {j}")
    final = x[0] if single else x
    return SampleTrace(noise, steps, w, final, start_time)


def snap_to_grid(raw: float, steps: int) -> float:
    return round(raw * steps) / steps


def grid_times(s_range, steps: int) -> np.ndarray:
    s1, s2 = s_range
    k = np.arange(steps + 1)
    t = k / steps
    return t[(t >= s1 - 1e-12) & (t <= s2 + 1e-12)]


def draw_s_star(rng: np.random.Generator, s_range, steps: int) -> float:
    choices = grid_times(s_range, steps)
    if choices.size == 0:
        raise ConfigurationError(f"no grid point of {steps} steps lies in {s_range}")
    return float(choices[rng.integers(choices.size)])


@dataclass
class PredictHook:
    """Carries what is needed to push a gradient on ``x_hat`` back to theta."""

    theta: ParamVector
    s_star: float
    state: tuple
    x_star: np.ndarray

    def backward(self, upstream) -> ParamVector:
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        return _cfg_backward(self.theta, self.state, (1.0 - self.s_star) * upstream)


def one_step_predict(theta: ParamVector, x_star, s_star: float, cond, w: float, activation="tanh"):
    """``x_hat = x* + (1 - s*) v(x*, s*)``; the only step that carries gradients."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    v, state = _cfg_forward(theta, x_star, s_star, as_batch(cond), w, activation, keep_cache=True)
    x_hat = x_star + (1.0 - s_star) * v
    return x_hat, PredictHook(theta, s_star, state, x_star)


def integrate_to(theta, cond, s_star: float, steps: int, w: float, noise, activation="tanh"):
    """Gradient-free Euler integration from noise to the grid point ``s_star``."""
    k = int(round(s_star * steps))
    if abs(k / steps - s_star) > 1e-12:
        raise ContractViolation(f"s* = {s_star} is not on the {steps}-step grid")
    cb = as_batch(cond)
    x = np.atleast_2d(np.asarray(noise, dtype=np.float64)).copy()
    h = 1.0 / steps
    for j in range(k):
        x = x + h * cfg_velocity(theta, x, j * h, cb, w, activation)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("partial denoise produced a non-finite state")
    return x


def partial_denoise_predict(theta: ParamVector, cond, s_star: float, steps: int, w: float, noise,
                            s_range=(0.6, 0.95), activation="tanh"):
    """Denoise without gradients up to ``s_star`` then jump straight to data.

    Returns ``(x_hat, hook)``; ``hook.backward(g)`` gives d(g . x_hat)/d theta
    through the final velocity evaluation only.
    """
    s1, s2 = s_range
    if not (s1 - 1e-12 <= s_star <= s2 + 1e-12):
        raise ContractViolation(f"s* = {s_star} outside [{s1}, {s2}]")
    x_star = integrate_to(theta, cond, s_star, steps, w, noise, activation)
    return one_step_predict(theta, x_star, s_star, cond, w, activation)


def vae_decode(latent):
    """Identity decoder; kept so the predict -> decode -> reward chain is explicit."""
    return latent


def vae_decode_backward(upstream):
    return upstream


# --------------------------------------------------------------------------
# pre-training

def build_corpus(n: int, probs, rng: RngStream, dim: int):
    """Fixed pre-training corpus: clean targets plus captioned conditions."""
    g = rng.child("tasks").generator()
    tasks = g.choice(len(probs), size=n, p=np.asarray(probs))
    pairs = [sample_training_example(int(t), rng.child("example", i), dim) for i, t in enumerate(tasks)]
    data = np.stack([d for d, _ in pairs])
    return data, CondBatch.from_conditions([c for _, c in pairs])


def unconditional_batch(n: int, dim: int) -> CondBatch:
    """Conditions that reveal nothing: whole signal masked, NULL prompt."""
    return CondBatch(np.zeros((n, dim)), np.ones((n, dim)), np.full(n, NULL_PROMPT), np.zeros(n, dtype=int))


def train_fm(theta: ParamVector, data: np.ndarray, cb: CondBatch, iterations: int, batch: int,
             lr: float, rng: RngStream, cfg_dropout: float = 0.1, activation="tanh",
             lr_final: float | None = None):
    """Minibatch Adam on :func:`fm_loss`. Returns ``(theta, loss_curve)``.

    With ``lr_final`` the step size decays geometrically to that value.
    """
    state = AdamState.fresh(theta.values.size, lr=lr)
    g = rng.child("batches").generator()
    curve = np.empty(iterations)
    decay = 1.0 if lr_final is None else (lr_final / lr) ** (1.0 / max(iterations - 1, 1))
    for it in range(iterations):
        idx = g.integers(0, data.shape[0], size=batch)
        loss, grads = fm_loss(theta, data[idx], cb.take(idx), rng.child("fm", it), cfg_dropout, activation)
        curve[it] = loss
        state.lr = lr * decay**it
        state, theta = adam_step(state, theta, grads)
    return theta, curve
