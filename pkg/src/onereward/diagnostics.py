"""Finite-difference checks of every analytic gradient in the package.

Each check draws a fresh random parameter point and a small random batch,
then compares the analytic gradient with central differences on a random
subset of coordinates (full sweeps over tens of thousands of parameters
would take minutes and add little over a well-chosen subset).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flowgen
from .flowgen import CondBatch
from .numcore import RngStream, grad_check
from .prefdata import PreferencePair
from .rewardmodel import NetSpec, _pair_arrays, bt_loss_arrays, init_bt_model, init_reward_model, rm_loss_arrays
from .rlhf import RlConfig, rl_step_loss
from .tasks import composite, sample_condition, sample_training_example

CHECKS = ("fm_loss", "rm_loss", "bt_loss", "rl_step_loss")


@dataclass
class GradCheckResult:
    name: str
    errors: list  # max relative error at each parameter point

    @property
    def worst(self) -> float:
        return max(self.errors)


def _coords(fn, point, n: int, g: np.random.Generator) -> np.ndarray:
    """Half uniformly random coordinates, half the largest analytic gradients."""
    _, grad = fn(point.copy())
    top = np.argsort(np.abs(grad))[-(n // 2):]
    rest = g.choice(point.size, size=min(n - top.size, point.size), replace=False)
    return np.unique(np.concatenate([top, rest]))


def _random_pairs(rng: RngStream, dim: int, n: int) -> list:
    """Pairs whose signals differ only inside the mask, like real data."""
    g = rng.generator()
    pairs = []
    for i in range(n):
        task = i % 3
        c = sample_condition(task, rng.child("cond", i), dim)
        a = composite(c.source + 0.5 * g.standard_normal(dim), c)
        b = composite(c.source + 0.5 * g.standard_normal(dim), c)
        d = c.dimensions[i % len(c.dimensions)]
        pairs.append(PreferencePair(a, b, task, d, c.prompt, i, c.mask))
    return pairs


def check_fm_loss(rng: RngStream, dim: int, hidden, n_coords: int) -> float:
    theta = flowgen.init_generator(dim, hidden, rng.child("init"))
    examples = [sample_training_example(i % 3, rng.child("ex", i), dim) for i in range(6)]
    data = np.stack([d for d, _ in examples])
    cb = CondBatch.from_conditions([c for _, c in examples])
    noise_rng = rng.child("fm")

    def fn(v):
        loss, grads = flowgen.fm_loss(theta.with_values(v), data, cb, noise_rng, cfg_dropout=0.3)
        return loss, grads.values

    idx = _coords(fn, theta.values, n_coords, rng.child("coords").generator())
    return grad_check(fn, theta.values, 1e-5, idx).max_rel_error


def _check_pair_loss(rng: RngStream, dim: int, n_coords: int, scalar: bool, spec: NetSpec) -> float:
    init = init_bt_model if scalar else init_reward_model
    loss_fn = bt_loss_arrays if scalar else rm_loss_arrays
    net = init(dim, spec, rng.child("init"))
    W, L, Q = _pair_arrays(_random_pairs(rng.child("pairs"), dim, 6))

    def fn(v):
        loss, grads = loss_fn(net.with_values(v), W, L, Q)
        return loss, grads.values

    idx = _coords(fn, net.params.values, n_coords, rng.child("coords").generator())
    return grad_check(fn, net.params.values, 1e-5, idx).max_rel_error


def check_rl_chain(rng: RngStream, dim: int, hidden, n_coords: int, spec: NetSpec) -> float:
    """partial denoise -> one-step jump -> composite -> decode -> reward -> hinge.

    The rollout to ``s*`` carries no gradient by construction, so ``x*`` is
    frozen at the base point and only the differentiated chain is perturbed.
    """
    theta = flowgen.init_generator(dim, hidden, rng.child("init"))
    phi = init_reward_model(dim, spec, rng.child("rm"))
    # an untrained judge often says "yes" above 0.95; lam = 1 keeps the hinge
    # active so the check never degenerates to comparing zeros
    config = RlConfig(guidance=2.0, lam=1.0)
    conds = [sample_condition(i % 3, rng.child("cond", i), dim) for i in range(4)]
    cb = CondBatch.from_conditions(conds)
    g = rng.child("draws").generator()
    s_star = flowgen.draw_s_star(g, config.s_range, config.steps)
    x_star = flowgen.integrate_to(theta, cb, s_star, config.steps, config.guidance, g.standard_normal((4, dim)))
    x_ref = np.where(cb.mask > 0.5, g.standard_normal((4, dim)), cb.source)

    def fn(v):
        step = rl_step_loss(theta.with_values(v), phi, conds, x_ref, s_star, None, config, x_star=x_star)
        return step.loss, step.grads.values

    idx = _coords(fn, theta.values, n_coords, rng.child("coords").generator())
    return grad_check(fn, theta.values, 1e-5, idx).max_rel_error


def run_gradient_checks(rng: RngStream, dim: int = 32, points: int = 10, n_coords: int = 30,
                        hidden=(128, 128), spec: NetSpec | None = None) -> dict[str, GradCheckResult]:
    """All four checks, each at ``points`` random parameter points."""
    spec = spec or NetSpec()
    out = {}
    for name in CHECKS:
        errs = []
        for k in range(points):
            r = rng.child(name, k)
            if name == "fm_loss":
                errs.append(check_fm_loss(r, dim, hidden, n_coords))
            elif name == "rm_loss":
                errs.append(_check_pair_loss(r, dim, n_coords, False, spec))
            elif name == "bt_loss":
                errs.append(_check_pair_loss(r, dim, n_coords, True, spec))
            else:
                errs.append(check_rl_chain(r, dim, hidden, n_coords, spec))
        out[name] = GradCheckResult(name, errs)
    return out
