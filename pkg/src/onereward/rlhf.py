"""Multi-task reward-feedback fine-tuning of the generator.

Every iteration picks a task, draws a batch of its conditions, renders a
reference output with the reference generator (full denoise), renders the
policy output by partial denoising plus one differentiable jump, and asks the
frozen reward model, per evaluation dimension, whether the policy output beats
the reference. The loss per dimension is ``max(0, lam - p_yes)``; dimension
losses are averaged before the update.

``dynamic=True`` drops the separate EMA copy and lets the reference itself
track the policy by EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flowgen
from .flowgen import CondBatch
from .numcore import AdamState, ConfigurationError, NonFiniteError, ParamVector, RngStream, adam_step, ema_update
from .rewardmodel import RewardNet, encode_query, p_yes_and_input_grad
from .tasks import DIMENSIONS, TASK_NAMES, Condition, ContractViolation, oracle_score, sample_condition


@dataclass
class RlConfig:
    sample_probs: tuple = (0.5, 0.25, 0.25)
    lam: float = 0.95
    tau: float = 0.99
    s_range: tuple = (0.6, 0.95)
    steps: int = 20  # policy grid
    ref_steps: int = 20
    guidance: float = 2.0
    lr: float = 3e-4
    batch: int = 16
    iterations: int = 10000
    dynamic: bool = False

    def validate(self):
        p = np.asarray(self.sample_probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"sample_probs must be a distribution, got {self.sample_probs}")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigurationError("lam must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        s1, s2 = self.s_range
        if not 0.0 <= s1 < s2 < 1.0:
            raise ConfigurationError("need 0 <= s1 < s2 < 1")
        if flowgen.grid_times(self.s_range, self.steps).size == 0:
            raise ConfigurationError(f"no {self.steps}-step grid point inside {self.s_range}")
        return self


def sample_task(probs, rng) -> int:
    g = rng.generator() if isinstance(rng, RngStream) else rng
    return int(g.choice(len(probs), p=np.asarray(probs, dtype=float)))


# --------------------------------------------------------------------------
# one step

@dataclass
class StepResult:
    loss: float
    grads: ParamVector
    rows: list  # (sample index, task, dimension, p_yes, J_e)
    x_policy: np.ndarray
    x_ref: np.ndarray


def rl_step_loss(theta: ParamVector, phi: RewardNet, conds, x_ref, s_star: float, noise,
                 config: RlConfig, dims=None, x_star=None) -> StepResult:
    """Hinge loss averaged over dimensions then batch, and its gradient.

    Gradients reach theta only through the final one-step prediction; the
    reference output and the reward model are constants here. ``dims``
    overrides the per-condition dimension sets (used to test averaging).
    A given ``x_star`` replaces the no-gradient rollout from ``noise``.
    """
    conds = [conds] if isinstance(conds, Condition) else list(conds)
    cb = CondBatch.from_conditions(conds)
    if x_star is None:
        x_hat, hook = flowgen.partial_denoise_predict(theta, cb, s_star, config.steps, config.guidance,
                                                      np.atleast_2d(noise), config.s_range)
    else:
        x_hat, hook = flowgen.one_step_predict(theta, x_star, s_star, cb, config.guidance)
    x_pol = flowgen.vae_decode(np.where(cb.mask > 0.5, x_hat, cb.source))
    x_ref = flowgen.vae_decode(np.atleast_2d(np.asarray(x_ref, dtype=np.float64)))

    owners, queries, labels = [], [], []
    for b, c in enumerate(conds):
        dim_set = c.dimensions if dims is None else dims
        if not dim_set:
            raise ContractViolation("a condition with no evaluation dimensions cannot be scored")
        for d in dim_set:
            owners.append(b)
            queries.append(encode_query(c.task_id, d, c.prompt))
            labels.append(d)
    owners = np.array(owners)
    p, dxa = p_yes_and_input_grad(phi, x_pol[owners], x_ref[owners], np.stack(queries))
    J = np.maximum(0.0, config.lam - p)
    active = p < config.lam
    n_dims = np.bincount(owners, minlength=len(conds)).astype(np.float64)
    B = len(conds)
    weight = 1.0 / (n_dims[owners] * B)
    loss = float(np.sum(J * weight))
    g_rows = -(active * weight)[:, None] * dxa
    g_pol = np.zeros_like(x_pol)
    np.add.at(g_pol, owners, g_rows)
    g_hat = flowgen.vae_decode_backward(g_pol) * (cb.mask > 0.5)
    grads = hook.backward(g_hat)
    if not (np.isfinite(loss) and grads.is_finite()):
        raise NonFiniteError("RL step produced a non-finite loss or gradient")
    rows = [(int(owners[i]), conds[owners[i]].task_id, labels[i], float(p[i]), float(J[i]))
            for i in range(len(labels))]
    return StepResult(loss, grads, rows, x_pol, x_ref)


# --------------------------------------------------------------------------
# logging

@dataclass
class RewardLog:
    """Every scored (iteration, task, dimension) row of a run."""

    iteration: list = field(default_factory=list)
    task: list = field(default_factory=list)
    dimension: list = field(default_factory=list)
    p_yes: list = field(default_factory=list)
    j: list = field(default_factory=list)

    def add(self, it, rows):
        for _, task, dim, p, j in rows:
            self.iteration.append(it)
            self.task.append(task)
            self.dimension.append(dim)
            self.p_yes.append(p)
            self.j.append(j)

    def keys(self):
        return sorted({(t, d) for t, d in zip(self.task, self.dimension)},
                      key=lambda k: (k[0], DIMENSIONS.index(k[1])))

    def series(self, task: int, dim: str):
        """Per-iteration mean p_yes for one (task, dimension)."""
        it = np.asarray(self.iteration)
        sel = (np.asarray(self.task) == task) & (np.asarray(self.dimension) == dim)
        its, inv = np.unique(it[sel], return_inverse=True)
        vals = np.bincount(inv, weights=np.asarray(self.p_yes)[sel]) / np.bincount(inv)
        return its, vals

    def to_csv(self) -> str:
        lines = ["iteration,task,dimension,p_yes,j"]
        lines += [f"{i},{TASK_NAMES[t]},{d},{p!r},{j!r}"
                  for i, t, d, p, j in zip(self.iteration, self.task, self.dimension, self.p_yes, self.j)]
        return "\n".join(lines) + "\n"


def smooth(values, window: int) -> np.ndarray:
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


@dataclass
class CurveSummary:
    slope: float  # least-squares slope of the smoothed curve, per iteration
    initial: float
    final: float
    points: int


SMOOTH_WINDOW = 20  # logged points (each a batch mean) per moving-average window


def summarize_curve(its, vals, window: int = SMOOTH_WINDOW) -> CurveSummary:
    s = smooth(vals, window)
    x = smooth(np.asarray(its, dtype=np.float64), window)
    slope = float(np.polyfit(x, s, 1)[0]) if s.size > 1 else 0.0
    return CurveSummary(slope, float(s[0]), float(s[-1]), int(len(vals)))


def curve_summaries(log: RewardLog, window: int = SMOOTH_WINDOW) -> dict:
    return {key: summarize_curve(*log.series(*key), window=window) for key in log.keys()}


# --------------------------------------------------------------------------
# training loops

@dataclass
class RlResult:
    theta: ParamVector
    reference: ParamVector
    ema: ParamVector | None
    log: RewardLog
    resident_sets: int
    skipped_updates: int


def _draw_batch(task: int, batch: int, rng: RngStream, dim: int):
    return [sample_condition(task, rng.child("condition", b), dim) for b in range(batch)]


def _rl_loop(theta0: ParamVector, phi: RewardNet, config: RlConfig, rng: RngStream, dynamic: bool,
             callback=None) -> RlResult:
    config.validate()
    dim = theta0.n_out
    # the generator copies this loop keeps alive
    models = {"policy": theta0.copy(), "reference": theta0.copy()}
    if not dynamic:
        models["ema"] = theta0.copy()
    state = AdamState.fresh(theta0.values.size, lr=config.lr)
    log = RewardLog()
    skipped = 0
    for it in range(config.iterations):
        it_rng = rng.child("iteration", it)
        g = it_rng.child("draws").generator()
        task = sample_task(config.sample_probs, g)
        conds = _draw_batch(task, config.batch, it_rng, dim)
        cb = CondBatch.from_conditions(conds)
        eps_ref = g.standard_normal((config.batch, dim))
        eps_pol = g.standard_normal((config.batch, dim))
        s_star = flowgen.draw_s_star(g, config.s_range, config.steps)
        x_ref = flowgen.euler_sample(models["reference"], cb, config.ref_steps, config.guidance, eps_ref).final
        x_ref = np.where(cb.mask > 0.5, x_ref, cb.source)
        step = rl_step_loss(models["policy"], phi, conds, x_ref, s_star, eps_pol, config)
        log.add(it, step.rows)
        if step.loss == 0.0:
            skipped += 1
        else:
            try:
                state, models["policy"] = adam_step(state, models["policy"], step.grads)
            except NonFiniteError as e:
                raise NonFiniteError(f"RL iteration {it}: {e}") from None
        target = "reference" if dynamic else "ema"
        models[target] = ema_update(models[target], models["policy"], config.tau)
        if callback is not None:
            callback(it, models, step)
    return RlResult(models["policy"], models["reference"], models.get("ema"), log, len(models), skipped)


def train_rl(theta0: ParamVector, phi: RewardNet, config: RlConfig, rng: RngStream, callback=None) -> RlResult:
    """Fixed reference, separate EMA copy of the policy."""
    return _rl_loop(theta0, phi, config, rng, dynamic=False, callback=callback)


def train_rl_dynamic(theta0: ParamVector, phi: RewardNet, config: RlConfig, rng: RngStream,
                     callback=None) -> RlResult:
    """The reference is the EMA of the policy; only two generator copies live."""
    return _rl_loop(theta0, phi, config, rng, dynamic=True, callback=callback)


# --------------------------------------------------------------------------
# evaluation against the oracle judges

DEFAULT_SCALES = {
    "text_alignment": 0.25,
    "consistency": 0.35,
    "structure": 1.0,
    "aesthetics": 0.2,
    "removal_quality": 0.35,
}


def eval_conditions(n: int, rng: RngStream, dim: int, probs=None, per_task: bool = True):
    """``n`` fresh conditions per task (or ``n`` total drawn by ``probs``)."""
    if per_task:
        return {t: [sample_condition(t, rng.child("eval", t, i), dim) for i in range(n)] for t in range(3)}
    g = rng.child("eval-tasks").generator()
    tasks = g.choice(3, size=n, p=np.asarray(probs))
    out = {t: [] for t in range(3)}
    for i, t in enumerate(tasks):
        out[int(t)].append(sample_condition(int(t), rng.child("eval", i), dim))
    return out


def render(theta: ParamVector, conds, steps: int, guidance: float, noise) -> np.ndarray:
    cb = CondBatch.from_conditions(conds)
    x = flowgen.euler_sample(theta, cb, steps, guidance, noise).final
    return np.where(cb.mask > 0.5, x, cb.source)


def oracle_table(outputs, conds) -> dict[str, np.ndarray]:
    """Raw oracle score per dimension (NaN where a condition lacks it)."""
    table = {}
    for d in DIMENSIONS:
        col = np.full(len(conds), np.nan)
        for i, c in enumerate(conds):
            if d in c.dimensions:
                col[i] = oracle_score(d, outputs[i], c)
        if not np.all(np.isnan(col)):
            table[d] = col
    return table


def normalized_composite(table, scales=None) -> np.ndarray:
    scales = DEFAULT_SCALES if scales is None else scales
    cols = np.stack([table[d] / scales[d] for d in table])
    return np.nanmean(cols, axis=0)


@dataclass
class GsbResult:
    good: float
    same: float
    bad: float
    n: int
    win_rate: dict  # dimension -> fraction where model a scores higher (ties count half)
    mean_a: float
    mean_b: float


def gsb_eval(theta_a: ParamVector, theta_b: ParamVector, conditions, tie_eps: float = 0.02,
             steps: int = 20, guidance: float = 2.0, rng: RngStream | None = None, scales=None,
             outputs=None) -> dict:
    """Good/same/bad of model a against model b, per task.

    Both models share the initial noise of every condition. ``conditions``
    maps task id to a list of conditions. ``outputs`` may carry precomputed
    ``(out_a, out_b)`` per task, e.g. planted outputs.
    """
    rng = rng or RngStream(0)
    result = {}
    for task, conds in conditions.items():
        if not conds:
            continue
        if outputs is not None:
            out_a, out_b = outputs[task]
        else:
            noise = rng.child("gsb-noise", task).generator().standard_normal((len(conds), conds[0].dim))
            out_a = render(theta_a, conds, steps, guidance, noise)
            out_b = out_a if theta_b is theta_a else render(theta_b, conds, steps, guidance, noise)
        ta, tb = oracle_table(out_a, conds), oracle_table(out_b, conds)
        sa, sb = normalized_composite(ta, scales), normalized_composite(tb, scales)
        diff = sa - sb
        n = len(conds)
        good = int(np.sum(diff >= tie_eps))
        bad = int(np.sum(diff <= -tie_eps))
        win = {}
        for d in ta:
            ok = ~np.isnan(ta[d])
            a, b = ta[d][ok], tb[d][ok]
            win[d] = float(np.mean((a > b) + 0.5 * (a == b)))
        result[task] = GsbResult(good / n, (n - good - bad) / n, bad / n, n, win,
                                 float(np.mean(sa)), float(np.mean(sb)))
    return result


def mean_composite(theta: ParamVector, conditions, steps: int = 20, guidance: float = 2.0,
                   rng: RngStream | None = None, scales=None) -> float:
    """Mean normalized oracle composite over every condition of every task.

    Noise is drawn per task from ``rng`` exactly as :func:`gsb_eval` does, so
    two generators evaluated with the same stream see the same noise.
    """
    rng = rng or RngStream(0)
    vals = []
    for task, conds in conditions.items():
        if not conds:
            continue
        noise = rng.child("gsb-noise", task).generator().standard_normal((len(conds), conds[0].dim))
        out = render(theta, conds, steps, guidance, noise)
        vals.append(normalized_composite(oracle_table(out, conds), scales))
    return float(np.mean(np.concatenate(vals)))
