"""Synthetic mask-guided editing tasks and their analytic judges.

Signals are length-``D`` float arrays built from two sinusoids. Three tasks
share one condition format (source, mask, prompt, task id):

* fill    -- regenerate an interior window,
* extend  -- regenerate a suffix,
* removal -- erase a planted Gaussian bump.

The ``oracle_score`` functions stand in for human raters; higher is better.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .numcore import RngStream

FILL, EXTEND, REMOVAL = 0, 1, 2
TASK_NAMES = ("fill", "extend", "removal")

TEXT_ALIGNMENT = "text_alignment"
CONSISTENCY = "consistency"
STRUCTURE = "structure"
AESTHETICS = "aesthetics"
REMOVAL_QUALITY = "removal_quality"
DIMENSIONS = (TEXT_ALIGNMENT, CONSISTENCY, STRUCTURE, AESTHETICS, REMOVAL_QUALITY)

N_CLASSES = 3
REMOVE = -1  # fixed prompt for every removal sample
CLASS_TARGETS = (0.3, 0.8, 1.3)  # masked-region RMS each prompt class asks for

DEFAULT_DIM = 32
DEFAULT_TIE_EPS = 0.02
BUMP_KERNEL_SIGMA = 1.5
BUMP_KERNEL_HALFWIDTH = 4
N_FOURIER = 6

_EDIT_DIMS = (TEXT_ALIGNMENT, CONSISTENCY, STRUCTURE, AESTHETICS)
_REMOVAL_DIMS = (REMOVAL_QUALITY, CONSISTENCY)


class ContractViolation(ValueError):
    pass


class Preference(enum.Enum):
    A_WINS = "A_WINS"
    B_WINS = "B_WINS"
    TIE = "TIE"


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    dimension_set: tuple[str, ...]
    sample_prob: float

    @property
    def name(self) -> str:
        return TASK_NAMES[self.task_id]


def default_task_specs(probs=(0.5, 0.25, 0.25)) -> list[TaskSpec]:
    if abs(sum(probs) - 1.0) > 1e-12:
        raise ContractViolation(f"task probabilities must sum to 1, got {probs}")
    return [
        TaskSpec(FILL, _EDIT_DIMS, probs[0]),
        TaskSpec(EXTEND, _EDIT_DIMS, probs[1]),
        TaskSpec(REMOVAL, _REMOVAL_DIMS, probs[2]),
    ]


def task_dimensions(task_id: int, prompt: Optional[int]) -> tuple[str, ...]:
    """Dimensions scored for one condition; alignment needs a real prompt."""
    if task_id == REMOVAL:
        return _REMOVAL_DIMS
    if task_id in (FILL, EXTEND):
        if prompt is None or prompt == REMOVE:
            return _EDIT_DIMS[1:]
        return _EDIT_DIMS
    raise ContractViolation(f"unknown task id {task_id}")


def valid_dimension(task_id: int, dim: str) -> bool:
    if task_id == REMOVAL:
        return dim in _REMOVAL_DIMS
    return dim in _EDIT_DIMS


@dataclass
class SourceSample:
    """A drawn source signal plus what went into it."""

    values: np.ndarray
    clean: np.ndarray  # sinusoid part only
    amplitudes: tuple[float, float]
    freqs: tuple[int, int]
    phases: tuple[float, float]
    bump: Optional[tuple[float, float, int]] = None  # (height, sigma, center)


@dataclass
class Condition:
    source: np.ndarray
    mask: np.ndarray  # float 0/1
    prompt: Optional[int]  # class id, None, or REMOVE
    task_id: int
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.source.shape[0]

    @property
    def masked_source(self) -> np.ndarray:
        return self.source * (1.0 - self.mask)

    @property
    def dimensions(self) -> tuple[str, ...]:
        return task_dimensions(self.task_id, self.prompt)


def sinusoid(n: int, amplitudes, freqs, phases) -> np.ndarray:
    i = np.arange(n)
    return sum(a * np.sin(2 * np.pi * f * i / n + p) for a, f, p in zip(amplitudes, freqs, phases))


def gaussian_bump(n: int, height: float, sigma: float, center: float) -> np.ndarray:
    i = np.arange(n)
    return height * np.exp(-((i - center) ** 2) / (2 * sigma**2))


def sample_source(task: TaskSpec | int, rng: RngStream, dim: int = DEFAULT_DIM) -> SourceSample:
    task_id = task if isinstance(task, int) else task.task_id
    g = rng.generator()
    amps = tuple(float(a) for a in g.uniform(0.5, 1.5, size=2))
    freqs = tuple(int(f) for f in g.integers(1, 4, size=2))
    phases = tuple(float(p) for p in g.uniform(0, 2 * np.pi, size=2))
    clean = sinusoid(dim, amps, freqs, phases)
    if task_id != REMOVAL:
        return SourceSample(clean.copy(), clean, amps, freqs, phases)
    height = float(g.uniform(1.0, 2.0))
    sigma = float(g.uniform(1.0, 2.0))
    center = int(g.integers(3, dim - 3))
    values = clean + gaussian_bump(dim, height, sigma, center)
    return SourceSample(values, clean, amps, freqs, phases, (height, sigma, center))


def removal_mask(dim: int, sigma: float, center: int) -> np.ndarray:
    i = np.arange(dim)
    return ((i >= center - 2 * sigma) & (i <= center + 2 * sigma)).astype(np.float64)


def make_condition(task: TaskSpec | int, source: SourceSample, rng: RngStream,
                   prompt: Optional[int] = ..., ) -> Condition:
    """Draw a legal mask and prompt for ``source``.

    Passing ``prompt`` overrides the random prompt draw.
    """
    task_id = task if isinstance(task, int) else task.task_id
    g = rng.generator()
    dim = source.values.shape[0]
    if dim < 18:
        raise ContractViolation(f"signals of length {dim} cannot hold a 16-wide mask with context")
    mask = np.zeros(dim)
    if task_id == FILL:
        width = int(g.integers(8, 17))
        start = int(g.integers(1, dim - width))  # keeps at least one index either side
        mask[start:start + width] = 1.0
        drawn = int(g.integers(0, N_CLASSES))
    elif task_id == EXTEND:
        width = int(g.integers(8, 17))
        mask[dim - width:] = 1.0
        drawn = int(g.integers(0, N_CLASSES)) if g.random() < 0.5 else None
    elif task_id == REMOVAL:
        if source.bump is None:
            raise ContractViolation("removal condition needs a source with a planted bump")
        _, sigma, center = source.bump
        mask = removal_mask(dim, sigma, center)
        drawn = REMOVE
    else:
        raise ContractViolation(f"unknown task id {task_id}")
    if prompt is not ...:
        drawn = prompt
    meta = {"clean": source.clean, "bump": source.bump}
    return Condition(source.values.copy(), mask, drawn, task_id, meta)


def caption_class(data: np.ndarray, mask: np.ndarray) -> int:
    """Prompt class whose target RMS is nearest the data's masked RMS."""
    r = masked_rms(data, mask)
    return int(np.argmin([abs(r - t) for t in CLASS_TARGETS]))


TAPER = 4  # samples over which prompted content blends into the context
AMPLITUDE_JITTER = 0.1  # log-scale spread around the class target


def taper_ramp(mask: np.ndarray, width: int = TAPER) -> np.ndarray:
    """1 next to visible context, falling to 0 ``width`` samples inside the mask."""
    m = mask > 0.5
    idx = np.flatnonzero(m)
    dist = np.full(mask.shape, np.inf)
    for edge in boundary_indices(mask):
        # the masked side of each context/mask switch
        inside = edge if m[edge] else edge - 1
        dist[idx] = np.minimum(dist[idx], np.abs(idx - inside))
    ramp = np.zeros(mask.shape)
    d = np.minimum(dist[idx], width)
    ramp[idx] = 0.5 * (1.0 + np.cos(np.pi * d / width))
    return ramp


def rescale_masked(values: np.ndarray, mask: np.ndarray, target_rms: float) -> np.ndarray:
    """Scale the masked content toward ``target_rms`` with a tapered envelope.

    The envelope is ``ramp + a * (1 - ramp)``; ``a`` solves the quadratic
    that makes the masked RMS hit the target exactly when that is possible.
    """
    m = mask > 0.5
    ramp = taper_ramp(mask)[m]
    v = values[m]
    u = 1.0 - ramp
    # sum (v (a u + ramp))^2 = n T^2
    qa, qb = np.sum((v * u) ** 2), 2.0 * np.sum(v * v * u * ramp)
    qc = np.sum((v * ramp) ** 2) - v.size * target_rms ** 2
    disc = qb * qb - 4.0 * qa * qc
    a = (-qb + np.sqrt(disc)) / (2.0 * qa) if qa > 0 and disc >= 0 else 0.0
    out = values.copy()
    out[m] = v * (ramp + max(a, 0.0) * u)
    return out


def sample_training_example(task_id: int, rng: RngStream, dim: int = DEFAULT_DIM):
    """(clean target, condition) for flow-matching pre-training.

    Prompted fill/extend targets get masked content rescaled toward the drawn
    class amplitude, so the prompt carries information the context cannot;
    the caption is then read back off the content, as captions describe images.
    """
    src = sample_source(task_id, rng.child("source"), dim)
    cond = make_condition(task_id, src, rng.child("condition"))
    data = src.clean.copy() if task_id == REMOVAL else src.values.copy()
    if task_id in (FILL, EXTEND) and cond.prompt is not None:
        jitter = np.exp(AMPLITUDE_JITTER * rng.child("amplitude").generator().standard_normal())
        data = rescale_masked(data, cond.mask, CLASS_TARGETS[cond.prompt] * jitter)
        cond.prompt = caption_class(data, cond.mask)
    return data, cond


def sample_condition(task_id: int, rng: RngStream, dim: int = DEFAULT_DIM) -> Condition:
    src = sample_source(task_id, rng.child("source"), dim)
    return make_condition(task_id, src, rng.child("condition"))


def composite(output, cond: Condition) -> np.ndarray:
    output = np.asarray(output, dtype=np.float64)
    if output.shape[-1] != cond.source.shape[0]:
        raise ContractViolation("output and source lengths differ")
    return np.where(cond.mask > 0.5, output, cond.source)


# --------------------------------------------------------------------------
# oracle judges

def masked_rms(y: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sqrt(np.mean(y[mask > 0.5] ** 2)))


def boundary_indices(mask: np.ndarray) -> np.ndarray:
    """Indices i >= 1 where the mask switches between i-1 and i."""
    m = mask > 0.5
    return np.flatnonzero(m[1:] != m[:-1]) + 1


def interior_indices(mask: np.ndarray) -> np.ndarray:
    m = mask > 0.5
    return np.flatnonzero(m[1:-1] & m[:-2] & m[2:]) + 1


@lru_cache(maxsize=4096)
def _fourier_residual_operator(mask_key: bytes, dim: int) -> np.ndarray:
    idx = np.flatnonzero(np.frombuffer(mask_key, dtype=bool))
    cols = [np.ones(dim)]
    k = 1
    while len(cols) < N_FOURIER:
        cols.append(np.cos(2 * np.pi * k * np.arange(dim) / dim))
        if len(cols) < N_FOURIER:
            cols.append(np.sin(2 * np.pi * k * np.arange(dim) / dim))
        k += 1
    B = np.stack(cols, axis=1)[idx]
    # I - B B^+ maps the masked region to its least-squares residual
    return np.eye(idx.size) - B @ np.linalg.pinv(B)


@lru_cache(maxsize=64)
def _bump_filters(dim: int) -> np.ndarray:
    """Row c: zero-mean, unit-norm Gaussian template centred on c."""
    i = np.arange(dim)
    F = np.zeros((dim, dim))
    for c in range(dim):
        win = np.abs(i - c) <= BUMP_KERNEL_HALFWIDTH
        k = np.exp(-((i[win] - c) ** 2) / (2 * BUMP_KERNEL_SIGMA**2))
        k = k - k.mean()
        F[c, win] = k / np.linalg.norm(k)
    return F


def _score_composited(dim_name: str, y: np.ndarray, cond: Condition) -> float:
    mask = cond.mask
    if dim_name == TEXT_ALIGNMENT:
        if cond.prompt is None or cond.prompt == REMOVE:
            raise ContractViolation("text alignment needs a class prompt")
        return -abs(masked_rms(y, mask) - CLASS_TARGETS[cond.prompt])
    if dim_name == CONSISTENCY:
        b = boundary_indices(mask)
        if b.size == 0:
            return 0.0
        return -float(np.max(np.abs(y[b] - y[b - 1])))
    if dim_name == STRUCTURE:
        i = interior_indices(mask)
        return -float(np.sum((y[i + 1] - 2 * y[i] + y[i - 1]) ** 2))
    if dim_name == AESTHETICS:
        m = mask > 0.5
        R = _fourier_residual_operator(m.tobytes(), y.shape[0])
        return -float(np.linalg.norm(R @ y[m]))
    if dim_name == REMOVAL_QUALITY:
        F = _bump_filters(y.shape[0])
        m = mask > 0.5
        return -float(np.max(F[m] @ y))
    raise ContractViolation(f"unknown dimension {dim_name!r}")


def oracle_score(dim_name: str, output, cond: Condition) -> float:
    if not valid_dimension(cond.task_id, dim_name):
        raise ContractViolation(f"{dim_name} is not scored for task {TASK_NAMES[cond.task_id]}")
    return _score_composited(dim_name, composite(output, cond), cond)


def oracle_prefer(dim_name: str, a, b, cond: Condition, tie_eps: float = DEFAULT_TIE_EPS) -> Preference:
    if tie_eps <= 0:
        raise ContractViolation("tie_eps must be positive")
    sa = oracle_score(dim_name, a, cond)
    sb = oracle_score(dim_name, b, cond)
    if abs(sa - sb) < tie_eps:
        return Preference.TIE
    return Preference.A_WINS if sa > sb else Preference.B_WINS
