"""Preference-pair construction from candidate sets.

Each condition gets ``N`` candidates from the base generator with randomized
inference settings. Per evaluation dimension the best and worst candidate
form one winner/loser pair, unless the two are within ``tie_eps``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import flowgen
from .numcore import ParamVector, RngStream
from .tasks import (
    CONSISTENCY,
    DEFAULT_TIE_EPS,
    DIMENSIONS,
    EXTEND,
    FILL,
    REMOVAL,
    TEXT_ALIGNMENT,
    Condition,
    composite,
    oracle_score,
    sample_condition,
)

SCHEMA_VERSION = "onereward-pairs-v1"
STEP_CHOICES = (4, 8, 16, 32)
START_CHOICES = (0.0, 0.2)


class DatasetError(ValueError):
    pass


@dataclass
class CandidateSet:
    condition: Condition
    candidates: list  # composited signals
    gen_params: list  # (steps, guidance, start_time) per candidate
    set_id: int = 0


@dataclass
class PreferencePair:
    winner: np.ndarray
    loser: np.ndarray
    task_id: int
    dimension: str
    prompt: Optional[int]
    source_set_id: int
    # mask travels as an optional record field; source stays in memory
    mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    source: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __eq__(self, other):
        if not isinstance(other, PreferencePair):
            return NotImplemented
        return (
            np.array_equal(self.winner, other.winner)
            and np.array_equal(self.loser, other.loser)
            and (self.task_id, self.dimension, self.prompt, self.source_set_id)
            == (other.task_id, other.dimension, other.prompt, other.source_set_id)
        )


def gen_candidates(theta_base: ParamVector, cond: Condition, n: int, rng: RngStream,
                   guidance_range=(1.0, 4.0), set_id: int = 0) -> CandidateSet:
    """``n`` composited samples with independently drawn inference settings."""
    if n < 2:
        raise ValueError("a candidate set needs at least two members")
    g = rng.generator()
    outs, params = [], []
    for _ in range(n):
        steps = int(g.choice(STEP_CHOICES))
        w = float(g.uniform(*guidance_range))
        s0 = float(g.choice(START_CHOICES))
        eps = g.standard_normal(cond.dim)
        start = (1.0 - s0) * eps + s0 * cond.source
        x = flowgen.euler_sample(theta_base, cond, steps, w, eps, start_time=s0, start_state=start).final
        outs.append(composite(x, cond))
        params.append((steps, w, s0))
    return CandidateSet(cond, outs, params, set_id)


def score_table(cset: CandidateSet) -> dict[str, np.ndarray]:
    return {
        d: np.array([oracle_score(d, y, cset.condition) for y in cset.candidates])
        for d in cset.condition.dimensions
    }


def label_pairs(cset: CandidateSet, tie_eps=DEFAULT_TIE_EPS, scores=None) -> list[PreferencePair]:
    """Best-of-N vs worst-of-N per dimension; near-ties are dropped.

    ``tie_eps`` is a float or a per-dimension mapping.
    """
    scores = score_table(cset) if scores is None else scores
    cond = cset.condition
    pairs = []
    for dim, s in scores.items():
        eps = tie_eps[dim] if isinstance(tie_eps, dict) else tie_eps
        w, l = int(np.argmax(s)), int(np.argmin(s))
        if s[w] - s[l] < eps:
            continue
        pairs.append(PreferencePair(
            cset.candidates[w].copy(), cset.candidates[l].copy(), cond.task_id, dim, cond.prompt,
            cset.set_id, cond.mask.copy(), cond.source.copy(),
        ))
    return pairs


def winner_conflict(scores: dict[str, np.ndarray], a=None, b=None) -> bool:
    """True when two dimensions (or any two, if unnamed) crown different winners."""
    if a is not None:
        return int(np.argmax(scores[a])) != int(np.argmax(scores[b]))
    winners = {int(np.argmax(s)) for s in scores.values()}
    return len(winners) > 1


# --------------------------------------------------------------------------
# bulk generation

@dataclass
class GenerationResult:
    pairs: list
    n_sets: int
    comparisons: int  # dimension slots considered
    discarded: int
    conflict_sets: dict  # task -> number of sets with cross-dimension disagreement
    sets_per_task: dict
    alignment_conflicts: dict = field(default_factory=dict)  # task -> sets where the alignment and consistency winners differ
    alignment_sets: dict = field(default_factory=dict)  # task -> sets scored on both

    @property
    def discard_rate(self) -> float:
        return self.discarded / self.comparisons if self.comparisons else 0.0

    def conflict_fraction(self, task_id: int) -> float:
        n = self.sets_per_task.get(task_id, 0)
        return self.conflict_sets.get(task_id, 0) / n if n else 0.0

    def alignment_conflict_fraction(self, task_id: int) -> float:
        n = self.alignment_sets.get(task_id, 0)
        return self.alignment_conflicts.get(task_id, 0) / n if n else 0.0


def _one_set(args):
    theta_values, shape_spec, root, set_id, task_id, dim, n, tie_eps, guidance_range = args
    theta = ParamVector(theta_values, shape_spec)
    rng = RngStream(root).child("set", set_id)
    cond = sample_condition(task_id, rng.child("condition"), dim)
    cset = gen_candidates(theta, cond, n, rng.child("candidates"), guidance_range, set_id)
    scores = score_table(cset)
    pairs = label_pairs(cset, tie_eps, scores)
    both = TEXT_ALIGNMENT in scores and CONSISTENCY in scores
    aligned = winner_conflict(scores, TEXT_ALIGNMENT, CONSISTENCY) if both else None
    return pairs, len(scores), task_id, winner_conflict(scores), aligned


def set_tasks(n_sets: int, probs, rng: RngStream) -> np.ndarray:
    return rng.child("set-tasks").generator().choice(len(probs), size=n_sets, p=np.asarray(probs))


def generate_pairs(theta_base: ParamVector, n_sets: int, probs, rng: RngStream, dim: int,
                   n: int = 4, tie_eps=DEFAULT_TIE_EPS, guidance_range=(1.0, 4.0),
                   workers: int = 1) -> GenerationResult:
    """Candidate sets and their labelled pairs, ordered by set index.

    Every set draws from its own stream, so ``workers`` changes wall-clock
    time only.
    """
    tasks = set_tasks(n_sets, probs, rng)
    root = rng.child("sets").stream_id ^ rng.root_seed
    jobs = [
        (theta_base.values, theta_base.shape_spec, root, i, int(t), dim, n, tie_eps, guidance_range)
        for i, t in enumerate(tasks)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_set, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_one_set(j) for j in jobs]
    pairs, comparisons, conflicts, per_task, ta_conf, ta_sets = [], 0, {}, {}, {}, {}
    for set_pairs, n_dims, task_id, conflict, aligned in results:
        pairs.extend(set_pairs)
        comparisons += n_dims
        per_task[task_id] = per_task.get(task_id, 0) + 1
        conflicts[task_id] = conflicts.get(task_id, 0) + int(conflict)
        if aligned is not None:
            ta_sets[task_id] = ta_sets.get(task_id, 0) + 1
            ta_conf[task_id] = ta_conf.get(task_id, 0) + int(aligned)
    return GenerationResult(pairs, n_sets, comparisons, comparisons - len(pairs), conflicts, per_task,
                            ta_conf, ta_sets)


# --------------------------------------------------------------------------
# storage

def write_dataset(pairs, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for p in pairs:
            rec = {
                "schema_version": SCHEMA_VERSION,
                "task_id": int(p.task_id),
                "dimension": p.dimension,
                "prompt_class": p.prompt,
                "winner": [float(v) for v in p.winner],
                "loser": [float(v) for v in p.loser],
                "source_set_id": int(p.source_set_id),
            }
            if p.mask is not None:
                rec["mask"] = [int(v) for v in p.mask]
            f.write(json.dumps(rec) + "\n")
    tmp.replace(path)


def read_dataset(path) -> list[PreferencePair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed record ({e.msg})") from None
            version = rec.get("schema_version")
            if version != SCHEMA_VERSION:
                raise DatasetError(f"{path}:{lineno}: schema {version!r} is not {SCHEMA_VERSION!r}")
            try:
                pair = PreferencePair(
                    np.array(rec["winner"], dtype=np.float64),
                    np.array(rec["loser"], dtype=np.float64),
                    int(rec["task_id"]),
                    rec["dimension"],
                    rec["prompt_class"],
                    int(rec["source_set_id"]),
                    np.array(rec["mask"], dtype=np.float64) if "mask" in rec else None,
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: bad field ({e})") from None
            if pair.dimension not in DIMENSIONS or pair.task_id not in (FILL, EXTEND, REMOVAL):
                raise DatasetError(f"{path}:{lineno}: unknown task/dimension")
            pairs.append(pair)
    return pairs


def split_dataset(pairs, test_fraction: float, rng: RngStream):
    """Split by candidate set so winner and loser of one set stay together."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    ids = sorted({p.source_set_id for p in pairs})
    g = rng.generator()
    perm = g.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_ids = {ids[i] for i in perm[:n_test]}
    train = [p for p in pairs if p.source_set_id not in test_ids]
    test = [p for p in pairs if p.source_set_id in test_ids]
    return train, test
