import json

import numpy as np
import pytest

from onereward import flowgen, prefdata
from onereward.numcore import RngStream
from onereward.prefdata import (
    SCHEMA_VERSION,
    CandidateSet,
    DatasetError,
    PreferencePair,
    gen_candidates,
    label_pairs,
    read_dataset,
    split_dataset,
    write_dataset,
)
from onereward.tasks import (
    CONSISTENCY,
    DIMENSIONS,
    FILL,
    STRUCTURE,
    TEXT_ALIGNMENT,
    Condition,
    oracle_score,
    sample_condition,
)

D = 24


@pytest.fixture(scope="module")
def theta():
    return flowgen.init_generator(D, (16,), RngStream(0))


def test_four_candidates_with_independent_settings(theta):
    c = sample_condition(FILL, RngStream(1), D)
    cs = gen_candidates(theta, c, 4, RngStream(2))
    assert len(cs.candidates) == 4 and len(cs.gen_params) == 4
    for (steps, w, s0), y in zip(cs.gen_params, cs.candidates):
        assert steps in (4, 8, 16, 32) and 1 <= w <= 4 and s0 in (0.0, 0.2)
        assert np.array_equal(y[c.mask < 0.5], c.source[c.mask < 0.5])
    assert len(set(cs.gen_params)) == 4
    with pytest.raises(ValueError):
        gen_candidates(theta, c, 1, RngStream(2))


def test_candidate_replay_is_bitwise(theta):
    c = sample_condition(FILL, RngStream(3), D)
    a = gen_candidates(theta, c, 4, RngStream(4))
    b = gen_candidates(theta, c, 4, RngStream(4))
    assert all(np.array_equal(x, y) for x, y in zip(a.candidates, b.candidates))
    assert a.gen_params == b.gen_params


def test_solver_resolution_changes_output(theta):
    c = sample_condition(FILL, RngStream(5), D)
    eps = np.random.default_rng(0).standard_normal(D)
    coarse = flowgen.euler_sample(theta, c, 4, 2.0, eps).final
    fine = flowgen.euler_sample(theta, c, 32, 2.0, eps).final
    assert not np.array_equal(coarse, fine)


def fake_set(n=4):
    c = sample_condition(FILL, RngStream(6), D)
    return CandidateSet(c, [np.full(D, float(i)) for i in range(n)], [(4, 1.0, 0.0)] * n, set_id=9)


def test_label_argmax_argmin():
    cs = fake_set()
    pairs = label_pairs(cs, 0.02, scores={STRUCTURE: np.array([0.9, 0.2, 0.5, 0.7])})
    assert len(pairs) == 1
    assert pairs[0].winner[0] == 0.0 and pairs[0].loser[0] == 1.0 and pairs[0].source_set_id == 9


def test_global_tie_emits_nothing():
    cs = fake_set()
    assert label_pairs(cs, 0.02, scores={STRUCTURE: np.array([0.50, 0.51, 0.505, 0.5])}) == []
    per_dim = {STRUCTURE: 0.5, TEXT_ALIGNMENT: 0.01}
    scores = {STRUCTURE: np.array([0.9, 0.2, 0.5, 0.7]), TEXT_ALIGNMENT: np.array([0.0, 0.3, 0.1, 0.2])}
    assert [p.dimension for p in label_pairs(cs, per_dim, scores=scores)] == [STRUCTURE, TEXT_ALIGNMENT]


def test_planted_conflict_emits_both_labels():
    mask = np.zeros(D)
    mask[8:18] = 1
    src = np.zeros(D)
    c = Condition(src, mask, 2, FILL)  # alignment target RMS 1.3
    inside = mask > 0.5
    cands = []
    for level in (0.0, 0.1, 0.2, 1.3):
        y = src.copy()
        y[inside] = level
        cands.append(y)
    cs = CandidateSet(c, cands, [(4, 1.0, 0.0)] * 4, 0)
    # candidate 3 matches the prompt but leaves a 1.3 jump at both edges
    ta = [oracle_score(TEXT_ALIGNMENT, y, c) for y in cands]
    co = [oracle_score(CONSISTENCY, y, c) for y in cands]
    assert np.argmax(ta) == 3 and np.argmin(co) == 3
    pairs = {p.dimension: p for p in label_pairs(cs, 0.02)}
    assert np.array_equal(pairs[TEXT_ALIGNMENT].winner, cands[3])
    assert np.array_equal(pairs[CONSISTENCY].loser, cands[3])


def random_pairs(n, seed=0):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        dim = DIMENSIONS[i % 4]
        out.append(PreferencePair(g.standard_normal(D), g.standard_normal(D), i % 2, dim,
                                  int(g.integers(3)) if dim == TEXT_ALIGNMENT else None, i // 2,
                                  (g.random(D) < 0.5).astype(float)))
    return out


def test_roundtrip_is_exact(tmp_path):
    pairs = random_pairs(100)
    path = tmp_path / "pairs.jsonl"
    write_dataset(pairs, path)
    back = read_dataset(path)
    assert back == pairs
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(pairs, back))
    first = json.loads(path.read_text().splitlines()[0])
    assert first["schema_version"] == SCHEMA_VERSION
    assert {"task_id", "dimension", "prompt_class", "winner", "loser", "source_set_id"} <= set(first)


def test_truncated_line_names_its_number(tmp_path):
    path = tmp_path / "pairs.jsonl"
    write_dataset(random_pairs(5), path)
    text = path.read_text()
    path.write_text(text[:-40])
    with pytest.raises(DatasetError, match=":5:"):
        read_dataset(path)


def test_empty_file_and_version_mismatch(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert read_dataset(empty) == []
    bad = tmp_path / "old.jsonl"
    write_dataset(random_pairs(2), bad)
    bad.write_text(bad.read_text().replace(SCHEMA_VERSION, "onereward-pairs-v0"))
    with pytest.raises(DatasetError, match="schema"):
        read_dataset(bad)


def test_split_by_candidate_set():
    pairs = [p for p in random_pairs(300) if p.source_set_id < 100]
    assert len({p.source_set_id for p in pairs}) == 100
    train, test = split_dataset(pairs, 0.2, RngStream(3))
    train_ids = {p.source_set_id for p in train}
    test_ids = {p.source_set_id for p in test}
    assert abs(len(test_ids) - 20) <= 1
    assert not train_ids & test_ids
    again = split_dataset(pairs, 0.2, RngStream(3))
    assert again[1] == test
    with pytest.raises(ValueError):
        split_dataset(pairs, 1.0, RngStream(3))


def test_generated_pairs_respect_thresholds(theta):
    tie = {d: 0.05 for d in DIMENSIONS}
    res = prefdata.generate_pairs(theta, 60, (0.5, 0.25, 0.25), RngStream(7), D, tie_eps=tie)
    assert res.pairs
    for p in res.pairs:
        c = Condition(p.source, p.mask, p.prompt, p.task_id)
        gap = oracle_score(p.dimension, p.winner, c) - oracle_score(p.dimension, p.loser, c)
        assert gap >= tie[p.dimension]
    counts = {}
    for p in res.pairs:
        counts[(p.task_id, p.dimension)] = counts.get((p.task_id, p.dimension), 0) + 1
    assert all(v <= res.sets_per_task[t] for (t, _), v in counts.items())
    assert 0.0 <= res.discard_rate <= 1.0
    assert res.conflict_fraction(FILL) > 0


def test_worker_count_does_not_change_pairs(theta):
    a = prefdata.generate_pairs(theta, 12, (0.5, 0.25, 0.25), RngStream(8), D, workers=1)
    b = prefdata.generate_pairs(theta, 12, (0.5, 0.25, 0.25), RngStream(8), D, workers=3)
    assert a.pairs == b.pairs and a.discarded == b.discarded
