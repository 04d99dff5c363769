# Best-of-N / worst-of-N annotation with analytic judges: candidate sets from a
# generator, one pair per dimension, near-ties dropped, conflicts counted.

# %%
import numpy as np

from onereward import flowgen, prefdata
from onereward.config import TUNED_TIE_EPS
from onereward.numcore import RngStream
from onereward.tasks import FILL, TASK_NAMES, sample_condition

DIM = 32
rng = RngStream(2)
data, cb = flowgen.build_corpus(3000, (0.5, 0.25, 0.25), rng.child("corpus"), DIM)
theta = flowgen.init_generator(DIM, (64, 64), rng.child("init"))
theta, _ = flowgen.train_fm(theta, data, cb, 1000, 64, 2e-3, rng.child("fm"), lr_final=1e-4)

# %% one candidate set: steps, guidance and start time vary per candidate
c = sample_condition(FILL, rng.child("cond"), DIM)
cs = prefdata.gen_candidates(theta, c, 4, rng.child("cands"))
for params, y in zip(cs.gen_params, cs.candidates):
    print(params, np.round(y[c.mask > 0.5][:6], 2))
scores = prefdata.score_table(cs)
for d, s in scores.items():
    print(f"{d:<16}", np.round(s, 3), "winner", s.argmax(), "loser", s.argmin())
print("winners disagree:", prefdata.winner_conflict(scores))

# %% many sets
res = prefdata.generate_pairs(theta, 400, (0.5, 0.25, 0.25), rng.child("sets"), DIM, tie_eps=TUNED_TIE_EPS)
print(len(res.pairs), "pairs, discard rate", round(res.discard_rate, 3))
for t in sorted(res.sets_per_task):
    print(TASK_NAMES[t], "conflict fraction", round(res.conflict_fraction(t), 3))
train, test = prefdata.split_dataset(res.pairs, 0.2, rng.child("split"))
print(len(train), "train /", len(test), "test")
