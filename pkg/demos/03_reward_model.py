# One query-conditioned pairwise judge for every task and dimension, next to a
# scalar Bradley-Terry model on the same pairs.

# %%
from onereward import flowgen, prefdata
from onereward import rewardmodel as rm
from onereward.config import TUNED_TIE_EPS
from onereward.numcore import RngStream
from onereward.tasks import CONSISTENCY, FILL, TEXT_ALIGNMENT

DIM = 32
rng = RngStream(3)
data, cb = flowgen.build_corpus(3000, (0.5, 0.25, 0.25), rng.child("corpus"), DIM)
theta = flowgen.init_generator(DIM, (64, 64), rng.child("init"))
theta, _ = flowgen.train_fm(theta, data, cb, 1000, 64, 2e-3, rng.child("fm"), lr_final=1e-4)
res = prefdata.generate_pairs(theta, 1500, (0.5, 0.25, 0.25), rng.child("sets"), DIM, tie_eps=TUNED_TIE_EPS)
train, test = prefdata.split_dataset(res.pairs, 0.2, rng.child("split"))

# %% the query: task | dimension | prompt (prompt bits only for alignment)
print(rm.encode_query(FILL, TEXT_ALIGNMENT, 2))
print(rm.encode_query(FILL, CONSISTENCY, 2))

# %% train both models with the same budget
spec = rm.TrainSpec(iterations=800, batch=64, lr=3e-3, lr_final=3e-4)
phi, curve = rm.train_rm(spec, train, rng.child("rm"), DIM)
psi, _ = rm.train_bt(spec, train, rng.child("bt"), DIM)
print(f"pairwise loss {curve[:50].mean():.3f} -> {curve[-100:].mean():.3f}")
print(rm.accuracy_grid(rm.eval_rm_accuracy(phi, test)))
print(rm.accuracy_grid(rm.eval_rm_accuracy(psi, test, rm.bt_correct)))

# %% position matters: the same pair, read in both orders
W, L, Q = rm._pair_arrays(test)
print("p_yes(w, l) =", rm.p_yes_batch(phi, W, L, Q).mean().round(3),
      " p_yes(l, w) =", rm.p_yes_batch(phi, L, W, Q).mean().round(3))
