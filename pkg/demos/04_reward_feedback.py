# Reward-feedback fine-tuning with a fixed reference plus EMA, and with the EMA
# as the reference. A short run; the full-size one is `onereward all`.

# %%
from onereward import flowgen, prefdata, rlhf
from onereward import rewardmodel as rm
from onereward.config import TUNED_TIE_EPS
from onereward.numcore import RngStream
from onereward.tasks import TASK_NAMES

DIM = 32
rng = RngStream(4)
data, cb = flowgen.build_corpus(3000, (0.5, 0.25, 0.25), rng.child("corpus"), DIM)
theta0 = flowgen.init_generator(DIM, (64, 64), rng.child("init"))
theta0, _ = flowgen.train_fm(theta0, data, cb, 1000, 64, 2e-3, rng.child("fm"), lr_final=1e-4)
res = prefdata.generate_pairs(theta0, 1500, (0.5, 0.25, 0.25), rng.child("sets"), DIM, tie_eps=TUNED_TIE_EPS)
phi, _ = rm.train_rm(rm.TrainSpec(iterations=1500), res.pairs, rng.child("rm"), DIM)

# %% the hinge: nothing to gain once p_yes reaches lambda
cfg = rlhf.RlConfig(iterations=600, batch=8, lr=3e-4)
fixed = rlhf.train_rl(theta0, phi, cfg, rng.child("rl"))
dynamic = rlhf.train_rl_dynamic(theta0, phi, cfg, rng.child("rl"))
print("generator copies kept:", fixed.resident_sets, "vs", dynamic.resident_sets)
for (task, dim), s in rlhf.curve_summaries(fixed.log).items():
    print(f"{TASK_NAMES[task]:<8}{dim:<16} p_yes {s.initial:.3f} -> {s.final:.3f}")

# %% oracle good/same/bad against the starting point, shared noise
conds = rlhf.eval_conditions(100, rng.child("eval"), DIM)
for name, th in (("fixed", fixed.theta), ("ema", fixed.ema), ("dynamic", dynamic.theta)):
    gsb = rlhf.gsb_eval(th, theta0, conds, rng=rng.child("gsb"))
    print(name, {TASK_NAMES[t]: (round(r.good, 2), round(r.same, 2), round(r.bad, 2)) for t, r in gsb.items()})
