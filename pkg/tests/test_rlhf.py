import numpy as np
import pytest

from onereward import diagnostics, flowgen, rlhf
from onereward import rewardmodel as rm
from onereward.numcore import RngStream
from onereward.rlhf import RlConfig, rl_step_loss, sample_task
from onereward.tasks import CONSISTENCY, FILL, REMOVAL, STRUCTURE, ContractViolation, sample_condition

D = 24
SMALL = rm.NetSpec(window=2, encoder=(12,), pooled=6, head=(8,))


def constant_judge(p_yes, seed=0):
    """Reward model that answers ``p_yes`` for every input."""
    phi = rm.init_reward_model(D, SMALL, RngStream(seed), zero_last=True)
    _, b = phi.params.layers()[-1]
    b[0] = np.log(p_yes / (1 - p_yes))
    return phi


@pytest.fixture(scope="module")
def theta0():
    return flowgen.init_generator(D, (16,), RngStream(1))


@pytest.fixture(scope="module")
def phi():
    return rm.init_reward_model(D, SMALL, RngStream(2))


def small_config(**kw):
    base = dict(iterations=12, batch=3, steps=10, ref_steps=4, lr=1e-3, tau=0.9)
    base.update(kw)
    return RlConfig(**base)


def step_inputs(theta, n=3, task=FILL, seed=0):
    conds = [sample_condition(task, RngStream(seed).child(i), D) for i in range(n)]
    g = np.random.default_rng(seed)
    x_ref = np.stack([np.where(c.mask > 0.5, g.standard_normal(D), c.source) for c in conds])
    return conds, x_ref, g.standard_normal((n, D))


def test_sample_task():
    g = np.random.default_rng(0)
    assert {sample_task((1, 0, 0), g) for _ in range(200)} == {0}
    a = [sample_task((0.2, 0.3, 0.5), RngStream(4).child(i)) for i in range(50)]
    assert a == [sample_task((0.2, 0.3, 0.5), RngStream(4).child(i)) for i in range(50)]


def test_hinge_arithmetic(theta0):
    conds, x_ref, noise = step_inputs(theta0)
    half = rl_step_loss(theta0, constant_judge(0.5), conds, x_ref, 0.7, noise, small_config(lam=0.95))
    assert all(j == pytest.approx(0.45, abs=1e-15) for *_, j in half.rows)
    assert half.loss == pytest.approx(0.45, abs=1e-15)
    sure = rl_step_loss(theta0, constant_judge(0.97), conds, x_ref, 0.7, noise, small_config(lam=0.95))
    assert all(j == 0.0 for *_, j in sure.rows) and sure.loss == 0.0
    assert not sure.grads.values.any()


def test_step_gradient_through_the_whole_chain():
    r = RngStream(5)
    err = diagnostics.check_rl_chain(r, D, (16,), 40, SMALL)
    assert err <= 1e-6


def test_dimension_averaging(theta0, phi):
    conds, x_ref, noise = step_inputs(theta0, n=2)
    cfg = small_config(lam=1.0)
    both = rl_step_loss(theta0, phi, conds, x_ref, 0.7, noise, cfg, dims=(CONSISTENCY, STRUCTURE))
    one = rl_step_loss(theta0, phi, conds, x_ref, 0.7, noise, cfg, dims=(CONSISTENCY,))
    two = rl_step_loss(theta0, phi, conds, x_ref, 0.7, noise, cfg, dims=(STRUCTURE,))
    assert np.allclose(both.grads.values, 0.5 * (one.grads.values + two.grads.values), atol=1e-15)
    assert both.loss == pytest.approx(0.5 * (one.loss + two.loss), abs=1e-15)
    with pytest.raises(ContractViolation):
        rl_step_loss(theta0, phi, conds, x_ref, 0.7, noise, cfg, dims=())


def test_policy_output_is_composited(theta0, phi):
    conds, x_ref, noise = step_inputs(theta0, task=REMOVAL)
    step = rl_step_loss(theta0, phi, conds, x_ref, 0.7, noise, small_config())
    for c, x in zip(conds, step.x_policy):
        assert np.array_equal(x[c.mask < 0.5], c.source[c.mask < 0.5])


def test_saturated_judge_leaves_parameters_alone(theta0):
    res = rlhf.train_rl(theta0, constant_judge(0.97), small_config(iterations=5), RngStream(6))
    assert np.array_equal(res.theta.values, theta0.values)
    assert res.skipped_updates == 5


def test_fixed_reference_loop(theta0, phi):
    cfg = small_config()
    gaps = []

    def watch(it, models, step):
        gaps.append((np.linalg.norm(models["ema"].values - models["policy"].values), models["policy"].values.copy()))

    res = rlhf.train_rl(theta0, phi, cfg, RngStream(7), callback=watch)
    assert np.array_equal(res.reference.values, theta0.values)
    assert not np.array_equal(res.ema.values, theta0.values)
    assert res.resident_sets == 3
    # EMA distance grows by at most the policy step
    prev_gap, prev_theta = 0.0, theta0.values
    for gap, th in gaps:
        assert gap <= prev_gap + np.linalg.norm(th - prev_theta) + 1e-12
        prev_gap, prev_theta = gap, th
    again = rlhf.train_rl(theta0, phi, cfg, RngStream(7))
    assert np.array_equal(res.theta.values, again.theta.values)
    for t, d, p, j in zip(res.log.task, res.log.dimension, res.log.p_yes, res.log.j):
        assert 0.0 < p < 1.0
        assert j == (0.0 if p >= cfg.lam else cfg.lam - p)


def test_dynamic_loop(theta0, phi):
    cfg = small_config()
    dyn = rlhf.train_rl_dynamic(theta0, phi, cfg, RngStream(8))
    assert dyn.resident_sets == 2 and dyn.ema is None
    assert not np.array_equal(dyn.reference.values, theta0.values)
    # tau = 1 freezes the reference, which is exactly the fixed-reference loop
    frozen = small_config(tau=1.0)
    a = rlhf.train_rl_dynamic(theta0, phi, frozen, RngStream(8))
    b = rlhf.train_rl(theta0, phi, frozen, RngStream(8))
    assert np.array_equal(a.theta.values, b.theta.values)
    assert np.array_equal(a.reference.values, theta0.values)


def test_config_validation():
    with pytest.raises(Exception, match="sample_probs"):
        RlConfig(sample_probs=(0.5, 0.5, 0.5)).validate()
    with pytest.raises(Exception, match="lam"):
        RlConfig(lam=0.0).validate()
    with pytest.raises(Exception, match="s1"):
        RlConfig(s_range=(0.9, 0.6)).validate()


def test_curve_summary_slope():
    its = np.arange(200)
    vals = 0.3 + 0.001 * its + 0.01 * np.sin(its)
    s = rlhf.summarize_curve(its, vals, window=20)
    assert s.slope == pytest.approx(0.001, rel=0.05)
    assert s.final - s.initial == pytest.approx(0.001 * 180, rel=0.05)


def test_gsb_partitions(theta0):
    conds = rlhf.eval_conditions(15, RngStream(9), D)
    same = rlhf.gsb_eval(theta0, theta0, conds, steps=4)
    for r in same.values():
        assert (r.good, r.same, r.bad) == (0.0, 1.0, 0.0)
    # planted: a is the clean source, b the same plus masked noise
    planted = {}
    for t, cs in conds.items():
        good = np.stack([c.meta["clean"] if t == REMOVAL else c.source for c in cs])
        noise = np.random.default_rng(t).standard_normal(good.shape)
        masks = np.stack([c.mask for c in cs])
        planted[t] = (good, good + 1.5 * noise * masks)
    res = rlhf.gsb_eval(None, None, conds, outputs=planted)
    for r in res.values():
        assert r.good == 1.0
    other = flowgen.init_generator(D, (16,), RngStream(10))
    mixed = rlhf.gsb_eval(theta0, other, conds, steps=4)
    for r in mixed.values():
        assert r.good + r.same + r.bad == pytest.approx(1.0, abs=1e-15)
