import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfguide import instances as I
from pfguide.chain import ProblemInstance, ValueTable, ValueTag, build_tree_chain
from pfguide.oracle import backward_induction, coverage_constants
from pfguide.samplers import (
    AcceptanceAboveOne,
    AllParticlesDead,
    MaxRestartsExceeded,
    SamplerConfig,
    SamplerConfigError,
    ZTildeTooSmall,
    action_level_sampler,
    best_of_n,
    dmc_restart_run,
    resample_indices,
    sis_run,
    smc_option2,
    smc_rs_run,
    smc_run,
    trial_rng,
)
from pfguide.samplers import _rollouts
from pfguide.stats import gof_chi_square

SEED = 4242


def finals(fn, n, seed=SEED):
    return np.array([fn(trial_rng(seed, t)) for t in range(n)])


def within(freq, p, n, k=3.0):
    return abs(freq - p) <= k * math.sqrt(p * (1 - p) / n)


def exact(inst):
    v = backward_induction(inst)
    return inst.with_prm(ValueTable(v.values, ValueTag.PRM))


# --------------------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kw",
    [
        {"particles": 0},
        {"resampling": "stratified"},
        {"eta": 0.5},
        {"max_restarts": 0},
        {"z_tilde": "auto"},
        {"z_tilde": -1.0},
    ],
)
def test_config_rejects(kw):
    with pytest.raises(SamplerConfigError):
        SamplerConfig(**kw)


def test_trial_rng_streams_independent_of_order():
    a = trial_rng(1, 5).random(3)
    b = trial_rng(1, 5).random(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, trial_rng(1, 6).random(3))


# --------------------------------------------------------------------------- smc


def test_smc_single_particle_follows_reference():
    inst = I.random_tree(3, 2, 5)
    cfg = SamplerConfig(particles=1)
    out = finals(lambda r: smc_run(inst, cfg, r).output, 20_000)
    p = inst.chain.marginals[-1]
    assert gof_chi_square(np.bincount(out, minlength=p.size), expected=p) > 1e-3


def test_smc_many_particles_two_path():
    inst = I.two_path()
    cfg = SamplerConfig(particles=1000)
    out = finals(lambda r: smc_run(inst, cfg, r).output, 4000)
    assert within(np.mean(out == 0), 2 / 3, out.size)


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_smc_run_invariants(scheme):
    inst = I.random_tree(5, 3, 8)
    cfg = SamplerConfig(particles=16, resampling=scheme)
    for t in range(20):
        run = smc_run(inst, cfg, trial_rng(SEED, t))
        assert run.parts.shape == (5, 16)
        assert np.allclose(np.diff(run.log_What), run.log_W - math.log(16), rtol=0, atol=1e-12)
        assert run.log_What[0] == 0.0
        assert np.all((run.ess >= 1 - 1e-9) & (run.ess <= 16 + 1e-9))
        assert np.all(run.weights >= 0)
        if run.weights is not None:
            assert np.allclose(run.weights.sum(axis=1), np.exp(run.log_W), rtol=1e-9)
        # the output is one of the final particles and its ancestry is consistent
        assert run.output in run.parts[-1]
        assert run.path[-1] == run.output


def test_smc_deterministic():
    inst = I.random_tree(4, 2, 1)
    cfg = SamplerConfig(particles=8)
    a = smc_run(inst, cfg, trial_rng(3, 0))
    b = smc_run(inst, cfg, trial_rng(3, 0))
    assert np.array_equal(a.parts, b.parts) and a.output == b.output


def test_smc_dead_run_flagged():
    obj = I.two_path().to_json_obj()
    obj["terminal_reward"] = [1.0, 0.0]
    obj["prm"][2] = [1.0, 0.0]
    from pfguide.chain import instance_from_json_obj

    inst = instance_from_json_obj(obj)
    cfg = SamplerConfig(particles=1)
    runs = [smc_run(inst, cfg, trial_rng(SEED, t)) for t in range(400)]
    dead = [r for r in runs if r.dead]
    assert 0 < len(dead) < 400
    assert within(len(dead) / 400, 0.5, 400)
    with pytest.raises(AllParticlesDead):
        dead[0].sample


# --------------------------------------------------------------------------- option 2


def test_option2_acceptance_rate():
    # raw C_inf is V*(root)/Vhat(root) = Z, so the threshold is 2Z
    inst = I.two_path(exact_prm=True)
    c_inf = coverage_constants(inst, []).c_inf_raw
    assert c_inf == 1.5
    cfg = SamplerConfig(particles=256)
    runs = [smc_option2(inst, cfg, trial_rng(SEED, t)) for t in range(1500)]
    inner = sum(r.inner_runs for r in runs)
    rate = len(runs) / inner
    assert 0.4 <= rate <= 0.6
    restarts = np.mean([r.restart_count for r in runs])
    assert restarts <= 10 * c_inf**2


def test_option2_restart_marker():
    inst = I.build_var_blowup(12)
    cfg = SamplerConfig(particles=1, c_inf=1e9, max_restarts=1)
    run = smc_option2(inst, cfg, trial_rng(SEED, 0))
    assert run.restarted and run.output is None
    with pytest.raises(MaxRestartsExceeded):
        run.sample


# --------------------------------------------------------------------------- smc-rs


def test_smc_rs_strict_raises_below_coverage():
    inst = I.two_path()
    # only the a -> a' step has ratio 2, so a few trials are needed
    with pytest.raises(AcceptanceAboveOne):
        for t in range(50):
            smc_rs_run(inst, SamplerConfig(eta=1.0), trial_rng(SEED, t))
    for t in range(50):
        smc_rs_run(inst, SamplerConfig(eta=2.0), trial_rng(SEED, t))


def test_smc_rs_clamp_counts_warnings():
    inst = I.two_path()
    w = sum(smc_rs_run(inst, SamplerConfig(eta=1.0, strict=False), trial_rng(SEED, t)).warnings for t in range(200))
    assert w > 0


def test_smc_rs_eta_invariance():
    inst = I.random_tree(3, 2, 21)
    eta = coverage_constants(inst, []).c_act_hat
    a_runs = [smc_rs_run(inst, SamplerConfig(eta=eta), trial_rng(SEED, t)) for t in range(6000)]
    b_runs = [smc_rs_run(inst, SamplerConfig(eta=2 * eta), trial_rng(SEED + 1, t)) for t in range(6000)]
    n = inst.sizes[-1]
    a = np.bincount([r.output for r in a_runs], minlength=n)
    b = np.bincount([r.output for r in b_runs], minlength=n)
    assert gof_chi_square(a, b) > 1e-3
    att_a = np.mean([r.attempts.sum() for r in a_runs])
    att_b = np.mean([r.attempts.sum() for r in b_runs])
    assert 1.7 <= att_b / att_a <= 2.3


def test_smc_rs_smc_lower_exact():
    H = 32
    inst = I.build_smc_lower(H, 1.0, "counts")
    runs = [smc_rs_run(inst, SamplerConfig(eta=2.0), trial_rng(SEED, t)) for t in range(3000)]
    bits = I.smc_lower_bits(np.array([r.path for r in runs]), "counts", H)
    freq = bits.mean(axis=0)
    se = math.sqrt(2 / 9 / len(runs))
    # Bonferroni-style allowance over 32 coordinates
    assert np.max(np.abs(freq - 2 / 3)) <= 4 * se


def test_action_level_matches_smc_rs():
    inst = I.random_tree(3, 2, 13)
    eta = coverage_constants(inst, []).c_act_hat
    n = inst.sizes[-1]
    pvals = []
    for s in range(20):
        a = [action_level_sampler(inst, trial_rng(s, t)).output for t in range(1500)]
        b = [smc_rs_run(inst, SamplerConfig(eta=eta), trial_rng(1000 + s, t)).output for t in range(1500)]
        pvals.append(gof_chi_square(np.bincount(a, minlength=n), np.bincount(b, minlength=n)))
    # 20 tests at level 0.01: allow the expected handful of chance rejections
    assert sum(p <= 0.01 for p in pvals) <= 2


def test_action_level_exact_two_path():
    out = finals(lambda r: action_level_sampler(I.two_path(exact_prm=True), r).output, 20_000)
    assert within(np.mean(out == 0), 2 / 3, out.size)


# --------------------------------------------------------------------------- dmc


def test_dmc_exact_two_path():
    inst = I.two_path(exact_prm=True)
    out = finals(lambda r: dmc_restart_run(inst, SamplerConfig(particles=1), r).output, 20_000)
    assert within(np.mean(out == 0), 2 / 3, out.size)


def test_dmc_acceptance_rate():
    inst = exact(I.random_tree(4, 2, 2, prm_noise=0.0))
    cov = coverage_constants(inst, [])
    cfg = SamplerConfig(particles=64)
    runs = [dmc_restart_run(inst, cfg, trial_rng(SEED, t)) for t in range(500)]
    rate = len(runs) / sum(r.inner_runs for r in runs)
    assert rate >= 1 / (2 * cov.c_inf_raw)


def test_dmc_restart_marker_and_strictness():
    inst = I.two_path(exact_prm=True)
    run = dmc_restart_run(inst, SamplerConfig(z_tilde=1e12, max_restarts=1), trial_rng(SEED, 0))
    assert run.restarted
    with pytest.raises(ZTildeTooSmall):
        for t in range(50):
            dmc_restart_run(I.two_path(), SamplerConfig(z_tilde=1e-6), trial_rng(SEED, t))


def test_dmc_pilot_mode():
    run = dmc_restart_run(I.two_path(exact_prm=True), SamplerConfig(particles=8, z_tilde="pilot"), trial_rng(SEED, 0))
    assert run.output in (0, 1) or run.restarted


# --------------------------------------------------------------------------- sis and best-of-n


def test_sis_large_n_two_path():
    out = finals(lambda r: sis_run(I.two_path(), 4096, r).output, 1500)
    assert within(np.mean(out == 0), 2 / 3, out.size)


def test_sis_constant_reward_uniform():
    chain = build_tree_chain(2, 3)
    inst = ProblemInstance(chain, np.full(8, 3.0), ValueTable(tuple(np.full(n, 3.0) for n in chain.sizes), ValueTag.PRM))
    run = sis_run(inst, 32, trial_rng(SEED, 0))
    assert np.all(run.weights == run.weights[0, 0])


def test_sis_dead_rate():
    obj = I.two_path().to_json_obj()
    obj["terminal_reward"] = [1.0, 0.0]
    obj["prm"][2] = [1.0, 0.0]
    from pfguide.chain import instance_from_json_obj

    inst = instance_from_json_obj(obj)
    dead = np.mean([sis_run(inst, 1, trial_rng(SEED, t)).dead for t in range(4000)])
    assert within(dead, 0.5, 4000)


def test_best_of_two():
    out = finals(lambda r: best_of_n(I.two_path(), 2, r).output, 20_000)
    assert within(np.mean(out == 0), 0.75, out.size)


def test_best_of_one_is_reference_rollout():
    inst = I.random_tree(3, 2, 4)
    out = finals(lambda r: best_of_n(inst, 1, r).output, 10_000)
    p = inst.chain.marginals[-1]
    assert gof_chi_square(np.bincount(out, minlength=p.size), expected=p) > 1e-3


def test_best_of_n_tie_goes_first():
    chain = build_tree_chain(3, 2)
    r = np.ones(9)
    inst = ProblemInstance(chain, r, ValueTable(tuple(np.ones(n) for n in chain.sizes), ValueTag.PRM))
    for t in range(20):
        _, paths = _rollouts(inst, 5, False, trial_rng(SEED, t), None)
        assert np.array_equal(best_of_n(inst, 5, trial_rng(SEED, t)).path, paths[:, 0])


# --------------------------------------------------------------------------- resampling


@settings(max_examples=50, deadline=None)
@given(
    w=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12).filter(lambda w: sum(w) > 0),
    N=st.integers(1, 50),
    scheme=st.sampled_from(["multinomial", "systematic"]),
    seed=st.integers(0, 2**32),
)
def test_resample_support(w, N, scheme, seed):
    idx = resample_indices(w, N, scheme, np.random.default_rng(seed))
    assert idx.shape == (N,)
    assert np.all(np.asarray(w)[idx] > 0)


def test_systematic_counts_within_one():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    for s in range(50):
        idx = resample_indices(w, 20, "systematic", np.random.default_rng(s))
        assert np.all(np.abs(np.bincount(idx, minlength=4) - 20 * w) < 1 + 1e-9)


@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_resample_expectation(scheme):
    w = np.array([1.0, 3.0, 0.0, 6.0])
    rng = np.random.default_rng(7)
    counts = sum(np.bincount(resample_indices(w, 10, scheme, rng), minlength=4) for _ in range(4000))
    mean = counts / 4000
    assert np.allclose(mean, 10 * w / w.sum(), atol=0.15)


def test_resample_all_zero():
    with pytest.raises(AllParticlesDead):
        resample_indices([0.0, 0.0], 3, "multinomial", np.random.default_rng(0))
