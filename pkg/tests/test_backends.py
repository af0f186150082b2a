import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfguide import instances as I
from pfguide._core import BACKEND, available_backends, get_backend
from pfguide.samplers import (
    SamplerConfig,
    action_level_sampler,
    best_of_n,
    dmc_restart_run,
    sis_run,
    smc_rs_run,
    smc_run,
    trial_rng,
)

pytestmark = pytest.mark.skipif("cython" not in available_backends(), reason="compiled core not built")

PY = get_backend("python")


def cy():
    return get_backend("cython")


def same_run(a, b):
    assert a.status == b.status
    assert np.array_equal(a.parts, b.parts)
    assert np.array_equal(a.ancestors, b.ancestors)
    assert np.array_equal(a.log_What, b.log_What)
    assert a.output == b.output


@pytest.mark.skipif(os.environ.get("PFGUIDE_BACKEND") == "python", reason="fallback forced")
def test_compiled_core_is_default():
    assert BACKEND == "cython"


def test_unknown_backend():
    with pytest.raises(ValueError):
        get_backend("fortran")


INSTANCES = [I.two_path(), I.random_tree(5, 3, 2), I.build_smc_lower(10, 1.0, "counts"), I.build_var_blowup(8)]


@pytest.mark.parametrize("inst", INSTANCES, ids=lambda i: i.name)
@pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
def test_smc_identical(inst, scheme):
    cfg = SamplerConfig(particles=7, resampling=scheme)
    for t in range(30):
        same_run(smc_run(inst, cfg, trial_rng(1, t), backend=PY), smc_run(inst, cfg, trial_rng(1, t), backend=cy()))


@pytest.mark.parametrize("inst", INSTANCES, ids=lambda i: i.name)
def test_smc_rs_identical(inst):
    cfg = SamplerConfig(particles=5, eta=8.0, strict=False)
    for t in range(30):
        a = smc_rs_run(inst, cfg, trial_rng(2, t), backend=PY)
        b = smc_rs_run(inst, cfg, trial_rng(2, t), backend=cy())
        same_run(a, b)
        assert np.array_equal(a.attempts, b.attempts) and a.warnings == b.warnings


@pytest.mark.parametrize("inst", INSTANCES, ids=lambda i: i.name)
def test_dmc_identical(inst):
    cfg = SamplerConfig(particles=6, strict=False)
    for t in range(30):
        a = dmc_restart_run(inst, cfg, trial_rng(3, t), backend=PY)
        b = dmc_restart_run(inst, cfg, trial_rng(3, t), backend=cy())
        same_run(a, b)
        assert a.restart_count == b.restart_count


@pytest.mark.parametrize("inst", INSTANCES, ids=lambda i: i.name)
def test_rollout_samplers_identical(inst):
    for t in range(30):
        assert np.array_equal(
            action_level_sampler(inst, trial_rng(4, t), backend=PY).path,
            action_level_sampler(inst, trial_rng(4, t), backend=cy()).path,
        )
        assert np.array_equal(best_of_n(inst, 9, trial_rng(5, t), backend=PY).path, best_of_n(inst, 9, trial_rng(5, t), backend=cy()).path)
        same_run(sis_run(inst, 9, trial_rng(6, t), backend=PY), sis_run(inst, 9, trial_rng(6, t), backend=cy()))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), N=st.integers(1, 40), depth=st.integers(1, 5))
def test_generator_state_identical_after_run(seed, N, depth):
    inst = I.random_tree(depth, 2, seed % 97)
    cfg = SamplerConfig(particles=N)
    ra, rb = trial_rng(seed, 0), trial_rng(seed, 0)
    same_run(smc_run(inst, cfg, ra, backend=PY), smc_run(inst, cfg, rb, backend=cy()))
    # both consumed exactly the same number of uniforms
    assert ra.random() == rb.random()
