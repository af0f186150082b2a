import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfguide import instances as I
from pfguide.chain import (
    BudgetExceeded,
    InvalidSpec,
    ParseError,
    ProblemInstance,
    StepKernel,
    ValidationFailed,
    ValueTable,
    ValueTag,
    build_tree_chain,
    instance_from_json_obj,
    instance_io,
    load_instance,
    save_instance,
    tree_prefixes,
    validate_instance,
)


def codes(inst):
    return {v.code for v in validate_instance(inst)}


def from_obj(obj):
    return instance_from_json_obj(obj)


# --------------------------------------------------------------------------- trees


def test_tree_one_step_uniform():
    c = build_tree_chain(2, 1)
    assert c.sizes == (1, 2)
    assert c.kernels[0].probs.tolist() == [0.5, 0.5]


def test_tree_depth_four_uniform():
    c = build_tree_chain(2, 4)
    assert sum(c.sizes) == 31
    for k in c.kernels:
        assert np.all(k.probs == 0.5)


def test_random_rows_normalized():
    c = build_tree_chain(2, 12, 7)
    rows = sum(k.n_sources for k in c.kernels)
    assert rows == 4095
    for k in c.kernels:
        assert np.all(np.abs(k.row_sums() - 1) <= 1e-12)


def test_random_tree_is_deterministic():
    a, b = build_tree_chain(3, 4, 5), build_tree_chain(3, 4, 5)
    assert a.equals(b)
    assert not a.equals(build_tree_chain(3, 4, 6))


def test_budget_exceeded():
    with pytest.raises(BudgetExceeded):
        build_tree_chain(2, 21)
    with pytest.raises(BudgetExceeded):
        build_tree_chain(2, 5, budget=16)


def test_invalid_spec():
    with pytest.raises(InvalidSpec):
        build_tree_chain(2, 2, lambda prefix: [0.5, 0.4])
    with pytest.raises(InvalidSpec):
        build_tree_chain(2, 2, "bogus")


def test_callable_spec_matches_rows():
    c = build_tree_chain(2, 3, lambda prefix: [0.25, 0.75] if len(prefix) % 2 else [0.5, 0.5])
    assert c.kernels[0].probs.tolist() == [0.5, 0.5]
    assert c.kernels[1].probs.tolist() == [0.25, 0.75] * 2


def test_prefix_order():
    p = tree_prefixes(2, 3)
    assert p.tolist()[:3] == [[0, 0, 0], [0, 0, 1], [0, 1, 0]]
    assert p.shape == (8, 3)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(2, 4), h=st.integers(1, 5), seed=st.integers(0, 10_000), conc=st.floats(0.05, 20))
def test_rows_stochastic_property(k, h, seed, conc):
    c = build_tree_chain(k, h, seed, concentration=conc)
    for kern in c.kernels:
        assert np.all(np.abs(kern.row_sums() - 1) <= 1e-12)
    assert c.parents is not None


# --------------------------------------------------------------------------- validation


def test_two_path_valid():
    assert validate_instance(I.two_path()) == []
    assert validate_instance(I.two_path(exact_prm=True)) == []


def test_prm_terminal_mismatch():
    obj = I.two_path().to_json_obj()
    obj["prm"][2][0] = 1.0
    assert "prm≠r* at level H" in codes(from_obj(obj))


def test_row_not_stochastic():
    obj = I.two_path().to_json_obj()
    obj["kernels"][0][0][0][1] = 0.4
    rep = validate_instance(from_obj(obj))
    assert any(v.code == "row not stochastic" and v.level == 0 and v.index == 0 for v in rep)
    assert "row not stochastic at level 0 state 0" in str(rep[0])


MUTATIONS = [
    ("negative probability", lambda o: o["kernels"][1][0][0].__setitem__(1, -1.0)),
    ("target out of range", lambda o: o["kernels"][1][0][0].__setitem__(0, 5)),
    ("row sum", lambda o: o["kernels"][1][1][0].__setitem__(1, 0.5)),
    ("negative reward", lambda o: o["terminal_reward"].__setitem__(1, -1.0)),
    ("zero reward", lambda o: (o.__setitem__("terminal_reward", [0.0, 0.0]), o["prm"].__setitem__(2, [0.0, 0.0]))),
    ("prm root", lambda o: o["prm"][0].__setitem__(0, 2.0)),
    ("prm zero on reachable", lambda o: o["prm"][1].__setitem__(0, 0.0)),
    ("prm negative", lambda o: o["prm"][1].__setitem__(1, -0.5)),
    ("prm terminal", lambda o: o["prm"][2].__setitem__(1, 3.0)),
    ("reward length", lambda o: o["terminal_reward"].append(1.0)),
    ("prm length", lambda o: o["prm"][1].append(1.0)),
    ("two roots", lambda o: (o["levels"][0].append("x"), o["kernels"][0].append([[0, 1.0]]), o["prm"][0].append(1.0))),
    ("missing row", lambda o: o["kernels"][1].pop()),
]


@pytest.mark.parametrize("name,mutate", MUTATIONS, ids=[m[0] for m in MUTATIONS])
def test_single_mutation_detected(name, mutate):
    obj = copy.deepcopy(I.two_path().to_json_obj())
    mutate(obj)
    assert validate_instance(from_obj(obj)), name


def test_zero_reward_on_unreachable_is_fine():
    # unreachable terminal states may carry anything nonnegative
    k0 = StepKernel.from_rows([[(0, 1.0), (1, 0.0)]])
    from pfguide.chain import LayeredChain

    chain = LayeredChain((("⊥",), ("a", "b")), (k0,))
    r = np.array([1.0, 0.0])
    inst = ProblemInstance(chain, r, ValueTable((np.ones(1), r), ValueTag.PRM))
    assert validate_instance(inst) == []


def test_wrong_tag():
    inst = I.two_path()
    bad = inst.with_prm(ValueTable(inst.prm.values, ValueTag.EXACT_VSTAR))
    assert "prm table must be tagged PRM" in codes(bad)


# --------------------------------------------------------------------------- io


def test_round_trip(tmp_path):
    for inst in (I.two_path(), I.random_tree(4, 3, 1), I.build_var_blowup(6)):
        p = tmp_path / "x.json"
        instance_io(p, "save", inst)
        back = instance_io(p, "load")
        assert back.equals(inst)
        for a, b in zip(back.prm.values, inst.prm.values):
            assert a.tobytes() == b.tobytes()
        assert back.content_hash == inst.content_hash


def test_load_smc_lower(tmp_path):
    p = tmp_path / "low.json"
    save_instance(p, I.build_smc_lower(4, 1.0))
    inst = load_instance(p)
    assert inst.sizes[-1] == 16
    ones = tree_prefixes(2, 4).sum(axis=1)
    assert np.array_equal(inst.terminal_reward, 2.0**ones)


def test_load_rejects_negative_probability(tmp_path):
    obj = I.two_path().to_json_obj()
    obj["kernels"][0][0][0][1] = -0.5
    obj["kernels"][0][0][1][1] = 1.5
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(obj))
    with pytest.raises(ValidationFailed) as ei:
        load_instance(p)
    assert any(v.code == "negative or non-finite probability" for v in ei.value.report)


def test_save_refuses_invalid(tmp_path):
    obj = I.two_path().to_json_obj()
    obj["prm"][2][0] = 1.0
    with pytest.raises(ValidationFailed):
        save_instance(tmp_path / "x.json", from_obj(obj))
    assert not (tmp_path / "x.json").exists()


def test_parse_error_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "name": "x",\n "H": ,\n}')
    with pytest.raises(ParseError) as ei:
        load_instance(p)
    assert ei.value.line == 3


@pytest.mark.parametrize("text", ['{"name": "x", "H": NaN}', '{"name": "x", "H": Infinity}'])
def test_nan_rejected(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_instance(p)


def test_parse_error_field():
    obj = I.two_path().to_json_obj()
    obj["kernels"][1][0][0] = [0, "half"]
    with pytest.raises(ParseError) as ei:
        from_obj(obj)
    assert ei.value.field == "kernels[1][0][0]"
    del obj["prm"]
    with pytest.raises(ParseError) as ei:
        from_obj(obj)
    assert ei.value.field == "prm"


def test_kernel_push_pull_adjoint():
    rng = np.random.default_rng(0)
    c = build_tree_chain(3, 3, 4)
    k = c.kernels[1]
    m = rng.random(c.sizes[1])
    v = rng.random(c.sizes[2])
    assert np.isclose(m @ k.pull(v), k.push(m, c.sizes[2]) @ v)


def test_arrays_read_only():
    inst = I.two_path()
    with pytest.raises(ValueError):
        inst.chain.kernels[0].probs[0] = 1.0
