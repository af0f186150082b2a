import csv
import io
import json
import math

import pytest

from pfguide import instances as I
from pfguide.chain import load_instance, save_instance
from pfguide.cli import main


@pytest.fixture
def two_path(tmp_path):
    p = tmp_path / "two.json"
    save_instance(p, I.two_path())
    return str(p)


@pytest.fixture
def exact_two_path(tmp_path):
    p = tmp_path / "two-exact.json"
    save_instance(p, I.two_path(exact_prm=True))
    return str(p)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_ok(two_path, capsys):
    assert main(["validate", "--instance", two_path]) == 0
    assert capsys.readouterr().out.startswith("ok ")


def test_validate_invalid(tmp_path, capsys):
    obj = I.two_path().to_json_obj()
    obj["prm"][2][0] = 5.0
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(obj))
    assert main(["validate", "--instance", str(p)]) == 2
    assert "prm≠r* at level H" in capsys.readouterr().err


def test_validate_missing_and_garbled(tmp_path):
    assert main(["validate", "--instance", str(tmp_path / "nope.json")]) == 2
    p = tmp_path / "garbled.json"
    p.write_text("{ not json")
    assert main(["validate", "--instance", str(p)]) == 2


def test_oracle_report(two_path, tmp_path):
    out = tmp_path / "oracle.json"
    assert main(["oracle", "--instance", two_path, "--M", "1.3333333333333333,2", "--particles-list", "100", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert math.isclose(rep["divergences"]["chi2"][1], 1 / 9, rel_tol=1e-12)
    assert math.isclose(rep["coverage"]["c_act"], 4 / 3, rel_tol=1e-12)
    assert math.isclose(rep["bounds"]["100"]["thm_3_2"], 0.26943012562182533, rel_tol=1e-9)


def test_run_smc_single_particle(two_path, tmp_path):
    out = tmp_path / "run.csv"
    assert main(["run", "--instance", two_path, "--algo", "smc", "--particles", "1", "--trials", "20000", "--seed", "3", "--out", str(out)]) == 0
    (row,) = read_rows(out)
    tv, hw = float(row["tv_to_pistar"]), float(row["tv_halfwidth"])
    assert abs(tv - 1 / 6) <= 3 * hw
    summary = json.loads((tmp_path / "run.json").read_text())
    assert sum(summary["counts"]) == 20000


def test_run_best_of_two(two_path, tmp_path):
    out = tmp_path / "bon.csv"
    assert main(["run", "--instance", two_path, "--algo", "bon", "--particles", "2", "--trials", "20000", "--seed", "5", "--out", str(out)]) == 0
    counts = json.loads((tmp_path / "bon.json").read_text())["counts"]
    p = counts[0] / sum(counts)
    assert abs(p - 0.75) <= 3 * math.sqrt(0.75 * 0.25 / 20000)


def test_run_is_byte_identical_across_workers(two_path, tmp_path):
    texts = []
    for w in (1, 3):
        out = tmp_path / f"w{w}.csv"
        args = ["run", "--instance", two_path, "--algo", "smc-rs", "--eta", "2", "--particles", "4", "--trials", "600", "--seed", "11"]
        assert main(args + ["--workers", str(w), "--out", str(out)]) == 0
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]


def test_run_stdout_matches_file(two_path, tmp_path, capsys):
    args = ["run", "--instance", two_path, "--algo", "sis", "--particles", "3", "--trials", "200", "--seed", "1"]
    assert main(args) == 0
    printed = capsys.readouterr().out
    out = tmp_path / "sis.csv"
    assert main(args + ["--out", str(out)]) == 0
    assert out.read_text() == printed


def test_run_timing_column(two_path, capsys):
    assert main(["run", "--instance", two_path, "--algo", "smc", "--trials", "50", "--timing"]) == 0
    header = capsys.readouterr().out.splitlines()[0]
    assert header.endswith(",wall_ms")


def test_runtime_error_leaves_no_output(two_path, tmp_path):
    out = tmp_path / "dmc.csv"
    code = main(["run", "--instance", two_path, "--algo", "dmc-restart", "--ztilde", "1e-6", "--trials", "50", "--out", str(out)])
    assert code == 3
    assert not out.exists() and not (tmp_path / "dmc.json").exists()


def test_strict_acceptance_error(two_path):
    assert main(["run", "--instance", two_path, "--algo", "smc-rs", "--eta", "1", "--trials", "100"]) == 3


def test_bad_arguments(two_path):
    assert main(["run", "--instance", two_path, "--algo", "smc", "--particles", "0"]) == 2
    assert main(["run", "--instance", two_path, "--algo", "smc", "--trials", "0"]) == 2
    assert main(["sweep", "--instance", two_path, "--algos", "smc,nope"]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--instance", two_path, "--algo", "magic"])


def test_sweep_rows_and_bounds(exact_two_path, tmp_path):
    out = tmp_path / "sweep.csv"
    args = ["sweep", "--instance", exact_two_path, "--algos", "smc,smc-rs", "--particles-list", "2,8", "--trials", "3000", "--out", str(out)]
    assert main(args) == 0
    rows = read_rows(out)
    assert [(r["algo"], r["N"]) for r in rows] == [("smc", "2"), ("smc", "8"), ("smc-rs", "2"), ("smc-rs", "8")]
    for r in rows:
        assert float(r["tv_to_pistar"]) <= float(r["thm_3_2"]) + 3 * float(r["tv_halfwidth"])
        assert r["instance_hash"] == load_instance(exact_two_path).content_hash
    for r in rows[2:]:
        # exact sampler: the plug-in TV is within its own noise band of 0
        assert float(r["tv_to_pistar"]) <= 3 * float(r["tv_halfwidth"])


def test_couple_report(tmp_path):
    inst = tmp_path / "tree.json"
    save_instance(inst, I.random_tree(3, 2, 11))
    out = tmp_path / "couple.json"
    code = main(["couple", "--instance", str(inst), "--trials", "2000", "--pairs", "50", "--seed", "2", "--out", str(out)])
    rep = json.loads(out.read_text())
    assert rep["constructive"] == {"pairs": 50, "equal": 50}
    assert {"level", "label", "count_histogram_vgb", "count_histogram_smcind", "gof_pvalue"} <= set(rep["rows"][0])
    assert code == (0 if rep["pass"] else 3)


def test_couple_zero_particles(tmp_path):
    inst = tmp_path / "tree.json"
    save_instance(inst, I.random_tree(2, 2, 1))
    out = tmp_path / "c0.json"
    main(["couple", "--instance", str(inst), "--particles", "0", "--trials", "100", "--pairs", "5", "--out", str(out)])
    rep = json.loads(out.read_text())
    assert rep["constructive"]["equal"] == 5


def test_make_commands(tmp_path):
    cases = [
        ["make-lower", "--H", "6", "--representation", "tree"],
        ["make-varblow", "--H", "10"],
        ["make-myopic", "--h-schedule", "8", "--gamma-schedule", "0.2", "--representation", "tree"],
        ["make-myopic", "--N", "2", "--h-schedule", "2,8", "--gamma-schedule", "0.1,0.1", "--representation", "tree"],
        ["make-kswitch", "--horizon", "4", "--alpha", "0.5"],
    ]
    for i, args in enumerate(cases):
        out = tmp_path / f"g{i}.json"
        assert main(args + ["--out", str(out)]) == 0
        params = json.loads((tmp_path / f"g{i}.json.params.json").read_text())
        assert params["instance_hash"] == load_instance(out).content_hash


def test_make_lower_budget(tmp_path):
    out = tmp_path / "big.json"
    assert main(["make-lower", "--H", "12", "--representation", "tree", "--budget", "100", "--out", str(out)]) == 4
    assert not out.exists()


def test_make_myopic_schedule_invalid(tmp_path):
    assert main(["make-myopic", "--N", "2", "--h-schedule", "2,7", "--gamma-schedule", "0.1,0.1", "--out", str(tmp_path / "m.json")]) == 2


def test_max_restarts_marker_in_counts(exact_two_path, tmp_path):
    out = tmp_path / "opt2.csv"
    args = ["run", "--instance", exact_two_path, "--algo", "smc-opt2", "--cinf", "1e9", "--max-restarts", "1", "--trials", "100", "--out", str(out)]
    assert main(args) == 0
    (row,) = read_rows(out)
    summary = json.loads((tmp_path / "opt2.json").read_text())
    assert summary["restarted_runs"] + sum(summary["counts"]) == 100
    assert float(row["restart_mean"]) >= 0
    # csv round-trips through the standard reader
    assert list(csv.reader(io.StringIO(out.read_text())))[0][0] == "instance"
