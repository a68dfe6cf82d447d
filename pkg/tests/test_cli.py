import csv
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from isscohort.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden"
TOY = DATA / "toy_cohort.csv"
TOY_CFG = DATA / "toy_config.yaml"
REGEN = os.environ.get("ISSCOHORT_REGEN_GOLDEN") == "1"


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_yaml(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.mark.parametrize("command,files", [
    ("analyze", ["estimates.csv", "estimates.json"]),
    ("sample", ["assignment.csv", "constraints.csv"]),
])
def test_toy_fixture_matches_golden(tmp_path, command, files):
    assert run(command, TOY, "--config", TOY_CFG, "--out", tmp_path) == EXIT_OK
    for name in files:
        golden = GOLDEN / command / name
        if REGEN:
            golden.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(tmp_path / name, golden)
        assert (tmp_path / name).read_bytes() == golden.read_bytes(), name


def test_sample_supersample_size_and_constraints(tmp_path, capsys):
    assert run("sample", TOY, "--config", TOY_CFG, "--out", tmp_path) == EXIT_OK
    printed = capsys.readouterr().out
    rows = read_rows(tmp_path / "assignment.csv")
    assert sum(r["role"] == "supersample" for r in rows) == 40
    cons = read_rows(tmp_path / "constraints.csv")
    assert {c["constraint"] for c in cons} == {"cases", "subcohort_noncases", "supersample"}
    for c in cons:
        assert float(c["achieved"]) == pytest.approx(float(c["target"]), rel=1e-8)
        assert c["constraint"] in printed
    # case weights are 1; sampled units carry positive weights, unsampled none
    for r in rows:
        if r["role"] == "case":
            assert float(r["weight"]) == pytest.approx(1.0)
        elif r["role"] == "unsampled":
            assert r["weight"] == ""
        else:
            assert float(r["weight"]) > 0


def test_sample_rerun_identical(tmp_path):
    for d in ("a", "b"):
        assert run("sample", TOY, "--config", TOY_CFG, "--out", tmp_path / d) == EXIT_OK
    for name in ("assignment.csv", "constraints.csv", "metadata.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_analyze_full_cohort_is_plain_cox(tmp_path):
    from isscohort.cox import CoxModelSpec, fit_weighted_cox
    from isscohort.survival import CohortDataset

    rng = np.random.default_rng(3)
    n = 120
    z = rng.standard_normal(n)
    x = rng.standard_normal(n)
    t = rng.exponential(np.exp(-(0.5 * z + 0.3 * x)))
    c = rng.exponential(1.5, n)
    time, event = np.minimum(t, c) + 1e-3, (t <= c).astype(int)
    with open(tmp_path / "c.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event", "z1", "x1"])
        for i in range(n):
            w.writerow([i + 1, repr(float(time[i])), event[i], repr(float(z[i])), repr(float(x[i]))])
    cfg = write_yaml(tmp_path / "c.yaml", "analysis:\n  schema: {z: [z1], x: [x1]}\n  method: full\n")
    assert run("analyze", tmp_path / "c.csv", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    est = json.loads((tmp_path / "o" / "estimates.json").read_text())
    ds = CohortDataset.from_arrays(time, event, z[:, None], x[:, None], ["z1"], ["x1"])
    fit = fit_weighted_cox(ds, CoxModelSpec(("z1", "x1")))
    np.testing.assert_allclose(est["estimate"], fit.beta, rtol=0, atol=1e-12)
    np.testing.assert_allclose(est["se"], fit.model_se, rtol=1e-12)


def test_simulate_overrides_recorded(tmp_path):
    code = run("simulate", "--method", "smc_iss", "--replicates", "5", "--out", tmp_path)
    assert code == EXIT_OK
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["simulation"]["methods"] == ["smc_iss"]
    assert meta["simulation"]["replicates"] == 5
    assert set(meta["decisions"]) >= {"ties", "smcfcs_accept", "imputation_init", "inclusion_probabilities"}
    assert len(meta["config_hash"]) == 64
    for name in ("replicates.csv", "metrics.csv", "table.txt", "timing.csv"):
        assert (tmp_path / name).exists()


def test_paper_scale_table_layout(tmp_path):
    code = run("simulate", "--paper-scale", "--method", "full,cc", "--replicates", "2", "--out", tmp_path)
    assert code == EXIT_OK
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert (meta["simulation"]["N"], meta["simulation"]["n_sc"], meta["simulation"]["n1"]) == (25000, 250, 750)
    lines = (tmp_path / "table.txt").read_text().splitlines()
    header = next(line for line in lines if line.startswith("Statistics"))
    assert header.split()[1:] == ["Full", "Cohort", "Case-cohort"]
    labels = [line.split()[0] + " " + line.split()[1] for line in lines
              if line.split() and line.split()[0] in ("bias", "mc.se", "est.se")]
    terms = ["z1", "z2", "z3.2", "z3.3", "xc1", "xc2", "xc3", "xc4", "xb1", "xb2"]
    assert labels == [f"{s} {t}" for s in ("bias", "mc.se", "est.se") for t in terms]


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "bad.yaml", "simulation:\n  replicatez: 3\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == EXIT_VALIDATION
    assert "simulation.replicatez" in capsys.readouterr().err


def test_missing_z_value_is_row_indexed_validation_error(tmp_path, capsys):
    lines = TOY.read_text().splitlines()
    cells = lines[5].split(",")
    cells[5] = ""  # z1 of the fifth data row
    lines[5] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert run("analyze", bad, "--config", TOY_CFG, "--out", tmp_path / "o") == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "z1" in err and "row" in err


def test_missing_cohort_file_is_io_error(tmp_path):
    assert run("analyze", tmp_path / "nope.csv", "--config", TOY_CFG, "--out", tmp_path) == EXIT_IO


def test_separated_covariate_is_numerical_failure(tmp_path, capsys):
    # every event has z1 = 1 and every survivor z1 = 0: the likelihood has no maximum
    with open(tmp_path / "sep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event", "z1", "x1"])
        for i in range(30):
            ev = int(i < 10)
            w.writerow([i + 1, i + 1, ev, ev, (i % 7) / 7])
    cfg = write_yaml(tmp_path / "c.yaml", "analysis:\n  schema: {z: [z1], x: [x1]}\n  method: full\n")
    assert run("analyze", tmp_path / "sep.csv", "--config", cfg, "--out", tmp_path / "o") == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_sample_rejects_method_without_supersample(tmp_path):
    assert run("sample", TOY, "--config", TOY_CFG, "--method", "mice", "--out", tmp_path) == EXIT_VALIDATION
