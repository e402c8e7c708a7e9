import json

import pytest

import flexmarket as fm
from flexmarket import config_io, dp
from flexmarket.cli import main

from conftest import tabulated_config


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, small_cfg):
    path = tmp_path_factory.mktemp("cfg") / "example.json"
    config_io.dump_config(small_cfg, path)
    return str(path)


@pytest.fixture(scope="module")
def cache_file(tmp_path_factory, config_file):
    path = tmp_path_factory.mktemp("cache") / "tables.bin"
    assert main(["solve", "--config", config_file, "--cache", str(path)]) == 0
    return str(path)


# -- validate ---------------------------------------------------------------------

def test_validate_ok(config_file, capsys):
    assert main(["validate", "--config", config_file]) == 0
    out = capsys.readouterr().out
    assert "passed" in out


def test_validate_regularity_failure(tmp_path, capsys):
    cfg = tabulated_config([2.0, 0.5, 2.0], grid=(0.0, 1.0, 3))
    path = tmp_path / "irregular.json"
    config_io.dump_config(cfg, path)
    assert main(["validate", "--config", str(path)]) == 2
    assert "hazard_in_x" in capsys.readouterr().out


def test_validate_truncated_file(tmp_path, config_file):
    broken = tmp_path / "broken.json"
    broken.write_text(open(config_file).read()[:50])
    assert main(["validate", "--config", str(broken)]) == 3


def test_validate_missing_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == 3


# -- solve ------------------------------------------------------------------------

def test_solve_prints_equal_continuations(config_file, cache_file, capsys, small_cfg):
    assert main(["solve", "--config", config_file, "--cache", cache_file]) == 0
    out = capsys.readouterr().out
    tables = dp.ValueTables.load(cache_file, small_cfg)
    assert tables.value(2, (1, 1)) == tables.value(2, (1, 0))
    line = [l for l in out.splitlines() if "C_2((1, 1))" in l][0]
    line2 = [l for l in out.splitlines() if "C_2((1, 0))" in l][0]
    assert line.split("=")[1] == line2.split("=")[1]


def test_solve_single_period(tmp_path):
    cfg = fm.build_example_config((2.0, 3.0), 0.5, 1, 21)
    cfg_path, cache = tmp_path / "t1.json", tmp_path / "t1.bin"
    config_io.dump_config(cfg, cfg_path)
    assert main(["solve", "--config", str(cfg_path), "--cache", str(cache)]) == 0
    tables = dp.ValueTables.load(cache, cfg)
    assert set(tables.states) == {1, 2}


def test_solve_budget_exceeded(config_file, tmp_path):
    assert main(["solve", "--config", config_file, "--cache", str(tmp_path / "x.bin"),
                 "--budget", "5"]) == 4


def test_solve_mc_backend(config_file, tmp_path, small_cfg):
    cache = tmp_path / "mc.bin"
    assert main(["solve", "--config", config_file, "--cache", str(cache),
                 "--backend", "mc", "--samples", "300", "--seed", "4"]) == 0
    tables = dp.ValueTables.load(cache, small_cfg)
    assert tables.backend == "mc" and tables.seed == 4


# -- simulate ---------------------------------------------------------------------

def _read_all(outdir):
    return {p.name: p.read_bytes() for p in sorted(outdir.iterdir())}


def test_simulate_outputs_and_reproducibility(config_file, cache_file, tmp_path):
    outdir = tmp_path / "out"
    argv = ["simulate", "--config", config_file, "--cache", cache_file,
            "--out", str(outdir), "--replications", "50", "--seed", "9"]
    assert main(argv) == 0
    first = _read_all(outdir)
    assert set(first) == {"revenue.csv", "traces.csv", "bic_audit.json", "ir_audit.json"}
    for name, blob in first.items():
        assert b"manifest" in blob
    assert main(argv) == 0  # same manifest, same seed
    assert _read_all(outdir) == first


def test_simulate_seed_changes_outputs(config_file, cache_file, tmp_path):
    outdir = tmp_path / "out"
    base = ["simulate", "--config", config_file, "--cache", cache_file,
            "--out", str(outdir), "--replications", "30"]
    assert main(base + ["--seed", "1"]) == 0
    first = _read_all(outdir)
    assert main(base + ["--seed", "2"]) == 0
    assert _read_all(outdir) != first


def test_simulate_env_seed_override(config_file, cache_file, tmp_path, monkeypatch):
    outdir1, outdir2 = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("FLEXMARKET_SEED", "5")
    assert main(["simulate", "--config", config_file, "--cache", cache_file,
                 "--out", str(outdir1), "--replications", "20", "--seed", "99"]) == 0
    monkeypatch.delenv("FLEXMARKET_SEED")
    assert main(["simulate", "--config", config_file, "--cache", cache_file,
                 "--out", str(outdir2), "--replications", "20", "--seed", "5"]) == 0
    a, b = _read_all(outdir1), _read_all(outdir2)
    # identical apart from the differing out-path in the embedded manifests
    for name in a:
        assert a[name].replace(str(outdir1).encode(), b"X") == \
            b[name].replace(str(outdir2).encode(), b"X")


def test_simulate_stale_cache(cache_file, tmp_path):
    other = fm.build_example_config((2.0, 3.0), 0.6, 2, 41)
    other_path = tmp_path / "other.json"
    config_io.dump_config(other, other_path)
    assert main(["simulate", "--config", str(other_path), "--cache", cache_file,
                 "--out", str(tmp_path / "o"), "--replications", "10"]) == 5


def test_simulate_missing_cache(config_file, tmp_path):
    assert main(["simulate", "--config", config_file, "--cache", str(tmp_path / "no.bin"),
                 "--out", str(tmp_path / "o"), "--replications", "10"]) == 3


# -- verify -----------------------------------------------------------------------

def test_verify_small_family(tmp_path, capsys):
    report_path = tmp_path / "verify.json"
    assert main(["verify", "--instances", "6", "--seed", "0",
                 "--out", str(report_path)]) == 0
    doc = json.loads(report_path.read_text())
    assert doc["passed"] and doc["instances"] == 6
    assert doc["manifest"]["subcommand"] == "verify"
    assert "all" in capsys.readouterr().out


def test_verify_audits_supplied_config(config_file, tmp_path):
    report_path = tmp_path / "verify.json"
    assert main(["verify", "--instances", "2", "--seed", "0",
                 "--config", config_file, "--out", str(report_path)]) == 0
    doc = json.loads(report_path.read_text())
    own = [c for c in doc["checks"] if c["instance_seed"] == -1]
    assert own and all(c["passed"] for c in own)
    assert {c["name"] for c in own} >= {"master_equivalence", "monotonicity"}


def test_verify_names_failed_check_on_injected_bug(monkeypatch, capsys):
    real = dp.vstar

    def broken(u, y):
        v = list(real(u, y))
        for j in range(len(v) - 1, -1, -1):
            if v[j] > 0 and any(v[i] < y[i] for i in range(j)):
                i = max(i for i in range(j) if v[i] < y[i])
                v[j] -= 1
                v[i] += 1
                break
        return tuple(v)

    monkeypatch.setattr(dp, "vstar", broken)
    assert main(["verify", "--instances", "10", "--seed", "0"]) == 6
    out = capsys.readouterr().out
    assert "FAILED" in out and "instance seed" in out


# -- example -----------------------------------------------------------------------

def test_example_reproduces_reported_numbers(capsys):
    assert main(["example"]) == 0
    out = capsys.readouterr().out
    vals = {}
    for line in out.splitlines()[2:]:
        parts = line.rsplit(None, 3)
        if len(parts) == 4:
            vals[parts[0]] = float(parts[1])
    assert vals["reserve price, level 1, t=2"] == pytest.approx(0.36, abs=0.005)
    assert vals["reserve price, level 2, t=2"] == pytest.approx(0.29, abs=0.005)
    assert vals["holding cost rho, level 1, t=1"] == pytest.approx(0.037, abs=0.002)
    assert vals["holding cost rho, level 2, t=1"] == 0.0
    assert vals["critical value, level 1, t=1"] == pytest.approx(0.39, abs=0.01)
    assert vals["critical value, level 2, t=1"] == pytest.approx(0.29, abs=0.01)
