import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdstl.cli import main
from cdstl.config import ExperimentConfig
from cdstl.errors import ConfigError
from cdstl.pipeline import read_manifest

SMALL = """
[dataset]
per_class = 30

[scorer]
epochs = 2

[distill]
iterations = 8

[eval]
repeats = 2
train_epochs = 15
"""

PAYLOADS = (
    "data/train-images.idx",
    "data/test-labels.idx",
    "scorer.nnc",
    "coreset.txt",
    "distilled.dst",
    "report_runs.csv",
    "report_summary.csv",
    "report_meta.csv",
)


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL)
    return str(path)


@pytest.fixture(scope="module")
def monolithic(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["run", "--config", small_cfg, "--out", str(out)]) == 0
    return out


def _losses(path):
    with open(path) as fh:
        return [(r["iteration"], r["loss"]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- config


def test_config_round_trip():
    cfg = ExperimentConfig.parse(SMALL)
    again = ExperimentConfig.parse(cfg.canonical())
    assert again == cfg and again.canonical() == cfg.canonical()
    assert again.config_hash() == cfg.config_hash()


@given(
    st.integers(0, 2**64 - 1),
    st.floats(0.01, 1.0),
    st.sampled_from(["easy", "hard"]),
    st.sampled_from(["DC", "DM", "MTT"]),
    st.one_of(st.none(), st.floats(1e-3, 100)),
    st.lists(st.sampled_from(["MLP", "LinearProbe", "ConvNetDeep"]), min_size=1, max_size=3, unique=True),
)
@settings(max_examples=60, deadline=None)
def test_config_round_trip_property(seed, r, mode, method, syn_lr, archs):
    cfg = ExperimentConfig(
        {
            "run": {"seed": seed},
            "prune": {"r": r, "mode": mode},
            "distill": {"method": method, "syn_lr": syn_lr},
            "eval": {"archs": archs},
        }
    )
    assert ExperimentConfig.parse(cfg.canonical()) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[prune]\nr = 0\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[distill]\nmethod = KIP\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[prune]\nmode easy\n")


def test_stage_seeds_are_keyed():
    cfg = ExperimentConfig()
    assert len({cfg.stage_seed(s) for s in ("data", "split", "scorer", "eval")}) == 4
    assert cfg.distill_config().seed != cfg.seed


def test_dc_config_at_r_06_accepted():
    cfg = ExperimentConfig.parse("[prune]\nr = 0.6\nmode = easy\n[distill]\nmethod = DC\n")
    assert cfg.section("prune")["r"] == 0.6 and cfg.distill_config().method == "DC"


# ---------------------------------------------------------------- pipeline


def test_run_creates_artifacts(monolithic):
    for name in PAYLOADS + ("config.ini", "loss_history.csv", "data/manifest.txt", "scorer.txt"):
        assert (monolithic / name).exists(), name
    assert not list(monolithic.rglob("*.partial"))


def test_artifacts_carry_config_and_upstream_hashes(monolithic):
    cfg_hash = ExperimentConfig.parse(SMALL).config_hash()
    assert read_manifest(monolithic / "data/manifest.txt")["config"] == cfg_hash
    assert read_manifest(monolithic / "scorer.txt")["config"] == cfg_hash
    assert read_manifest(monolithic / "coreset.txt")["config"] == cfg_hash
    with open(monolithic / "report_meta.csv") as fh:
        meta = {r["key"]: r["value"] for r in csv.DictReader(fh)}
    assert meta["provenance.experiment_config_hash"] == cfg_hash
    for key in ("provenance.coreset_hash", "provenance.distilled_hash", "provenance.scorer_id", "provenance.dataset_id"):
        assert meta[key]


def test_run_twice_identical(small_cfg, monolithic, tmp_path):
    assert main(["run", "--config", small_cfg, "--out", str(tmp_path)]) == 0
    for name in PAYLOADS:
        assert (tmp_path / name).read_bytes() == (monolithic / name).read_bytes(), name
    assert _losses(tmp_path / "loss_history.csv") == _losses(monolithic / "loss_history.csv")


def test_staged_equals_monolithic(small_cfg, monolithic, tmp_path):
    for stage in ("make-data", "train-scorer", "prune", "distill", "eval"):
        assert main([stage, "--config", small_cfg, "--out", str(tmp_path)]) == 0, stage
    for name in PAYLOADS:
        assert (tmp_path / name).read_bytes() == (monolithic / name).read_bytes(), name


def test_jobs_do_not_change_reports(small_cfg, monolithic, tmp_path):
    assert main(["run", "--config", small_cfg, "--out", str(tmp_path), "--jobs", "8"]) == 0
    for name in ("report_runs.csv", "report_summary.csv", "distilled.dst"):
        assert (tmp_path / name).read_bytes() == (monolithic / name).read_bytes()


def test_prune_r_one_lists_every_index(small_cfg, tmp_path):
    assert main(["make-data", "--config", small_cfg, "--out", str(tmp_path)]) == 0
    assert main(["train-scorer", "--config", small_cfg, "--out", str(tmp_path)]) == 0
    assert main(["prune", "--config", small_cfg, "--out", str(tmp_path), "--r", "1.0"]) == 0
    lines = (tmp_path / "coreset.txt").read_text().splitlines()
    n_train = 4 * (30 - int(0.2 * 30))
    assert [int(x) for x in lines[1:]] == list(range(n_train))


def test_seed_flag_changes_outputs(small_cfg, monolithic, tmp_path):
    assert main(["make-data", "--config", small_cfg, "--out", str(tmp_path), "--seed", "7"]) == 0
    assert (tmp_path / "data/train-images.idx").read_bytes() != (monolithic / "data/train-images.idx").read_bytes()


def test_sweep_coarse_emits_csv_and_svg(small_cfg, tmp_path):
    assert main(["make-data", "--config", small_cfg, "--out", str(tmp_path)]) == 0
    assert main(["train-scorer", "--config", small_cfg, "--out", str(tmp_path)]) == 0
    assert main(["sweep", "--config", small_cfg, "--out", str(tmp_path), "--grid", "coarse"]) == 0
    rows = (tmp_path / "sweep_coarse.csv").read_text().splitlines()
    assert len(rows) == 1 + 10
    svg = (tmp_path / "sweep_coarse.svg").read_text()
    assert 'id="curve-easy"' in svg and 'id="curve-hard"' in svg and 'id="reference-line"' in svg


def test_compare_subcommand(monolithic, tmp_path, capsys):
    assert main(["compare", str(monolithic), str(monolithic), "--out", str(tmp_path)]) == 0
    assert "+0.00" in capsys.readouterr().out
    assert (tmp_path / "compare.csv").exists()


# ---------------------------------------------------------------- failures


def test_unwritable_output_exits_five(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["make-data", "--out", str(blocker / "sub")]) == 5
    assert "make-data" in capsys.readouterr().err


def test_config_error_exits_two(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[prune]\nr = 3\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_integrity_mismatch_exits_three(small_cfg, monolithic, tmp_path, capsys):
    import shutil

    shutil.copytree(monolithic, tmp_path / "x")
    raw = bytearray((tmp_path / "x/data/train-images.idx").read_bytes())
    raw[-1] ^= 0x01
    (tmp_path / "x/data/train-images.idx").write_bytes(bytes(raw))
    assert main(["prune", "--config", small_cfg, "--out", str(tmp_path / "x")]) == 3
    assert "IntegrityError" in capsys.readouterr().err


def test_numeric_failure_exits_four(tmp_path, capsys):
    cfg = tmp_path / "diverge.ini"
    cfg.write_text(SMALL.replace("epochs = 2", "epochs = 2\nlr = 1e300"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    err = capsys.readouterr().err
    assert "stage train-scorer failed" in err
    assert not (tmp_path / "o/scorer.nnc").exists()


def test_failed_write_keeps_partial(tmp_path):
    from cdstl.pipeline import artifact

    with pytest.raises(RuntimeError):
        with artifact(tmp_path / "out.csv") as tmp:
            tmp.write_text("half")
            raise RuntimeError("boom")
    assert (tmp_path / "out.csv.partial").read_text() == "half"
    assert not (tmp_path / "out.csv").exists()


def test_missing_upstream_stage(tmp_path):
    assert main(["distill", "--out", str(tmp_path)]) == 5


@pytest.mark.parametrize("level,expect", [("info", True), ("error", False)])
def test_log_level_from_environment(tmp_path, level, expect):
    import os
    import subprocess
    import sys

    env = dict(os.environ, CDSTL_LOG=level)
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL)
    proc = subprocess.run(
        [sys.executable, "-m", "cdstl.cli", "make-data", "--config", str(cfg), "--out", str(tmp_path / "o")],
        env=env, capture_output=True, text=True, check=True,
    )
    assert ("INFO" in proc.stderr) == expect
