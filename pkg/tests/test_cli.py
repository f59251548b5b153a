import json

import pytest

from rivid.cli import main, read_flat_config

SYNTH_TOML = """\
n_identities = 4
images_per_identity = 4
canonical_size = [64, 32]
clutter = 2
"""

TRAIN_TOML = """\
canonical_size = [64, 32]
epochs_per_stage = 2
batch_size = 4
ffsr_channels = 4
rife_widths = [4, 8, 8, 8]
rife_units = 1
embedding_dim = 16
"""


@pytest.fixture
def epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root, extra=()):
    """synth -> degrade (train + query MLR, gallery kept) -> three stages -> eval -> diagnose."""
    (root / "synth.toml").write_text(SYNTH_TOML)
    (root / "train.toml").write_text(TRAIN_TOML)
    corpus, data = root / "corpus", root / "data"
    assert run("synth", "--spec", root / "synth.toml", "--seed", 5, "--out", corpus, *extra) == 0
    assert run("degrade", "--manifest", corpus / "train.csv", "--protocol", "mlr", "--ratios", "1/2,1/4,1",
               "--seed", 1, "--out", data, *extra) == 0
    assert run("degrade", "--manifest", corpus / "query.csv", "--protocol", "vr", "--range", "8:32",
               "--seed", 2, "--out", data, *extra) == 0
    assert run("degrade", "--manifest", corpus / "gallery.csv", "--protocol", "mlr", "--ratios", "1",
               "--seed", 3, "--out", data, *extra) == 0
    prev = None
    for stage in (1, 2, 3):
        init = ("--init", root / f"s{prev}" / "model.ckpt") if prev else ()
        assert run("train", "--stage", stage, "--config", root / "train.toml", "--data", data,
                   *init, "--seed", 0, "--out", root / f"s{stage}", *extra) == 0
        prev = stage
    ckpt = root / "s3" / "model.ckpt"
    assert run("eval", "--ckpt", ckpt, "--data", data, "--out", root / "metrics.json", *extra) == 0
    assert run("diagnose", "--ckpt", ckpt, "--data", data, "--mode", "b", "--out", root / "grid_b.csv", *extra) == 0
    return root


ARTIFACTS = [
    "corpus/train.csv", "corpus/query.csv", "corpus/gallery.csv", "corpus/images/hr/id002_001.png",
    "data/train.csv", "data/query.csv", "data/gallery.csv",
    "s1/loss_log.csv", "s2/loss_log.csv", "s3/loss_log.csv", "s1/model.ckpt", "s3/model.ckpt",
    "metrics.json", "grid_b.csv",
]


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    mp.setenv("SOURCE_DATE_EPOCH", "1700000000")
    a = pipeline(tmp_path_factory.mktemp("run_a"))
    b = pipeline(tmp_path_factory.mktemp("run_b"))
    # re-running into the same directories with --overwrite reproduces the first outputs
    before = {name: (a / name).read_bytes() for name in ARTIFACTS}
    pipeline(a, extra=("--overwrite",))
    mp.undo()
    return a, b, before


def test_pipeline_outputs(two_runs):
    a, _, _ = two_runs
    metrics = json.loads((a / "metrics.json").read_text())
    assert set(metrics) == {"rank1", "rank5", "n_query", "n_gallery"}
    assert metrics["n_query"] == 4 and metrics["n_gallery"] == 4
    assert 0 <= metrics["rank1"] <= metrics["rank5"] <= 1
    grid = (a / "grid_b.csv").read_text().splitlines()
    assert grid[1] == "r1,r2,D_sim,D_dif,O" and len(grid) == 10
    log = (a / "s3" / "loss_log.csv").read_text().splitlines()
    assert log[0] == "epoch,stage,mean_total,mean_ffsr,mean_xent,mean_rw,lr" and len(log) == 3
    record = json.loads((a / "s3" / "run.json").read_text())
    assert record["seed"] == 0 and record["config"]["stage"] == "joint"
    assert record["started"].startswith("2023-11-14")


def test_same_seed_byte_identical(two_runs):
    a, _, before = two_runs
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == before[name], name


def test_separate_directories_identical_outputs(two_runs):
    a, b, _ = two_runs
    for name in ["data/query.csv", "s1/loss_log.csv", "s2/loss_log.csv", "s3/loss_log.csv", "metrics.json", "grid_b.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # images are addressed relative to each data directory, so manifests match too
    assert (a / "data" / "train.csv").read_bytes() == (b / "data" / "train.csv").read_bytes()


def test_inspect(two_runs, capsys):
    a, _, _ = two_runs
    assert run("inspect", "--ckpt", a / "s3" / "model.ckpt") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["stages"] == ["ffsr_pretrain", "rife_train", "joint"]
    assert info["identities"] == 2
    assert info["parameters"]["total"] == info["parameters"]["ffsr"] + info["parameters"]["rife"] > 0


def test_run_record_identical_for_identical_command(two_runs, epoch):
    a, _, _ = two_runs
    argv = ("eval", "--ckpt", a / "s3" / "model.ckpt", "--data", a / "data", "--out", a / "m2.json", "--overwrite")
    assert run(*argv) == 0
    first = (a / "m2.run.json").read_bytes()
    assert run(*argv) == 0
    assert (a / "m2.run.json").read_bytes() == first
    assert (a / "m2.json").read_bytes() == (a / "metrics.json").read_bytes()


def test_refuses_to_overwrite(two_runs, epoch):
    a, _, _ = two_runs
    assert run("eval", "--ckpt", a / "s3" / "model.ckpt", "--data", a / "data", "--out", a / "metrics.json") == 1


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("degrade", "--manifest", "x.csv", "--protocol", "mlr", "--out", tmp_path) == 1  # no --seed
    assert run("train", "--stage", "4", "--data", tmp_path, "--out", tmp_path) == 1
    assert run("degrade", "--manifest", "x.csv", "--protocol", "vr", "--ratios", "1/2", "--seed", 0, "--out", tmp_path) == 1
    assert run("degrade", "--manifest", "x.csv", "--protocol", "vr", "--range", "8-32", "--seed", 0, "--out", tmp_path) == 1
    assert run("synth", "--out", tmp_path, "--workers", 0) == 1
    capsys.readouterr()


def test_runtime_errors_exit_2(two_runs, tmp_path, capsys):
    a, _, _ = two_runs
    assert run("eval", "--ckpt", tmp_path / "missing.ckpt", "--data", a / "data", "--out", tmp_path / "m.json") == 2
    # stage 2 without a stage-1 checkpoint
    (tmp_path / "t.toml").write_text(TRAIN_TOML)
    assert run("train", "--stage", 2, "--config", tmp_path / "t.toml", "--data", a / "data", "--out", tmp_path / "s2") == 2
    # a checkpoint without RIFE cannot be evaluated
    assert run("eval", "--ckpt", a / "s1" / "model.ckpt", "--data", a / "data", "--out", tmp_path / "m.json") == 2
    (tmp_path / "bad.toml").write_text("learning_rate = 0.1\n")
    assert run("train", "--stage", 1, "--config", tmp_path / "bad.toml", "--data", a / "data", "--out", tmp_path / "s1") == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_flat_config_rejects_tables(tmp_path):
    (tmp_path / "c.toml").write_text("[train]\nseed = 1\n")
    with pytest.raises(ValueError, match="flat"):
        read_flat_config(tmp_path / "c.toml")


def test_synth_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("RIVID_CACHE", str(tmp_path / "cache"))
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    (tmp_path / "s.toml").write_text(SYNTH_TOML)
    assert run("synth", "--spec", tmp_path / "s.toml", "--out", tmp_path / "a") == 0
    assert len(list((tmp_path / "cache").iterdir())) == 1
    assert run("synth", "--spec", tmp_path / "s.toml", "--out", tmp_path / "b") == 0
    for name in ("gallery.csv", "images/hr/id003_003.png", "masks/id000_001.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
