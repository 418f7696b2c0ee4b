import csv

import numpy as np
import pytest

from tfk import config as cfgmod
from tfk.backbone import ConfigError
from tfk.cli import main
from tfk.core import Rng
from tfk.export import read_record_csv
from tfk.model import build_model, count_parameters

TOY = """\
# desk-scale run used by the CLI tests
backbone.image_size = 16, 16
backbone.patch_size = 2
backbone.base_channels = 4
backbone.stage_depths = 1, 1, 1, 1
backbone.stage_heads = 1, 1, 2, 2
backbone.window = 2
data.num_cases = 48
train.epochs = 2
train.batch_size = 16
run.precision = float64
"""


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY)
    assert main(["train", "--config", str(cfg), "--out-dir", str(root / "run")]) == 0
    return cfg, root / "run"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- train / eval -----------------------------------------------------------------

def test_train_outputs(trained):
    _, out = trained
    for name in ("config.txt", "checkpoint.tfk", "train_log.csv", "bayes_report.csv",
                 "metrics/per_label.csv", "metrics/per_class.csv", "metrics/summary.csv"):
        assert (out / name).is_file(), name
    log = read_csv(out / "train_log.csv")
    assert log[0] == ["epoch", "lr", "train_loss", "val_avg"] and len(log) == 3
    assert len(read_csv(out / "metrics/per_class.csv")) == 25


def test_train_rerun_is_bitwise_identical(trained, tmp_path):
    cfg, out = trained
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()
    assert (tmp_path / "checkpoint.tfk").read_bytes() == (out / "checkpoint.tfk").read_bytes()


def test_eval_reproduces_test_avg(trained, tmp_path, capsys):
    _, out = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint.tfk"), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "metrics/summary.csv").read_bytes() == (out / "metrics/summary.csv").read_bytes()
    assert "test avg" in capsys.readouterr().out


def test_eval_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.tfk"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad), "--out-dir", str(tmp_path / "o")]) == 2


def test_seed_env_overrides_config(toy, tmp_path, monkeypatch):
    monkeypatch.setenv("TFK_SEED", "7")
    assert main(["params", "--config", str(toy), "--out-dir", str(tmp_path)]) == 0
    assert "run.seed = 7\n" in (tmp_path / "config.txt").read_text()
    monkeypatch.setenv("TFK_SEED", "seven")
    assert main(["params", "--config", str(toy), "--out-dir", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("extra, code", [
    (["--set", "train.nope=1"], 1),
    (["--set", "train.epochs=many"], 1),
    (["--set", "backbone.image_size=15,16"], 1),
    (["--set", "fusion.hmt_stage_counts=1,1,1"], 1),
    (["--set", "data.source=/nonexistent/manifest.csv"], 2),
    (["--set", "train.lr=1e200"], 3),
])
def test_exit_codes(toy, tmp_path, extra, code):
    assert main(["train", "--config", str(toy), "--out-dir", str(tmp_path)] + extra) == code


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.cfg"), "--out-dir", str(tmp_path)]) == 1


def test_config_validated_before_compute(toy, tmp_path):
    assert main(["train", "--config", str(toy), "--set", "train.schedule=linear", "--out-dir", str(tmp_path)]) == 1
    assert not (tmp_path / "train_log.csv").exists()


# -- gradcheck ------------------------------------------------------------------

def test_gradcheck_passes(toy, tmp_path, capsys):
    assert main(["gradcheck", "--config", str(toy), "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert rows[0] == ["module", "max_rel_error", "status", "seconds"]
    assert len(rows) - 1 >= 6
    assert {r[0] for r in rows[1:]} >= {"wsa", "wmca", "mca", "hmt_block", "mtp_block", "end_to_end_loss"}
    assert all(r[2] == "pass" for r in rows[1:])


def test_gradcheck_fault_names_module(toy, tmp_path, capsys):
    assert main(["gradcheck", "--config", str(toy), "--fault", "softmax", "--out-dir", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "gradient check failed" in err and "wsa" in err and "meta_mlp" not in err


# -- synth --------------------------------------------------------------------------

def test_synth_then_train_on_manifest(toy, tmp_path):
    assert main(["synth", "--config", str(toy), "--out-dir", str(tmp_path / "syn")]) == 0
    manifest = tmp_path / "syn" / "manifest.csv"
    assert len(read_csv(manifest)) == 49
    bayes = dict(read_csv(tmp_path / "syn" / "bayes_report.csv")[1:])
    assert bayes["derm"] == "0.7500" and bayes["fused"] == "1.0000"
    code = main(["train", "--config", str(toy), "--set", f"data.source={manifest}", "--set", "train.epochs=1",
                 "--out-dir", str(tmp_path / "run")])
    assert code == 0


# -- export-attn ---------------------------------------------------------------------

def test_export_attention(trained, tmp_path):
    _, out = trained
    assert main(["export-attn", "--checkpoint", str(out / "checkpoint.tfk"), "--case-id", "syn00003",
                 "--out-dir", str(tmp_path)]) == 0
    csvs = sorted(p.name for p in tmp_path.glob("stage*.csv"))
    assert len(csvs) == 9  # 4 stages x 2 branches + 1 MTP
    assert "stage0_block0_meta.csv" in csvs and "stage3_block0_cli2der.csv" in csvs
    for name in csvs:
        sums = np.array(list(read_record_csv(tmp_path / name).values()))
        assert np.abs(sums - 1.0).max() < 1e-5
    assert len(list(tmp_path.glob("*.pgm"))) >= 9
    assert len(read_csv(tmp_path / "entropy_profile.csv")) == 10


def test_export_missing_case(trained, tmp_path):
    _, out = trained
    assert main(["export-attn", "--checkpoint", str(out / "checkpoint.tfk"), "--case-id", "nope",
                 "--out-dir", str(tmp_path)]) == 2


# -- flops / params ------------------------------------------------------------------

SWIN_T = ["--set", "backbone.image_size=224,224", "--set", "backbone.base_channels=96",
          "--set", "backbone.stage_depths=2,2,6,2", "--set", "backbone.stage_heads=3,6,12,24",
          "--set", "backbone.window=7"]


def test_flops_swin_tiny(tmp_path):
    assert main(["flops", "--out-dir", str(tmp_path)] + SWIN_T) == 0
    rows = read_csv(tmp_path / "flops.csv")
    assert rows[0][:2] == ["stage", "height"]
    stage1 = rows[1]
    # 4 * 56 * 56 * 96^2 + 2 * 7^2 * 56 * 56 * 96
    assert int(stage1[6]) == 4 * 56 * 56 * 96 ** 2 + 2 * 49 * 56 * 56 * 96 == 145_108_992
    assert int(stage1[7]) == 2 * 145_108_992
    assert rows[-1][0] == "total"


def test_flops_quarter_when_image_halves(tmp_path):
    big, small = tmp_path / "big", tmp_path / "small"
    assert main(["flops", "--out-dir", str(big), "--set", "backbone.image_size=128,128"]) == 0
    assert main(["flops", "--out-dir", str(small), "--set", "backbone.image_size=64,64"]) == 0
    # window kept fixed: the 4x4 window fits both image sizes at the compared stages
    for a, b in zip(read_csv(big / "flops.csv")[1:4], read_csv(small / "flops.csv")[1:4]):
        assert int(a[6]) == 4 * int(b[6])


def test_params_command(toy, tmp_path):
    assert main(["params", "--config", str(toy), "--out-dir", str(tmp_path)]) == 0
    got = {k: int(v) for k, v in read_csv(tmp_path / "params.csv")[1:]}
    run = cfgmod.load_config(toy, env={})
    assert got == count_parameters(build_model(run.model, Rng(run.seed)))


# -- config ------------------------------------------------------------------------

def test_config_dump_round_trip(toy):
    run = cfgmod.load_config(toy, ["fusion.hmt_stage_counts=1,1,2,1", "model.use_cli=true"], env={})
    again = cfgmod.from_flat(cfgmod.parse_text(cfgmod.dump(run)))
    assert again == run
    assert again.model.hmt.stage_counts == (1, 1, 2, 1)
    assert again.model.selection.names == ("cli", "der", "meta")


def test_config_defaults_follow_training_recipe():
    run = cfgmod.load_config(env={})
    assert (run.train.lr, run.train.weight_decay, run.train.epochs, run.train.batch_size) == (1e-4, 1e-4, 100, 32)
    assert run.model.backbone.image_size == (64, 64)


def test_config_errors_name_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("train.epochs = 3\nthis line is wrong\n")
    with pytest.raises(ConfigError, match=":2:"):
        cfgmod.load_config(p, env={})


def test_single_modality_from_config():
    run = cfgmod.load_config(overrides=["model.modalities=der", "model.use_meta=false"], env={})
    assert not run.model.use_cli and not run.model.use_meta
    with pytest.raises(ConfigError):
        cfgmod.load_config(overrides=["model.modalities=der"], env={})  # selection still wants meta
