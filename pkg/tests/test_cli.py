"""Command-line interface: full command round-trips on tiny configs,
reproducibility, and failure diagnostics."""

import os

import numpy as np
import pytest

from acar.cli import main, parse_config, ConfigError
from acar.metrics import read_pgm

TINY = """
# tiny smoke configuration
variant = hr2o
hr2o_d = 8
hr2o_depth = 1
hr2o_dropout = 0.0
base_lr = 0.02
warmup_steps = 5
epochs = 2
batch_size = 4
scene_count = 12
val_fraction = 0.25
feature_h = 8
feature_w = 8
seed = 5
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestConfigParsing:
    def test_defaults_and_overrides(self, tiny_config):
        cfg = parse_config(tiny_config)
        assert cfg["variant"] == "hr2o" and cfg["hr2o_d"] == 8
        assert cfg["detector_threshold"] == 0.85   # untouched default
        cfg2 = parse_config(tiny_config, seed_override=42)
        assert cfg2["seed"] == 42

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no_such_key = 1\n")
        with pytest.raises(ConfigError):
            parse_config(str(path))

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("variant hr2o\n")
        with pytest.raises(ConfigError):
            parse_config(str(path))


class TestCommands:
    def test_gen_train_eval_round_trip(self, tmp_path, tiny_config, capsys):
        data = str(tmp_path / "data.tsv")
        ckpt = str(tmp_path / "model.ckpt")
        report = str(tmp_path / "report.txt")
        assert run_cli("gen-data", "--config", tiny_config, "--out", data) == 0
        assert os.path.exists(data) and os.path.exists(data + ".config")
        assert run_cli("train", "--config", tiny_config, "--data", data,
                       "--out-ckpt", ckpt) == 0
        assert os.path.exists(ckpt)
        assert os.path.exists(ckpt + ".metrics")
        assert os.path.exists(ckpt + ".config")
        with open(ckpt + ".metrics") as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 4   # 2 epochs x (train + val)
        assert all(len(l.split("\t")) == 6 for l in lines)
        assert run_cli("eval", "--ckpt", ckpt, "--data", data,
                       "--report", report) == 0
        with open(report) as fh:
            fields = dict(l.split("\t") for l in fh.read().splitlines())
        assert set(fields) == {"videos", "loss", "pose_acc", "inter_acc", "map"}

    def test_determinism_byte_for_byte(self, tmp_path, tiny_config):
        outs = []
        for tag in ("a", "b"):
            data = str(tmp_path / f"{tag}.tsv")
            ckpt = str(tmp_path / f"{tag}.ckpt")
            report = str(tmp_path / f"{tag}.rep")
            assert run_cli("gen-data", "--config", tiny_config, "--out", data) == 0
            assert run_cli("train", "--config", tiny_config, "--data", data,
                           "--out-ckpt", ckpt) == 0
            assert run_cli("eval", "--ckpt", ckpt, "--data", data,
                           "--report", report) == 0
            with open(ckpt + ".metrics", "rb") as fh:
                metrics = fh.read()
            with open(report, "rb") as fh:
                rep = fh.read()
            with open(ckpt, "rb") as fh:
                ck = fh.read()
            outs.append((metrics, rep, ck))
        assert outs[0] == outs[1]

    def test_bank_build_and_bank_eval(self, tmp_path, tiny_config):
        cfg_path = tmp_path / "acar.cfg"
        cfg_path.write_text(TINY + "\nvariant = acar\ndelay_k = 2\nvideo_len = 5\n"
                            "bank_w = 2\nbank_path = " + str(tmp_path / "bank.bin") + "\n")
        data = str(tmp_path / "data.tsv")
        pre_ckpt = str(tmp_path / "pre.ckpt")
        ckpt = str(tmp_path / "acar.ckpt")
        bankf = str(tmp_path / "bank.bin")
        report = str(tmp_path / "acar.rep")
        pre_cfg = tmp_path / "pre.cfg"
        pre_cfg.write_text(TINY + "\ndelay_k = 2\nvideo_len = 5\n")

        assert run_cli("gen-data", "--config", str(pre_cfg), "--out", data) == 0
        assert run_cli("train", "--config", str(pre_cfg), "--data", data,
                       "--out-ckpt", pre_ckpt) == 0
        assert run_cli("bank-build", "--ckpt", pre_ckpt, "--data", data,
                       "--out-bank", bankf) == 0
        assert os.path.exists(bankf) and os.path.exists(bankf + ".index")
        assert run_cli("train", "--config", str(cfg_path), "--data", data,
                       "--out-ckpt", ckpt) == 0
        assert run_cli("eval", "--ckpt", ckpt, "--bank", bankf, "--data", data,
                       "--report", report) == 0

    def test_eval_without_bank_for_bank_variant_fails(self, tmp_path, tiny_config, capsys):
        # covered by the command's one-line diagnostic contract
        data = str(tmp_path / "d.tsv")
        assert run_cli("gen-data", "--config", tiny_config, "--out", data) == 0
        rc = run_cli("eval", "--ckpt", str(tmp_path / "missing.ckpt"),
                     "--data", data, "--report", str(tmp_path / "r.txt"))
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_visualize_single_actor_uniform_attention(self, tmp_path):
        cfg_path = tmp_path / "solo.cfg"
        cfg_path.write_text(TINY + "\nactors = 1\nepochs = 1\n")
        data = str(tmp_path / "solo.tsv")
        ckpt = str(tmp_path / "solo.ckpt")
        out_dir = str(tmp_path / "maps")
        assert run_cli("gen-data", "--config", str(cfg_path), "--out", data) == 0
        assert run_cli("train", "--config", str(cfg_path), "--data", data,
                       "--out-ckpt", ckpt) == 0
        assert run_cli("visualize", "--ckpt", ckpt, "--data", data,
                       "--scene-id", "v00000", "--out-dir", out_dir) == 0
        pgms = [f for f in os.listdir(out_dir) if f.endswith(".pgm")]
        assert len(pgms) == 1   # single (i,j) pair from the final block
        img = read_pgm(os.path.join(out_dir, pgms[0]))
        np.testing.assert_array_equal(img, np.full((8, 8), 255, dtype=np.uint8))

    def test_unknown_config_key_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("bogus_key = 3\n")
        rc = run_cli("gen-data", "--config", str(bad), "--out", str(tmp_path / "x"))
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and "bogus_key" in err

    def test_malformed_data_exits_nonzero(self, tmp_path, tiny_config, capsys):
        data = tmp_path / "corrupt.tsv"
        data.write_text("#ACARSYN v1\nonly\ttwo\n")
        rc = run_cli("train", "--config", tiny_config, "--data", str(data),
                     "--out-ckpt", str(tmp_path / "m.ckpt"))
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_ablate_emits_table(self, tmp_path):
        cfg_path = tmp_path / "ablate.cfg"
        cfg_path.write_text("""
variant = hr2o
hr2o_d = 8
hr2o_depth = 1
hr2o_dropout = 0.0
base_lr = 0.02
warmup_steps = 5
epochs = 1
batch_size = 4
scene_count = 10
val_fraction = 0.3
feature_h = 8
feature_w = 8
delay_k = 2
video_len = 5
bank_w = 2
seed = 9
""")
        out = str(tmp_path / "table.tsv")
        assert run_cli("ablate", "--config", str(cfg_path), "--out", out) == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "variant\tpose_acc\tinter_acc\tmap"
        names = [l.split("\t")[0] for l in lines[1:]]
        for expected in ("baseline", "hr2o_nl", "hr2o_rn", "hr2o_avg", "actor_first",
                         "hr2o_depth1", "hr2o_depth3", "acar_acfb", "hr2o_lfb"):
            assert expected in names

    def test_ablate_deterministic(self, tmp_path):
        cfg_path = tmp_path / "ab.cfg"
        cfg_path.write_text("epochs = 1\nbatch_size = 4\nscene_count = 8\n"
                            "hr2o_d = 8\nhr2o_depth = 1\nhr2o_dropout = 0.0\n"
                            "val_fraction = 0.3\nfeature_h = 8\nfeature_w = 8\n"
                            "delay_k = 2\nvideo_len = 5\nbank_w = 2\nseed = 4\n")
        o1, o2 = str(tmp_path / "t1.tsv"), str(tmp_path / "t2.tsv")
        assert run_cli("ablate", "--config", str(cfg_path), "--out", o1) == 0
        assert run_cli("ablate", "--config", str(cfg_path), "--out", o2) == 0
        assert open(o1, "rb").read() == open(o2, "rb").read()
