import csv
import io
import json
from pathlib import Path

import pytest

from fedsemcom import fl
from fedsemcom.cli import run_cli
from fedsemcom.config import build_config, load_config, parse_config_text
from fedsemcom.errors import ConfigError, DivergenceError
from fedsemcom.fl import RunConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY_CFG = """\
# tiny run for CLI tests
num_clients = 3
global_rounds = 3
local_epochs = 1
update_interval = 2
lr = 0.5
batch_size = 4
num_classes = 4
samples_per_class = 8
eval_fraction = 0.25
eval_interval = 3
model.image_size = 12
model.channels = 1
model.patch_size = 4
model.semantic_hidden = 4
model.patch_features = 2
model.channel_width = 4
model.snr_width = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


class TestConfigParsing:
    def test_comments_and_types(self):
        vals = parse_config_text("lr = 0.5  # step\n\npartial_update = off\nstrategy = fedavg\nseed=3\n")
        assert vals == {"lr": 0.5, "partial_update": False, "strategy": "fedavg", "seed": 3}

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigError, match=r"c.cfg:2: unknown key 'rounds'"):
            parse_config_text("lr = 1\nrounds = 4\n", "c.cfg")

    def test_bad_value_line_number(self):
        with pytest.raises(ConfigError, match=r":3: bad value for 'batch_size'"):
            parse_config_text("\n\nbatch_size = sixteen\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":1:"):
            parse_config_text("lr 0.1\n")

    def test_model_geometry_rederives_symbols(self):
        cfg = build_config({"model.image_size": 16, "model.patch_size": 4})
        assert cfg.model.image_shape == (3, 16, 16)
        assert cfg.model.symbol_dim == 3 * 16 * 16 // 16

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"num_clients": 1})

    def test_overrides_win(self, tiny_cfg):
        cfg = load_config(tiny_cfg, {"seed": 9, "global_rounds": 1})
        assert (cfg.seed, cfg.global_rounds, cfg.num_clients) == (9, 1, 3)

    def test_shipped_configs(self):
        assert load_config(CONFIGS / "table1.cfg") == RunConfig()
        assert load_config(CONFIGS / "desk.cfg").model.image_shape == (3, 16, 16)


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        assert run_cli(["train", "--config", str(tmp_path / "nope.cfg"), "--out-dir", str(tmp_path)]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_config_flag_required(self, capsys):
        with pytest.raises(SystemExit) as info:
            run_cli(["train"])
        assert info.value.code == 2

    def test_bad_line_reported(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("lr = 0.1\nbogus = 1\n")
        assert run_cli(["train", "--config", str(path), "--out-dir", str(tmp_path)]) == 2
        assert "bad.cfg:2" in capsys.readouterr().err

    def test_divergence_exit(self, tiny_cfg, tmp_path, monkeypatch):
        # a huge lr only saturates this model, so inject the failure in round 2
        original = fl.local_train

        def failing(model, client, payload, cfg, data, round_t):
            if round_t == 2:
                raise DivergenceError("boom", client_id=client.client_id, round_t=round_t)
            return original(model, client, payload, cfg, data, round_t)

        monkeypatch.setattr(fl, "local_train", failing)
        assert run_cli(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / "o")]) == 3
        rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "report.csv").read_text())))
        assert [r["round"] for r in rows] == ["1"]


class TestLedger:
    def test_reference_sizes_flag(self, capsys):
        assert run_cli(["ledger", "--paper-sizes", "--interval", "5"]) == 0
        out = capsys.readouterr().out
        assert "reduction      : 25.28%" in out
        assert "158.670 MB" in out and "118.558 MB" in out

    def test_interval_one(self, capsys):
        assert run_cli(["ledger", "--paper-sizes", "--interval", "1"]) == 0
        assert "reduction      : 0.00%" in capsys.readouterr().out


class TestTrainEvaluate:
    def test_train_twice_identical(self, tiny_cfg, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["train", "--config", str(tiny_cfg), "--seed", "0", "--out-dir", str(a)]) == 0
        assert run_cli(["train", "--config", str(tiny_cfg), "--seed", "0", "--out-dir", str(b)]) == 0
        assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
        assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
        meta = json.loads((a / "run_meta.json").read_text())
        assert meta["msssim_scales"] == 1 and meta["msssim_reduced_scales"] is True
        rows = list(csv.DictReader(io.StringIO((a / "report.csv").read_text())))
        assert [r["round"] for r in rows] == ["1", "2", "3"]

    def test_flags_override(self, tiny_cfg, tmp_path):
        out = tmp_path / "o"
        args = ["train", "--config", str(tiny_cfg), "--strategy", "fedavg", "--full", "--rounds", "2", "--out-dir", str(out)]
        assert run_cli(args) == 0
        rows = list(csv.DictReader(io.StringIO((out / "report.csv").read_text())))
        assert [r["strategy"] for r in rows] == ["fedavg-full"] * 2
        assert rows[0]["bytes_up"] == rows[1]["bytes_up"]

    def test_evaluate_sweep(self, tiny_cfg, tmp_path, capsys):
        out = tmp_path / "o"
        assert run_cli(["train", "--config", str(tiny_cfg), "--out-dir", str(out)]) == 0
        capsys.readouterr()
        args = ["evaluate", "--config", str(tiny_cfg), "--checkpoint", str(out / "final.ckpt"), "--fading", "rayleigh",
                "--snr-eval-list", "0,10,20"]
        assert run_cli(args) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert [float(r["snr_db"]) for r in rows] == [0.0, 10.0, 20.0]
        assert all(r["fading"] == "rayleigh" and r["round"] == "3" for r in rows)
        assert all(float(r["psnr_db"]) > 0 for r in rows)

    def test_evaluate_requires_fading(self, tiny_cfg, tmp_path):
        with pytest.raises(SystemExit) as info:
            run_cli(["evaluate", "--config", str(tiny_cfg), "--checkpoint", str(tmp_path / "x.ckpt")])
        assert info.value.code == 2

    def test_evaluate_wrong_checkpoint(self, tiny_cfg, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"junk")
        assert run_cli(["evaluate", "--config", str(tiny_cfg), "--checkpoint", str(bad), "--fading", "none"]) == 2


def test_partition_report(tiny_cfg, capsys):
    assert run_cli(["partition-report", "--config", str(tiny_cfg), "--alpha", "0.3"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["client", "class_0", "class_1", "class_2", "class_3", "total"]
    body = [[int(x) for x in r] for r in rows[1:]]
    assert [r[0] for r in body] == [0, 1, 2]
    assert all(sum(r[1:5]) == r[5] for r in body)
    # 8 per class, 2 held out for evaluation
    assert [sum(r[c] for r in body) for c in range(1, 5)] == [6, 6, 6, 6]
