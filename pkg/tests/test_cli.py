import json

import numpy as np
import pytest

from fdylka.cli import load_run_config, main
from fdylka.errors import ConfigError

STRONG = "filename\tonset\toffset\tevent_label\n"


def tsv(path, rows):
    path.write_text(STRONG + "".join("\t".join(map(str, r)) + "\n" for r in rows))
    return path


class TestEvaluate:
    def test_identical_files_score_one(self, tmp_path, capsys):
        ref = tsv(tmp_path / "ref.tsv", [("a.wav", 0.5, 2.0, "Dog"), ("b.wav", 1.0, 3.0, "Cat")])
        out = tmp_path / "scores.json"
        assert main(["evaluate", "--ref", str(ref), "--est", str(ref), "--out", str(out)]) == 0
        assert json.loads(out.read_text())["macro"]["f1"] == 1.0
        assert "Dog" in capsys.readouterr().out

    def test_missing_flag_is_usage_error(self, tmp_path, capsys):
        ref = tsv(tmp_path / "ref.tsv", [])
        assert main(["evaluate", "--ref", str(ref)]) == 1
        assert "--est" in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["fly"]) == 1

    def test_malformed_manifest_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.tsv"
        bad.write_text(STRONG + "a.wav\tx\t1\tDog\n")
        assert main(["evaluate", "--ref", str(bad), "--est", str(bad)]) == 2
        assert "bad.tsv:2:" in capsys.readouterr().err


class TestConfig:
    def test_overrides_and_defaults(self):
        cfg = load_run_config(None, {"train.epochs": 3, "classes": ["a", "b"], "seed": 5})
        assert cfg.train.epochs == 3 and cfg.model.class_count == 2 and cfg.train.seed == 5

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epoch": 3}}))
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_stage2_without_pseudo_exits_2(self, tmp_path, capsys):
        assert main(["train", "--stage", "2", "--features", str(tmp_path), "--out", str(tmp_path / "r")]) == 2
        assert "pseudo" in capsys.readouterr().err


class TestPipeline:
    def test_end_to_end(self, tmp_path):
        d = tmp_path
        cfg = d / "run.json"
        cfg.write_text(
            json.dumps(
                {
                    "classes": ["Alarm_bell_ringing", "Blender"],
                    "model": {"channels": [2] * 7, "rnn_hidden": 4},
                    "train": {"n_strong": 2, "n_weak": 0, "n_unlabeled": 1, "augment": False},
                }
            )
        )
        assert main(["synthgen", "--clips", "4", "--classes", "2", "--unlabeled", "1", "--out", str(d / "syn")]) == 0
        assert main(["featurize", "--audio-dir", str(d / "syn" / "audio"), "--out", str(d / "feat")]) == 0
        common = ["--config", str(cfg), "--features", str(d / "feat"), "--epochs", "2"]
        s1 = [
            "train", "--stage", "1", *common,
            "--strong", str(d / "syn" / "strong.tsv"),
            "--unlabeled", str(d / "syn" / "unlabeled.tsv"),
            "--validation", str(d / "syn" / "strong.tsv"),
            "--out", str(d / "s1"),
        ]
        assert main(s1) == 0
        best = json.loads((d / "s1" / "best_stage1.json").read_text())
        ckpts = [best["student"]["path"], best["teacher"]["path"]]
        assert main([
            "pseudolabel", "--checkpoints", *ckpts, "--clips", str(d / "syn" / "unlabeled.tsv"),
            "--features", str(d / "feat"), "--out", str(d / "pl.tsv"),
        ]) == 0
        assert (d / "pl.tsv.provenance.tsv").exists()
        s2 = [a if a != "1" else "2" for a in s1[:3]] + s1[3:-1] + [str(d / "s2"), "--pseudo", str(d / "pl.tsv")]
        assert main(s2) == 0
        best2 = json.loads((d / "s2" / "best_stage2.json").read_text())
        pred = d / "pred.tsv"
        assert main([
            "predict", "--checkpoints", best2["student"]["path"], "--clips", str(d / "syn" / "strong.tsv"),
            "--features", str(d / "feat"), "--out", str(pred),
        ]) == 0
        assert main(["ensemble", "--inputs", str(pred.with_suffix(".npz")), str(pred.with_suffix(".npz")),
                     "--out", str(d / "ens.npz")]) == 0
        with np.load(d / "ens.npz") as z, np.load(pred.with_suffix(".npz")) as p:
            np.testing.assert_array_equal(z["strong"], p["strong"])
        assert main(["evaluate", "--ref", str(d / "syn" / "strong.tsv"), "--est", str(pred)]) == 0
        resolved = json.loads((d / "s2" / "resolved_config.json").read_text())
        assert resolved["stage"] == 2 and resolved["train"]["epochs"] == 2
