import json
import re

import numpy as np
import pytest

from clcap.cli import build_parser, main
from clcap.scorer import ScorerParams
from clcap.train import load_params, save_params

SMALL = ["--images", "20", "--attrs", "5", "--captions", "3", "--val-images", "6"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", "--seed", 3, *SMALL) == 0
    assert run("train", "--data", root / "data", "--out", root / "mle", "--hidden", 3, "--lr", "1e-2",
               "--epochs", 5, "--seed", 3) == 0
    return root


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


class TestGenData:
    def test_byte_identical(self, workdir):
        assert run("gen-data", "--out", workdir / "again", "--seed", 3, *SMALL) == 0
        assert files(workdir / "again") == files(workdir / "data")

    def test_outputs(self, workdir):
        names = set(files(workdir / "data"))
        assert {"train.jsonl", "val.jsonl", "vocab.json", "manifest.json", "config.json"} <= names
        val = (workdir / "data" / "val.jsonl").read_text().splitlines()
        assert len(val) == 6 and set(json.loads(val[0])) == {"captions", "features", "image_id"}

    def test_single_image_rejected(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--images", 1, "--val-images", 0) == 2

    def test_bad_rate(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path, "--distinct-rate", 1.5) == 2
        assert "distinct-rate" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--bogus", 1) == 2


class TestTrain:
    def test_outputs_and_manifest(self, workdir):
        out = workdir / "mle"
        history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
        assert len(history) == 5 and {"epoch", "train_obj", "val_obj", "wall_ms"} <= set(history[0])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3 and len(manifest["config_sha256"]) == 64
        assert {"clcap", "numpy", "python"} <= set(manifest["versions"])
        assert set(manifest["outputs"]) == {"model.ckpt", "state.ckpt", "history.jsonl"}
        assert not re.search(r"\d{4}-\d{2}-\d{2}", (out / "manifest.json").read_text())

    def test_cl_needs_init(self, workdir, tmp_path, capsys):
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--objective", "cl") == 2
        assert "--init" in capsys.readouterr().err

    def test_zero_lr_returns_init(self, workdir, tmp_path):
        init = workdir / "mle" / "model.ckpt"
        assert run("train", "--data", workdir / "data", "--out", tmp_path, "--objective", "cl", "--init", init,
                   "--lr", 0, "--epochs", 2) == 0
        assert load_params(tmp_path / "model.ckpt") == load_params(init)

    def test_cl_pipeline_deterministic_across_threads(self, workdir, tmp_path):
        args = ["train", "--data", workdir / "data", "--objective", "cl-n", "--init", workdir / "mle" / "model.ckpt",
                "--epochs", 2, "--seed", 1]
        assert run(*args, "--out", tmp_path / "a", "--threads", 1) == 0
        assert run(*args, "--out", tmp_path / "b", "--threads", 4) == 0
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        a.pop("manifest.json"), b.pop("manifest.json"), a.pop("config.json"), b.pop("config.json")
        assert a == b

    def test_numeric_failure(self, workdir, tmp_path):
        p = load_params(workdir / "mle" / "model.ckpt")
        p.vector[:] = np.nan
        save_params(p, tmp_path / "nan.ckpt")
        assert run("train", "--data", workdir / "data", "--out", tmp_path / "o", "--init", tmp_path / "nan.ckpt") == 3
        assert (tmp_path / "o" / "abort_state.ckpt").exists()

    def test_resume(self, workdir, tmp_path):
        base = ["train", "--data", workdir / "data", "--hidden", 3, "--seed", 2]
        assert run(*base, "--epochs", 4, "--out", tmp_path / "full") == 0
        assert run(*base, "--epochs", 2, "--out", tmp_path / "half") == 0
        assert run(*base, "--epochs", 4, "--out", tmp_path / "rest", "--resume", tmp_path / "half" / "state.ckpt") == 0
        assert (tmp_path / "rest" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()

    def test_vocab_mismatch(self, workdir, tmp_path):
        assert run("gen-data", "--out", tmp_path / "other", "--seed", 3, "--images", 20, "--attrs", 6,
                   "--captions", 3, "--val-images", 6) == 0
        assert run("train", "--data", tmp_path / "other", "--out", tmp_path / "o", "--objective", "cl",
                   "--init", workdir / "mle" / "model.ckpt") == 2


class TestEval:
    def test_report_and_determinism(self, workdir, tmp_path):
        args = ["eval", "--model", workdir / "mle" / "model.ckpt", "--data", workdir / "data", "--ks", "1,5,6"]
        assert run(*args, "--out", tmp_path / "a", "--scores-csv") == 0
        assert run(*args, "--out", tmp_path / "b", "--scores-csv", "--threads", 4) == 0
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert (tmp_path / "a" / "scores.csv").read_bytes() == (tmp_path / "b" / "scores.csv").read_bytes()
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        r = report["recall_at"]
        assert r["1"] <= r["5"] <= r["6"] == 1.0
        assert {"bleu", "rouge_l", "cider", "n_queries"} <= set(report)

    def test_compare_self_is_zero(self, workdir, tmp_path, capsys):
        assert run("eval", "--model", workdir / "mle" / "model.ckpt", "--data", workdir / "data",
                   "--ks", "1,5", "--out", tmp_path) == 0
        capsys.readouterr()
        rep = tmp_path / "report.json"
        assert run("eval", "--compare", rep, rep) == 0
        deltas = json.loads(capsys.readouterr().out)
        assert run("compare", rep, rep) == 0
        assert json.loads(capsys.readouterr().out) == deltas
        flat = deltas["bleu"] + list(deltas["recall_at"].values()) + [deltas["cider"], deltas["rouge_l"]]
        assert all(v == 0 for v in flat)

    def test_ks_too_large(self, workdir):
        assert run("eval", "--model", workdir / "mle" / "model.ckpt", "--data", workdir / "data") == 2

    def test_vocab_mismatch(self, workdir, tmp_path):
        bad = load_params(workdir / "mle" / "model.ckpt")
        save_params(ScorerParams.random(bad.d, bad.h, bad.V + 1), tmp_path / "m.ckpt")
        assert run("eval", "--model", tmp_path / "m.ckpt", "--data", workdir / "data", "--ks", "1") == 2

    def test_missing_model(self, workdir):
        assert run("eval", "--data", workdir / "data") == 2


class TestNceDemo:
    def test_default_recovers(self, capsys, tmp_path):
        assert run("nce-demo", "--out", tmp_path) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["tv"] < 0.05
        assert (tmp_path / "nce_report.json").exists()

    def test_identical_reports(self, capsys):
        run("nce-demo", "--seed", 4, "--samples", 500)
        first = capsys.readouterr().out
        run("nce-demo", "--seed", 4, "--samples", 500)
        assert capsys.readouterr().out == first

    def test_zero_samples(self):
        assert run("nce-demo", "--samples", 0) == 2

    def test_mismatched_support(self):
        assert run("nce-demo", "--true-p", "0.5,0.5", "--noise-p", "0.2,0.3,0.5") == 2


class TestConfigFiles:
    def test_json_config_with_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"images": 20, "attrs": 5, "captions": 3, "val_images": 6, "seed": 9}))
        assert run("gen-data", "--out", tmp_path / "a", "--config", cfg, "--seed", 3) == 0
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["seed"] == 3 and manifest["config"]["images"] == 20

    def test_key_value_config(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# synthetic set\nimages = 20\nattrs=5\ncaptions=3\nval-images=6\ndistinct_rate=0.5\n")
        assert run("gen-data", "--out", tmp_path / "a", "--config", cfg) == 0
        assert json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]["distinct_rate"] == 0.5

    def test_config_round_trip(self, workdir, tmp_path):
        saved = workdir / "data" / "config.json"
        assert run("gen-data", "--out", tmp_path / "b", "--config", saved) == 0
        assert files(tmp_path / "b") == files(workdir / "data")

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"imagez": 3}))
        assert run("gen-data", "--out", tmp_path / "a", "--config", cfg) == 2

    def test_invalid_value(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"distinct_rate": 2.0}))
        assert run("gen-data", "--out", tmp_path / "a", "--config", cfg) == 2


def test_help_lists_every_flag_with_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-data", "train", "eval", "nce-demo", "compare"}
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.help and action.default is not None and action.nargs != 0:
                assert "(default:" in text


def test_help_exits_zero(capsys):
    assert main(["train", "--help"]) == 0
    assert "--objective" in capsys.readouterr().out
