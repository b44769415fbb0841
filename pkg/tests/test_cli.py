"""CLI behavior: subcommands, exit codes, artifact layout, reproducibility."""

import io
import json

import pytest

from weakmtl import cli

SMALL_CFG = """
# desk-scale settings
clip_seconds = 1.0
n_frames = auto
n_mels = 32
shared_channels = 8
scene_channels = 8
gru_hidden = 4
fc_hidden = 8
epochs = 2
batch_size = 4
eval_fraction = 0.25
"""


def run(argv, stdin=None, monkeypatch=None):
    if stdin is not None:
        monkeypatch.setattr("sys.stdin", io.StringIO(stdin))
    return cli.main(argv)


class TestPool:
    def test_mp_example(self, capsys, monkeypatch):
        assert run(["pool", "--kind", "mp"], "0.1 0.7 0.3", monkeypatch) == 0
        assert capsys.readouterr().out.strip() == "0.7"

    def test_ap(self, capsys, monkeypatch):
        assert run(["pool", "--kind", "ap"], "0.2 0.4 0.6", monkeypatch) == 0
        assert capsys.readouterr().out.strip() == "0.4"

    def test_es(self, capsys, monkeypatch):
        assert run(["pool", "--kind", "es"], "0 1", monkeypatch) == 0
        assert capsys.readouterr().out.strip() == "0.731059"

    def test_at_two_lines(self, capsys, monkeypatch):
        assert run(["pool", "--kind", "at"], "5 0 0\n10 -10 -10", monkeypatch) == 0
        assert float(capsys.readouterr().out) == pytest.approx(5.0, abs=1e-3)

    def test_at_uniform_default(self, capsys, monkeypatch):
        assert run(["pool", "--kind", "at"], "1 2 3", monkeypatch) == 0
        assert float(capsys.readouterr().out) == pytest.approx(2.0, abs=1e-6)

    def test_empty_stdin_usage_error(self, monkeypatch):
        assert run(["pool", "--kind", "mp"], "", monkeypatch) == 1

    def test_bad_kind(self, monkeypatch):
        assert run(["pool", "--kind", "median"], "1 2", monkeypatch) == 1


class TestGradcheckCommand:
    def test_single_op_passes(self, capsys):
        assert run(["gradcheck", "--op", "linear", "--seeds", "2"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_unknown_op(self):
        assert run(["gradcheck", "--op", "quux"]) == 1


class TestUsageErrors:
    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert run(["train"]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("unknown_knob = 3\n")
        assert run(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1

    def test_missing_data_dir_is_data_error(self, tmp_path):
        assert (
            run(
                ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
            )
            == 2
        )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-data -> extract-features, shared by the training tests below."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CFG)
    assert cli.main(["synth-data", "--out", str(root / "corpus"), "--clips", "8",
                     "--seed", "3", "--clip-seconds", "1.0"]) == 0
    assert cli.main(["extract-features", "--in", str(root / "corpus"),
                     "--out", str(root / "feats"), "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "feats": root / "feats"}


class TestPipeline:
    def test_feature_files_written(self, pipeline):
        files = sorted(pipeline["feats"].glob("*.lmel"))
        assert len(files) == 8
        assert (pipeline["feats"] / "annotations.jsonl").exists()

    def test_train_writes_artifacts(self, pipeline):
        out = pipeline["root"] / "run_at"
        code = cli.main([
            "train", "--config", str(pipeline["cfg"]), "--data", str(pipeline["feats"]),
            "--mode", "mtl-weak", "--pooling", "at", "--seed", "1", "--out", str(out),
        ])
        assert code == 0
        for name in ("best.ckpt", "final.ckpt", "log.csv", "metrics.json",
                     "config.resolved", "eval_annotations.jsonl"):
            assert (out / name).exists(), name
        resolved = (out / "config.resolved").read_text()
        assert "pooling = at" in resolved and "seed = 1" in resolved
        report = json.loads((out / "metrics.json").read_text())
        assert set(report) == {
            "scene_micro_f", "scene_macro_f", "event_micro_f", "event_macro_f", "per_event_f",
        }

    def test_evaluate_reproduces_training_metrics(self, pipeline, capsys):
        out = pipeline["root"] / "run_repro"
        assert cli.main([
            "train", "--config", str(pipeline["cfg"]), "--data", str(pipeline["feats"]),
            "--mode", "mtl-weak", "--pooling", "mp", "--seed", "2", "--out", str(out),
        ]) == 0
        capsys.readouterr()
        assert cli.main([
            "evaluate", "--model", str(out / "final.ckpt"), "--data", str(pipeline["feats"]),
            "--annotations", str(out / "eval_annotations.jsonl"), "--mode", "mtl-weak",
            "--config", str(pipeline["cfg"]),
        ]) == 0
        printed = json.loads(capsys.readouterr().out)
        stored = json.loads((out / "metrics.json").read_text())
        assert printed == stored

    def test_train_determinism_same_flags(self, pipeline):
        outs = []
        for name in ("det_a", "det_b"):
            out = pipeline["root"] / name
            assert cli.main([
                "train", "--config", str(pipeline["cfg"]), "--data", str(pipeline["feats"]),
                "--mode", "sed-only", "--pooling", "es", "--seed", "5", "--out", str(out),
            ]) == 0
            outs.append(out)
        assert (outs[0] / "final.ckpt").read_bytes() == (outs[1] / "final.ckpt").read_bytes()
        assert (outs[0] / "metrics.json").read_text() == (outs[1] / "metrics.json").read_text()

    def test_sweep_row_set(self, pipeline, capsys):
        out = pipeline["root"] / "sweep"
        assert cli.main([
            "sweep", "--config", str(pipeline["cfg"]), "--data", str(pipeline["feats"]),
            "--seeds", "1", "--out", str(out), "--set", "epochs=1",
        ]) == 0
        lines = (out / "summary.tsv").read_text().splitlines()
        assert lines[0] == "mode\tpooling\tseed\tscene_micro_f\tscene_macro_f\tevent_micro_f\tevent_macro_f"
        rows = {tuple(ln.split("\t")[:2]) for ln in lines[1:]}
        assert rows == {
            ("asc-only", "none"), ("sed-only", "at"), ("mtl-weak", "none"),
            ("mtl-weak", "mp"), ("mtl-weak", "ap"), ("mtl-weak", "es"), ("mtl-weak", "at"),
        }
        body = (out / "summary.tsv").read_text()
        assert "-" in body  # single-task rows leave the other task's scores blank
