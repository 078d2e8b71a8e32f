import json
from pathlib import Path

import pytest
import yaml

from xkd.cli import main
from xkd.config import ConfigError, RunConfig, load_config
from xkd.data import DatasetManifest
from xkd.models import read_checkpoint_header

QUICKSTART = Path(__file__).resolve().parents[1] / "configs" / "quickstart.yaml"

TINY = {
    "name": "tiny",
    "dataset": {"synthetic": {"counts": [20, 6, 6], "seed": 1}},
    "distill": {"epochs_teacher": 2, "epochs_student": 1, "learning_rate": 3e-3},
    "explain": {"samples": 4},
}


def write(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root, TINY)
    assert main(["train-teacher", cfg, "-q", "--output-dir", str(root / "out")]) == 0
    return root, cfg, root / "out" / "tiny" / "train-teacher"


class TestConfig:
    def test_defaults_expand(self, monkeypatch):
        monkeypatch.delenv("XKD_OUTPUT_ROOT", raising=False)
        cfg = load_config()
        assert cfg.output_dir == "runs" and cfg.dataset.image_size == 32
        assert cfg.distill.batch_size == 32 and cfg.distill.loss.alpha == 0.5
        assert cfg.explain.samples == 50

    def test_env_output_root(self, monkeypatch):
        monkeypatch.setenv("XKD_OUTPUT_ROOT", "/somewhere")
        assert load_config().output_dir == "/somewhere"
        assert load_config(overrides={"output_dir": "flag"}).output_dir == "flag"

    def test_flags_win(self, tmp_path):
        cfg = load_config(QUICKSTART, {"distill.loss.alpha": 0.25, "distill.seed": 9})
        assert cfg.distill.loss.alpha == 0.25 and cfg.distill.seed == 9
        assert cfg.distill.learning_rate == 0.003

    @pytest.mark.parametrize(
        "raw, path",
        [
            ({"distill": {"loss": {"alpha": 1.5}}}, "distill.loss.alpha"),
            ({"distill": {"epochs_teacher": 0}}, "distill.epochs_teacher"),
            ({"dataset": {"root": "/no/such/dir"}}, "dataset.root"),
            ({"dataset": {"synthetic": {"colour": 1}}}, "dataset.synthetic.colour"),
            ({"models": {"teacher": "resnet"}}, "models.teacher"),
            ({"distill": {"loss": {"variant": "kl"}}}, "distill.loss.variant"),
        ],
    )
    def test_errors_name_field(self, tmp_path, raw, path):
        with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
            load_config(write(tmp_path, raw))

    def test_blob_too_big(self, tmp_path):
        with pytest.raises(ConfigError, match="dataset.synthetic"):
            load_config(write(tmp_path, {"dataset": {"synthetic": {"blob_radius": 20}}}))

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "x.yaml"
        p.write_text("a: [1,\n")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(p)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nope.yaml")

    def test_resolved_round_trip(self, tmp_path):
        cfg = load_config(QUICKSTART)
        again = load_config(cfg.save(tmp_path / "c.yaml"))
        assert again == cfg and again.hash() == cfg.hash()

    def test_hash_ignores_output_dir(self):
        assert load_config(QUICKSTART, {"output_dir": "a"}).hash() == load_config(QUICKSTART, {"output_dir": "b"}).hash()
        assert load_config(QUICKSTART, {"distill.seed": 1}).hash() != load_config(QUICKSTART).hash()

    def test_folder_dataset_defaults_to_224(self, tmp_path):
        assert RunConfig.model_validate({"dataset": {"root": str(tmp_path)}}).dataset.image_size == 224


class TestCommands:
    def test_exit_code_config(self, tmp_path, capsys):
        assert main(["train-teacher", write(tmp_path, {"dataset": {"root": "/missing"}})]) == 2
        assert "dataset.root" in capsys.readouterr().err

    def test_exit_code_runtime(self, tmp_path, capsys):
        cfg = write(tmp_path, {**TINY, "dataset": {"synthetic": {"counts": [10, 4, 0]}}})
        assert main(["train-teacher", cfg, "-q", "--output-dir", str(tmp_path)]) == 3
        assert "empty" in capsys.readouterr().err

    def test_train_teacher_outputs(self, teacher_run):
        _, _, run = teacher_run
        for f in ("config.yaml", "manifest.json", "manifest_hash.txt", "teacher/model.ckpt", "teacher/trace.jsonl", "teacher/report.json"):
            assert (run / f).exists(), f
        manifest = DatasetManifest.load(run / "manifest.json")
        assert (run / "manifest_hash.txt").read_text().strip() == manifest.content_hash
        report = json.loads((run / "teacher" / "report.json").read_text())
        assert report["manifest_hash"] == manifest.content_hash
        assert report["config_hash"] == load_config(run / "config.yaml").hash()
        assert len((run / "teacher" / "trace.jsonl").read_text().splitlines()) == 2

    def test_rerun_identical_report(self, teacher_run, tmp_path):
        _, _, run = teacher_run
        assert main(["train-teacher", str(run / "config.yaml"), "-q", "--output-dir", str(tmp_path)]) == 0
        again = tmp_path / "tiny" / "train-teacher" / "teacher" / "report.json"
        assert again.read_bytes() == (run / "teacher" / "report.json").read_bytes()

    def test_distill_with_baseline(self, teacher_run, tmp_path):
        root, cfg, run = teacher_run
        ckpt = str(run / "teacher" / "model.ckpt")
        rc = main(["distill", cfg, "-q", "--output-dir", str(tmp_path), "--teacher", ckpt, "--with-baseline", "--variant", "ce_kl"])
        assert rc == 0
        d = tmp_path / "tiny" / "distill"
        grid = (d / "comparison.md").read_text()
        assert "| student (KD) |" in grid and "| student (no KD) |" in grid and "| teacher |" in grid
        assert yaml.safe_load((d / "config.yaml").read_text())["distill"]["loss"]["variant"] == "ce_kl"
        prov = json.loads((d / "provenance.json").read_text())
        assert prov["teacher_hash_before"] == prov["teacher_hash_after"]
        assert prov["teacher_hash_after"] == read_checkpoint_header(ckpt)["parameter_hash"]
        assert (d / "student" / "model.ckpt").exists() and (d / "baseline" / "trace.jsonl").exists()

    def test_distill_class_mismatch(self, teacher_run, tmp_path, capsys):
        _, _, run = teacher_run
        cfg = write(tmp_path, {**TINY, "dataset": {"synthetic": {"num_classes": 4, "counts": [4, 2, 2], "blob_radius": 3}}})
        rc = main(["distill", cfg, "-q", "--output-dir", str(tmp_path), "--teacher", str(run / "teacher" / "model.ckpt")])
        assert rc == 2 and "classes" in capsys.readouterr().err

    def test_missing_checkpoint(self, teacher_run, tmp_path):
        _, cfg, _ = teacher_run
        assert main(["evaluate", cfg, "-q", "--output-dir", str(tmp_path), "--checkpoints", str(tmp_path / "no.ckpt")]) == 2

    def test_evaluate(self, teacher_run, tmp_path):
        _, cfg, run = teacher_run
        ckpt = run / "teacher" / "model.ckpt"
        assert main(["evaluate", cfg, "-q", "--output-dir", str(tmp_path), "--checkpoints", str(ckpt), str(ckpt)]) == 0
        d = tmp_path / "tiny" / "evaluate"
        r = json.loads((d / "teacher.json").read_text())
        assert r["checkpoint_hash"] == read_checkpoint_header(ckpt)["parameter_hash"]
        assert json.loads((d / "teacher2.json").read_text()) == r
        assert (d / "comparison.md").read_text().count("| teacher") == 2

    def test_explain_single(self, teacher_run, tmp_path):
        _, cfg, run = teacher_run
        ckpt = str(run / "teacher" / "model.ckpt")
        assert main(["explain", cfg, "-q", "--output-dir", str(tmp_path), "--checkpoints", ckpt, "--classes", "0,9"]) == 0
        d = tmp_path / "tiny" / "explain"
        summary = json.loads((d / "alignment.json").read_text())
        assert "alignment" not in summary and summary["errors"] == summary["n_images"] == 4
        records = [json.loads(l) for l in (d / "per_image.jsonl").read_text().splitlines()]
        assert len(records) == 8 and sum("error" in r for r in records) == 4
        assert len(list((d / "overlays").glob("*.png"))) == 4
        assert len(list((d / "overlays").glob("*.teacher.heatmap.txt"))) == 4

    def test_explain_pair(self, teacher_run, tmp_path):
        _, cfg, run = teacher_run
        ckpt = str(run / "teacher" / "model.ckpt")
        assert main(["explain", cfg, "-q", "--output-dir", str(tmp_path), "--checkpoints", ckpt, ckpt]) == 0
        summary = json.loads((tmp_path / "tiny" / "explain" / "alignment.json").read_text())
        assert summary["alignment"]["mean_pearson"] == pytest.approx(1.0)
        assert summary["alignment"]["pair"] == ["teacher", "teacher2"]
        assert summary["models"]["teacher"]["pointing_accuracy"] is not None

    def test_explain_unknown_layer(self, teacher_run, tmp_path, capsys):
        _, cfg, run = teacher_run
        rc = main(["explain", cfg, "-q", "--output-dir", str(tmp_path), "--checkpoints", str(run / "teacher" / "model.ckpt"), "--layer", "fc"])
        assert rc == 2 and "explain.layer" in capsys.readouterr().err

    def test_gen_synthetic(self, tmp_path):
        assert main(["gen-synthetic", write(tmp_path, TINY), "-q", "--out", str(tmp_path / "ds")]) == 0
        m = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
        assert [len(m.splits[r]) for r in ("train", "val", "test")] == [60, 18, 18]
