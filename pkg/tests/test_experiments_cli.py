import csv
import json

import pytest
import yaml

from exprcl.cli import main
from exprcl.config import ConfigError, build_config
from exprcl.data import load_manifest
from exprcl.experiments import load_matrix, run_experiment_matrix, run_pretrain, run_probe, verify_run
from exprcl.synthetic import load_labels

TINY = {
    "seed": 3,
    "data": {"n_identities": 4, "videos_per_id": 2, "duration_s": 2.0, "probe_identities": 6,
             "probe_per_identity": 4, "fr_identities": 4, "fr_per_identity": 4, "fr_pairs": 20},
    "augmentation": {"resize": 64, "crop": 56},
    "model": {"width": 8, "proj_dim": 16},
    "pretrain": {"batch_size": 8, "epochs": 2, "steps_per_epoch": 2, "checkpoint_every": 1,
                 "checkpoint_acc_gate": 0.0},
    "downstream": {"epochs": 1, "batch_size": 16},
}


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj))
    return path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in list(__import__("os").environ):
        if name.startswith("EXPRCL_"):
            monkeypatch.delenv(name)


class TestRunDirectory:
    def test_layout_and_verify(self, tmp_path):
        cfg = build_config(TINY)
        run_pretrain(cfg, tmp_path, source_text="# echo me\n", trace_augs=True)
        assert (tmp_path / "config.echo").read_text() == "# echo me\n"
        resolved = json.loads((tmp_path / "config.resolved.json").read_text())
        assert resolved["fingerprint"] == cfg.fingerprint
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["epoch_0001.ckpt", "epoch_0002.ckpt", "last.ckpt"]
        traces = [json.loads(x) for x in (tmp_path / "traces.jsonl").read_text().splitlines()]
        assert len(traces) == 2 * 2 * 24 and all(t["config_fingerprint"] == cfg.fingerprint for t in traces)
        assert verify_run(tmp_path) == []

    def test_verify_catches_tampering(self, tmp_path):
        cfg = build_config(TINY)
        encoder, _ = run_pretrain(cfg, tmp_path)
        run_probe(cfg, encoder, out_dir=tmp_path)
        rep = tmp_path / "reports" / "expr_cls_freeze.json"
        body = json.loads(rep.read_text())
        body["config_fingerprint"] = "0" * 16
        rep.write_text(json.dumps(body))
        problems = verify_run(tmp_path)
        assert len(problems) == 1 and "expr_cls_freeze" in problems[0]

    def test_verify_missing_config(self, tmp_path):
        assert "missing" in verify_run(tmp_path)[0]


class TestMatrix:
    def matrix(self, rows):
        return {"base": TINY, "tasks": ["EXPR_CLS", "FR_KNN"], "rows": rows}

    def test_two_rows(self, tmp_path):
        spec = self.matrix([{"label": "a", "toggles": dict.fromkeys(("timeaug", "hardneg", "faceswap", "maskfn"), False)},
                            {"label": "g", "toggles": {}}])
        reports = run_experiment_matrix(spec, tmp_path / "m1")
        assert len(reports) == 4
        fps = {r.extra["label"]: r.config_fingerprint for r in reports}
        assert fps["a"] != fps["g"]
        table = json.loads((tmp_path / "m1" / "comparison.json").read_text())
        assert [t["label"] for t in table] == ["a", "a", "g", "g"]
        with (tmp_path / "m1" / "comparison.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert {r["metric"] for r in rows} == {"f1", "acc", "fr_acc"}
        for label in ("a", "g"):
            assert verify_run(tmp_path / "m1" / "rows" / label) == []

        again = run_experiment_matrix(spec, tmp_path / "m2")
        assert [r.metrics for r in again] == [r.metrics for r in reports]

    def test_undefined_toggle_fails_before_running(self, tmp_path):
        spec = self.matrix([{"label": "a", "toggles": {}}, {"label": "b", "toggles": {"mixup": True}}])
        with pytest.raises(ConfigError) as err:
            run_experiment_matrix(spec, tmp_path / "m")
        assert err.value.key == "rows[1].toggles.mixup"
        assert not (tmp_path / "m").exists()

    def test_failed_row_recorded(self, tmp_path):
        spec = self.matrix([{"label": "big", "toggles": {}, "overrides": {"pretrain": {"batch_size": 64}}},
                            {"label": "ok", "toggles": {}}])
        reports = run_experiment_matrix(spec, tmp_path / "m")
        table = json.loads((tmp_path / "m" / "comparison.json").read_text())
        assert table[0]["status"] == "failed" and "BatchError" in table[0]["error"]
        assert {r.extra["label"] for r in reports} == {"ok"}

    def test_matrix_file_with_base_path(self, tmp_path):
        write_yaml(tmp_path / "base.yaml", TINY)
        path = write_yaml(tmp_path / "matrix.yaml", {"base": "base.yaml", "rows": [{"toggles": {"maskfn": False}}]})
        rows = load_matrix(path)
        assert rows[0].label == "a" and not rows[0].config.pretrain.maskfn and rows[0].config.seed == 3


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", TINY)
        run = tmp_path / "run"
        assert main(["pretrain", "--config", str(cfg), "--out", str(run), "--trace-augs"]) == 0
        assert main(["verify-run", str(run)]) == 0
        ckpt = str(run / "checkpoints" / "last.ckpt")
        assert main(["probe", "--checkpoint", ckpt, "--config", str(cfg), "--out", str(run / "reports" / "p.json")]) == 0
        assert main(["finetune", "--checkpoint", ckpt, "--config", str(cfg)]) == 0
        capsys.readouterr()
        assert main(["eval-fr", "--checkpoint", ckpt, "--config", str(cfg)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["task"] == "FR_KNN" and 0 <= report["metrics"]["fr_acc"] <= 1
        assert main(["verify-run", str(run)]) == 0

    def test_gen_synthetic(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", TINY)
        assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "corpus")]) == 0
        m = load_manifest(tmp_path / "corpus" / "manifest.csv")
        labels = load_labels(tmp_path / "corpus" / "manifest.labels.jsonl")
        assert len(m) == 4 * 2 * 10 and set(labels) == {r.key for r in m}

    def test_validation_exit_code(self, tmp_path, capsys):
        bad = write_yaml(tmp_path / "bad.yaml", {"temporal": {"t1_seconds": 1.0, "t2_seconds": 0.5}})
        assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
        assert "temporal.t2_seconds" in capsys.readouterr().err

    def test_runtime_exit_code(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {**TINY, "pretrain": {**TINY["pretrain"], "batch_size": 64}})
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2

    def test_matrix_exit_codes(self, tmp_path):
        path = write_yaml(tmp_path / "m.yaml", {"base": TINY, "tasks": ["FR_KNN"],
                                                "rows": [{"label": "x", "toggles": {"nope": True}}]})
        assert main(["matrix", "--matrix", str(path), "--out", str(tmp_path / "o")]) == 1
        path = write_yaml(tmp_path / "m2.yaml", {"base": TINY, "tasks": ["FR_KNN"], "rows": [
            {"label": "big", "toggles": {}, "overrides": {"pretrain": {"batch_size": 64}}}]})
        assert main(["matrix", "--matrix", str(path), "--out", str(tmp_path / "o2")]) == 2

    def test_env_override(self, tmp_path, monkeypatch):
        cfg = write_yaml(tmp_path / "c.yaml", TINY)
        monkeypatch.setenv("EXPRCL_PRETRAIN__EPOCHS", "1")
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
        lines = (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
