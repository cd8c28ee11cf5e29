import csv
import json
from pathlib import Path

import pytest
import yaml

from mosfuse.cli import EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, EXIT_VALIDATION, cmd_ablate, main
from mosfuse.config import load_config
from mosfuse.ingest import read_manifest
from mosfuse.synthetic import smoke_config


def quick_config(corpus, root: Path, test=True) -> Path:
    """Smoke config shrunk to 2 folds and 2 steps per stage, written as YAML."""
    data = smoke_config(corpus[0], corpus[1] if test else None, root / "run")
    data["folds"] = 2
    data["stages"] = {k: dict(v, epochs=1, max_steps=2) for k, v in data["stages"].items()}
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def only_run_dir(root: Path) -> Path:
    (run,) = list((root / "run").iterdir())
    return run


def test_schema(capsys):
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert "stages" in schema["properties"] and "datasets" in schema["properties"]


def test_missing_dataset_path_fails_before_work(corpus, tmp_path, capsys):
    data = smoke_config(tmp_path / "nowhere", run_root=tmp_path / "run")
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(data))
    assert main(["pipeline", "--config", str(tmp_path / "c.yaml")]) == EXIT_VALIDATION
    assert "dataset path not found" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_bad_schema_and_unknown_arm(corpus, tmp_path):
    (tmp_path / "c.yaml").write_text("folds: 1\n")
    assert main(["pipeline", "--config", str(tmp_path / "c.yaml")]) == EXIT_VALIDATION
    (tmp_path / "d.yaml").write_text("stages: {s9: {epochs: 1}}\n")
    assert main(["pipeline", "--config", str(tmp_path / "d.yaml")]) == EXIT_VALIDATION
    cfg = quick_config(corpus, tmp_path)
    assert main(["ablate", "--config", str(cfg), "--arm", "no-domain"]) == EXIT_VALIDATION


def test_ingest_command(corpus, tmp_path, capsys):
    out = tmp_path / "m.csv"
    rc = main(["ingest", "--format", "ratings-csv", "--in", str(corpus[0]), "--rules", "", "--out", str(out)])
    assert rc == EXIT_OK
    assert len(read_manifest(out)) == 32
    printed = capsys.readouterr().out
    assert "FAKE-A: listeners=4 systems=4 sentences=16 ratings=64" in printed
    assert main(["ingest", "--format", "nope", "--in", str(corpus[0]), "--out", str(out)]) == EXIT_VALIDATION


def write_csv(path, header, rows):
    with path.open("w", newline="") as h:
        w = csv.writer(h)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_evaluate_command_and_clamp(tmp_path, capsys):
    truth = write_csv(tmp_path / "t.csv", ["dataset_id", "system_id", "utterance_id", "mos"],
                      [["D", "A", "a1", 3], ["D", "A", "a2", 4], ["D", "B", "b1", 2], ["D", "C", "c1", 5]])
    pred = write_csv(tmp_path / "p.csv", ["dataset_id", "system_id", "utterance_id", "pred_mos"],
                     [["D", "A", "a1", 3.5], ["D", "A", "a2", 4.5], ["D", "B", "b1", 1], ["D", "C", "c1", 7]])
    out = tmp_path / "r.json"
    assert main(["evaluate", "--pred", str(pred), "--truth", str(truth), "--level", "system", "--out", str(out)]) == 0
    (cond,) = json.loads(out.read_text())["conditions"]
    assert cond["level"] == "system" and cond["n"] == 3
    assert cond["mse"] == pytest.approx((0.25 + 1.0 + 4.0) / 3, abs=1e-12)
    assert main(["evaluate", "--pred", str(pred), "--truth", str(truth), "--level", "system", "--clamp",
                 "--out", str(out)]) == 0
    (cond,) = json.loads(out.read_text())["conditions"]
    assert cond["mse"] == pytest.approx((0.25 + 1.0) / 3, abs=1e-12)
    capsys.readouterr()
    write_csv(tmp_path / "x.csv", ["dataset_id", "system_id", "utterance_id", "pred_mos"], [["D", "Z", "z1", 3]])
    assert main(["evaluate", "--pred", str(tmp_path / "x.csv"), "--truth", str(truth)]) == EXIT_VALIDATION


@pytest.fixture(scope="module")
def pipeline_run(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = quick_config(corpus, root)
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    return root, cfg, only_run_dir(root)


def test_run_directory_layout(pipeline_run):
    _, _, run = pipeline_run
    assert sorted(p.name for p in run.iterdir()) == ["checkpoints", "config", "history", "predictions", "reports"]
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["fold_0.pt", "fold_1.pt"]
    for name in ("config.yaml", "config_hash.txt", "train_manifest.csv", "test_manifest.csv"):
        assert (run / "config" / name).exists()


def test_config_hash_everywhere(pipeline_run):
    from mosfuse.fusion import load_checkpoint

    _, _, run = pipeline_run
    h = (run / "config" / "config_hash.txt").read_text().strip()
    report = json.loads((run / "reports" / "report.json").read_text())
    assert report["config_hash"] == h and report["selection"]["config_hash"] == h
    logs = (run / "predictions" / "heldout_log.jsonl").read_text().splitlines()
    assert logs and all(json.loads(line)["config_hash"] == h for line in logs)
    from mosfuse.utils import config_hash

    assert config_hash(load_checkpoint(run / "checkpoints" / "fold_0.pt")[1].snapshot()) == h
    assert {c["level"] for c in report["blocks"][0]["conditions"]} == {"utterance", "system"}


def test_predict_command(pipeline_run, manifest, tmp_path, capsys):
    _, _, run = pipeline_run
    out = tmp_path / "p.csv"
    rows = [["dataset_id", "system_id", "utterance_id", "audio_path", "mos", "n_ratings"]]
    rows += [[lab.dataset_id, lab.system_id, lab.utterance_id, lab.audio_path, lab.mos, lab.n_ratings]
             for lab in manifest.labels[:3]]
    rows.append(["FAKE-A", "sysA", "lost", str(tmp_path / "lost.wav"), 3.0, 1])
    write_csv(tmp_path / "m.csv", rows[0], rows[1:])
    args = ["predict", "--ckpt", str(run), "--manifest", str(tmp_path / "m.csv"), "--out", str(out),
            "--domain", "FAKE-A", "--seed", "0", "--tta-reps", "2"]
    assert main(args) == EXIT_PARTIAL
    assert len(out.read_text().splitlines()) == 4
    assert "lost" in capsys.readouterr().err
    assert main(["predict", "--ckpt", str(run), "--wav", manifest.labels[0].audio_path, "--domain", "FAKE-A"]) == 0
    assert float(capsys.readouterr().out) > 0
    assert main(["predict", "--ckpt", str(run), "--wav", manifest.labels[0].audio_path, "--domain", "BVCC"]) == 1
    assert main(["predict", "--ckpt", str(tmp_path), "--wav", manifest.labels[0].audio_path]) == EXIT_RUNTIME


def test_domain_sweep_and_drop_dataset(corpus, tmp_path):
    cfg_path = quick_config(corpus, tmp_path, test=False)
    before = cfg_path.read_bytes()
    cfg = load_config(cfg_path)
    sweep = cmd_ablate(cfg, "domain-sweep")
    assert [b["domains"] for b in sweep["blocks"]] == [["FAKE-A"], ["FAKE-B"]]
    assert sweep["arm"] == "domain-sweep"
    dropped = cmd_ablate(cfg, "drop-dataset:FAKE-B")
    train = read_manifest(Path(dropped["run_dir"]) / "config" / "train_manifest.csv")
    assert {lab.dataset_id for lab in train} == {"FAKE-A"} and len(train) == 16
    assert cfg_path.read_bytes() == before
    assert cfg.snapshot() == load_config(cfg_path).snapshot()
    with pytest.raises(Exception, match="cannot drop"):
        cmd_ablate(cfg, "drop-dataset:SOMOS")
