import math

import numpy as np
import pytest
import torch

from mosfuse.audio import Waveform, load_audio
from mosfuse.data import frame_inputs
from mosfuse.fusion import CheckpointError, UnseenDomainError, build_model, save_checkpoint
from mosfuse.infer import (
    InferenceConfig,
    load_fold_models,
    predict_ensemble,
    predict_manifest,
    predict_tta,
    tta_scores,
    write_predictions,
)
from mosfuse.ingest import Manifest, UtteranceLabel
from mosfuse.utils import derive_seed

VOCAB = ["FAKE-A", "FAKE-B"]


def model(cfg, seed=0, branches=("spec", "ssl")):
    return build_model(cfg, VOCAB, list(branches), seed=seed).eval()


def constant_model(cfg, value):
    m = model(cfg, branches=["spec"])
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.fill_(value)
    return m


def inf(reps=5, seed=0, **kw):
    return InferenceConfig(tta_reps=reps, domains=["FAKE-A"], seed=seed, **kw)


@pytest.fixture
def wave(manifest):
    return load_audio(manifest.labels[0].audio_path)


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(tta_reps=0)
    with pytest.raises(ValueError):
        InferenceConfig(domain_mode="fixed", domains=["A", "B"])
    with pytest.raises(ValueError):
        InferenceConfig(domain_mode="average", domains=[])


def test_single_rep_equals_one_forward_pass(tiny_cfg, wave):
    m = model(tiny_cfg)
    got = predict_tta(m, wave, inf(1), tiny_cfg.audio, seed=7)
    _, images = frame_inputs(wave, tiny_cfg.audio, derive_seed(7, "tta", 0))
    batch = {
        "images": torch.from_numpy(images)[None],
        "wave": torch.from_numpy(wave.samples)[None],
        "domain": torch.tensor([0]),
    }
    with torch.no_grad():
        expected = m(batch).item()
    assert abs(got - expected) <= 1e-6


def test_identical_frame_draws_collapse_to_single_pass(tiny_cfg):
    # An utterance exactly one frame long leaves only offset 0 to draw.
    n = tiny_cfg.audio.frame_length
    w = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, n).astype(np.float32), 16000)
    m = model(tiny_cfg)
    scores = tta_scores(m, w, inf(5), tiny_cfg.audio, 3)
    assert len(set(scores)) == 1
    assert predict_tta(m, w, inf(5), tiny_cfg.audio, 3) == pytest.approx(
        predict_tta(m, w, inf(1), tiny_cfg.audio, 3), abs=1e-12)


def test_tta_is_mean_of_logged_reps(tiny_cfg, wave):
    log = []
    out = predict_tta(model(tiny_cfg), wave, inf(5), tiny_cfg.audio, 11, log)
    (reps,) = log
    assert len(reps) == 5 and len(set(reps)) > 1
    assert abs(out - sum(reps) / 5) <= 1e-9


def test_fold_average_of_constant_models(tiny_cfg, wave):
    models = [constant_model(tiny_cfg, v) for v in (3.0, 3.5, 4.0, 4.5, 5.0)]
    log = []
    out = predict_ensemble(models, wave, inf(3), tiny_cfg.audio, 0, log)
    assert out == pytest.approx(4.0, abs=1e-12)
    assert [e["fold_score"] for e in log] == pytest.approx([3.0, 3.5, 4.0, 4.5, 5.0], abs=1e-6)


def test_ensemble_mean_of_logged_folds_and_order_invariance(tiny_cfg, wave):
    models = [model(tiny_cfg, seed=s) for s in range(3)]
    log = []
    out = predict_ensemble(models, wave, inf(4), tiny_cfg.audio, 5, log)
    folds = [e["fold_score"] for e in log]
    for e in log:
        assert abs(e["fold_score"] - math.fsum(e["tta"]) / 4) <= 1e-9
    assert abs(out - sum(folds) / 3) <= 1e-9
    flipped = predict_ensemble(models[::-1], wave, inf(4), tiny_cfg.audio, 5)
    assert abs(out - flipped) <= 1e-12
    assert predict_ensemble(models[:1], wave, inf(4), tiny_cfg.audio, 5) == predict_tta(
        models[0], wave, inf(4), tiny_cfg.audio, 5)


def test_checkpoint_failure_names_fold(tiny_cfg, tmp_path):
    good = tmp_path / "fold_0.pt"
    save_checkpoint(model(tiny_cfg), good, tiny_cfg)
    bad = tmp_path / "fold_1.pt"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError, match="fold 1"):
        load_fold_models([good, bad])
    with pytest.raises(ValueError):
        predict_ensemble([], Waveform(np.zeros(10, np.float32), 16000), inf(), tiny_cfg.audio)


def test_domain_modes(tiny_cfg, wave):
    m = model(tiny_cfg)
    with pytest.raises(UnseenDomainError):
        predict_tta(m, wave, InferenceConfig(domains=["BVCC"]), tiny_cfg.audio)
    a = predict_tta(m, wave, inf(2), tiny_cfg.audio, 1)
    b = predict_tta(m, wave, InferenceConfig(2, "fixed", ["FAKE-B"], 0), tiny_cfg.audio, 1)
    avg = predict_tta(m, wave, InferenceConfig(2, "average", VOCAB, 0), tiny_cfg.audio, 1)
    assert abs(avg - (a + b) / 2) <= 1e-9


def test_frames_mode_feeds_frames_to_ssl(tiny_cfg, wave):
    m = model(tiny_cfg, branches=["ssl"])
    whole = tta_scores(m, wave, inf(3), tiny_cfg.audio, 2)
    framed = tta_scores(m, wave, inf(3, ssl_input="frames"), tiny_cfg.audio, 2)
    # Whole-utterance input is shared by all reps; frame input differs per rep.
    assert len(set(whole)) == 1
    assert len(set(framed)) == 3


def test_empty_manifest(tiny_cfg):
    res = predict_manifest([model(tiny_cfg)], Manifest([]), inf(), tiny_cfg.audio)
    assert res.rows == [] and res.errors == [] and not res.partial


def test_bad_path_collected(tiny_cfg, manifest, tmp_path):
    labels = list(manifest.labels[:9])
    labels.append(UtteranceLabel("FAKE-A", "sysA", "gone", str(tmp_path / "deleted.wav"), 3.0, 1))
    res = predict_manifest([model(tiny_cfg)], Manifest(labels), inf(2), tiny_cfg.audio)
    assert len(res.rows) == 9 and len(res.errors) == 1 and res.partial
    assert res.errors[0][:2] == ("FAKE-A", "gone")


def test_manifest_predictions_byte_identical(tiny_cfg, manifest, tmp_path):
    sub = manifest.subset(lambda lab: lab.system_id in ("sysA", "sysD"))
    models = [model(tiny_cfg, seed=s) for s in range(2)]
    for name in ("a.csv", "b.csv"):
        res = predict_manifest(models, sub, inf(2), tiny_cfg.audio)
        write_predictions(res.rows, tmp_path / name)
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "dataset_id,system_id,utterance_id,pred_mos"
    assert len(lines) == len(sub) + 1
    assert all(len(line.rsplit(",", 1)[1].split(".")[1]) == 6 for line in lines[1:])
    for row, entry in zip(res.rows, res.logs):
        folds = [e["fold_score"] for e in entry["folds"]]
        assert abs(row[3] - sum(folds) / len(folds)) <= 1e-9
