"""Synthetic listening-test corpus for smoke runs and tests.

Utterances are harmonic tones plus white noise whose level tracks the
utterance's latent quality, so a small spectrogram model can learn the
mapping. Ratings are written in the generic ``ratings-csv`` layout.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from .audio import Waveform, save_audio

SMOKE_CONFIG = {
    "audio": {"sample_rate": 16000, "n_frames": 2, "frame_length": 4096, "n_mels": 32, "windows": [256, 1024]},
    "model": {
        "spec": {"type": "tiny", "channels": 16, "out_hw": [4, 4]},
        "ssl": {"type": "tiny", "layers": 3, "dim": 8, "hop": 160, "kernel": 400},
        "domain_encoding": True,
        "domain_dim": 1,
        "head_bias_init": 3.0,
    },
    "stages": {
        "spec-s1": {"lr_start": 3e-3, "epochs": 24, "batch_size": 8},
        "ssl-s1-frozen": {"epochs": 16, "batch_size": 8},
        "ssl-s1-finetune": {"epochs": 8, "batch_size": 8},
        "s2-fusion": {"epochs": 16, "batch_size": 8},
        "s3-finetune": {"epochs": 8, "batch_size": 8},
        "s3-no-stage2": {"epochs": 16, "batch_size": 8},
        "s3-only-stage3": {"epochs": 16, "batch_size": 8},
    },
    "folds": 5,
    "seed": 0,
    "inference": {"tta_reps": 2, "domain_mode": "fixed", "domains": ["FAKE-A"]},
    "evaluation": {"zoom_rates": [1.0, 0.5], "levels": ["utterance", "system"]},
}


def synth_utterance(quality: float, rng: np.random.Generator, n_samples: int, rate: int) -> np.ndarray:
    t = np.arange(n_samples) / rate
    f0 = rng.uniform(120.0, 240.0)
    tone = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 6))
    tone *= 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * t) ** 2
    tone /= np.max(np.abs(tone))
    snr_db = 4.0 + 8.0 * (quality - 1.0)
    noise = rng.standard_normal(n_samples) * 10 ** (-snr_db / 20.0)
    x = 0.5 * (tone + noise)
    return (x / max(1.0, np.max(np.abs(x)))).astype(np.float32)


def make_corpus(
    root: Path,
    domains: Sequence[str] = ("FAKE-A", "FAKE-B"),
    systems: Sequence[str] = ("sysA", "sysB", "sysC", "sysD"),
    utts_per_system: int = 4,
    listeners: int = 4,
    duration: float = 0.5,
    rate: int = 16000,
    seed: int = 0,
    domain_bias: Dict[str, float] = None,
) -> Path:
    """Write ``<root>/ratings.csv`` plus WAVs; returns the ratings directory."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    bias = domain_bias or {d: 0.4 * i for i, d in enumerate(domains)}
    n_samples = int(duration * rate)
    base_quality = np.linspace(1.5, 4.5, len(systems))
    rows = []
    for dom in domains:
        for sys_id, q in zip(systems, base_quality):
            for u in range(utts_per_system):
                utt = f"{dom}_{sys_id}_u{u}"
                quality = float(np.clip(q + rng.normal(0.0, 0.35), 1.0, 5.0))
                wav_rel = f"wav/{utt}.wav"
                save_audio(root / wav_rel, Waveform(synth_utterance(quality, rng, n_samples, rate), rate))
                for li in range(listeners):
                    score = int(np.clip(np.rint(quality + bias[dom] + rng.normal(0.0, 0.4)), 1, 5))
                    rows.append([dom, sys_id, utt, f"{dom}-L{li}", score, wav_rel])
    with (root / "ratings.csv").open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["dataset_id", "system_id", "utterance_id", "listener_id", "score", "audio_path"])
        writer.writerows(rows)
    return root


def smoke_config(train_dir: Path, test_dir: Path = None, run_root: Path = None) -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMOKE_CONFIG.items()}
    cfg["datasets"] = [{"format": "ratings-csv", "path": str(train_dir)}]
    if test_dir is not None:
        cfg["test_datasets"] = [{"format": "ratings-csv", "path": str(test_dir)}]
    if run_root is not None:
        cfg["run_root"] = str(run_root)
    return cfg
