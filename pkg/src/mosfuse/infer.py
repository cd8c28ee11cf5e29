"""Test-time augmentation and fold ensembling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .audio import AudioError, Waveform
from .data import WaveformStore, frame_inputs, ssl_samples
from .fusion import CheckpointError, MOSPredictor, load_checkpoint
from .ingest import Manifest
from .sslfeat import prepare_waveform
from .utils import derive_seed

logger = logging.getLogger(__name__)

PREDICTION_HEADER = ["dataset_id", "system_id", "utterance_id", "pred_mos"]


@dataclass
class InferenceConfig:
    tta_reps: int = 5
    domain_mode: str = "fixed"  # fixed | average | off
    domains: List[str] = field(default_factory=lambda: ["BVCC"])
    seed: int = 0
    ssl_input: str = "utterance"  # or "frames"; must match training

    def __post_init__(self):
        if self.tta_reps < 1:
            raise ValueError("tta_reps must be >= 1")
        if self.domain_mode not in ("fixed", "average", "off"):
            raise ValueError(f"unknown domain mode {self.domain_mode!r}")
        if self.domain_mode == "fixed" and len(self.domains) != 1:
            raise ValueError("fixed domain mode takes exactly one domain token")
        if self.domain_mode == "average" and not self.domains:
            raise ValueError("average domain mode needs at least one token")

    @classmethod
    def from_run_config(cls, cfg, seed: Optional[int] = None) -> "InferenceConfig":
        inf = cfg.inference
        return cls(
            inf.tta_reps, inf.domain_mode, list(inf.domains), cfg.seed if seed is None else seed, cfg.model.ssl.input
        )


def _domain_sets(model: MOSPredictor, cfg: InferenceConfig) -> List[Optional[str]]:
    if model.domain is None or cfg.domain_mode == "off":
        return [None]
    for tok in cfg.domains:
        model.domain.index(tok)  # raises UnseenDomainError
    return list(cfg.domains)


@torch.no_grad()
def tta_scores(model: MOSPredictor, w: Waveform, cfg: InferenceConfig, audio_cfg, seed: int) -> List[float]:
    """Per-repetition scores.

    With whole-utterance SSL input the SSL branch runs once and is shared by
    all repetitions; with frame input it sees each repetition's frames.
    """
    model.eval()
    reps = cfg.tta_reps
    drawn = [frame_inputs(w, audio_cfg, derive_seed(seed, "tta", r)) for r in range(reps)]
    batch = {}
    if model.spec is not None:
        batch["images"] = torch.from_numpy(np.stack([images for _, images in drawn]))
    h_spec = model.spec_features(batch)
    h_ssl = None
    if model.ssl is not None:
        enc = model.ssl.encoder
        if cfg.ssl_input == "frames":
            prepare_waveform(w, enc)  # rate check
            waves = np.stack([ssl_samples(w, frames, "frames", enc.min_samples) for frames, _ in drawn])
            h_ssl = model.ssl_features({"wave": torch.from_numpy(waves)})
        else:
            samples = prepare_waveform(w, enc)
            h_ssl = model.ssl_features({"wave": torch.from_numpy(samples.astype(np.float32))[None]})
            h_ssl = h_ssl.expand(reps, -1)
    per_domain = []
    for tok in _domain_sets(model, cfg):
        idx = model.domain_indices(tok, reps) if tok is not None else None
        per_domain.append(model.predict_from_features(h_spec, h_ssl, idx).double())
    scores = torch.stack(per_domain).mean(dim=0)
    return [float(s) for s in scores]


def mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def predict_tta(
    model: MOSPredictor,
    w: Waveform,
    cfg: InferenceConfig,
    audio_cfg,
    seed: Optional[int] = None,
    log: Optional[list] = None,
) -> float:
    scores = tta_scores(model, w, cfg, audio_cfg, cfg.seed if seed is None else seed)
    if log is not None:
        log.append(scores)
    return mean(scores)


def load_fold_models(checkpoints: Sequence[Union[str, Path]]) -> List[MOSPredictor]:
    models = []
    for fold, path in enumerate(checkpoints):
        try:
            models.append(load_checkpoint(path)[0])
        except CheckpointError as exc:
            raise CheckpointError(f"fold {fold}: {exc}") from exc
    return models


def predict_ensemble(
    models: Sequence[Union[MOSPredictor, str, Path]],
    w: Waveform,
    cfg: InferenceConfig,
    audio_cfg,
    seed: Optional[int] = None,
    log: Optional[list] = None,
) -> float:
    """Mean over folds of the TTA prediction; every fold sees the same frame draws."""
    if not models:
        raise ValueError("need at least one fold model")
    models = [m if isinstance(m, MOSPredictor) else load_fold_models([m])[0] for m in models]
    fold_scores = []
    for model in models:
        reps: list = []
        fold_scores.append(predict_tta(model, w, cfg, audio_cfg, seed, reps))
        if log is not None:
            log.append({"tta": reps[0], "fold_score": fold_scores[-1]})
    return mean(fold_scores)


@dataclass
class ManifestPredictions:
    rows: List[Tuple[str, str, str, float]]
    errors: List[Tuple[str, str, str]]  # (dataset_id, utterance_id, message)
    logs: List[dict] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.errors)


def predict_manifest(
    models: Sequence[MOSPredictor],
    manifest: Manifest,
    cfg: InferenceConfig,
    audio_cfg,
    store: Optional[WaveformStore] = None,
) -> ManifestPredictions:
    """Ensemble prediction for every utterance; audio failures are collected, not raised.

    Row seeds are derived from (global seed, dataset id, utterance id).
    """
    store = store or WaveformStore(audio_cfg.sample_rate)
    out = ManifestPredictions([], [])
    for lab in manifest.labels:
        try:
            wave = store.get(lab.audio_path)
        except (AudioError, OSError) as exc:
            out.errors.append((lab.dataset_id, lab.utterance_id, str(exc)))
            logger.warning("skipping %s/%s: %s", lab.dataset_id, lab.utterance_id, exc)
            continue
        seed = derive_seed(cfg.seed, lab.dataset_id, lab.utterance_id)
        log: list = []
        score = predict_ensemble(models, wave, cfg, audio_cfg, seed, log)
        out.rows.append((lab.dataset_id, lab.system_id, lab.utterance_id, score))
        out.logs.append({"dataset_id": lab.dataset_id, "utterance_id": lab.utterance_id, "folds": log, "pred_mos": score})
    return out


def write_predictions(rows, dest: Union[str, Path]) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for ds, sys_id, utt, score in rows:
            writer.writerow([ds, sys_id, utt, f"{score:.6f}"])
