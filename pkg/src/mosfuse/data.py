"""Torch dataset/batching over manifest utterances."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from .audio import Waveform, extract_frames, load_audio, mel_stack, tile_to_length
from .ingest import UtteranceLabel
from .utils import derive_seed


class WaveformStore:
    """Path -> Waveform cache shared by the datasets of one run."""

    def __init__(self, sample_rate: int):
        self.sample_rate = sample_rate
        self._cache: Dict[str, Waveform] = {}

    def get(self, path: str) -> Waveform:
        wave = self._cache.get(path)
        if wave is None:
            wave = load_audio(path, self.sample_rate)
            self._cache[path] = wave
        return wave


def frame_inputs(wave: Waveform, audio_cfg, seed: int):
    """Random frames (K, L) of ``wave`` and their (K, N, F, F) mel images."""
    frames = extract_frames(wave, audio_cfg.n_frames, audio_cfg.frame_length, seed).frames
    return frames, mel_stack(frames, audio_cfg.windows, audio_cfg.n_mels, audio_cfg.sample_rate)


def spectrogram_input(wave: Waveform, audio_cfg, seed: int) -> np.ndarray:
    return frame_inputs(wave, audio_cfg, seed)[1]


def ssl_samples(wave: Waveform, frames: np.ndarray, ssl_input: str, min_samples: int) -> np.ndarray:
    """SSL input: the whole utterance, or the spectrogram frames joined end to end."""
    samples = wave.samples if ssl_input == "utterance" else frames.reshape(-1)
    return tile_to_length(samples, min_samples).astype(np.float32)


class UtteranceDataset(Dataset):
    """Items carry mel images for random frames plus the whole waveform.

    Frame draws depend on (seed, epoch, utterance key) only, so results do
    not depend on worker count or iteration order.
    """

    def __init__(
        self,
        labels: Sequence[UtteranceLabel],
        audio_cfg,
        vocabulary: Optional[Sequence[str]],
        seed: int,
        store: Optional[WaveformStore] = None,
        min_ssl_samples: int = 1,
        ssl_input: str = "utterance",
    ):
        self.labels = list(labels)
        self.audio_cfg = audio_cfg
        self.vocab_index = {tok: i for i, tok in enumerate(vocabulary)} if vocabulary is not None else None
        self.seed = seed
        self.store = store or WaveformStore(audio_cfg.sample_rate)
        self.min_ssl_samples = min_ssl_samples
        if ssl_input not in ("utterance", "frames"):
            raise ValueError(f"unknown ssl_input {ssl_input!r}")
        self.ssl_input = ssl_input
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.labels)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __getitem__(self, i: int) -> dict:
        lab = self.labels[i]
        wave = self.store.get(lab.audio_path)
        seed = derive_seed(self.seed, self.epoch, lab.dataset_id, lab.utterance_id)
        frames, images = frame_inputs(wave, self.audio_cfg, seed)
        item = {
            "index": i,
            "images": torch.from_numpy(images),
            "wave": torch.from_numpy(ssl_samples(wave, frames, self.ssl_input, self.min_ssl_samples)),
            "target": float(lab.mos),
        }
        if self.vocab_index is not None:
            item["domain"] = self.vocab_index[lab.dataset_id]
        return item


def collate(items: List[dict]) -> dict:
    lengths = torch.tensor([len(it["wave"]) for it in items], dtype=torch.long)
    wave = torch.zeros(len(items), int(lengths.max()))
    for row, it in enumerate(items):
        wave[row, : len(it["wave"])] = it["wave"]
    batch = {
        "index": torch.tensor([it["index"] for it in items], dtype=torch.long),
        "images": torch.stack([it["images"] for it in items]),
        "wave": wave,
        "lengths": lengths,
        "target": torch.tensor([it["target"] for it in items], dtype=torch.float32),
    }
    if "domain" in items[0]:
        batch["domain"] = torch.tensor([it["domain"] for it in items], dtype=torch.long)
    return batch
