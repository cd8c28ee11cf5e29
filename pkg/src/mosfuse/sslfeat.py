"""SSL branch: per-layer hidden states, learned layer mixing, attention+max pooling."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .audio import Waveform, tile_to_length
from .pooling import AttentionPool, lengths_to_mask, masked_max
from .specfeat import ShapeError
from .utils import seeded


class RateMismatchError(ValueError):
    pass


class _TinyBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mix = nn.Conv1d(dim, dim, 3, padding=1, groups=dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x + self.mix(x.transpose(1, 2)).transpose(1, 2)
        return x + self.ff(y)


class TinySequenceEncoder(nn.Module):
    """Strided conv front end + ``n_layers`` residual blocks; returns every block output."""

    def __init__(
        self,
        n_layers: int = 3,
        dim: int = 8,
        hop: int = 160,
        kernel: int = 400,
        sample_rate: int = 16_000,
        seed: int = 0,
    ):
        super().__init__()
        self.sample_rate = sample_rate
        self.n_layers = n_layers
        self.dim = dim
        self.hop = hop
        self.kernel = kernel
        self.min_samples = kernel
        with seeded(seed):
            self.frontend = nn.Sequential(nn.Conv1d(1, dim, kernel, stride=hop), nn.GELU())
            self.blocks = nn.ModuleList(_TinyBlock(dim) for _ in range(n_layers))

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return torch.div(lengths - self.kernel, self.hop, rounding_mode="floor") + 1

    def forward(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> Tuple[List[torch.Tensor], torch.Tensor]:
        x = self.frontend(wave.unsqueeze(1)).transpose(1, 2)  # (B, T, d)
        if lengths is None:
            out_lengths = torch.full((wave.shape[0],), x.shape[1], dtype=torch.long)
        else:
            out_lengths = self.output_lengths(lengths).clamp(min=1, max=x.shape[1])
        # Zero padded steps so the conv neighbourhood matches an unpadded run.
        keep = lengths_to_mask(out_lengths, x.shape[1]).unsqueeze(-1).to(x.dtype)
        states = []
        for block in self.blocks:
            x = block(x * keep)
            states.append(x)
        return states, out_lengths


class Wav2Vec2Encoder(nn.Module):
    """HuggingFace wav2vec 2.0 exposing only the Transformer block outputs.

    ``source`` is a local model directory (``from_pretrained``) or a
    ``Wav2Vec2Config`` for randomly initialized structural use.
    """

    sample_rate = 16_000
    min_samples = 400

    def __init__(self, source):
        super().__init__()
        from transformers import Wav2Vec2Config, Wav2Vec2Model

        if isinstance(source, Wav2Vec2Config):
            self.model = Wav2Vec2Model(source)
        else:
            self.model = Wav2Vec2Model.from_pretrained(source)
        self.n_layers = self.model.config.num_hidden_layers
        self.dim = self.model.config.hidden_size

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return self.model._get_feat_extract_output_lengths(lengths).long()

    def forward(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        mask = None
        if lengths is not None:
            mask = lengths_to_mask(lengths, wave.shape[1]).long()
        out = self.model(wave, attention_mask=mask, output_hidden_states=True)
        states = list(out.hidden_states[1:])
        T = states[0].shape[1]
        if lengths is None:
            out_lengths = torch.full((wave.shape[0],), T, dtype=torch.long)
        else:
            out_lengths = self.output_lengths(lengths).clamp(min=1, max=T)
        return states, out_lengths


def prepare_waveform(w: Waveform, enc: nn.Module) -> np.ndarray:
    """Check the rate and tile to the encoder's minimum input length."""
    if w.sample_rate != enc.sample_rate:
        raise RateMismatchError(f"waveform at {w.sample_rate} Hz, encoder expects {enc.sample_rate} Hz")
    return tile_to_length(w.samples, enc.min_samples)


def encode_layers(w: Waveform, enc: nn.Module) -> List[torch.Tensor]:
    """M hidden-state sequences (T, d) for one waveform."""
    samples = prepare_waveform(w, enc)
    param = next(enc.parameters())
    x = torch.as_tensor(samples, dtype=param.dtype)[None]
    states, _ = enc(x)
    return [s[0] for s in states]


def aggregate_layers(states: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    if len(states) != len(weights):
        raise ShapeError(f"{len(states)} layers but {len(weights)} weights")
    if len({tuple(s.shape) for s in states}) != 1:
        raise ShapeError("layer outputs differ in shape")
    stacked = torch.stack(list(states), dim=0)
    return torch.tensordot(weights.to(stacked.dtype), stacked, dims=1)


def pool_sequence(seq: torch.Tensor, attention: AttentionPool, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(T, d) or (B, T, d) -> [attention ; max] of size 2d."""
    unbatched = seq.dim() == 2
    if unbatched:
        seq = seq.unsqueeze(0)
    h = torch.cat([attention(seq, mask), masked_max(seq, mask)], dim=-1)
    return h[0] if unbatched else h


class SSLFeatureExtractor(nn.Module):
    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder
        m = encoder.n_layers
        self.w_ssl = nn.Parameter(torch.full((m,), 1.0 / m))
        self.attn_pool = AttentionPool(encoder.dim)

    @property
    def out_dim(self) -> int:
        return 2 * self.encoder.dim

    def aggregated(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        states, out_lengths = self.encoder(wave, lengths)
        seq = aggregate_layers(states, self.w_ssl)
        return seq, lengths_to_mask(out_lengths, seq.shape[1])

    def forward(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None, mix=None) -> torch.Tensor:
        seq, mask = self.aggregated(wave, lengths)
        if mix is not None:
            from .objective import mix_with

            perm, lam = mix
            seq = mix_with(seq, perm, lam)
            # Mixed pair keeps only steps valid in both sequences.
            mask = mask & mask[perm]
        return pool_sequence(seq, self.attn_pool, mask)


def build_ssl_extractor(cfg, seed: int) -> SSLFeatureExtractor:
    if cfg.type == "tiny":
        enc = TinySequenceEncoder(cfg.layers, cfg.dim, cfg.hop, cfg.kernel, seed=seed)
    elif cfg.type == "wav2vec2":
        if cfg.checkpoint:
            enc = Wav2Vec2Encoder(cfg.checkpoint)
        else:
            from transformers import Wav2Vec2Config

            enc = Wav2Vec2Encoder(Wav2Vec2Config())
    else:
        raise ValueError(f"unknown SSL encoder type {cfg.type!r}")
    with seeded(seed):
        return SSLFeatureExtractor(enc)
