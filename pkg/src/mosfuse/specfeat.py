"""Spectrogram branch: per-window image encoders, learned window mixing, pooling.

Input images are (B, K, N, F, F): K random frames, N STFT window sizes.
Each window size has its own encoder; the N feature maps of a frame are
combined with trainable weights ``w_spec``, frames are concatenated along the
time axis and the result is pooled over time (mean ; max) and then over
frequency (attention ; max). ``h_spec`` therefore has ``4 * c`` entries.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from .audio import MelImage
from .pooling import AttentionPool
from .utils import seeded


class ShapeError(ValueError):
    pass


class TinyImageEncoder(nn.Module):
    """Two-layer CNN for tests and CPU smoke runs; output (c, f, t)."""

    def __init__(
        self,
        window_size: int,
        channels: int = 8,
        out_hw: Sequence[int] = (4, 4),
        in_channels: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        self.window_size = window_size
        self.in_channels = in_channels
        self.out_channels = channels
        with seeded(seed):
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, channels, 3, padding=1),
                nn.GELU(),
                nn.Conv2d(channels, channels, 3, stride=2, padding=1),
                nn.GELU(),
                nn.AdaptiveAvgPool2d(tuple(out_hw)),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EfficientNetEncoder(nn.Module):
    """torchvision EfficientNetV2 feature trunk (classifier removed).

    Weights come from a local state-dict file; 1-channel images are
    replicated to 3 channels.
    """

    in_channels = 3

    def __init__(self, window_size: int, variant: str = "s", checkpoint: Optional[str] = None):
        super().__init__()
        import torchvision

        builder = getattr(torchvision.models, f"efficientnet_v2_{variant}")
        model = builder(weights=None)
        if checkpoint:
            state = torch.load(checkpoint, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        self.features = model.features
        self.window_size = window_size
        self.out_channels = model.classifier[-1].in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def encode_windows(images: Sequence[MelImage], encoders: Sequence[nn.Module]) -> List[torch.Tensor]:
    """Apply encoder n to image n; returns N maps of shape (c, f, t)."""
    if len(images) != len(encoders):
        raise ShapeError(f"{len(images)} images for {len(encoders)} encoders")
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise ShapeError(f"images differ in shape: {shapes}")
    maps = []
    for img, enc in zip(images, encoders):
        if img.window_size != enc.window_size:
            raise ShapeError(f"image window {img.window_size} fed to encoder for {enc.window_size}")
        param = next(enc.parameters())
        x = torch.as_tensor(img.pixels, dtype=param.dtype)[None, None]
        if enc.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        maps.append(enc(x)[0])
    return maps


def aggregate_windows(maps: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    """Elementwise ``sum_n weights[n] * maps[n]``; maps may carry leading batch dims."""
    if len(maps) != len(weights):
        raise ShapeError(f"{len(maps)} maps but {len(weights)} weights")
    if len({tuple(m.shape) for m in maps}) != 1:
        raise ShapeError("feature maps differ in shape")
    out = weights[0] * maps[0]
    for w, m in zip(weights[1:], maps[1:]):
        out = out + w * m
    return out


def concat_and_pool(frame_features: Sequence[torch.Tensor], freq_attention: AttentionPool) -> torch.Tensor:
    """K maps (..., c, f, t) -> h_spec (..., 4c).

    Time: [mean ; max] stacked on the channel axis -> (2c, f).
    Frequency: [attention ; max] -> 4c.
    """
    if len(frame_features) < 1:
        raise ShapeError("need at least one frame")
    if len({tuple(m.shape) for m in frame_features}) != 1:
        raise ShapeError("frame feature maps differ in shape")
    x = torch.cat(list(frame_features), dim=-1)
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    over_time = torch.cat([x.mean(dim=-1), x.amax(dim=-1)], dim=1)  # (B, 2c, f)
    seq = over_time.transpose(1, 2)  # (B, f, 2c)
    h = torch.cat([freq_attention(seq), seq.amax(dim=1)], dim=-1)
    return h[0] if unbatched else h


class SpecFeatureExtractor(nn.Module):
    def __init__(self, encoders: Sequence[nn.Module]):
        super().__init__()
        if not encoders:
            raise ShapeError("need at least one window encoder")
        channels = {enc.out_channels for enc in encoders}
        if len(channels) != 1:
            raise ShapeError(f"encoders disagree on output channels: {channels}")
        self.encoders = nn.ModuleList(encoders)
        self.windows = [enc.window_size for enc in encoders]
        n = len(encoders)
        self.w_spec = nn.Parameter(torch.full((n,), 1.0 / n))
        self.channels = channels.pop()
        self.freq_pool = AttentionPool(2 * self.channels)

    @property
    def out_dim(self) -> int:
        return 4 * self.channels

    def window_maps(self, images: torch.Tensor) -> List[torch.Tensor]:
        """(B, K, N, F, F) -> N tensors of shape (B, K, c, f, t)."""
        B, K, N, F, F2 = images.shape
        if N != len(self.encoders):
            raise ShapeError(f"images carry {N} windows, extractor has {len(self.encoders)}")
        maps = []
        for n, enc in enumerate(self.encoders):
            x = images[:, :, n].reshape(B * K, 1, F, F2)
            if enc.in_channels == 3:
                x = x.expand(-1, 3, -1, -1)
            m = enc(x)
            maps.append(m.reshape(B, K, *m.shape[1:]))
        return maps

    def forward(self, images: torch.Tensor, mix=None) -> torch.Tensor:
        if mix is not None:
            from .objective import mix_with

            images = mix_with(images, *mix)
        agg = aggregate_windows(self.window_maps(images), self.w_spec)  # (B, K, c, f, t)
        frames = [agg[:, k] for k in range(agg.shape[1])]
        return concat_and_pool(frames, self.freq_pool)


def build_spec_extractor(cfg, windows: Sequence[int], seed: int) -> SpecFeatureExtractor:
    """Construct the branch from an encoder config section."""
    if cfg.type == "tiny":
        encoders = [
            TinyImageEncoder(w, channels=cfg.channels, out_hw=cfg.out_hw, seed=seed + i)
            for i, w in enumerate(windows)
        ]
    elif cfg.type.startswith("efficientnet_v2"):
        variant = cfg.type.rsplit("_", 1)[-1]
        ckpts = cfg.checkpoints or [None] * len(windows)
        encoders = [EfficientNetEncoder(w, variant, c) for w, c in zip(windows, ckpts)]
    else:
        raise ValueError(f"unknown spectrogram encoder type {cfg.type!r}")
    with seeded(seed):
        return SpecFeatureExtractor(encoders)
