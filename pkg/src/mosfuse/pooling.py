from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn


class AttentionPool(nn.Module):
    """Softmax pooling with one learned query vector.

    ``x`` is (B, T, D); scores are ``x @ q / sqrt(D)`` over T. Positions where
    ``mask`` is False get zero weight.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.query = nn.Parameter(torch.randn(dim) / math.sqrt(dim))

    def weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        scores = x @ self.query / math.sqrt(self.dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        return torch.softmax(scores, dim=1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return torch.einsum("bt,btd->bd", self.weights(x, mask), x)


def masked_max(x: torch.Tensor, mask: Optional[torch.Tensor] = None, dim: int = 1) -> torch.Tensor:
    """Max over ``dim`` of (B, T, D) input, ignoring masked-out steps."""
    if mask is not None:
        x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    return x.max(dim=dim).values


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]
