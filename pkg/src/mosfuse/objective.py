"""Training objective: pairwise-difference hinge loss + MSE, and mixup."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

Tensorish = Union[torch.Tensor, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    lambda_con: float = 0.2
    lambda_mse: float = 0.7
    mixup_alpha: float = 0.4
    ordered_pairs: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"margin alpha must be > 0, got {self.alpha}")
        if self.lambda_con < 0 or self.lambda_mse < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(targets: Tensorish, preds: Tensorish) -> Tuple[torch.Tensor, torch.Tensor]:
    # Lists and arrays are promoted to float64; tensors keep their dtype.
    s = targets if isinstance(targets, torch.Tensor) else torch.as_tensor(targets, dtype=torch.float64)
    p = preds if isinstance(preds, torch.Tensor) else torch.as_tensor(preds, dtype=torch.float64)
    if not s.is_floating_point():
        s = s.double()
    p = p.to(s.dtype) if p.is_floating_point() else p.double()
    if s.dtype != p.dtype:
        s = s.to(p.dtype)
    s, p = s.reshape(-1), p.reshape(-1)
    if s.shape != p.shape:
        raise ValueError(f"length mismatch: {s.numel()} targets vs {p.numel()} predictions")
    if s.numel() < 1:
        raise ValueError("empty batch")
    return s, p


def contrastive_loss(targets: Tensorish, preds: Tensorish, alpha: float = 0.2, ordered: bool = True) -> torch.Tensor:
    """``sum_{i != j} max(0, |(s_i - s_j) - (p_i - p_j)| - alpha)``.

    With ``ordered=False`` each unordered pair is counted once (half the value).
    At the hinge kink the gradient is zero (``relu`` convention).
    """
    s, p = _pair(targets, preds)
    ds = s[:, None] - s[None, :]
    dp = p[:, None] - p[None, :]
    hinge = torch.relu((ds - dp).abs() - alpha)
    total = hinge.sum()  # diagonal is relu(-alpha) == 0
    return total if ordered else total / 2


def mse_loss(targets: Tensorish, preds: Tensorish) -> torch.Tensor:
    s, p = _pair(targets, preds)
    return ((s - p) ** 2).mean()


def combined_loss(targets: Tensorish, preds: Tensorish, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    con = contrastive_loss(targets, preds, cfg.alpha, cfg.ordered_pairs)
    return cfg.lambda_con * con + cfg.lambda_mse * mse_loss(targets, preds)


def draw_mixup(
    batch_size: int,
    mixup_alpha: float,
    rng: Optional[np.random.Generator] = None,
    lam: Optional[float] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pairing permutation and one lambda per example.

    ``mixup_alpha == 0`` disables mixing (lambda = 1). A fixed ``lam``
    overrides the Beta draw.
    """
    if batch_size < 2:
        raise ValueError("mixup needs a batch of at least 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = torch.from_numpy(rng.permutation(batch_size))
    if lam is not None:
        lams = np.full(batch_size, float(lam))
    elif mixup_alpha == 0:
        lams = np.ones(batch_size)
    else:
        lams = rng.beta(mixup_alpha, mixup_alpha, size=batch_size)
    return perm, torch.from_numpy(lams)


def mix_with(x: torch.Tensor, perm: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """``lam * x + (1 - lam) * x[perm]`` with lam broadcast over trailing dims."""
    lam = lam.to(x.dtype).reshape(-1, *([1] * (x.dim() - 1)))
    return lam * x + (1 - lam) * x[perm]


def mixup(
    batch_inputs: Union[torch.Tensor, Sequence[torch.Tensor]],
    batch_targets: Tensorish,
    mixup_alpha: float,
    seed: Optional[int] = None,
    lam: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Mix a batch with a seeded permutation of itself.

    Returns ``(mixed_inputs, mixed_targets, perm, lams)``; ``batch_inputs``
    may be one tensor or a sequence of tensors sharing the batch axis.
    """
    if rng is None:
        rng = np.random.default_rng(0 if seed is None else int(seed))
    targets = batch_targets if isinstance(batch_targets, torch.Tensor) else torch.as_tensor(batch_targets, dtype=torch.float64)
    if not targets.is_floating_point():
        targets = targets.double()
    perm, lams = draw_mixup(targets.shape[0], mixup_alpha, rng, lam)
    if isinstance(batch_inputs, torch.Tensor):
        mixed = mix_with(batch_inputs, perm, lams)
    else:
        mixed = [mix_with(x, perm, lams) for x in batch_inputs]
    return mixed, mix_with(targets, perm, lams), perm, lams
