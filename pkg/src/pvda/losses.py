"""Location, view and adversarial cross-entropies, summed over the batch.

All three take probabilities (not logits) and clamp them at ``EPS`` before
the log, so a confidently wrong prediction costs at most ``-log(EPS)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ConfigError

EPS = 1e-12


def _nll(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(p.clamp_min(EPS))


def location_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """probs (B, parts, C), labels (B,) -> sum over samples and parts of -log p(label)."""
    idx = labels.long().view(-1, 1, 1).expand(-1, probs.shape[1], 1)
    return _nll(probs.gather(2, idx)).sum()


def view_loss(q: torch.Tensor, views: torch.Tensor) -> torch.Tensor:
    """q (B, 2) ordered [UAV, SATELLITE]; views (B,) with 0 = UAV, 1 = SATELLITE."""
    return _nll(q.gather(1, views.long().view(-1, 1))).sum()


def adversarial_loss(q: torch.Tensor, views: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the opposite view labels."""
    return view_loss(q, 1 - views.long())


def combined_loss(loc: torch.Tensor | float, adv: torch.Tensor | float, alpha: float):
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    return loc + alpha * adv


@dataclass
class LossReport:
    """Batch-summed losses; ``*_mean`` divides by the batch size."""

    location_loss: float
    view_loss: float
    adversarial_loss: float
    combined: float
    alpha: float
    batch_size: int

    @property
    def location_mean(self) -> float:
        return self.location_loss / self.batch_size

    @property
    def view_mean(self) -> float:
        return self.view_loss / self.batch_size

    @property
    def adversarial_mean(self) -> float:
        return self.adversarial_loss / self.batch_size

    @property
    def combined_mean(self) -> float:
        return self.combined / self.batch_size
