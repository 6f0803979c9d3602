"""Training objectives: entropy split, group matching loss, RM, self-distillation, CE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component
        self.value = value


REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.07
    t: float = 4.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    rm_reduction: str = "mean"

    def __post_init__(self):
        if self.rm_reduction not in REDUCTIONS:
            raise ValueError(f"rm_reduction must be one of {REDUCTIONS}")
        if self.tau <= 0 or self.t <= 0:
            raise ValueError("temperatures must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def split_by_entropy(entropies: Sequence[float] | torch.Tensor) -> tuple[list[int], list[int]]:
    """Indices of the high-entropy half and the low-entropy half of a batch.

    Sorting is stable on (entropy, index), so among equal entropies the lower
    index counts as lower entropy.  An odd element goes to the low half.
    """
    ents = [float(e) for e in (entropies.tolist() if torch.is_tensor(entropies) else entropies)]
    n = len(ents)
    if n < 2:
        raise ValueError("entropy split needs at least two samples")
    order = sorted(range(n), key=lambda i: (ents[i], i))
    n_plus = n // 2
    minus = sorted(order[: n - n_plus])
    plus = sorted(order[n - n_plus :])
    return plus, minus


def match_loss(
    z1: torch.Tensor,
    y1: torch.Tensor,
    z2: torch.Tensor,
    y2: torch.Tensor,
    tau: float,
    reduction: str = "sum",
) -> torch.Tensor:
    """Pull each anchor of group 1 towards its same-class members in group 2.

    For anchor ``i`` with positives ``P(i)`` (same label, in group 2) the term is
    ``-mean_p log softmax_d(z_i . z_d / tau)[p]`` with the softmax taken over all
    of group 2.  Terms are summed (or averaged, ``reduction="mean"``) over
    anchors; anchors without positives are skipped.  Returns a zero scalar when no anchor has a positive.
    """
    if z1.shape[0] == 0 or z2.shape[0] == 0:
        raise ValueError("match_loss needs non-empty groups")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = z1 @ z2.T / tau
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (y1.view(-1, 1) == y2.view(1, -1)).to(sim.dtype)
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return sim.sum() * 0.0
    per_anchor = -(pos * log_prob).sum(dim=1)[valid] / n_pos[valid]
    if reduction == "mean":
        return per_anchor.mean()
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return per_anchor.sum()


def rm_loss(
    z_plus: torch.Tensor,
    y_plus: torch.Tensor,
    z_minus: torch.Tensor,
    y_minus: torch.Tensor,
    z_new: torch.Tensor,
    y_new: torch.Tensor,
    z_mem: torch.Tensor | None,
    y_mem: torch.Tensor | None,
    tau: float,
    reduction: str = "sum",
) -> torch.Tensor:
    """Symmetric matching between entropy halves of the stream batch and between stream and memory."""
    r = reduction
    loss = match_loss(z_plus, y_plus, z_minus, y_minus, tau, r) + match_loss(z_minus, y_minus, z_plus, y_plus, tau, r)
    if z_mem is not None and z_mem.shape[0] > 0:
        loss = loss + match_loss(z_new, y_new, z_mem, y_mem, tau, r) + match_loss(z_mem, y_mem, z_new, y_new, tau, r)
    return loss


def sdc_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, t: float) -> torch.Tensor:
    """Batch-mean ``KL(softmax(student/t) || softmax(teacher/t))``.

    The teacher is detached, so gradients reach the student only.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_p = F.log_softmax(student_logits / t, dim=1)
    log_q = F.log_softmax(teacher_logits.detach() / t, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def ce_pair(logits: torch.Tensor, logits_aug: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy on clean logits plus mean cross-entropy on augmented logits."""
    if logits.shape != logits_aug.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(logits_aug.shape)}")
    n_cls = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    return F.cross_entropy(logits, labels) + F.cross_entropy(logits_aug, labels)


def total_loss(ce, sdc, rm, w: LossWeights):
    """``ce + lambda1 * sdc + lambda2 * rm``; raises on any non-finite component."""
    for name, value in (("ce", ce), ("sdc", sdc), ("rm", rm)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return ce + w.lambda1 * sdc + w.lambda2 * rm
