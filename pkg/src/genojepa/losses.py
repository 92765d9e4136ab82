"""The four objective terms and their weighted composition.

Token-recovery loss uses the mean (not sum) over masked positions so the
gradient scale does not ride on the sampled mask size, which varies between
20% and 40% of the sequence; this is a documented deviation from a plain
per-position sum. Variance uses the unbiased (B-1) standard deviation with a
1e-4 stabilizer inside the square root so its gradient stays finite at full
collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

VAR_STABILIZER = 1e-4


class EmptyMaskError(ValueError):
    """Token-recovery loss called with no masked positions."""


class SequenceTooShortError(ValueError):
    """Next-token loss needs at least two real tokens."""


class ZeroVectorError(ValueError):
    """Cosine alignment undefined for a zero-norm vector."""


class BatchTooSmallError(ValueError):
    """Variance/covariance need at least two rows."""


@dataclass(frozen=True)
class LossWeights:
    lambda_llm: float = 1.0
    lambda_jepa: float = 1.0
    lambda_var: float = 25.0
    lambda_cov: float = 0.5
    gamma: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_llm", "lambda_jepa", "lambda_var", "lambda_cov"):
            if getattr(self, name) < 0:
                raise ValueError(f"weights.{name} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted per-term values plus the weighted total (python floats)."""

    llm: float
    jepa: float
    var: float
    cov: float
    total: float


def mlm_loss(logits: torch.Tensor, targets: dict[int, int]) -> torch.Tensor:
    """Mean cross-entropy over the masked positions of one sample.

    ``logits`` is (L, V); ``targets`` maps masked index -> original id.
    """
    if not targets:
        raise EmptyMaskError("no masked positions")
    idx = torch.tensor(sorted(targets), dtype=torch.long, device=logits.device)
    true = torch.tensor([targets[int(i)] for i in idx], dtype=torch.long, device=logits.device)
    logp = F.log_softmax(logits[idx], dim=-1)
    return -logp[torch.arange(len(idx), device=logits.device), true].mean()


def batch_mlm_loss(
    logits: torch.Tensor, target_ids: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over every masked position in the batch.

    ``logits`` (B, L, V), ``target_ids`` (B, L) original ids, ``mask``
    (B, L) boolean.
    """
    if not bool(mask.any()):
        raise EmptyMaskError("no masked positions in batch")
    logp = F.log_softmax(logits[mask], dim=-1)
    true = target_ids[mask]
    return -logp[torch.arange(true.shape[0], device=logits.device), true].mean()


def ntp_loss(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Mean shift-by-one cross-entropy for one unpadded sample.

    Position t's logits predict token t+1; the final slot has no target.
    """
    if ids.shape[0] < 2:
        raise SequenceTooShortError("need at least 2 tokens for next-token loss")
    logp = F.log_softmax(logits[:-1], dim=-1)
    true = ids[1:]
    return -logp[torch.arange(true.shape[0], device=logits.device), true].mean()


def batch_ntp_loss(
    logits: torch.Tensor, ids: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Batched next-token loss, mean over real (non-pad) targets."""
    target_mask = valid[:, 1:]
    if not bool(target_mask.any()):
        raise SequenceTooShortError("no next-token targets in batch")
    logp = F.log_softmax(logits[:, :-1][target_mask], dim=-1)
    true = ids[:, 1:][target_mask]
    return -logp[torch.arange(true.shape[0], device=logits.device), true].mean()


def jepa_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - cosine(pred, target), in [0, 2].

    Accepts single vectors (d,) or batches (B, d); batches return the mean.
    """
    single = pred.ndim == 1
    p = pred.unsqueeze(0) if single else pred
    t = target.unsqueeze(0) if single else target
    pn = torch.linalg.vector_norm(p, dim=-1)
    tn = torch.linalg.vector_norm(t, dim=-1)
    if bool((pn == 0).any()) or bool((tn == 0).any()):
        raise ZeroVectorError("cosine alignment undefined for zero vectors")
    cos = (p * t).sum(dim=-1) / (pn * tn)
    return (1.0 - cos).mean()


def variance_loss(z: torch.Tensor, gamma: float = 1.0) -> torch.Tensor:
    """Hinge pushing every per-dimension batch std above gamma.

    std is unbiased ((B-1) denominator) with a 1e-4 stabilizer inside the
    square root.
    """
    if z.ndim != 2 or z.shape[0] < 2:
        raise BatchTooSmallError(f"need a (B>=2, d) matrix, got {tuple(z.shape)}")
    var = z.var(dim=0, unbiased=True)
    std = torch.sqrt(var + VAR_STABILIZER)
    return F.relu(gamma - std).mean()


def covariance_loss(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal covariance entries, scaled by 1/d.

    C = (Z - mean)^T (Z - mean) / (B - 1); loss = sum_{i != j} C_ij^2 / d.
    Zero for d = 1.
    """
    if z.ndim != 2 or z.shape[0] < 2:
        raise BatchTooSmallError(f"need a (B>=2, d) matrix, got {tuple(z.shape)}")
    B, d = z.shape
    zc = z - z.mean(dim=0, keepdim=True)
    cov = (zc.T @ zc) / (B - 1)
    off = 1.0 - torch.eye(d, dtype=z.dtype, device=z.device)
    # Masking (rather than subtracting the diagonal) avoids cancellation
    # when the off-diagonal mass is small.
    return (cov.pow(2) * off).sum() / d


def total_loss(
    llm: torch.Tensor | float,
    jepa: torch.Tensor | float,
    var: torch.Tensor | float,
    cov: torch.Tensor | float,
    w: LossWeights,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted composition; returns the differentiable total plus a float
    breakdown whose ``total`` is recomposed exactly in float64."""
    terms = [llm, jepa, var, cov]
    lams = [w.lambda_llm, w.lambda_jepa, w.lambda_var, w.lambda_cov]
    total = sum(lam * t for lam, t in zip(lams, terms))
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total))
    vals = [float(t.item()) if isinstance(t, torch.Tensor) else float(t) for t in terms]
    exact_total = sum(lam * v for lam, v in zip(lams, vals))
    return total, LossBreakdown(llm=vals[0], jepa=vals[1], var=vals[2], cov=vals[3], total=exact_total)
