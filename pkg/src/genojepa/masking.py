"""Contiguous-span target sampling, token masking, and hidden-state re-masking.

Spans are sampled over maskable (non-special) positions only: 1-3 spans per
sample whose aggregate size targets a uniform draw from [ratio_min,
ratio_max] of the maskable length. The same plan drives both the
masked-token recovery loss and the latent-prediction target, and marks which
hidden rows are replaced by the learned mask embedding before prediction.

All sampling is a pure function of the passed generator, so per-sample
streams split from one master seed give reproducible parallel masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


class EmptySequenceError(ValueError):
    """No maskable positions in the sequence."""


class DimensionMismatchError(ValueError):
    """Hidden-state shape inconsistent with the plan or mask embedding."""


@dataclass(frozen=True)
class MaskConfig:
    num_spans_min: int = 1
    num_spans_max: int = 3
    ratio_min: float = 0.20
    ratio_max: float = 0.40


@dataclass(frozen=True)
class MaskPlan:
    """Sampled target spans over one tokenized sample.

    ``spans`` are disjoint half-open (start, end) intervals in token
    coordinates; ``masked`` is the sorted union. ``n_tokens`` is the length
    of the token sequence the plan was drawn for.
    """

    n_tokens: int
    spans: tuple[tuple[int, int], ...]
    masked: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        ordered = sorted(self.spans)
        prev_end = -1
        idx: list[int] = []
        for s, e in ordered:
            if s >= e or s < 0 or e > self.n_tokens:
                raise ValueError(f"invalid span ({s}, {e}) for {self.n_tokens} tokens")
            if s < prev_end:
                raise ValueError("spans overlap")
            prev_end = e
            idx.extend(range(s, e))
        if not idx:
            raise ValueError("mask plan must cover at least one token")
        object.__setattr__(self, "masked", tuple(idx))


def sample_spans(
    n_tokens: int,
    n_special: int,
    rng: np.random.Generator,
    cfg: MaskConfig = MaskConfig(),
    first_maskable: int = 0,
) -> MaskPlan:
    """Draw a span plan over the ``n_tokens - n_special`` maskable positions.

    Maskable positions occupy ``[first_maskable, first_maskable + L)`` where
    L is the maskable count (pass 1 to skip a leading [CLS], 0 when the
    special token trails). Draws a span count, an aggregate ratio, splits the
    resulting budget into that many positive parts by uniform composition,
    and places the parts at uniform non-overlapping starts by rejection
    (sequential packing after 100 failed attempts). The realized budget is
    clamped so the token ratio stays within [ratio_min, ratio_max] whenever
    the sequence is long enough; at least one token is always masked.

    Raises:
        EmptySequenceError: no maskable positions.
    """
    length = n_tokens - n_special
    if length < 1:
        raise EmptySequenceError(f"{n_tokens} tokens, {n_special} special: nothing to mask")

    k = int(rng.integers(cfg.num_spans_min, cfg.num_spans_max + 1))
    ratio = float(rng.uniform(cfg.ratio_min, cfg.ratio_max))
    lo = max(1, math.ceil(cfg.ratio_min * length))
    hi = max(lo, math.floor(cfg.ratio_max * length))
    budget = min(max(math.ceil(ratio * length), lo), hi)
    k = min(k, budget)

    if k == 1:
        parts = [budget]
    else:
        cuts = np.sort(rng.choice(budget - 1, size=k - 1, replace=False)) + 1
        bounds = [0, *cuts.tolist(), budget]
        parts = [bounds[i + 1] - bounds[i] for i in range(k)]

    starts: list[int] | None = None
    for _ in range(100):
        cand = [int(rng.integers(0, length - ln + 1)) for ln in parts]
        placed = sorted(zip(cand, parts))
        if all(placed[i][0] + placed[i][1] <= placed[i + 1][0] for i in range(k - 1)):
            starts = cand
            break
    if starts is None:
        # Sequential packing always fits: sum(parts) <= length.
        acc = 0
        starts = []
        for ln in parts:
            starts.append(acc)
            acc += ln
    spans = tuple(
        sorted((first_maskable + s, first_maskable + s + ln) for s, ln in zip(starts, parts))
    )
    return MaskPlan(n_tokens=n_tokens, spans=spans)


def apply_token_mask(
    ids: list[int], plan: MaskPlan, mask_id: int
) -> tuple[list[int], dict[int, int]]:
    """Replace planned positions with the mask id; return originals by index.

    Always pure replacement. No BERT-style random-token or keep-original
    corruption: the target encoder consumes the clean sequence, so the
    masked view carries only genuine [MASK] tokens.
    """
    masked = list(ids)
    targets: dict[int, int] = {}
    for i in plan.masked:
        if i >= len(ids):
            raise IndexError(f"mask index {i} out of range for {len(ids)} ids")
        targets[i] = ids[i]
        masked[i] = mask_id
    return masked, targets


def remask_hidden(
    hidden: torch.Tensor, plan: MaskPlan, mask_embedding: torch.Tensor
) -> torch.Tensor:
    """Replace hidden rows at planned positions with the mask embedding.

    Input is not mutated. ``hidden`` is (L, d); the plan must have been
    drawn for exactly L tokens.

    Raises:
        DimensionMismatchError: row count or embedding width mismatch.
    """
    if hidden.ndim != 2:
        raise DimensionMismatchError(f"hidden must be 2-D, got shape {tuple(hidden.shape)}")
    if hidden.shape[0] != plan.n_tokens:
        raise DimensionMismatchError(
            f"hidden has {hidden.shape[0]} rows but plan covers {plan.n_tokens} tokens"
        )
    if mask_embedding.shape != (hidden.shape[1],):
        raise DimensionMismatchError(
            f"mask embedding shape {tuple(mask_embedding.shape)} != ({hidden.shape[1]},)"
        )
    out = hidden.clone()
    out[list(plan.masked)] = mask_embedding.to(hidden.dtype)
    return out


def plans_to_bool(plans: list[MaskPlan], n_tokens: int) -> torch.Tensor:
    """Stack plans into a (B, n_tokens) boolean mask matrix."""
    out = torch.zeros(len(plans), n_tokens, dtype=torch.bool)
    for b, plan in enumerate(plans):
        if plan.n_tokens != n_tokens:
            raise DimensionMismatchError(
                f"plan covers {plan.n_tokens} tokens, batch has {n_tokens}"
            )
        out[b, list(plan.masked)] = True
    return out
