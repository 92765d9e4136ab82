"""Frozen-encoder evaluation: embeddings, linear probing, zero-shot scoring.

Embeddings come from the frozen context encoder in eval mode (central
truncation for over-long inputs, aggregate row as the feature). Probing
trains only a linear head; variant tasks concatenate reference and variant
embeddings in that fixed order. Zero-shot scores are embedding cosine
distances (1 - cos), so higher means more disruptive; because the natural
polarity of distance-vs-pathogenicity is not knowable a priori, reports
carry both the raw AUROC and the best-orientation AUROC with a flag.

AUROC uses the Mann-Whitney midrank formulation in exact rational
arithmetic; AUPRC is step-wise average precision with stable tie order; MCC
returns 0 whenever a confusion-matrix margin is empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import tokenizer as tok
from .losses import ZeroVectorError
from .model import JepaModel, aggregate


class OneClassOnlyError(ValueError):
    """AUROC needs at least one positive and one negative."""


class NoPositivesError(ValueError):
    """Average precision needs at least one positive."""


class DegenerateLabelsError(ValueError):
    """Probe training needs at least two classes."""


@dataclass(frozen=True)
class LabeledPair:
    """A task row: a reference sequence, an optional variant, and a label."""

    ref_seq: str
    alt_seq: str | None
    label: int


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    auprc: float
    mcc: float | None
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "mcc": self.mcc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


# -- embeddings ------------------------------------------------------------


def extract_embeddings(
    model: JepaModel,
    seqs: Sequence[str],
    tokenizer_model: tok.TokenizerModel,
    batch_size: int = 64,
) -> torch.Tensor:
    """Aggregate vectors of the frozen context encoder, (N, d_model).

    Over-long inputs keep their central token window.
    """
    cfg = model.cfg
    samples = [
        tok.encode(tokenizer_model, s, cfg.objective, cfg.max_tokens).ids for s in seqs
    ]
    out = torch.empty(len(samples), cfg.d_model)
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = samples[lo : lo + batch_size]
            lengths = torch.tensor([len(s) for s in batch], dtype=torch.long)
            L = int(lengths.max())
            ids = torch.full((len(batch), L), tok.PAD_ID, dtype=torch.long)
            for i, s in enumerate(batch):
                ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            valid = torch.arange(L).unsqueeze(0) < lengths.unsqueeze(1)
            hidden = model.context(ids, valid, model.causal, train_mode=False)
            out[lo : lo + len(batch)] = aggregate(hidden, cfg.objective, lengths)
    return out


def extract_embedding(
    model: JepaModel, seq: str, tokenizer_model: tok.TokenizerModel
) -> torch.Tensor:
    return extract_embeddings(model, [seq], tokenizer_model)[0]


def zero_shot_score(
    model: JepaModel, ref_seq: str, alt_seq: str, tokenizer_model: tok.TokenizerModel
) -> float:
    """1 - cos(embed(ref), embed(alt)); identical sequences score exactly 0."""
    emb = extract_embeddings(model, [ref_seq, alt_seq], tokenizer_model)
    return embedding_distance(emb[0], emb[1])


def embedding_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    if torch.equal(a, b):
        return 0.0
    na, nb = float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("zero-norm embedding")
    return 1.0 - float(torch.dot(a, b)) / (na * nb)


# -- linear probing ----------------------------------------------------------


@dataclass
class ProbeConfig:
    """Unified probing protocol: AdamW, lr 3e-5, weight decay 0.01,
    batch 32, 3 epochs, seed-deterministic shuffling."""

    lr: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0


def train_linear_probe(
    embeddings: torch.Tensor, labels: Sequence[int], cfg: ProbeConfig = ProbeConfig()
) -> nn.Linear:
    """Softmax-cross-entropy linear head on frozen features.

    Weights and bias start at zero, so runs are deterministic per seed.

    Raises:
        DegenerateLabelsError: fewer than two classes present.
    """
    y = torch.tensor(list(labels), dtype=torch.long)
    classes = int(y.max()) + 1 if len(y) else 0
    if len(torch.unique(y)) < 2:
        raise DegenerateLabelsError("probe training needs at least two classes")
    x = embeddings.detach().float()
    head = nn.Linear(x.shape[1], classes)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])
        ).permutation(len(y))
        for lo in range(0, len(y), cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + cfg.batch_size].copy())
            opt.zero_grad()
            loss = loss_fn(head(x[idx]), y[idx])
            loss.backward()
            opt.step()
    return head


def probe_scores(head: nn.Linear, embeddings: torch.Tensor) -> np.ndarray:
    """Positive-class (class 1) probability per row."""
    with torch.no_grad():
        probs = torch.softmax(head(embeddings.float()), dim=-1)
    return probs[:, 1].numpy()


def probe_labels(head: nn.Linear, embeddings: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return head(embeddings.float()).argmax(dim=-1).numpy()


def variant_features(ref_emb: torch.Tensor, alt_emb: torch.Tensor) -> torch.Tensor:
    """Fixed concatenation order for variant tasks: reference then variant."""
    return torch.cat([ref_emb, alt_emb], dim=-1)


# -- metrics -----------------------------------------------------------------


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outranks a random negative, ties 1/2.

    Mann-Whitney midranks in exact rational arithmetic, converted to float
    at the end, so results match pair-counting oracles exactly.

    Raises:
        OneClassOnlyError: positives or negatives missing.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnlyError(f"need both classes, got {n_pos} pos / {n_neg} neg")

    order = sorted(range(len(scores)), key=lambda i: scores[i])
    rank_sum = Fraction(0)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = Fraction((i + 1) + (j + 1), 2)
        for k in range(i, j + 1):
            if labels[order[k]] == 1:
                rank_sum += midrank
        i = j + 1
    u = rank_sum - Fraction(n_pos * (n_pos + 1), 2)
    return float(u / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise average precision over positives in descending-score order.

    Ties keep their input order (stable sort), which is the documented
    convention for this implementation.

    Raises:
        NoPositivesError: no positive labels.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    n_pos = sum(1 for y in labels if y == 1)
    if n_pos == 0:
        raise NoPositivesError("average precision undefined without positives")
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    ap = Fraction(0)
    seen_pos = 0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            seen_pos += 1
            ap += Fraction(seen_pos, rank)
    return float(ap / n_pos)


def mcc(pred_labels: Sequence[int], true_labels: Sequence[int]) -> float:
    """Matthews correlation; 0.0 whenever a margin of the confusion matrix
    is empty (constant predictors included)."""
    if len(pred_labels) != len(true_labels):
        raise ValueError("prediction and label lengths differ")
    tp = fp = fn = tn = 0
    for p, t in zip(pred_labels, true_labels):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
        else:
            tn += 1
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / float(np.sqrt(denom))


def metric_report(
    scores: Sequence[float],
    labels: Sequence[int],
    pred_labels: Sequence[int] | None = None,
) -> MetricReport:
    """AUROC/AUPRC from scores; MCC from thresholded predictions if given."""
    n_pos = sum(1 for y in labels if y == 1)
    return MetricReport(
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        mcc=mcc(pred_labels, labels) if pred_labels is not None else None,
        n_pos=n_pos,
        n_neg=len(labels) - n_pos,
    )


# -- task files ---------------------------------------------------------------


def read_task_tsv(handle: Iterable[str]) -> list[LabeledPair]:
    """Parse task rows: ``ref_seq<TAB>label`` or ``ref_seq<TAB>alt_seq<TAB>label``."""
    rows: list[LabeledPair] = []
    for lineno, line in enumerate(handle, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) == 2:
            rows.append(LabeledPair(ref_seq=fields[0], alt_seq=None, label=int(fields[1])))
        elif len(fields) == 3:
            rows.append(LabeledPair(ref_seq=fields[0], alt_seq=fields[1], label=int(fields[2])))
        else:
            raise ValueError(f"task line {lineno}: expected 2 or 3 fields, got {len(fields)}")
    return rows


def write_scores_tsv(scores: Sequence[float], handle: IO[str]) -> None:
    for i, s in enumerate(scores):
        handle.write(f"{i}\t{s!r}\n")
