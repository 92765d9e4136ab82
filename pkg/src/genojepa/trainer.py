"""Two-phase pre-training: predictor warmup, then joint training.

Phase 1 freezes the encoder and the token-recovery head for
``phase1_steps`` optimizer steps (their gradients are discarded, so they
stay bit-identical); only the predictor moves, at a fixed learning rate.
Phase 2 unfreezes everything under a linear-warmup + cosine-decay schedule.
The optimizer is SGD with momentum and decoupled weight decay; the EMA
momentum of the target encoder anneals linearly over the run.

Every source of randomness is a named stream derived from the master seed
(init, shuffle, masking, dropout), which makes runs resumable bit-for-bit:
shuffling and masking are pure functions of (seed, epoch, index) and the
dropout generator state rides along in the checkpoint.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import tokenizer as tok
from .losses import (
    LossBreakdown,
    LossWeights,
    batch_mlm_loss,
    batch_ntp_loss,
    jepa_loss,
    covariance_loss,
    total_loss,
    variance_loss,
)
from .masking import MaskConfig, MaskPlan, plans_to_bool, sample_spans
from .model import JepaModel, aggregate, clone_for_gradcheck, ema_update, load_checkpoint, save_checkpoint

METRICS_COLUMNS = ("step", "llm", "jepa", "var", "cov", "total", "lr", "ema_m")

_STREAM_IDS = {"init": 11, "shuffle": 23, "mask": 37, "dropout": 53}


class ResumeMismatchError(ValueError):
    """Checkpoint configuration conflicts with the requested run."""


class NonFiniteLossError(RuntimeError):
    """Total loss became NaN/inf; training must abort."""


def derive_seed(seed: int, stream: str, *extra: int) -> int:
    """Stable per-stream integer seed split from the master seed."""
    ss = np.random.SeedSequence([seed, _STREAM_IDS[stream], *extra])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def mask_rng(seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Per-sample masking stream: a pure function of (seed, epoch, index)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_IDS["mask"], epoch, sample_index])
    )


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_IDS["shuffle"], epoch])
    ).permutation(n)


def enable_determinism() -> None:
    """Fixed reduction order: single-threaded, deterministic kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainConfig:
    """Schedule and optimizer settings (defaults mirror the two-phase recipe:
    1000 frozen-encoder steps at 1e-5, 500-step warmup 3e-6 -> 5e-6, cosine
    decay to 1e-6, SGD momentum 0.9, effective batch 32 x 4, 5 epochs, EMA
    momentum 0.996 -> 1.0)."""

    phase1_steps: int = 1000
    phase1_lr: float = 1e-5
    warmup_steps: int = 500
    lr_start: float = 3e-6
    lr_peak: float = 5e-6
    lr_end: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 32
    accum_steps: int = 4
    epochs: int = 5
    ema_start: float = 0.996
    ema_end: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0
    deterministic: bool = False
    mask: MaskConfig = field(default_factory=MaskConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        for name in ("batch_size", "accum_steps", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1")
        for name in ("phase1_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("train.momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be >= 0")
        if not 0.0 <= self.ema_start <= 1.0 or not 0.0 <= self.ema_end <= 1.0:
            raise ValueError("train.ema_start/ema_end must be in [0, 1]")
        if self.seed < 0:
            raise ValueError("train.seed must be >= 0")


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate at optimizer step ``step`` (0-based).

    Phase 1 returns the fixed predictor warmup rate (the encoder is frozen
    there, i.e. its effective rate is zero). Phase 2 interpolates linearly
    from lr_start to lr_peak over the warmup, then follows a cosine from
    lr_peak down to lr_end at the final step. Both interpolations hit their
    endpoints exactly.
    """
    if step < cfg.phase1_steps:
        return cfg.phase1_lr
    s = step - cfg.phase1_steps
    if cfg.warmup_steps > 0 and s <= cfg.warmup_steps:
        f = s / cfg.warmup_steps
        return cfg.lr_start * (1.0 - f) + cfg.lr_peak * f
    span = (total_steps - cfg.phase1_steps) - cfg.warmup_steps
    if span <= 0:
        return cfg.lr_end
    progress = min(1.0, (s - cfg.warmup_steps) / span)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * progress))


def ema_momentum_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear EMA momentum schedule, exact at both endpoints."""
    if total_steps <= 0:
        return cfg.ema_end
    f = min(1.0, step / total_steps)
    return cfg.ema_start * (1.0 - f) + cfg.ema_end * f


def uniform_truncate(batch: list[list[int]], objective: tok.Objective) -> torch.Tensor:
    """Truncate every sample to the batch-minimum content length.

    Content tokens (everything except the single attached special) are cut
    centrally, dropping from the right first, then the special is
    reattached. The result is a rectangular (B, L) id tensor with no pads,
    which keeps heterogeneous padding from leaking into the batch statistics
    used by the variance/covariance terms.
    """
    contents = [ids[1:] if objective == "mlm" else ids[:-1] for ids in batch]
    m = min(len(c) for c in contents)
    if m < 1:
        raise ValueError("batch contains a sample with no content tokens")
    rows = []
    for ids, content in zip(batch, contents):
        excess = len(content) - m
        drop_left = excess // 2
        kept = content[drop_left : len(content) - (excess - drop_left)]
        rows.append([tok.CLS_ID] + kept if objective == "mlm" else kept + [tok.EOS_ID])
    return torch.tensor(rows, dtype=torch.long)


def sample_batch_plans(
    ids: torch.Tensor,
    objective: tok.Objective,
    mask_cfg: MaskConfig,
    rngs: Iterable[np.random.Generator],
) -> list[MaskPlan]:
    """One span plan per row of a rectangular, pad-free batch."""
    L = ids.shape[1]
    first = 1 if objective == "mlm" else 0
    return [
        sample_spans(L, 1, rng, mask_cfg, first_maskable=first) for rng in rngs
    ]


def compute_batch_losses(
    model: JepaModel,
    ids: torch.Tensor,
    plans: list[MaskPlan],
    weights: LossWeights,
    train_mode: bool,
    gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective on one rectangular, pad-free micro-batch.

    Token-recovery path: masked input through the context encoder (full
    unmasked input under causal attention for the ntp variant). Latent path:
    predictor on the re-masked context encoding vs. the frozen-target
    aggregate of the clean input. Spread terms: an extra eval-mode forward
    of the clean input through encoder and predictor (no dropout, no
    masking); variance and covariance are averaged over the two resulting
    populations (context aggregates, predictor outputs). The eval-mode pass
    shares parameters, so it contributes gradients.
    """
    B, L = ids.shape
    objective = model.cfg.objective
    valid = torch.ones(B, L, dtype=torch.bool, device=ids.device)
    lengths = torch.full((B,), L, dtype=torch.long, device=ids.device)
    agg_idx = model.agg_index(lengths)
    mask_bool = plans_to_bool(plans, L).to(ids.device)
    masked_ids = ids.masked_fill(mask_bool, tok.MASK_ID)

    if objective == "mlm":
        ctx_hidden = model.context(masked_ids, valid, causal=False, train_mode=train_mode, gen=gen)
        llm = batch_mlm_loss(model.mlm_head(ctx_hidden), ids, mask_bool)
    else:
        full_hidden = model.context(ids, valid, causal=True, train_mode=train_mode, gen=gen)
        llm = batch_ntp_loss(model.mlm_head(full_hidden), ids, valid)
        ctx_hidden = model.context(masked_ids, valid, causal=True, train_mode=train_mode, gen=gen)

    z_pred = model.predictor(ctx_hidden, mask_bool, valid, agg_idx, train_mode=train_mode, gen=gen)
    z_target = model.target_forward(ids, valid, lengths)
    jepa = jepa_loss(z_pred, z_target)

    h_eval = model.context(ids, valid, model.causal, train_mode=False)
    z_ctx_eval = aggregate(h_eval, objective, lengths)
    z_pred_eval = model.predictor(h_eval, None, valid, agg_idx, train_mode=False)
    # Regularize each population separately: a stacked batch could satisfy
    # the spread constraint by holding the two cluster centers apart while
    # both collapse internally.
    var = 0.5 * (variance_loss(z_ctx_eval, weights.gamma) + variance_loss(z_pred_eval, weights.gamma))
    cov = 0.5 * (covariance_loss(z_ctx_eval) + covariance_loss(z_pred_eval))
    return total_loss(llm, jepa, var, cov, weights)


class Trainer:
    """Drives pre-training over a pre-tokenized corpus.

    ``samples`` are token-id lists with their special token already
    attached (the output of ``tokenizer.encode``). Metrics rows are written
    per optimizer step; checkpoints carry everything needed to resume the
    exact trajectory.
    """

    def __init__(
        self,
        model: JepaModel,
        samples: list[list[int]],
        cfg: TrainConfig,
        out_dir: str | Path | None = None,
        max_steps: int | None = None,
    ):
        if not samples:
            raise ValueError("corpus is empty")
        short = sum(1 for s in samples if len(s) < 2)
        if short:
            raise ValueError(f"{short} samples have no content tokens")
        self.model = model
        self.samples = samples
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.max_steps = max_steps

        self.batches_per_epoch = len(samples) // cfg.batch_size
        if self.batches_per_epoch < 1:
            raise ValueError(
                f"corpus of {len(samples)} samples is smaller than one batch of {cfg.batch_size}"
            )
        self.micro_total = self.batches_per_epoch * cfg.epochs
        self.total_steps = self.micro_total // cfg.accum_steps
        if self.total_steps < 1:
            raise ValueError("configuration yields zero optimizer steps")

        self.opt_step = 0
        self.micro_step = 0
        self.dropout_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "dropout"))
        self._trainable = {
            name: p for name, p in model.named_parameters() if not name.startswith("target.")
        }
        self._momentum_buffers = {name: torch.zeros_like(p) for name, p in self._trainable.items()}
        if cfg.deterministic:
            enable_determinism()

    # -- persistence ---------------------------------------------------

    def _checkpoint_extra(self) -> dict:
        return {
            "train_config": asdict(self.cfg),
            "micro_step": self.micro_step,
            "momentum_buffers": {k: v.clone() for k, v in self._momentum_buffers.items()},
            "dropout_gen_state": self.dropout_gen.get_state(),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(str(path), self.model, self.opt_step, self._checkpoint_extra())

    @classmethod
    def resume(
        cls,
        checkpoint_path: str | Path,
        samples: list[list[int]],
        cfg: TrainConfig,
        out_dir: str | Path | None = None,
        max_steps: int | None = None,
    ) -> "Trainer":
        model, step, extra = load_checkpoint(str(checkpoint_path))
        stored = extra.get("train_config")
        if stored != asdict(cfg):
            diff = {
                k: (stored.get(k) if stored else None, v)
                for k, v in asdict(cfg).items()
                if not stored or stored.get(k) != v
            }
            raise ResumeMismatchError(f"checkpoint config differs from requested: {diff}")
        trainer = cls(model, samples, cfg, out_dir=out_dir, max_steps=max_steps)
        trainer.opt_step = step
        trainer.micro_step = extra["micro_step"]
        for name, buf in extra["momentum_buffers"].items():
            trainer._momentum_buffers[name].copy_(buf)
        trainer.dropout_gen.set_state(extra["dropout_gen_state"])
        return trainer

    # -- one optimizer step --------------------------------------------

    def _active_group_prefixes(self) -> tuple[str, ...]:
        if self.opt_step < self.cfg.phase1_steps:
            return ("predictor.",)
        return ("predictor.", "context.", "mlm_head.")

    def _optimizer_step(self, lr: float) -> None:
        active = self._active_group_prefixes()
        mom, wd = self.cfg.momentum, self.cfg.weight_decay
        with torch.no_grad():
            for name, p in self._trainable.items():
                if not name.startswith(active):
                    p.grad = None  # frozen this phase: discard, keep buffers cold
                    continue
                grad = p.grad if p.grad is not None else torch.zeros_like(p)
                buf = self._momentum_buffers[name]
                buf.mul_(mom).add_(grad)
                if wd:
                    p.mul_(1.0 - lr * wd)
                p.add_(buf, alpha=-lr)
                p.grad = None

    def _micro_batch(self, epoch: int, indices: np.ndarray) -> tuple[torch.Tensor, LossBreakdown]:
        batch = [self.samples[int(i)] for i in indices]
        ids = uniform_truncate(batch, self.model.cfg.objective)
        rngs = [mask_rng(self.cfg.seed, epoch, int(i)) for i in indices]
        plans = sample_batch_plans(ids, self.model.cfg.objective, self.cfg.mask, rngs)
        return compute_batch_losses(
            self.model, ids, plans, self.cfg.weights, train_mode=True, gen=self.dropout_gen
        )

    def train_step(self) -> tuple[LossBreakdown, float, float]:
        """Run one optimizer step (``accum_steps`` micro-batches), then the
        EMA update. Returns the averaged breakdown, lr, and EMA momentum."""
        sums = [0.0] * 5
        for _ in range(self.cfg.accum_steps):
            epoch = self.micro_step // self.batches_per_epoch
            pos = self.micro_step % self.batches_per_epoch
            perm = epoch_permutation(self.cfg.seed, epoch, len(self.samples))
            indices = perm[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]
            total, parts = self._micro_batch(epoch, indices)
            if not math.isfinite(parts.total):
                raise NonFiniteLossError(
                    f"non-finite loss at optimizer step {self.opt_step}: {parts}"
                )
            (total / self.cfg.accum_steps).backward()
            for j, v in enumerate((parts.llm, parts.jepa, parts.var, parts.cov, parts.total)):
                sums[j] += v
            self.micro_step += 1

        lr = lr_at_step(self.cfg, self.opt_step, self.total_steps)
        self._optimizer_step(lr)
        self.opt_step += 1
        m = ema_momentum_at_step(self.cfg, self.opt_step, self.total_steps)
        if self.opt_step > self.cfg.phase1_steps:
            ema_update(self.model.target, self.model.context, m)
        # During the frozen phase the context encoder has not moved and the
        # target was initialized equal to it, so the EMA is the identity;
        # skipping it keeps theta_bar bit-identical.
        n = self.cfg.accum_steps
        avg = LossBreakdown(*(s / n for s in sums))
        return avg, lr, m

    # -- full run --------------------------------------------------------

    def _metrics_path(self) -> Path | None:
        return self.out_dir / "metrics.tsv" if self.out_dir else None

    def _write_header(self, handle) -> None:
        handle.write(
            f"# total_steps={self.total_steps}\tsteps_per_epoch={self.batches_per_epoch}"
            f"\tmicro_batches={self.micro_total}\taccum_steps={self.cfg.accum_steps}\n"
        )
        handle.write("# " + "\t".join(METRICS_COLUMNS) + "\n")

    def _prepare_log(self) -> None:
        """Create the metrics log, or truncate a resumed one to opt_step."""
        path = self._metrics_path()
        if path is None:
            return
        if self.opt_step > 0 and path.exists():
            kept = []
            for line in path.read_text().splitlines(keepends=True):
                if line.startswith("#"):
                    kept.append(line)
                    continue
                if int(line.split("\t", 1)[0]) <= self.opt_step:
                    kept.append(line)
            path.write_text("".join(kept))
        else:
            with path.open("w") as fh:
                self._write_header(fh)

    def run(self) -> Path | None:
        """Train to completion (or ``max_steps``); returns the final
        checkpoint path when an output directory is configured.

        Raises:
            NonFiniteLossError: NaN/inf total loss (an abort checkpoint is
                written first when possible).
        """
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._prepare_log()
        path = self._metrics_path()
        stop_at = min(self.total_steps, self.max_steps) if self.max_steps else self.total_steps

        log = path.open("a") if path else None
        final = None
        try:
            while self.opt_step < stop_at:
                try:
                    parts, lr, m = self.train_step()
                except NonFiniteLossError:
                    if self.out_dir:
                        self.save(self.out_dir / "checkpoint-abort.pt")
                    raise
                if log:
                    vals = (parts.llm, parts.jepa, parts.var, parts.cov, parts.total, lr, m)
                    log.write(f"{self.opt_step}\t" + "\t".join(repr(v) for v in vals) + "\n")
                if self.out_dir and (
                    self.opt_step % self.cfg.checkpoint_every == 0 or self.opt_step == stop_at
                ):
                    final = self.out_dir / f"checkpoint-{self.opt_step:06d}.pt"
                    self.save(final)
        finally:
            if log:
                log.close()
        if self.out_dir:
            final = self.out_dir / "checkpoint-final.pt"
            self.save(final)
        return final


# -- gradient checking ---------------------------------------------------


@dataclass(frozen=True)
class GradCheckGroup:
    max_rel_err: float
    n_coords: int
    has_gradient: bool


@dataclass(frozen=True)
class GradCheckReport:
    groups: dict[str, GradCheckGroup]
    epsilon: float

    def max_rel_err(self) -> float:
        checked = [g.max_rel_err for g in self.groups.values() if g.has_gradient]
        return max(checked) if checked else 0.0

    def passed(self, tol: float = 1e-2) -> bool:
        return self.max_rel_err() < tol


def grad_check(
    model: JepaModel,
    ids: torch.Tensor,
    plans: list[MaskPlan],
    weights: LossWeights,
    epsilon: float = 1e-3,
    coords_per_group: int = 50,
    seed: int = 0,
) -> GradCheckReport:
    """Central finite differences vs. autograd on a float64 shadow model.

    Samples ``coords_per_group`` coordinates per parameter group (context /
    predictor / mlm_head); the target encoder is reported as gradient-free.
    Dropout is off (eval-mode forward), so the loss is a deterministic
    function of the parameters.
    """
    shadow = clone_for_gradcheck(model)

    def loss_value() -> torch.Tensor:
        return compute_batch_losses(shadow, ids, plans, weights, train_mode=False)[0]

    for p in shadow.parameters():
        p.grad = None
    loss = loss_value()
    loss.backward()

    rng = np.random.default_rng(seed)
    groups: dict[str, GradCheckGroup] = {}
    for prefix in ("context", "predictor", "mlm_head"):
        named = [(n, p) for n, p in shadow.named_parameters() if n.startswith(prefix + ".")]
        sizes = np.array([p.numel() for _, p in named])
        total = int(sizes.sum())
        n_pick = min(coords_per_group, total)
        picks = rng.choice(total, size=n_pick, replace=False)
        worst = 0.0
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for flat in sorted(int(x) for x in picks):
            gi = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named[gi]
            local = flat - int(offsets[gi])
            with torch.no_grad():
                orig = p.view(-1)[local].item()
                p.view(-1)[local] = orig + epsilon
                up = loss_value().item()
                p.view(-1)[local] = orig - epsilon
                down = loss_value().item()
                p.view(-1)[local] = orig
            numeric = (up - down) / (2.0 * epsilon)
            analytic = p.grad.view(-1)[local].item() if p.grad is not None else 0.0
            diff = abs(analytic - numeric)
            if diff > 1e-9:
                worst = max(worst, diff / max(abs(analytic), abs(numeric), 1e-10))
        groups[prefix] = GradCheckGroup(max_rel_err=worst, n_coords=n_pick, has_gradient=True)

    target_has_grad = any(
        p.grad is not None for n, p in shadow.named_parameters() if n.startswith("target.")
    )
    groups["target"] = GradCheckGroup(max_rel_err=0.0, n_coords=0, has_gradient=target_has_grad)
    return GradCheckReport(groups=groups, epsilon=epsilon)
