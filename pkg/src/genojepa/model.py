"""The encoder triple: context encoder, EMA target encoder, latent predictor.

Both encoders are pre-norm Transformers with learned absolute positions and a
token-recovery head on top of the context side. The predictor is a narrower
pre-norm Transformer that consumes the full context encoding, re-masks the
target positions with a learned embedding, adds frozen sinusoidal positions,
and emits a single d-dimensional prediction of the target encoder's
aggregate ([CLS] or [EOS]) vector.

Everything runs in float32; gradient checking clones the model to float64.
Dropout is driven by an explicitly passed torch.Generator so training
trajectories are reproducible and resumable.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import Objective

CHECKPOINT_FORMAT = "genojepa-ckpt-v1"


class SequenceTooLongError(ValueError):
    """Token sequence exceeds the configured maximum."""


class ShapeMismatchError(ValueError):
    """Parameter tensors of the two encoders disagree in shape."""


@dataclass
class ModelConfig:
    """Desk-scale defaults; the predictor runs at half width with the same
    32-dim attention heads as the encoder."""

    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_tokens: int = 512
    dropout_rate: float = 0.1
    objective: Objective = "mlm"
    p_layers: int = 3
    p_dim: int = 0  # 0 -> d_model // 2
    p_heads: int = 2
    p_ff: int = 0  # 0 -> 4 * p_dim

    def __post_init__(self) -> None:
        if self.p_dim == 0:
            self.p_dim = self.d_model // 2
        if self.p_ff == 0:
            self.p_ff = 4 * self.p_dim
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("model.vocab_size must be positive")
        if self.n_layers < 1:
            raise ValueError("model.n_layers must be >= 1")
        if self.p_layers < 1:
            raise ValueError("model.p_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("model.d_model must be divisible by model.n_heads")
        if self.p_dim % self.p_heads != 0:
            raise ValueError("model.p_dim must be divisible by model.p_heads")
        if self.max_tokens < 2:
            raise ValueError("model.max_tokens must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("model.dropout_rate must be in [0, 1)")
        if self.objective not in ("mlm", "ntp"):
            raise ValueError("model.objective must be 'mlm' or 'ntp'")


def _dropout(x: torch.Tensor, p: float, train_mode: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not train_mode or p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=gen, device=x.device) < keep
    return x * mask.to(x.dtype) / keep


def trunc_normal_(
    tensor: torch.Tensor, std: float, gen: torch.Generator | None, n_sigma: float = 2.0
) -> torch.Tensor:
    """In-place truncated normal via inverse-CDF sampling (generator-aware)."""
    a, b = -n_sigma * std, n_sigma * std
    lo = 0.5 * (1.0 + math.erf((a / std) / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf((b / std) / math.sqrt(2.0)))
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=gen)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(a, b)
    return tensor


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    """Fixed sin/cos positional table, position 0 reserved for the aggregate slot."""
    pos = torch.arange(n_positions, dtype=torch.float32).unsqueeze(1)
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return table


def _attention_bias(
    valid: torch.Tensor, causal: bool, dtype: torch.dtype
) -> torch.Tensor:
    """(B, 1, L, L) additive bias: -inf at padded keys and causal violations."""
    B, L = valid.shape
    bias = torch.zeros(B, 1, 1, L, dtype=dtype, device=valid.device)
    bias.masked_fill_(~valid.view(B, 1, 1, L), float("-inf"))
    if causal:
        tri = torch.triu(torch.ones(L, L, dtype=torch.bool, device=valid.device), diagonal=1)
        bias = bias + torch.zeros(1, 1, L, L, dtype=dtype, device=valid.device).masked_fill_(
            tri, float("-inf")
        )
    return bias


class TransformerBlock(nn.Module):
    """Pre-norm block: LN -> multi-head self-attention -> residual,
    LN -> GELU feed-forward -> residual."""

    def __init__(self, dim: int, n_heads: int, d_ff: int, dropout_rate: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.dropout_rate = dropout_rate
        self.ln_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln_ff = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, d_ff)
        self.ff_out = nn.Linear(d_ff, dim)

    def forward(
        self,
        x: torch.Tensor,
        attn_bias: torch.Tensor,
        train_mode: bool,
        gen: torch.Generator | None,
    ) -> torch.Tensor:
        B, L, D = x.shape
        h = self.ln_attn(x)
        qkv = self.qkv(h).view(B, L, 3, self.n_heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (B, H, L, hd)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + attn_bias
        probs = torch.softmax(scores, dim=-1)
        probs = _dropout(probs, self.dropout_rate, train_mode, gen)
        ctx = (probs @ v).transpose(1, 2).reshape(B, L, D)
        x = x + _dropout(self.attn_out(ctx), self.dropout_rate, train_mode, gen)
        h = self.ff_out(F.gelu(self.ff_in(self.ln_ff(x))))
        return x + _dropout(h, self.dropout_rate, train_mode, gen)


class Encoder(nn.Module):
    """Token + learned positional embedding, pre-norm blocks, final LN.

    Padded positions are excluded from attention keys and zeroed in the
    output, so appending pads never changes the rows of real tokens.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.position_embedding = nn.Embedding(cfg.max_tokens, cfg.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout_rate)
            for _ in range(cfg.n_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.d_model)

    def forward(
        self,
        ids: torch.Tensor,
        valid: torch.Tensor,
        causal: bool,
        train_mode: bool = False,
        gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        B, L = ids.shape
        if L > self.cfg.max_tokens:
            raise SequenceTooLongError(f"{L} tokens > max_tokens={self.cfg.max_tokens}")
        pos = torch.arange(L, device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(pos)
        x = _dropout(x, self.cfg.dropout_rate, train_mode, gen)
        bias = _attention_bias(valid, causal, x.dtype)
        for block in self.blocks:
            x = block(x, bias, train_mode, gen)
        x = self.ln_final(x)
        return x * valid.unsqueeze(-1).to(x.dtype)


class Predictor(nn.Module):
    """Maps context encodings to the target encoder's aggregate vector.

    Project d -> p_dim, replace target rows with the learned mask embedding,
    add frozen sinusoidal positions, run pre-norm blocks, read the aggregate
    slot, and project back p_dim -> d.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_model, cfg.p_dim)
        self.mask_embedding = nn.Parameter(torch.zeros(cfg.p_dim))
        self.register_buffer("positions", sinusoidal_table(cfg.max_tokens, cfg.p_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.p_dim, cfg.p_heads, cfg.p_ff, cfg.dropout_rate)
            for _ in range(cfg.p_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.p_dim)
        self.output_proj = nn.Linear(cfg.p_dim, cfg.d_model)

    def forward(
        self,
        context_hidden: torch.Tensor,
        mask_bool: torch.Tensor | None,
        valid: torch.Tensor,
        agg_index: torch.Tensor,
        train_mode: bool = False,
        gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        B, L, _ = context_hidden.shape
        x = self.input_proj(context_hidden)
        if mask_bool is not None:
            x = torch.where(mask_bool.unsqueeze(-1), self.mask_embedding.to(x.dtype), x)
        x = x + self.positions[:L].to(x.dtype)
        x = _dropout(x, self.cfg.dropout_rate, train_mode, gen)
        bias = _attention_bias(valid, False, x.dtype)
        for block in self.blocks:
            x = block(x, bias, train_mode, gen)
        x = self.ln_final(x)
        picked = x[torch.arange(B, device=x.device), agg_index]
        return self.output_proj(picked)


class JepaModel(nn.Module):
    """Context encoder, EMA target encoder, predictor, token-recovery head.

    The target encoder is a structural duplicate of the context encoder; its
    parameters never require grad and are only moved by ``ema_update``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.context = Encoder(cfg)
        self.target = Encoder(cfg)
        self.predictor = Predictor(cfg)
        self.mlm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.target.requires_grad_(False)

    @property
    def causal(self) -> bool:
        return self.cfg.objective == "ntp"

    def agg_index(self, lengths: torch.Tensor) -> torch.Tensor:
        """Aggregate slot per sample: [CLS] at 0 (mlm), [EOS] at the last
        real token (ntp)."""
        if self.cfg.objective == "mlm":
            return torch.zeros_like(lengths)
        return lengths - 1

    def target_forward(
        self, ids: torch.Tensor, valid: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """Aggregate vector of the EMA encoder on the unmasked input.

        Always eval mode; gradients never flow into the target parameters.
        """
        with torch.no_grad():
            hidden = self.target(ids, valid, self.causal, train_mode=False)
            return aggregate(hidden, self.cfg.objective, lengths)


def aggregate(hidden: torch.Tensor, objective: Objective, lengths: torch.Tensor) -> torch.Tensor:
    """Pick the global summary row: position 0 (mlm) or the [EOS] row (ntp)."""
    if objective == "mlm":
        return hidden[:, 0]
    idx = lengths - 1
    return hidden[torch.arange(hidden.shape[0], device=hidden.device), idx]


def init_weights(cfg: ModelConfig, seed: int) -> JepaModel:
    """Build a model with truncated-normal(0, 0.02) weights clipped at 2 sigma.

    Biases start at zero, layer norms at identity, and the target encoder is
    an exact copy of the context encoder. Deterministic per seed.
    """
    model = JepaModel(cfg)
    gen = torch.Generator().manual_seed(seed)
    for module in [model.context, model.predictor, model.mlm_head]:
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                trunc_normal_(m.weight, std=0.02, gen=gen)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    trunc_normal_(model.predictor.mask_embedding, std=0.02, gen=gen)
    with torch.no_grad():
        model.target.load_state_dict(model.context.state_dict())
    model.target.requires_grad_(False)
    return model


@torch.no_grad()
def ema_update(target: nn.Module, source: nn.Module, momentum: float) -> None:
    """theta_bar <- m * theta_bar + (1 - m) * theta, elementwise.

    Computed as theta_bar + (1 - m) * (theta - theta_bar) so that equal
    parameters are a bit-exact fixed point for any momentum; m = 0 and
    m = 1 are special-cased to land exactly on theta / theta_bar.
    """
    t_params = dict(target.named_parameters())
    s_params = dict(source.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeMismatchError("target/source parameter sets differ")
    for name, p_t in t_params.items():
        p_s = s_params[name]
        if p_t.shape != p_s.shape:
            raise ShapeMismatchError(f"{name}: {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            p_t.copy_(p_s)
        else:
            p_t.add_(p_s - p_t, alpha=1.0 - momentum)


def save_checkpoint(path: str, model: JepaModel, step: int, extra: dict[str, Any] | None = None) -> None:
    """Write the versioned checkpoint container (config, step, parameters,
    plus caller-owned extras such as optimizer slots and rng states)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "step": int(step),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[JepaModel, int, dict[str, Any]]:
    """Rebuild model + step + extras from a checkpoint container."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    cfg = ModelConfig(**payload["model_config"])
    model = JepaModel(cfg)
    model.load_state_dict(payload["state"])
    model.target.requires_grad_(False)
    return model, payload["step"], payload["extra"]


def clone_for_gradcheck(model: JepaModel) -> JepaModel:
    """Deep float64 copy used by the finite-difference shadow path."""
    shadow = copy.deepcopy(model).double()
    shadow.target.requires_grad_(False)
    return shadow
