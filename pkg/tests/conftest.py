import numpy as np
import pytest
import torch

from genojepa import tokenizer as tok
from genojepa.masking import sample_spans
from genojepa.model import ModelConfig, init_weights
from genojepa.trainer import mask_rng

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """2-layer, d=16, vocab=16 config used by gradient and invariant tests."""
    return ModelConfig(
        vocab_size=16,
        n_layers=2,
        d_model=16,
        n_heads=2,
        d_ff=64,
        max_tokens=40,
        dropout_rate=0.0,
        p_layers=2,
        p_dim=8,
        p_heads=1,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return init_weights(tiny_cfg, seed=0)


def random_batch(cfg: ModelConfig, batch: int, content: int, seed: int = 0):
    """Pad-free (B, content+1) id tensor plus per-sample mask plans."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(batch):
        ids = rng.integers(tok.N_RESERVED, cfg.vocab_size, size=content).tolist()
        rows.append([tok.CLS_ID] + ids if cfg.objective == "mlm" else ids + [tok.EOS_ID])
    ids = torch.tensor(rows, dtype=torch.long)
    first = 1 if cfg.objective == "mlm" else 0
    plans = [
        sample_spans(content + 1, 1, mask_rng(seed, 0, i), first_maskable=first)
        for i in range(batch)
    ]
    return ids, plans
