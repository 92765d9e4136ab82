"""Command-line pipeline: prepare, train-tokenizer, pretrain, probe,
zeroshot, gradcheck.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure (a
non-finite training loss aborts with a diagnostic and an abort checkpoint).
Every artifact-producing command writes a run manifest next to its outputs
(atomically, at the end of the run) recording the command, a
platform-stable hash of its configuration, the seed, and artifact paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__, evaluation, sequences, tokenizer as tok
from .losses import LossWeights
from .masking import MaskConfig, sample_spans
from .model import ModelConfig, init_weights, load_checkpoint
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    enable_determinism,
    grad_check,
    mask_rng,
)


def _config_hash(payload: Any) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _atomic_write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class _Manifest:
    def __init__(self, command: str, config: Any, seed: int | None):
        self.payload = {
            "command": command,
            "config_hash": _config_hash(config),
            "seed": seed,
            "code_version": __version__,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "artifacts": {},
        }

    def add(self, name: str, path: str | Path) -> None:
        self.payload["artifacts"][name] = str(path)

    def write(self, path: str | Path) -> None:
        self.payload["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        _atomic_write_json(Path(path), self.payload)


def _open_maybe_stdin(path: str):
    return sys.stdin if path == "-" else open(path)


# -- config loading -----------------------------------------------------------

_TOP_KEYS = {"corpus", "tokenizer", "out_dir", "model", "train", "mask", "weights"}


def _build_dataclass(cls, payload: dict, section: str, **forced):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ValueError(f"unknown config field {section}.{key}")
    merged = {**payload, **forced}
    return cls(**merged)


def load_pretrain_config(path: str, seed_override: int | None, deterministic: bool):
    """Parse the single-document training config (strict keys)."""
    with open(path) as fh:
        doc = json.load(fh)
    for key in doc:
        if key not in _TOP_KEYS:
            raise ValueError(f"unknown config field {key}")
    for key in ("corpus", "tokenizer", "out_dir"):
        if key not in doc:
            raise ValueError(f"missing config field {key}")

    with open(doc["tokenizer"]) as fh:
        tok_model = tok.load_tokenizer(fh)

    model_payload = dict(doc.get("model", {}))
    declared = model_payload.pop("vocab_size", None)
    if declared is not None and declared != tok_model.vocab_size:
        raise ValueError(
            f"model.vocab_size={declared} conflicts with tokenizer vocab {tok_model.vocab_size}"
        )
    model_cfg = _build_dataclass(
        ModelConfig, model_payload, "model", vocab_size=tok_model.vocab_size
    )

    mask_cfg = _build_dataclass(MaskConfig, dict(doc.get("mask", {})), "mask")
    weights = _build_dataclass(LossWeights, dict(doc.get("weights", {})), "weights")
    forced: dict[str, Any] = {"mask": mask_cfg, "weights": weights}
    if seed_override is not None:
        forced["seed"] = seed_override
    if deterministic:
        forced["deterministic"] = True
    train_payload = dict(doc.get("train", {}))
    train_payload.pop("mask", None)
    train_payload.pop("weights", None)
    train_cfg = _build_dataclass(TrainConfig, train_payload, "train", **forced)
    return doc, tok_model, model_cfg, train_cfg


def tokenize_corpus(
    tok_model: tok.TokenizerModel, chunks_path: str, objective: str, max_tokens: int
) -> list[list[int]]:
    samples = []
    with open(chunks_path) as fh:
        for chunk in sequences.read_chunks(fh):
            sample = tok.encode(tok_model, chunk.seq, objective, max_tokens)
            if len(sample.ids) >= 2:
                samples.append(sample.ids)
    return samples


# -- commands -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(
        "prepare",
        {
            "synthetic": bool(args.synthetic),
            "chunk_length": args.chunk_length,
            "overlap": args.overlap,
            "min_chunk_length": args.min_chunk_length,
            "inputs": list(args.fasta),
            "length": args.length,
            "count": args.count,
            "motif": args.motif,
            "pos_fraction": args.pos_fraction,
        },
        seed,
    )

    if args.synthetic:
        spec = sequences.SyntheticSpec(
            seq_length=args.length,
            n_sequences=args.count,
            motifs=tuple(args.motif),
            pos_fraction=args.pos_fraction,
        )
        records, labels = sequences.generate_synthetic_corpus(spec, seed)
        if args.labels_out:
            with open(args.labels_out, "w") as fh:
                for rec, lab in zip(records, labels):
                    fh.write(f"{rec.id}\t{lab}\n")
            manifest.add("labels", args.labels_out)
    else:
        if not args.fasta:
            raise ValueError("no FASTA inputs given (or use --synthetic)")
        records = []
        for path in args.fasta:
            with _open_maybe_stdin(path) as fh:
                records.extend(sequences.parse_fasta(fh))

    n_rows = 0
    with out.open("w") as fh:
        for rec in records:
            n_rows += sequences.write_chunks(
                sequences.chunk_record(
                    rec, args.chunk_length, args.overlap, args.min_chunk_length
                ),
                fh,
            )
    manifest.add("chunks", out)
    manifest.write(out.with_suffix(out.suffix + ".manifest.json"))
    print(f"wrote {n_rows} chunks to {out}")
    return 0


def cmd_train_tokenizer(args) -> int:
    seed = args.seed if args.seed is not None else 0
    with open(args.corpus) as fh:
        chunks = list(sequences.read_chunks(fh))
    model = tok.train_bpe(chunks, args.vocab_size, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        tok.save_tokenizer(model, fh)
    manifest = _Manifest(
        "train-tokenizer", {"corpus": args.corpus, "vocab_size": args.vocab_size}, seed
    )
    manifest.add("tokenizer", out)
    manifest.write(out.with_suffix(out.suffix + ".manifest.json"))
    print(f"trained vocab of {model.vocab_size} ({len(model.merges)} merges) -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    doc, tok_model, model_cfg, train_cfg = load_pretrain_config(
        args.config, args.seed, args.deterministic
    )
    samples = tokenize_corpus(
        tok_model, doc["corpus"], model_cfg.objective, model_cfg.max_tokens
    )
    out_dir = Path(doc["out_dir"])
    manifest = _Manifest(
        "pretrain",
        {**doc, "model_resolved": dataclasses.asdict(model_cfg),
         "train_resolved": dataclasses.asdict(train_cfg)},
        train_cfg.seed,
    )

    if args.resume:
        trainer = Trainer.resume(
            args.resume, samples, train_cfg, out_dir=out_dir, max_steps=args.max_steps
        )
    else:
        model = init_weights(model_cfg, train_cfg.seed)
        trainer = Trainer(model, samples, train_cfg, out_dir=out_dir, max_steps=args.max_steps)

    try:
        final = trainer.run()
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        print(f"abort checkpoint: {out_dir / 'checkpoint-abort.pt'}", file=sys.stderr)
        return 3
    manifest.add("checkpoint", final)
    manifest.add("metrics", out_dir / "metrics.tsv")
    manifest.write(out_dir / "manifest.json")
    print(f"finished at step {trainer.opt_step}/{trainer.total_steps}; checkpoint {final}")
    return 0


def _load_model_for_eval(checkpoint: str, tokenizer_path: str):
    model, _, _ = load_checkpoint(checkpoint)
    model.eval()
    with open(tokenizer_path) as fh:
        tok_model = tok.load_tokenizer(fh)
    if tok_model.vocab_size != model.cfg.vocab_size:
        raise ValueError(
            f"tokenizer vocab {tok_model.vocab_size} != model vocab {model.cfg.vocab_size}"
        )
    return model, tok_model


def cmd_probe(args) -> int:
    seed = args.seed if args.seed is not None else 0
    model, tok_model = _load_model_for_eval(args.checkpoint, args.tokenizer)
    with open(args.task) as fh:
        train_rows = evaluation.read_task_tsv(fh)
    if args.eval_task:
        with open(args.eval_task) as fh:
            eval_rows = evaluation.read_task_tsv(fh)
    else:
        eval_rows = train_rows

    def features(rows):
        refs = evaluation.extract_embeddings(model, [r.ref_seq for r in rows], tok_model)
        if not args.variant:
            return refs
        if any(r.alt_seq is None for r in rows):
            raise ValueError("--variant requires alt_seq in every task row")
        alts = evaluation.extract_embeddings(model, [r.alt_seq for r in rows], tok_model)
        return evaluation.variant_features(refs, alts)

    probe_cfg = evaluation.ProbeConfig(
        lr=args.probe_lr, epochs=args.probe_epochs, seed=seed
    )
    head = evaluation.train_linear_probe(
        features(train_rows), [r.label for r in train_rows], probe_cfg
    )
    eval_x = features(eval_rows)
    labels = [r.label for r in eval_rows]
    report = evaluation.metric_report(
        evaluation.probe_scores(head, eval_x).tolist(),
        labels,
        evaluation.probe_labels(head, eval_x).tolist(),
    )
    payload = report.to_dict()
    payload["protocol"] = {
        "variant": bool(args.variant),
        "probe": dataclasses.asdict(probe_cfg),
        "train_rows": len(train_rows),
        "eval_rows": len(eval_rows),
    }
    _atomic_write_json(Path(args.out), payload)
    manifest = _Manifest(
        "probe",
        {"checkpoint": args.checkpoint, "task": args.task, "eval_task": args.eval_task,
         "variant": bool(args.variant), "probe": dataclasses.asdict(probe_cfg)},
        seed,
    )
    manifest.add("report", args.out)
    manifest.write(Path(args.out).with_suffix(".manifest.json"))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_zeroshot(args) -> int:
    model, tok_model = _load_model_for_eval(args.checkpoint, args.tokenizer)
    with open(args.pairs) as fh:
        rows = evaluation.read_task_tsv(fh)
    if any(r.alt_seq is None for r in rows):
        raise ValueError("zeroshot task rows need ref_seq, alt_seq and label")

    refs = evaluation.extract_embeddings(model, [r.ref_seq for r in rows], tok_model)
    alts = evaluation.extract_embeddings(model, [r.alt_seq for r in rows], tok_model)
    scores = [
        evaluation.embedding_distance(refs[i], alts[i]) for i in range(len(rows))
    ]
    with open(args.scores_out, "w") as fh:
        evaluation.write_scores_tsv(scores, fh)

    labels = [r.label for r in rows]
    report = evaluation.metric_report(scores, labels)
    payload = report.to_dict()
    payload["auroc_best_orientation"] = max(payload["auroc"], 1.0 - payload["auroc"])
    payload["score_polarity"] = "distance: higher score = more disruptive"
    _atomic_write_json(Path(args.out), payload)
    manifest = _Manifest(
        "zeroshot", {"checkpoint": args.checkpoint, "pairs": args.pairs}, args.seed
    )
    manifest.add("scores", args.scores_out)
    manifest.add("report", args.out)
    manifest.write(Path(args.out).with_suffix(".manifest.json"))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.deterministic:
        enable_determinism()
    cfg = ModelConfig(
        vocab_size=args.vocab_size,
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        d_ff=4 * args.d_model,
        max_tokens=args.tokens + 1,
        dropout_rate=0.0,
        objective=args.objective,
        p_layers=2,
        p_dim=args.d_model // 2,
        p_heads=1,
    )
    model = init_weights(cfg, seed)
    rng = np.random.default_rng(seed)
    ids_rows = []
    for _ in range(args.batch):
        content = rng.integers(tok.N_RESERVED, cfg.vocab_size, size=args.tokens).tolist()
        ids_rows.append([tok.CLS_ID] + content if cfg.objective == "mlm" else content + [tok.EOS_ID])
    ids = torch.tensor(ids_rows, dtype=torch.long)
    first = 1 if cfg.objective == "mlm" else 0
    plans = [
        sample_spans(ids.shape[1], 1, mask_rng(seed, 0, i), first_maskable=first)
        for i in range(args.batch)
    ]

    objectives = {
        "llm-only": LossWeights(1.0, 0.0, 0.0, 0.0),
        "jepa-only": LossWeights(0.0, 1.0, 0.0, 0.0),
        "composite": LossWeights(),
    }
    all_ok = True
    for name, weights in objectives.items():
        report = grad_check(model, ids, plans, weights, coords_per_group=args.coords, seed=seed)
        for group, res in sorted(report.groups.items()):
            if group == "target":
                status = "no gradient" if not res.has_gradient else "UNEXPECTED GRADIENT"
                print(f"{name:10s} {group:10s} {status}")
                all_ok = all_ok and not res.has_gradient
            else:
                ok = res.max_rel_err < args.tol
                all_ok = all_ok and ok
                print(
                    f"{name:10s} {group:10s} max_rel_err={res.max_rel_err:.3e} "
                    f"({res.n_coords} coords) {'ok' if ok else 'FAIL'}"
                )
    print("gradcheck:", "PASS" if all_ok else "FAIL")
    return 0 if all_ok else 1


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genojepa",
        description="Latent-predictive pre-training pipeline for genomic sequences",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded, fixed-reduction-order mode",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="chunk FASTA (or synthesize) into a corpus TSV")
    p.add_argument("fasta", nargs="*", help="FASTA paths ('-' for stdin)")
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-length", type=int, default=512)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--min-chunk-length", type=int, default=sequences.DEFAULT_MIN_CHUNK_LENGTH)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--length", type=int, default=128, help="synthetic sequence length")
    p.add_argument("--count", type=int, default=1000, help="synthetic corpus size")
    p.add_argument("--motif", action="append", default=None)
    p.add_argument("--pos-fraction", type=float, default=0.5)
    p.add_argument("--labels-out", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-tokenizer", help="train the BPE tokenizer on a corpus TSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("pretrain", help="run pre-training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after N optimizer steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe of frozen embeddings on a task TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--eval-task", default=None)
    p.add_argument("--variant", action="store_true", help="concatenate ref/alt embeddings")
    p.add_argument("--probe-lr", type=float, default=3e-5)
    p.add_argument("--probe-epochs", type=int, default=3)
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("zeroshot", help="embedding-distance variant scoring")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--scores-out", required=True)
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--tokens", type=int, default=24)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--objective", choices=("mlm", "ntp"), default="mlm")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "prepare" and args.motif is None:
        args.motif = ["TATAAT"]
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
