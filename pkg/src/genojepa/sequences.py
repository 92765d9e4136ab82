"""Nucleotide corpus handling: FASTA parsing, filtering, chunking, synthesis.

Everything here is pure string/array work with no model dependencies, so it
can run in parallel over files. Chunk corpora are exchanged as tab-separated
lines ``source_id<TAB>start<TAB>seq``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

VALID_BASES = "ACGT"
DEFAULT_MIN_CHUNK_LENGTH = 16

_UPPER = {"a": "A", "c": "C", "g": "G", "t": "T", "A": "A", "C": "C", "G": "G", "T": "T"}


class MalformedFastaError(ValueError):
    """First non-blank line of a FASTA stream is not a '>' header."""


class EmptyRecordError(ValueError):
    """A FASTA header with no sequence lines."""


class InvalidChunkConfigError(ValueError):
    """Chunking parameters outside their preconditions."""


class MotifTooLongError(ValueError):
    """Planted motif longer than the requested sequence length."""


@dataclass(frozen=True)
class SequenceRecord:
    """An identified nucleotide string (case preserved, may contain N/n)."""

    id: str
    seq: str


@dataclass(frozen=True)
class Chunk:
    """A fixed-length uppercase ACGT window cut from a source sequence.

    ``start`` is the 0-based offset of the window in the original record.
    """

    source_id: str
    start: int
    seq: str


def parse_fasta(stream: Iterable[str] | Iterable[bytes]) -> list[SequenceRecord]:
    """Parse (possibly concatenated) FASTA text into records.

    Wrapped sequence lines are concatenated; the id is the header text up to
    the first whitespace; case is preserved.

    Raises:
        MalformedFastaError: first non-blank line is not a header.
        EmptyRecordError: a header is not followed by any sequence line.
    """
    records: list[SequenceRecord] = []
    header: str | None = None
    parts: list[str] = []
    saw_any = False

    def flush() -> None:
        if header is None:
            return
        if not parts:
            raise EmptyRecordError(f"record {header!r} has no sequence lines")
        records.append(SequenceRecord(id=header, seq="".join(parts)))

    for raw in stream:
        line = raw.decode("ascii") if isinstance(raw, (bytes, bytearray)) else raw
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip().split(None, 1)[0] if line[1:].strip() else ""
            if not header:
                raise MalformedFastaError("header line with empty id")
            parts = []
            saw_any = True
        else:
            if not saw_any:
                raise MalformedFastaError(
                    f"expected '>' header, got {line[:30]!r}"
                )
            parts.append(line.strip())
    flush()
    return records


def write_fasta(records: Iterable[SequenceRecord], handle: IO[str], width: int = 60) -> None:
    """Write records so that ``parse_fasta`` round-trips (id, seq) exactly."""
    for rec in records:
        handle.write(f">{rec.id}\n")
        for i in range(0, len(rec.seq), width):
            handle.write(rec.seq[i : i + width] + "\n")


def extract_valid_segments(
    seq: str, min_chunk_length: int = DEFAULT_MIN_CHUNK_LENGTH
) -> list[tuple[int, str]]:
    """Split a raw sequence into maximal uppercase ACGT runs.

    Soft-masked (lowercase) bases are uppercased and kept; any other
    character (N, IUPAC ambiguity codes, ...) terminates the current run.
    Runs shorter than ``min_chunk_length`` are dropped. Returns
    ``(original_offset, segment)`` pairs.
    """
    out: list[tuple[int, str]] = []
    run: list[str] = []
    run_start = 0
    for i, ch in enumerate(seq):
        base = _UPPER.get(ch)
        if base is None:
            if len(run) >= min_chunk_length:
                out.append((run_start, "".join(run)))
            run = []
        else:
            if not run:
                run_start = i
            run.append(base)
    if len(run) >= min_chunk_length:
        out.append((run_start, "".join(run)))
    return out


def chunk_segment(
    segment: str,
    chunk_length: int,
    overlap_fraction: float,
    min_chunk_length: int = DEFAULT_MIN_CHUNK_LENGTH,
    source_id: str = "",
    origin: int = 0,
) -> list[Chunk]:
    """Cut a valid segment into fixed-length windows with fractional overlap.

    stride = floor(chunk_length * (1 - overlap_fraction)), at least 1.
    A trailing shorter window is kept only if it is at least
    ``min_chunk_length`` long and extends past the previous window.

    Raises:
        InvalidChunkConfigError: chunk_length < 2 or overlap outside [0, 1).
    """
    if chunk_length < 2:
        raise InvalidChunkConfigError(f"chunk_length must be >= 2, got {chunk_length}")
    if not (0.0 <= overlap_fraction < 1.0):
        raise InvalidChunkConfigError(
            f"overlap_fraction must be in [0, 1), got {overlap_fraction}"
        )
    if min_chunk_length < 1:
        raise InvalidChunkConfigError(
            f"min_chunk_length must be >= 1, got {min_chunk_length}"
        )

    stride = max(1, int(chunk_length * (1.0 - overlap_fraction)))
    chunks: list[Chunk] = []
    prev_end = -1
    start = 0
    n = len(segment)
    while start < n:
        piece = segment[start : start + chunk_length]
        end = start + len(piece)
        if len(piece) == chunk_length:
            chunks.append(Chunk(source_id=source_id, start=origin + start, seq=piece))
            prev_end = end
        else:
            # Trailing partial window: must add new bases and clear the floor.
            if len(piece) >= min_chunk_length and end > prev_end:
                chunks.append(Chunk(source_id=source_id, start=origin + start, seq=piece))
            break
        start += stride
    return chunks


def chunk_record(
    record: SequenceRecord,
    chunk_length: int,
    overlap_fraction: float,
    min_chunk_length: int = DEFAULT_MIN_CHUNK_LENGTH,
) -> list[Chunk]:
    """Filter a record into valid segments and chunk each one."""
    chunks: list[Chunk] = []
    for offset, segment in extract_valid_segments(record.seq, min_chunk_length):
        chunks.extend(
            chunk_segment(
                segment,
                chunk_length,
                overlap_fraction,
                min_chunk_length,
                source_id=record.id,
                origin=offset,
            )
        )
    return chunks


def write_chunks(chunks: Iterable[Chunk], handle: IO[str]) -> int:
    """Emit chunks as ``source_id<TAB>start<TAB>seq`` lines; returns row count."""
    n = 0
    for c in chunks:
        handle.write(f"{c.source_id}\t{c.start}\t{c.seq}\n")
        n += 1
    return n


def read_chunks(handle: Iterable[str]) -> Iterator[Chunk]:
    """Parse a chunk corpus written by ``write_chunks``."""
    for lineno, line in enumerate(handle, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"chunk corpus line {lineno}: expected 3 fields, got {len(fields)}")
        yield Chunk(source_id=fields[0], start=int(fields[1]), seq=fields[2])


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-motif corpus description.

    Positive-class sequences carry one motif (chosen uniformly from
    ``motifs``) overwritten at a uniform random position on an i.i.d.
    uniform ACGT background; negatives are pure background.
    """

    seq_length: int
    n_sequences: int
    motifs: Sequence[str] = ("TATAAT",)
    pos_fraction: float = 0.5
    p_plant: float = 1.0


def generate_synthetic_corpus(
    spec: SyntheticSpec, seed: int
) -> tuple[list[SequenceRecord], list[int]]:
    """Generate a labeled planted-motif corpus, deterministic per seed.

    Raises:
        MotifTooLongError: any motif longer than ``spec.seq_length``.
    """
    for m in spec.motifs:
        if len(m) > spec.seq_length:
            raise MotifTooLongError(
                f"motif length {len(m)} exceeds sequence length {spec.seq_length}"
            )
        if any(ch not in VALID_BASES for ch in m):
            raise ValueError(f"motif {m!r} contains non-ACGT characters")

    rng = np.random.default_rng(seed)
    bases = np.frombuffer(VALID_BASES.encode(), dtype=np.uint8)
    records: list[SequenceRecord] = []
    labels: list[int] = []
    for i in range(spec.n_sequences):
        label = int(rng.random() < spec.pos_fraction)
        arr = bases[rng.integers(0, 4, size=spec.seq_length)]
        if label and rng.random() < spec.p_plant:
            motif = spec.motifs[int(rng.integers(0, len(spec.motifs)))]
            pos = int(rng.integers(0, spec.seq_length - len(motif) + 1))
            arr[pos : pos + len(motif)] = np.frombuffer(motif.encode(), dtype=np.uint8)
        records.append(SequenceRecord(id=f"syn{i:06d}", seq=arr.tobytes().decode("ascii")))
        labels.append(label)
    return records, labels
