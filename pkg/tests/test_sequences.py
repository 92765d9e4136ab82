import io

import numpy as np
import pytest

from genojepa import sequences as seqs


class TestParseFasta:
    def test_wrapped_lines_concatenate(self):
        recs = seqs.parse_fasta(io.StringIO(">a\nACGT\nACGT\n"))
        assert recs == [seqs.SequenceRecord(id="a", seq="ACGTACGT")]

    def test_header_splits_at_whitespace(self):
        recs = seqs.parse_fasta(io.StringIO(">a desc here\nACGT\n>b\nTT\n"))
        assert [r.id for r in recs] == ["a", "b"]
        assert [r.seq for r in recs] == ["ACGT", "TT"]

    def test_missing_header_is_malformed(self):
        with pytest.raises(seqs.MalformedFastaError):
            seqs.parse_fasta(io.StringIO("ACGT\n"))

    def test_header_without_sequence(self):
        with pytest.raises(seqs.EmptyRecordError):
            seqs.parse_fasta(io.StringIO(">a\n>b\nACGT\n"))

    def test_bytes_and_blank_lines(self):
        recs = seqs.parse_fasta(io.BytesIO(b"\n>x\nAC\n\nGT\n"))
        assert recs == [seqs.SequenceRecord(id="x", seq="ACGT")]

    def test_case_preserved(self):
        recs = seqs.parse_fasta(io.StringIO(">a\nacGTn\n"))
        assert recs[0].seq == "acGTn"

    def test_roundtrip_random_records(self):
        rng = np.random.default_rng(3)
        alphabet = "ACGTNacgtn"
        records = [
            seqs.SequenceRecord(
                id=f"rec{i}",
                seq="".join(alphabet[j] for j in rng.integers(0, len(alphabet), 200)),
            )
            for i in range(10)
        ]
        buf = io.StringIO()
        seqs.write_fasta(records, buf, width=37)
        assert seqs.parse_fasta(io.StringIO(buf.getvalue())) == records


class TestExtractValidSegments:
    def test_split_at_n(self):
        assert seqs.extract_valid_segments("ACGTNNACG", 2) == [(0, "ACGT"), (6, "ACG")]

    def test_case_folding(self):
        assert seqs.extract_valid_segments("acgt", 2) == [(0, "ACGT")]

    def test_all_invalid(self):
        assert seqs.extract_valid_segments("NNNN", 1) == []

    def test_short_runs_dropped(self):
        assert seqs.extract_valid_segments("ACNACGT", 3) == [(3, "ACGT")]

    def test_offsets_recover_substrings(self):
        rng = np.random.default_rng(0)
        alphabet = "ACGTNRY"
        raw = "".join(alphabet[j] for j in rng.integers(0, len(alphabet), 500))
        for start, segment in seqs.extract_valid_segments(raw, 1):
            assert raw[start : start + len(segment)].upper() == segment


class TestChunkSegment:
    def test_half_overlap_starts(self):
        chunks = seqs.chunk_segment("ACGTACGTAC", 4, 0.5, min_chunk_length=2)
        assert [(c.start, len(c.seq)) for c in chunks] == [(0, 4), (2, 4), (4, 4), (6, 4)]

    def test_no_overlap_keeps_short_tail(self):
        chunks = seqs.chunk_segment("ACGTACGTAC", 4, 0.0, min_chunk_length=2)
        assert [(c.start, c.seq) for c in chunks] == [(0, "ACGT"), (4, "ACGT"), (8, "AC")]

    def test_tail_dropped_when_below_minimum(self):
        chunks = seqs.chunk_segment("ACGTACGTAC", 4, 0.0, min_chunk_length=3)
        assert [c.start for c in chunks] == [0, 4]

    def test_full_overlap_rejected(self):
        with pytest.raises(seqs.InvalidChunkConfigError):
            seqs.chunk_segment("ACGT", 4, 1.0)

    def test_tiny_chunk_length_rejected(self):
        with pytest.raises(seqs.InvalidChunkConfigError):
            seqs.chunk_segment("ACGT", 1, 0.0)

    def test_chunks_are_substrings_at_offset(self):
        rng = np.random.default_rng(1)
        segment = "".join("ACGT"[j] for j in rng.integers(0, 4, 300))
        for c in seqs.chunk_segment(segment, 48, 0.5, min_chunk_length=16, origin=0):
            assert segment[c.start : c.start + len(c.seq)] == c.seq

    def test_half_overlap_shares_half_window(self):
        rng = np.random.default_rng(2)
        segment = "".join("ACGT"[j] for j in rng.integers(0, 4, 256))
        chunks = seqs.chunk_segment(segment, 32, 0.5, min_chunk_length=16)
        full = [c for c in chunks if len(c.seq) == 32]
        for a, b in zip(full, full[1:]):
            assert b.start - a.start == 16
            assert a.seq[16:] == b.seq[:16]


class TestSyntheticCorpus:
    def test_positives_contain_motif(self):
        spec = seqs.SyntheticSpec(seq_length=100, n_sequences=10, motifs=("TATAAT",))
        records, labels = seqs.generate_synthetic_corpus(spec, 0)
        for rec, lab in zip(records, labels):
            if lab == 1:
                assert "TATAAT" in rec.seq
            assert len(rec.seq) == 100

    def test_deterministic_per_seed(self):
        spec = seqs.SyntheticSpec(seq_length=64, n_sequences=20)
        a = seqs.generate_synthetic_corpus(spec, 9)
        b = seqs.generate_synthetic_corpus(spec, 9)
        assert a == b
        c = seqs.generate_synthetic_corpus(spec, 10)
        assert a != c

    def test_motif_too_long(self):
        spec = seqs.SyntheticSpec(seq_length=100, n_sequences=1, motifs=("A" * 101,))
        with pytest.raises(seqs.MotifTooLongError):
            seqs.generate_synthetic_corpus(spec, 0)

    def test_negative_base_frequencies_uniform(self):
        # >= 1e5 negative bases; each base frequency within 3 standard errors.
        spec = seqs.SyntheticSpec(seq_length=250, n_sequences=900, pos_fraction=0.4)
        records, labels = seqs.generate_synthetic_corpus(spec, 123)
        negatives = "".join(r.seq for r, l in zip(records, labels) if l == 0)
        n = len(negatives)
        assert n >= 10**5
        se = (0.25 * 0.75 / n) ** 0.5
        for base in "ACGT":
            freq = negatives.count(base) / n
            assert abs(freq - 0.25) <= 3 * se


def test_chunk_tsv_roundtrip(tmp_path):
    chunks = [
        seqs.Chunk(source_id="chr1", start=0, seq="ACGTACGT"),
        seqs.Chunk(source_id="chr1", start=4, seq="ACGTTTTT"),
    ]
    path = tmp_path / "c.tsv"
    with path.open("w") as fh:
        assert seqs.write_chunks(chunks, fh) == 2
    with path.open() as fh:
        assert list(seqs.read_chunks(fh)) == chunks
