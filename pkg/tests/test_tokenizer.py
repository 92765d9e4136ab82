import io

import numpy as np
import pytest

from genojepa import _bpe_pure
from genojepa import tokenizer as tok

try:
    from genojepa import _bpe_core
    BACKENDS = [_bpe_pure, _bpe_core]
except ImportError:  # extension not built
    _bpe_core = None
    BACKENDS = [_bpe_pure]


def random_acgt(rng, n):
    return "".join("ACGT"[i] for i in rng.integers(0, 4, n))


class TestTrainBpe:
    def test_only_pair_merges_first(self):
        model = tok.train_bpe(["AAAA"] * 20, vocab_size=10)
        assert model.merges[0][:2] == (tok.N_RESERVED - 4, tok.N_RESERVED - 4)
        assert model.id_to_str[model.merges[0][2]] == "AA"

    def test_minimal_vocab_has_no_merges(self):
        model = tok.train_bpe(["ACGTACGT"] * 10, vocab_size=9)
        assert model.merges == []
        assert model.id_to_str == list(tok.SPECIAL_TOKENS) + list(tok.BASE_TOKENS)

    def test_frequency_tie_broken_lexicographically(self):
        # "AC" and "AG" pairs occur equally often; "AC" < "AG" merges first.
        model = tok.train_bpe(["ACTAGT"] * 10, vocab_size=10)
        a, _, new = model.merges[0]
        assert model.id_to_str[new] == "AC"

    def test_vocab_too_small(self):
        with pytest.raises(tok.VocabTooSmallError):
            tok.train_bpe(["ACGT"], vocab_size=8)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            tok.train_bpe([], vocab_size=16)

    def test_stops_when_no_pair_repeats(self):
        model = tok.train_bpe(["AC"], vocab_size=100)
        assert model.merges == []

    def test_special_ids_reserved(self):
        model = tok.train_bpe(["ACGTACGT"] * 4, vocab_size=12)
        assert (model.pad_id, model.cls_id, model.eos_id, model.mask_id, model.unk_id) == (
            0, 1, 2, 3, 4,
        )
        assert all(set(s) <= set("ACGT") for s in model.id_to_str[5:])
        assert list(model.vocab.values()) == list(range(model.vocab_size))

    @pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.BACKEND_NAME)
    def test_backends_match_reference(self, backend):
        rng = np.random.default_rng(42)
        corpus = [random_acgt(rng, int(rng.integers(20, 120))) for _ in range(60)]
        ref = tok.train_bpe(corpus, 48, backend=_bpe_pure)
        got = tok.train_bpe(corpus, 48, backend=backend)
        assert got.merges == ref.merges
        assert got.id_to_str == ref.id_to_str


@pytest.fixture(scope="module")
def char_model():
    return tok.train_bpe(["ACGT"], vocab_size=9)


class TestEncodeDecode:
    def test_mlm_prepends_cls(self, char_model):
        sample = tok.encode(char_model, "ACGT", "mlm", 16)
        assert sample.ids == [tok.CLS_ID, 5, 6, 7, 8]
        assert sample.offsets[0] == (0, 0)

    def test_ntp_appends_eos(self, char_model):
        sample = tok.encode(char_model, "ACGT", "ntp", 16)
        assert sample.ids == [5, 6, 7, 8, tok.EOS_ID]
        assert sample.offsets[-1] == (4, 4)

    def test_invalid_base(self, char_model):
        with pytest.raises(tok.InvalidBaseError):
            tok.encode(char_model, "ACGU", "mlm", 16)

    def test_decode_skips_specials(self, char_model):
        assert tok.decode(char_model, [tok.CLS_ID, 5, 6]) == "AC"
        assert tok.decode(char_model, []) == ""

    def test_decode_unknown_id(self, char_model):
        with pytest.raises(tok.UnknownIdError):
            tok.decode(char_model, [char_model.vocab_size])

    def test_central_truncation_keeps_special(self, char_model):
        sample = tok.encode(char_model, "A" * 10, "mlm", max_tokens=4)
        assert len(sample.ids) == 4
        assert sample.ids[0] == tok.CLS_ID

    def test_truncation_drops_right_first(self, char_model):
        # 5 content tokens, budget 4: one drop, taken from the right.
        sample = tok.encode(char_model, "ACGTA", "mlm", max_tokens=5)
        assert tok.decode(char_model, sample.ids) == "ACGT"
        # budget 3: two drops, one each side.
        sample = tok.encode(char_model, "ACGTA", "mlm", max_tokens=4)
        assert tok.decode(char_model, sample.ids) == "CGT"

    @pytest.mark.parametrize("objective", ["mlm", "ntp"])
    def test_roundtrip_without_truncation(self, objective):
        rng = np.random.default_rng(5)
        corpus = [random_acgt(rng, int(rng.integers(30, 90))) for _ in range(40)]
        model = tok.train_bpe(corpus, 64)
        for _ in range(50):
            text = random_acgt(rng, int(rng.integers(1, 120)))
            sample = tok.encode(model, text, objective, max_tokens=256)
            assert tok.decode(model, sample.ids) == text

    def test_offsets_tile_input(self):
        rng = np.random.default_rng(6)
        corpus = [random_acgt(rng, 80) for _ in range(30)]
        model = tok.train_bpe(corpus, 40)
        text = random_acgt(rng, 200)
        sample = tok.encode(model, text, "mlm", max_tokens=512)
        content = [o for o in sample.offsets if o[0] != o[1]]
        assert content[0][0] == 0 and content[-1][1] == len(text)
        assert all(a[1] == b[0] for a, b in zip(content, content[1:]))
        assert "".join(text[s:e] for s, e in content) == text

    @pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.BACKEND_NAME)
    def test_encode_backends_agree(self, backend):
        rng = np.random.default_rng(7)
        corpus = [random_acgt(rng, 60) for _ in range(40)]
        model = tok.train_bpe(corpus, 48)
        for _ in range(30):
            text = random_acgt(rng, int(rng.integers(1, 150)))
            ref = tok.encode(model, text, "mlm", 512, backend=_bpe_pure)
            got = tok.encode(model, text, "mlm", 512, backend=backend)
            assert got == ref


class TestSerialization:
    def test_roundtrip(self):
        rng = np.random.default_rng(8)
        corpus = [random_acgt(rng, 70) for _ in range(30)]
        model = tok.train_bpe(corpus, 32)
        buf = io.StringIO()
        tok.save_tokenizer(model, buf)
        loaded = tok.load_tokenizer(io.StringIO(buf.getvalue()))
        assert loaded.id_to_str == model.id_to_str
        assert loaded.merges == model.merges

    def test_training_is_deterministic(self):
        rng = np.random.default_rng(9)
        corpus = [random_acgt(rng, 50) for _ in range(25)]
        out = []
        for _ in range(2):
            buf = io.StringIO()
            tok.save_tokenizer(tok.train_bpe(corpus, 40, seed=1), buf)
            out.append(buf.getvalue())
        assert out[0] == out[1]

    def test_header_and_specials_format(self):
        model = tok.train_bpe(["AAAA"] * 4, vocab_size=10)
        buf = io.StringIO()
        tok.save_tokenizer(model, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "bpe-v1 10"
        assert lines[1] == "A\tA"
        assert lines[-5:] == ["[PAD]\t0", "[CLS]\t1", "[EOS]\t2", "[MASK]\t3", "[UNK]\t4"]

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            tok.load_tokenizer(io.StringIO("not-a-tokenizer 12\n"))
