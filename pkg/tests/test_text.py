"""Vocabulary construction, encode/decode round trips, padded batching."""

import numpy as np
import pytest

from signrep import text
from signrep.text import BOS, EOS, PAD, UNK


class TestBuildVocab:
    def test_by_construction_rule(self):
        vocab = text.build_vocab(["a b", "a"], min_freq=1)
        assert len(vocab) == 6
        assert vocab.id_of("a") == 4
        assert vocab.id_of("b") == 5

    def test_min_freq_excludes(self):
        vocab = text.build_vocab(["a b", "a"], min_freq=2)
        assert "b" not in vocab
        assert text.encode("b", vocab) == [BOS, UNK, EOS]

    def test_deterministic(self):
        corpus = ["the cat sat", "the dog ran", "a cat ran"]
        v1 = text.build_vocab(corpus)
        v2 = text.build_vocab(corpus)
        assert v1.id_to_token == v2.id_to_token

    def test_frequency_then_lexicographic_order(self):
        vocab = text.build_vocab(["b b c a a z"])
        # a and b tie at 2 -> alphabetical; then c and z tie at 1
        assert [vocab.token_of(i) for i in range(4, 8)] == ["a", "b", "c", "z"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            text.build_vocab([])


class TestEncodeDecode:
    def test_empty_sentence(self):
        vocab = text.build_vocab(["a"])
        assert text.encode("", vocab) == [BOS, EOS]
        assert text.decode([BOS, EOS], vocab) == ""

    def test_round_trip_identity(self):
        vocab = text.build_vocab(["the cat sat on the mat"])
        sentence = "the cat sat"
        assert text.decode(text.encode(sentence, vocab), vocab) == sentence

    def test_oov_becomes_unk(self):
        vocab = text.build_vocab(["a b"])
        ids = text.encode("a zzz b", vocab)
        assert ids[2] == UNK

    def test_punctuation_split_and_lowercase(self):
        assert text.tokenize("Hello, world!") == ["hello", ",", "world", "!"]

    def test_decode_stops_at_eos(self):
        vocab = text.build_vocab(["a b"])
        a = vocab.id_of("a")
        assert text.decode([BOS, a, EOS, a, a], vocab) == "a"


class TestPadBatch:
    def test_pad_to_longest(self):
        ids, mask = text.pad_batch([[BOS, 4, EOS], [BOS, 4, 5, 4, EOS]])
        assert ids.shape == (2, 5)
        np.testing.assert_array_equal(mask.sum(axis=1), [3, 5])
        assert (ids[0, 3:] == PAD).all()

    def test_single_sequence_unpadded(self):
        ids, mask = text.pad_batch([[BOS, EOS]])
        assert ids.shape == (1, 2)
        assert mask.all()

    def test_equal_lengths_all_true(self):
        _, mask = text.pad_batch([[1, 2], [3, 4], [5, 6]])
        assert mask.all()


class TestVocabFile:
    def test_save_load_round_trip(self, tmp_path):
        vocab = text.build_vocab(["regen im norden", "regen am abend"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = text.Vocabulary.load(path)
        assert loaded.id_to_token == vocab.id_to_token
