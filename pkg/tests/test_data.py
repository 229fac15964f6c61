import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2d.data import (BOS, EOS, PAD, UNK, ParallelCorpus, Vocab, batchify, detokenize,
                      digit_map_bijection, load_parallel_tsv, synth_task, tokenize)
from a2d.errors import InputError


def test_tsv_single_pair(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("a b\tc d\n", encoding="utf-8")
    corpus = load_parallel_tsv(p)
    assert corpus.pairs == [(["a", "b"], ["c", "d"])]


def test_tsv_two_tabs_names_line(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("a\tb\nx\ty\tz\nc\td\n", encoding="utf-8")
    with pytest.raises(InputError, match="2"):
        load_parallel_tsv(p)


def test_tsv_missing_side(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("a\tb\n\tq\n", encoding="utf-8")
    with pytest.raises(InputError, match="line.* 2"):
        load_parallel_tsv(p)


def test_tsv_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.tsv"
    p.write_text("", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        corpus = load_parallel_tsv(p)
    assert len(corpus) == 0
    assert "empty" in caplog.text


def test_tsv_unreadable(tmp_path):
    with pytest.raises(OSError):
        load_parallel_tsv(tmp_path / "missing.tsv")


def test_corpus_rejects_empty_side():
    with pytest.raises(InputError):
        ParallelCorpus([(["a"], [])])


def ids(corpus):
    return [([int(x) for x in s], [int(x) for x in t]) for s, t in corpus.pairs]


def test_copy_and_reverse():
    for s, t in ids(synth_task("copy", 20, 2, 6, 12, seed=0)):
        assert s == t
    for s, t in ids(synth_task("reverse", 20, 2, 6, 12, seed=0)):
        assert t == s[::-1]


def test_digit_map_applies_bijection():
    sigma = digit_map_bijection(12, seed=3)
    assert sorted(sigma) == sorted(sigma.values()) == list(range(4, 12))
    inverse = {v: k for k, v in sigma.items()}
    for s, t in ids(synth_task("digit_map", 30, 1, 5, 12, seed=9, mapping_seed=3)):
        assert t == [sigma[x] for x in s]
        assert [inverse[x] for x in t] == s


def test_synth_is_deterministic_and_in_range():
    a = synth_task("digit_map", 50, 3, 8, 14, seed=5)
    b = synth_task("digit_map", 50, 3, 8, 14, seed=5)
    assert a.pairs == b.pairs
    for s, t in ids(a):
        assert 3 <= len(s) <= 8
        assert min(s + t) >= 4 and max(s + t) < 14
    assert synth_task("copy", 50, 3, 8, 14, seed=6).pairs != synth_task("copy", 50, 3, 8, 14, seed=5).pairs


def test_synth_rejects_bad_args():
    with pytest.raises(InputError):
        synth_task("shuffle", 5, 1, 2, 10, seed=0)
    with pytest.raises(InputError):
        synth_task("copy", 5, 1, 2, 4, seed=0)
    with pytest.raises(InputError):
        synth_task("copy", 5, 3, 2, 10, seed=0)


def test_batch_padding_and_masks():
    vocab = Vocab(["a", "b", "c", "d", "e"])
    corpus = ParallelCorpus([(["a", "b", "c"], ["d"]), (["a", "b", "c", "d", "e"], ["e", "a"])])
    (batch,) = list(batchify(corpus, 8, vocab))
    assert batch.src_ids.shape == (2, 5)
    assert batch.src_pad_mask[0].astype(int).tolist() == [1, 1, 1, 0, 0]
    assert batch.tgt_in_ids.shape == batch.tgt_out_ids.shape == (2, 3)


def test_shift_contract():
    vocab = Vocab(["x", "y"])
    (batch,) = list(batchify(ParallelCorpus([(["x"], ["x", "y"])]), 1, vocab))
    x, y = vocab.stoi["x"], vocab.stoi["y"]
    assert batch.tgt_in_ids[0].tolist() == [BOS, x, y]
    assert batch.tgt_out_ids[0].tolist() == [x, y, EOS]


def test_batch_count():
    corpus = synth_task("copy", 10, 1, 4, 9, seed=0)
    vocab = Vocab.for_synth(9)
    assert len(list(batchify(corpus, 64, vocab))) == 1
    assert [len(b) for b in batchify(corpus, 4, vocab)] == [4, 4, 2]


def test_batchify_errors():
    vocab = Vocab.for_synth(9)
    with pytest.raises(InputError):
        list(batchify(ParallelCorpus([]), 4, vocab))
    corpus = synth_task("copy", 3, 6, 6, 9, seed=0)
    with pytest.raises(InputError, match="pair 0"):
        list(batchify(corpus, 4, vocab, max_len=6))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 7))
def test_mask_pad_duality_and_permutation(seed, batch_size):
    corpus = synth_task("reverse", 17, 1, 6, 10, seed=seed)
    vocab = Vocab.for_synth(10)
    seen = Counter()
    for batch in batchify(corpus, batch_size, vocab, shuffle_seed=seed):
        np.testing.assert_array_equal(batch.src_pad_mask, batch.src_ids != PAD)
        np.testing.assert_array_equal(batch.tgt_pad_mask, batch.tgt_out_ids != PAD)
        for src, tout in zip(batch.src_ids, batch.tgt_out_ids):
            s = tuple(int(x) for x in src if x != PAD)
            t = tuple(int(x) for x in tout if x not in (PAD, EOS))
            seen[(s, t)] += 1
    assert seen == Counter((tuple(s), tuple(t)) for s, t in ids(corpus))


def test_shuffle_is_deterministic():
    corpus = synth_task("copy", 30, 1, 5, 10, seed=1)
    vocab = Vocab.for_synth(10)
    a = [b.src_ids.tolist() for b in batchify(corpus, 8, vocab, shuffle_seed=4)]
    b = [b.src_ids.tolist() for b in batchify(corpus, 8, vocab, shuffle_seed=4)]
    c = [b.src_ids.tolist() for b in batchify(corpus, 8, vocab, shuffle_seed=5)]
    assert a == b != c


@given(st.lists(st.text(alphabet="ab \t\n", max_size=8), max_size=6))
def test_tokenize_detokenize_roundtrip(parts):
    text = " ".join(parts)
    normalized = " ".join(text.split())
    assert detokenize(tokenize(text)) == normalized
    assert tokenize(detokenize(tokenize(text))) == tokenize(text)


def test_vocab_roundtrip(tmp_path):
    vocab = Vocab(["hello", "world", "ü"])
    vocab.save(tmp_path / "v.txt")
    again = Vocab.load(tmp_path / "v.txt")
    assert again == vocab
    assert again.stoi["hello"] == 4
    assert vocab.encode(["world", "zzz"]) == [5, UNK]
    assert vocab.decode([BOS, 4, 5, EOS, 6]) == ["hello", "world"]


def test_vocab_rejects_duplicates():
    with pytest.raises(InputError):
        Vocab(["a", "a"])


def test_synth_vocab_maps_token_to_its_id():
    vocab = Vocab.for_synth(9)
    assert len(vocab) == 9
    assert all(vocab.stoi[str(i)] == i for i in range(4, 9))
