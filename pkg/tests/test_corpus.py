import gzip
import json
from itertools import islice

import numpy as np
import pytest

from modmoe.corpus import (LANGS, CorpusError, Document, balance_corpus, by_language, corpus_stats, load_corpus,
                           load_desk_corpus, make_batches, pack_sequences, save_corpus, split_corpus)
from modmoe.tokenizer import EOS_ID, Tokenizer

BYTES = Tokenizer()   # one token per byte


def _write(path, lines):
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return path


def test_load_two_documents_in_order(tmp_path):
    p = _write(tmp_path / "c.jsonl", ['{"text":"hello","lang":"en"}', '{"text":"def f(): pass","lang":"py"}'])
    assert load_corpus(p) == [Document("hello", "en"), Document("def f(): pass", "py")]


def test_empty_file(tmp_path):
    assert load_corpus(_write(tmp_path / "e.jsonl", [])) == []


def test_unknown_language_names_value_and_line(tmp_path):
    p = _write(tmp_path / "c.jsonl", ['{"text":"hola","lang":"es"}'])
    with pytest.raises(CorpusError, match="unknown language 'es' at line 1"):
        load_corpus(p)


def test_malformed_line_names_line_number(tmp_path):
    p = _write(tmp_path / "c.jsonl", ['{"text":"a","lang":"en"}', '{"text": oops}'])
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(p)
    p = _write(tmp_path / "d.jsonl", ['{"text":"a","lang":"en","extra":1}'])
    with pytest.raises(CorpusError, match="line 1"):
        load_corpus(p)


def test_line_separator_inside_text_is_not_a_record_break(tmp_path):
    docs = [Document("a b", "en"), Document("x", "fr")]
    save_corpus(docs, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == docs


def test_gzip_roundtrip(tmp_path):
    p = tmp_path / "c.jsonl.gz"
    with gzip.open(p, "wt", encoding="utf-8") as f:
        f.write(json.dumps({"text": "Grüße", "lang": "de"}) + "\n")
    assert load_corpus(p) == [Document("Grüße", "de")]


def test_desk_corpus_is_bundled():
    docs = load_desk_corpus(max_docs_per_lang=5)
    assert [d.lang for d in docs] == [l for l in LANGS for _ in range(5)]


def test_stats_csv(small_docs, small_tok):
    stats = corpus_stats(small_docs, small_tok)
    lines = stats.to_csv().splitlines()
    assert lines[0] == "lang,documents,tokens"
    assert [l.split(",")[0] for l in lines[1:]] == list(LANGS)
    assert stats.total_documents == len(small_docs)
    assert stats.total_tokens == sum(stats.tokens.values())


def _synthetic(counts):
    # ten-byte documents, so token counts are exact multiples of ten
    return [Document(f"{lang}{i:08d}", lang) for lang, n in counts.items() for i in range(n // 10)]


def test_balance_caps_at_smallest_language():
    docs = _synthetic({"en": 1000, "fr": 500, "de": 500, "py": 500})
    out = corpus_stats(balance_corpus(docs, BYTES, seed=1), BYTES)
    assert out.tokens == {"en": 500, "fr": 500, "de": 500, "py": 500}


def test_balance_real_corpus_within_one_percent_and_idempotent(small_tok):
    docs = load_desk_corpus(max_docs_per_lang=1500)
    once = balance_corpus(docs, small_tok, seed=3)
    tokens = corpus_stats(once, small_tok).tokens
    low = min(tokens.values())
    assert all(t <= low * 1.01 for t in tokens.values())
    twice = corpus_stats(balance_corpus(once, small_tok, seed=3), small_tok).tokens
    assert all(abs(twice[l] - tokens[l]) <= 0.01 * tokens[l] for l in LANGS)


def test_balance_preserves_within_language_order():
    docs = _synthetic({"en": 1000, "fr": 300, "de": 300, "py": 300})
    out = [d for d in balance_corpus(docs, BYTES, seed=2) if d.lang == "en"]
    positions = [docs.index(d) for d in out]
    assert positions == sorted(positions)


def test_balance_missing_language():
    docs = _synthetic({"en": 100, "fr": 100, "de": 100})
    with pytest.raises(CorpusError, match="missing language: py"):
        balance_corpus(docs, BYTES)


def test_split_is_disjoint_and_five_percent(small_docs):
    train, val = split_corpus(small_docs, 0.05, seed=4)
    assert len(train) + len(val) == len(small_docs)
    assert not set(train) & set(val)
    for lang, group in by_language(val).items():
        assert len(group) == 15
    assert split_corpus(small_docs, 0.05, seed=4) == (train, val)


def test_pack_inserts_separators_and_pads():
    docs = [Document("ab", "en"), Document("cde", "en")]
    toks, mask = pack_sequences(docs, BYTES, 4)
    flat = [3 + ord(c) for c in "ab"] + [EOS_ID] + [3 + ord(c) for c in "cde"] + [EOS_ID]
    assert toks.shape == (2, 4)
    assert toks[0].tolist() == flat[:4]
    assert toks[1].tolist() == flat[4:] + [EOS_ID]
    assert mask[1].tolist() == [True, True, True, False]


def test_pack_shorter_than_window_errors():
    with pytest.raises(CorpusError, match="shorter than one context window"):
        pack_sequences([Document("a", "en")], BYTES, 16)


def test_per_language_batches_have_one_label(small_split, small_tok):
    docs = [d for d in small_split[0] if d.lang in ("en", "py")]
    for b in make_batches(docs, small_tok, 32, 4, mode="per_language", seed=0):
        assert len(set(b.langs)) == 1
        assert b.tokens.max() < small_tok.vocab_size
        small_tok.decode(b.tokens[b.mask])


def test_mixed_batches_are_balanced_in_expectation(small_split, small_tok):
    docs = balance_corpus(small_split[0], small_tok, seed=0)
    stream = make_batches(docs, small_tok, 32, 8, mode="mixed", seed=5, epochs=None)
    share = dict.fromkeys(LANGS, 0.0)
    for b in islice(stream, 400):
        for lang in b.langs:
            share[lang] += 1 / len(b.langs)
    assert all(abs(v - 100) <= 10 for v in share.values()), share


def test_batch_stream_is_reproducible(small_split, small_tok):
    def stream(seed):
        return b"".join(b.tokens.tobytes() + b.mask.tobytes()
                        for b in make_batches(small_split[0], small_tok, 32, 4, "mixed", seed))
    assert stream(1) == stream(1)
    assert stream(1) != stream(2)


def test_batch_argument_errors(small_split, small_tok):
    with pytest.raises(CorpusError):
        next(make_batches(small_split[0], small_tok, 32, 0))
    with pytest.raises(CorpusError):
        next(make_batches(small_split[0], small_tok, 32, 4, mode="bogus"))
    with pytest.raises(CorpusError):
        pack_sequences(small_split[0], small_tok, 1)


def test_drop_last_yields_full_batches(small_split, small_tok):
    docs = [d for d in small_split[0] if d.lang == "fr"]
    sizes = {b.tokens.shape[0] for b in make_batches(docs, small_tok, 32, 7, drop_last=True)}
    assert sizes == {7}
    assert np.issubdtype(next(make_batches(docs, small_tok, 32, 7)).tokens.dtype, np.integer)
