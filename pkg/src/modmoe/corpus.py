"""Language-tagged corpora: loading, token-count balancing, splits and batches."""
from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics.rng import Rng, derive_seed
from .tokenizer import EOS_ID, Tokenizer

LANGS = ("en", "fr", "de", "py")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    text: str
    lang: str

    def __post_init__(self):
        if self.lang not in LANGS:
            raise CorpusError(f"unknown language {self.lang!r}")
        if not self.text.strip():
            raise CorpusError("document text is empty")


@dataclass
class CorpusStats:
    documents: dict[str, int]
    tokens: dict[str, int]

    @property
    def total_documents(self) -> int:
        return sum(self.documents.values())

    @property
    def total_tokens(self) -> int:
        return sum(self.tokens.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lang", "documents", "tokens"])
        for lang in LANGS:
            w.writerow([lang, self.documents.get(lang, 0), self.tokens.get(lang, 0)])
        return buf.getvalue()


@dataclass
class Batch:
    tokens: np.ndarray   # int64 [batch, context_len]
    langs: list[str]     # one label per row
    mask: np.ndarray     # bool [batch, context_len]; False marks padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


# ---------------------------------------------------------------------------
# loading


def _parse_lines(lines: Iterable[str]) -> list[Document]:
    docs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            raise CorpusError(f"malformed record at line {lineno}: empty line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"malformed record at line {lineno}: {e.msg}") from None
        if not isinstance(rec, dict) or set(rec) != {"text", "lang"} or not isinstance(rec["text"], str):
            raise CorpusError(f"malformed record at line {lineno}: expected keys 'text' and 'lang'")
        if rec["lang"] not in LANGS:
            raise CorpusError(f"unknown language {rec['lang']!r} at line {lineno}")
        if not rec["text"].strip():
            raise CorpusError(f"malformed record at line {lineno}: empty text")
        docs.append(Document(rec["text"], rec["lang"]))
    return docs


def load_corpus(path) -> list[Document]:
    """Read a JSON Lines corpus (optionally gzip-compressed)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8", newline="") as f:
        content = f.read()
    # split on "\n" only: str.splitlines would also break on U+2028 inside strings
    lines = content.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return _parse_lines(line[:-1] if line.endswith("\r") else line for line in lines)


def save_corpus(docs: Sequence[Document], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for d in docs:
            f.write(json.dumps({"text": d.text, "lang": d.lang}, ensure_ascii=False) + "\n")


def load_desk_corpus(langs: Sequence[str] = LANGS, max_docs_per_lang: int | None = None) -> list[Document]:
    """The bundled desk corpora, in language order then file order."""
    docs: list[Document] = []
    root = resources.files("modmoe") / "data"
    for lang in langs:
        with resources.as_file(root / f"{lang}.jsonl.gz") as p:
            part = load_corpus(p)
        docs.extend(part[:max_docs_per_lang] if max_docs_per_lang else part)
    return docs


def by_language(docs: Iterable[Document]) -> dict[str, list[Document]]:
    out: dict[str, list[Document]] = {lang: [] for lang in LANGS}
    for d in docs:
        out[d.lang].append(d)
    return out


# ---------------------------------------------------------------------------
# statistics, balancing and splits


def corpus_stats(docs: Sequence[Document], tokenizer: Tokenizer) -> CorpusStats:
    groups = by_language(docs)
    return CorpusStats(
        documents={lang: len(g) for lang, g in groups.items()},
        tokens={lang: sum(len(tokenizer.encode(d.text)) for d in g) for lang, g in groups.items()},
    )


def balance_corpus(docs: Sequence[Document], tokenizer: Tokenizer, seed: int = 0) -> list[Document]:
    """Cap every language at the smallest language's token count.

    Each language's documents are visited in a seed-shuffled order and the list
    is cut at the first document whose inclusion would exceed the cap. Kept
    documents are returned grouped by language, in their original order.
    """
    groups = by_language(docs)
    missing = [lang for lang in LANGS if not groups[lang]]
    if missing:
        raise CorpusError("missing language: " + ", ".join(missing))
    lengths = {lang: [len(tokenizer.encode(d.text)) for d in g] for lang, g in groups.items()}
    cap = min(sum(v) for v in lengths.values())
    out: list[Document] = []
    for lang in LANGS:
        order = Rng(derive_seed(seed, f"balance/{lang}")).permutation(len(groups[lang]))
        kept, total = [], 0
        for i in order:
            if total + lengths[lang][i] > cap:
                break
            total += lengths[lang][i]
            kept.append(i)
        out.extend(groups[lang][i] for i in sorted(kept))
    return out


def split_corpus(docs: Sequence[Document], val_fraction: float = 0.05,
                 seed: int = 0) -> tuple[list[Document], list[Document]]:
    """Per-language seed-shuffled train/validation split (at least one val doc per language present)."""
    if not 0 < val_fraction < 1:
        raise CorpusError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train: list[Document] = []
    val: list[Document] = []
    for lang, group in by_language(docs).items():
        if not group:
            continue
        n_val = max(1, int(round(len(group) * val_fraction)))
        if n_val >= len(group):
            raise CorpusError(f"language {lang} has too few documents to split ({len(group)})")
        order = Rng(derive_seed(seed, f"split/{lang}")).permutation(len(group))
        val_idx = set(order[:n_val])
        train.extend(d for i, d in enumerate(group) if i not in val_idx)
        val.extend(d for i, d in enumerate(group) if i in val_idx)
    return train, val


# ---------------------------------------------------------------------------
# batching


def pack_sequences(docs: Sequence[Document], tokenizer: Tokenizer,
                   context_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate documents with ``</s>`` separators and cut into windows.

    Returns ``(tokens, mask)`` of shape ``[n_windows, context_len]``. A trailing
    partial window with at least two real tokens is kept and padded with
    ``</s>``; its padding positions are False in ``mask``.
    """
    if context_len < 2:
        raise CorpusError(f"context_len must be >= 2, got {context_len}")
    stream: list[int] = []
    for d in docs:
        stream.extend(tokenizer.encode(d.text))
        stream.append(EOS_ID)
    if len(stream) < context_len:
        raise CorpusError(
            f"tokenized corpus ({len(stream)} tokens) is shorter than one context window ({context_len})")
    n_full, rest = divmod(len(stream), context_len)
    n = n_full + (1 if rest >= 2 else 0)
    toks = np.full((n, context_len), EOS_ID, dtype=np.int64)
    mask = np.zeros((n, context_len), dtype=bool)
    flat = np.asarray(stream, dtype=np.int64)
    toks[:n_full] = flat[:n_full * context_len].reshape(n_full, context_len)
    mask[:n_full] = True
    if n > n_full:
        toks[n_full, :rest] = flat[n_full * context_len:]
        mask[n_full, :rest] = True
    return toks, mask


def make_batches(docs: Sequence[Document], tokenizer: Tokenizer, context_len: int, batch_size: int,
                 mode: str = "per_language", seed: int = 0, epochs: int | None = 1,
                 drop_last: bool = False) -> Iterator[Batch]:
    """Yield training batches.

    ``per_language``: every batch holds windows of a single language; the
    order of batches across languages is a seeded shuffle.
    ``mixed``: windows from all languages are pooled and shuffled, so each
    batch mixes languages in proportion to the corpus in expectation.

    ``epochs=None`` streams forever, reshuffling each epoch from
    ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise CorpusError(f"batch_size must be >= 1, got {batch_size}")
    if mode not in ("per_language", "mixed"):
        raise CorpusError(f"unknown batching mode {mode!r}")
    windows: list[tuple[np.ndarray, np.ndarray, str]] = []
    per_lang: dict[str, list[int]] = {}
    for lang, group in by_language(docs).items():
        if not group:
            continue
        toks, mask = pack_sequences(group, tokenizer, context_len)
        per_lang[lang] = list(range(len(windows), len(windows) + len(toks)))
        windows.extend((toks[i], mask[i], lang) for i in range(len(toks)))
    if not windows:
        raise CorpusError("no documents to batch")

    def assemble(idx: list[int]) -> Batch:
        return Batch(np.stack([windows[i][0] for i in idx]),
                     [windows[i][2] for i in idx],
                     np.stack([windows[i][1] for i in idx]))

    epoch = 0
    while epochs is None or epoch < epochs:
        rng = Rng(derive_seed(seed, f"batches/{mode}/{epoch}"))
        if mode == "mixed":
            order = rng.permutation(len(windows))
            groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        else:
            groups = []
            for lang in LANGS:
                if lang not in per_lang:
                    continue
                idx = list(per_lang[lang])
                rng.shuffle(idx)
                groups.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
            rng.shuffle(groups)
        for g in groups:
            if drop_last and len(g) < batch_size:
                continue
            yield assemble(g)
        epoch += 1
