"""Byte-level BPE tokenizer.

Ids 0..2 are the special tokens ``<unk> <s> </s>``, ids 3..258 the 256 raw
bytes, and id ``259 + r`` the symbol created by merge ``r``. Text is first cut
into chunks (a word with its leading space, a digit run, a punctuation run,
or whitespace) and merges never cross chunk boundaries.
"""
from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable

SPECIAL_TOKENS = ("<unk>", "<s>", "</s>")
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2
N_SPECIAL = len(SPECIAL_TOKENS)
BYTE_OFFSET = N_SPECIAL
MIN_VOCAB = N_SPECIAL + 256
FORMAT_VERSION = 1

_CHUNK_RE = re.compile(r" ?[^\W\d_]+| ?\d+| ?_+| ?[^\s\w]+|\s+(?!\S)|\s+")


class TokenizerError(ValueError):
    pass


def split_chunks(text: str) -> list[str]:
    return _CHUNK_RE.findall(text)


def escape_bytes(b: bytes) -> str:
    out = []
    for c in b:
        if c == 0x5C:
            out.append("\\\\")
        elif 0x20 <= c < 0x7F:
            out.append(chr(c))
        else:
            out.append(f"\\x{c:02x}")
    return "".join(out)


def unescape_bytes(s: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "\\":
            if s[i + 1] == "\\":
                out.append(0x5C)
                i += 2
            elif s[i + 1] == "x":
                out.append(int(s[i + 2:i + 4], 16))
                i += 4
            else:
                raise TokenizerError(f"bad escape in {s!r}")
        else:
            out.append(ord(ch))
            i += 1
    return bytes(out)


class Tokenizer:
    def __init__(self, merges: Iterable[tuple[bytes, bytes]] = ()):
        self.merges: list[tuple[bytes, bytes]] = [(bytes(a), bytes(b)) for a, b in merges]
        if len(set(self.merges)) != len(self.merges):
            raise TokenizerError("merge list contains duplicates")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._id_bytes: list[bytes] = [s.encode() for s in SPECIAL_TOKENS]
        self._id_bytes += [bytes([i]) for i in range(256)]
        self._sym_id: dict[bytes, int] = {bytes([i]): BYTE_OFFSET + i for i in range(256)}
        for r, (a, b) in enumerate(self.merges):
            if a not in self._sym_id or b not in self._sym_id:
                raise TokenizerError(f"merge {r} uses a symbol not defined earlier: {a!r} + {b!r}")
            sym = a + b
            self._id_bytes.append(sym)
            # a byte string reachable through two merge paths keeps its first id
            self._sym_id.setdefault(sym, MIN_VOCAB + r)
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return MIN_VOCAB + len(self.merges)

    def token_bytes(self, i: int) -> bytes:
        return self._id_bytes[i]

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        syms = [bytes([c]) for c in chunk.encode("utf-8")]
        ranks = self._ranks
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        ids = tuple(self._sym_id[s] for s in syms)
        if len(self._cache) < 200_000:
            self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in split_chunks(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        n = self.vocab_size
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise TokenizerError(f"token id {i} out of range for vocab size {n}")
            buf += self._id_bytes[i]
        return buf.decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "special_tokens": list(SPECIAL_TOKENS),
            "merges": [[escape_bytes(a), escape_bytes(b)] for a, b in self.merges],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        if d.get("version") != FORMAT_VERSION:
            raise TokenizerError(f"unsupported tokenizer version {d.get('version')!r}")
        if list(d.get("special_tokens", [])) != list(SPECIAL_TOKENS):
            raise TokenizerError(f"special tokens must be {list(SPECIAL_TOKENS)}")
        tok = cls((unescape_bytes(a), unescape_bytes(b)) for a, b in d["merges"])
        if tok.vocab_size != d["vocab_size"]:
            raise TokenizerError(f"vocab_size {d['vocab_size']} disagrees with {len(d['merges'])} merges")
        return tok

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def encode(tokenizer: Tokenizer, text: str) -> list[int]:
    return tokenizer.encode(text)


def decode(tokenizer: Tokenizer, ids) -> str:
    return tokenizer.decode(ids)


def train_bpe(texts: Iterable, vocab_size: int = 2048, seed: int = 0) -> Tokenizer:
    """Learn ``vocab_size - 259`` merges from the given documents or strings.

    Each merge is the adjacent pair with the highest corpus frequency; ties go
    to the lexicographically smallest ``(left_bytes, right_bytes)``. The result
    is fully determined by the corpus, so ``seed`` has no effect; it is accepted
    to keep the stage signature uniform.
    """
    if vocab_size < MIN_VOCAB:
        raise TokenizerError(f"vocab_size must be >= {MIN_VOCAB}, got {vocab_size}")
    n_merges = vocab_size - MIN_VOCAB

    counts: Counter[str] = Counter()
    for t in texts:
        counts.update(split_chunks(getattr(t, "text", t)))

    words: list[list[bytes]] = []
    freqs: list[int] = []
    for chunk, f in sorted(counts.items()):
        words.append([bytes([c]) for c in chunk.encode("utf-8")])
        freqs.append(f)

    pair_count: dict[tuple[bytes, bytes], int] = defaultdict(int)
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            pair_count[pair] += f
            where[pair].add(wi)

    heap = [(-c, a, b) for (a, b), c in pair_count.items()]
    heapq.heapify(heap)
    merges: list[tuple[bytes, bytes]] = []

    while len(merges) < n_merges:
        best = None
        while heap:
            negc, a, b = heapq.heappop(heap)
            if pair_count.get((a, b), 0) == -negc and negc < 0:
                best = (a, b)
                break
        if best is None:
            raise TokenizerError(
                f"corpus too small for vocab_size {vocab_size}: "
                f"achievable vocab size is {MIN_VOCAB + len(merges)}")
        merges.append(best)
        a, b = best
        new_sym = a + b
        touched: set[tuple[bytes, bytes]] = set()
        for wi in sorted(where.pop(best, ())):
            w, f = words[wi], freqs[wi]
            for pair in zip(w, w[1:]):
                pair_count[pair] -= f
                touched.add(pair)
            merged, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    merged.append(new_sym)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for pair in zip(merged, merged[1:]):
                pair_count[pair] += f
                where[pair].add(wi)
                touched.add(pair)
        pair_count.pop(best, None)
        for pair in touched:
            c = pair_count.get(pair, 0)
            if c > 0:
                heapq.heappush(heap, (-c, pair[0], pair[1]))
            else:
                pair_count.pop(pair, None)
    return Tokenizer(merges)
