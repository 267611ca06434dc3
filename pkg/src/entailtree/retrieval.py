"""Okapi BM25 over a fact corpus, plus encoder-based re-ranking.

idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)), which stays positive even
for terms in every document.  Ties are broken by ascending fact id.
"""
from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .text import tokenize

INDEX_MAGIC = b"ETBM25\x00\x01"


class RetrievalError(Exception):
    pass


class EmptyCorpus(RetrievalError):
    pass


@dataclass(frozen=True)
class CorpusFact:
    id: str
    text: str


def _fact_key(fid: str):
    # "sent12" style ids sort numerically, anything else lexically
    head = fid.rstrip("0123456789")
    tail = fid[len(head):]
    return (head, int(tail) if tail else -1, fid)


@dataclass
class CorpusIndex:
    ids: list
    texts: list
    doc_lengths: list
    postings: dict          # token -> [(doc position, tf)], ascending by fact id
    idf: dict
    k1: float = 1.2
    b: float = 0.75

    @property
    def avgdl(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def to_bytes(self) -> bytes:
        doc = {
            "k1": self.k1, "b": self.b,
            "ids": self.ids, "texts": self.texts, "doc_lengths": self.doc_lengths,
            "postings": {t: self.postings[t] for t in sorted(self.postings)},
            "idf": {t: repr(self.idf[t]) for t in sorted(self.idf)},
        }
        raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return INDEX_MAGIC + zlib.compress(raw, 9)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CorpusIndex":
        if not data.startswith(INDEX_MAGIC):
            raise RetrievalError("not a BM25 index file (bad magic or version)")
        doc = json.loads(zlib.decompress(data[len(INDEX_MAGIC):]))
        postings = {t: [tuple(p) for p in ps] for t, ps in doc["postings"].items()}
        idf = {t: float(v) for t, v in doc["idf"].items()}
        return cls(doc["ids"], doc["texts"], doc["doc_lengths"], postings, idf, doc["k1"], doc["b"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CorpusIndex":
        return cls.from_bytes(Path(path).read_bytes())


def idf_value(n_docs: int, doc_freq: int) -> float:
    return math.log(1.0 + (n_docs - doc_freq + 0.5) / (doc_freq + 0.5))


def build_index(corpus: Sequence, k1: float = 1.2, b: float = 0.75) -> CorpusIndex:
    """``corpus`` holds objects with ``id`` and ``text`` (ids are stringified)."""
    if not corpus:
        raise EmptyCorpus("cannot index an empty corpus")
    docs = sorted(((str(f.id), f.text) for f in corpus), key=lambda d: _fact_key(d[0]))
    ids = [d[0] for d in docs]
    if len(set(ids)) != len(ids):
        raise RetrievalError("duplicate fact ids in corpus")
    postings: dict = {}
    lengths = []
    for pos, (_, text) in enumerate(docs):
        toks = tokenize(text)
        lengths.append(len(toks))
        for tok, tf in sorted(Counter(toks).items()):
            postings.setdefault(tok, []).append((pos, tf))
    n = len(docs)
    idf = {t: idf_value(n, len(ps)) for t, ps in postings.items()}
    return CorpusIndex(ids, [d[1] for d in docs], lengths, postings, idf, k1, b)


def bm25_scores(index: CorpusIndex, query: str) -> np.ndarray:
    scores = np.zeros(len(index.ids))
    avgdl = index.avgdl or 1.0
    for tok in tokenize(query):
        for pos, tf in index.postings.get(tok, ()):
            norm = tf + index.k1 * (1 - index.b + index.b * index.doc_lengths[pos] / avgdl)
            scores[pos] += index.idf[tok] * tf * (index.k1 + 1) / norm
    return scores


def lexical_retrieve(index: CorpusIndex, hypothesis: str, k: int = 50) -> list[tuple[CorpusFact, float]]:
    """Top-k (fact, score), score-descending, ties by fact id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_scores(index, hypothesis)
    # positions are already in fact-id order, so a stable sort on -score breaks ties by id
    order = np.argsort(-scores, kind="stable")[:k]
    return [(CorpusFact(index.ids[i], index.texts[i]), float(scores[i])) for i in order]


def rerank_refine(encoder, heads, hypothesis: str, candidates: Sequence, limit: int = 25,
                  by: str = "score_fact") -> list:
    """Top ``limit`` candidates by fact score (or by closeness to h), best first."""
    if not candidates:
        raise RetrievalError("no candidates to refine")
    h = encoder.encode(hypothesis)
    S = encoder.encode_many([c.text for c in candidates])
    if by == "score_fact":
        from .reasoner import as_scorer
        from .controller import PoolItem

        items = [PoolItem(c.id, c.text, v) for c, v in zip(candidates, S)]
        score = np.asarray(as_scorer(heads).fact_scores(hypothesis, h, items), dtype=float)
    elif by == "distance":
        score = -np.linalg.norm(S - h, axis=1)
    else:
        raise ValueError(f"unknown refinement {by!r}")
    keys = [_fact_key(str(c.id)) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-score[i], keys[i]))
    return [candidates[i] for i in order[:limit]]


def recall_at(retrieved: Sequence, gold_texts: Sequence[str]) -> float:
    if not gold_texts:
        return 1.0
    got = {c.text for c in retrieved}
    return sum(t in got for t in gold_texts) / len(gold_texts)
