import math
import random
from collections import Counter

import numpy as np
import pytest

from entailtree.controller import Heads
from entailtree.embed import EmbeddingModel, Vocabulary
from entailtree.retrieval import (
    CorpusFact,
    CorpusIndex,
    EmptyCorpus,
    RetrievalError,
    build_index,
    idf_value,
    lexical_retrieve,
    recall_at,
    rerank_refine,
)

WORDS = [f"w{k}" for k in range(40)]


def _corpus(n, seed):
    rng = random.Random(seed)
    return [CorpusFact(f"sent{i + 1}", " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 12))))
            for i in range(n)]


def brute_bm25(corpus, query, k1=1.2, b=0.75):
    """Straight from the formula, one document at a time."""
    docs = [f.text.split() for f in corpus]
    n = len(docs)
    avgdl = sum(map(len, docs)) / n
    out = []
    for d in docs:
        tf = Counter(d)
        s = 0.0
        for t in query.split():
            if tf[t] == 0:
                continue
            df = sum(1 for x in docs if t in x)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf[t] * (k1 + 1) / (tf[t] + k1 * (1 - b + b * len(d) / avgdl))
        out.append(s)
    return out


@pytest.mark.parametrize("k", [1, 10, 50])
def test_bm25_matches_brute_force(k):
    corpus = _corpus(200, 0)
    index = build_index(corpus)
    rng = random.Random(k)
    for _ in range(20):
        q = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 6)))
        want = brute_bm25(corpus, q)
        ids = [f.id for f in corpus]
        order = sorted(range(len(ids)), key=lambda i: (-want[i], int(ids[i][4:])))[:k]
        got = lexical_retrieve(index, q, k)
        assert [c.id for c, _ in got] == [ids[i] for i in order]
        assert np.allclose([s for _, s in got], [want[i] for i in order], atol=1e-12)


def test_idf_positive_for_ubiquitous_term():
    assert idf_value(10, 10) > 0
    assert idf_value(10, 1) > idf_value(10, 5)


def test_ties_break_by_fact_id():
    corpus = [CorpusFact("sent10", "a b"), CorpusFact("sent2", "a b"), CorpusFact("sent1", "c")]
    got = lexical_retrieve(build_index(corpus), "a", 3)
    assert [c.id for c, _ in got] == ["sent2", "sent10", "sent1"]


def test_index_round_trip(tmp_path):
    index = build_index(_corpus(50, 1))
    index.save(tmp_path / "i.bin")
    back = CorpusIndex.load(tmp_path / "i.bin")
    assert back.to_bytes() == index.to_bytes()
    assert lexical_retrieve(back, "w1 w2", 10) == lexical_retrieve(index, "w1 w2", 10)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(RetrievalError):
        CorpusIndex.load(tmp_path / "bad.bin")


def test_empty_and_duplicate_corpus():
    with pytest.raises(EmptyCorpus):
        build_index([])
    with pytest.raises(RetrievalError):
        build_index([CorpusFact("a", "x"), CorpusFact("a", "y")])
    with pytest.raises(ValueError):
        lexical_retrieve(build_index(_corpus(3, 0)), "w1", 0)


def test_rerank_refine_by_distance_and_heads():
    corpus = _corpus(30, 2)
    vocab = Vocabulary.from_texts([c.text for c in corpus])
    enc = EmbeddingModel(vocab, np.random.default_rng(0).normal(size=(len(vocab), 5)))
    hyp = corpus[7].text
    out = rerank_refine(enc, None, hyp, corpus, limit=5, by="distance")
    assert len(out) == 5 and out[0].text == hyp
    d = [np.linalg.norm(enc.encode(c.text) - enc.encode(hyp)) for c in out]
    assert d == sorted(d)
    heads = Heads.zeros(enc.dim)
    # zero heads give equal scores, so order falls back to fact id
    out = rerank_refine(enc, heads, hyp, corpus, limit=4)
    assert [c.id for c in out] == ["sent1", "sent2", "sent3", "sent4"]
    with pytest.raises(RetrievalError):
        rerank_refine(enc, heads, hyp, [], 3)
    with pytest.raises(ValueError):
        rerank_refine(enc, heads, hyp, corpus, 3, by="nope")


def test_recall_at():
    cands = [CorpusFact("a", "x"), CorpusFact("b", "y")]
    assert recall_at(cands, ["x", "z"]) == 0.5
    assert recall_at(cands, []) == 1.0
