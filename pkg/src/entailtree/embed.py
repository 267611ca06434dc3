"""Hierarchical sentence encoder.

Sentences are the mean of learned token rows.  Training pulls the
embedding of a conclusion towards the sum of its two premise embeddings and
pulls co-occurring premises towards each other, with in-batch corruption as
negatives (a TransE-style margin ranking setup where facts play the role of
entities).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .text import tokenize

log = logging.getLogger(__name__)

UNK = "<unk>"
CHECKPOINT_MAGIC = "# entailtree-encoder v1"


class EncoderError(Exception):
    pass


class EmptyText(EncoderError):
    pass


class DimMismatch(EncoderError):
    pass


class BatchTooSmall(EncoderError):
    pass


class InsufficientData(EncoderError):
    pass


class DivergenceDetected(EncoderError):
    pass


class Vocabulary:
    """Dense token index; index 0 is reserved for unknown tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        uniq = sorted(set(tokens) - {UNK})
        self.tokens = [UNK] + uniq
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk = 0

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        toks = set()
        for t in texts:
            toks.update(tokenize(t))
        return cls(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, text: str) -> np.ndarray:
        """Token rows used to pool ``text``.

        Unknown tokens are dropped; a sentence made only of unknown tokens
        pools to the unk row.
        """
        toks = tokenize(text)
        if not toks:
            raise EmptyText(repr(text))
        ids = [self.index[t] for t in toks if t in self.index]
        if not ids:
            ids = [self.unk]
        return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class StepTriple:
    premise_a: str
    premise_b: str
    conclusion: str

    def __post_init__(self):
        for name in ("premise_a", "premise_b", "conclusion"):
            if not getattr(self, name).strip():
                raise ValueError(f"empty {name}")

    def to_json(self) -> dict:
        return {"s_b": self.premise_a, "s_e": self.premise_b, "i": self.conclusion}

    @classmethod
    def from_json(cls, obj: dict) -> "StepTriple":
        return cls(obj["s_b"], obj["s_e"], obj["i"])


@dataclass
class EncoderTrainConfig:
    dim: int = 64
    gamma1: float = 0.1
    gamma2: float = 0.1
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("margins must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.dim < 1 or self.epochs < 1:
            raise ValueError("dim and epochs must be positive")


class EmbeddingModel:
    def __init__(self, vocab: Vocabulary, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.shape[0] != len(vocab):
            raise ValueError("table rows must match vocabulary size")
        if not np.all(np.isfinite(table)):
            raise DivergenceDetected("non-finite embedding table")
        self.vocab = vocab
        self.table = table

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def initialize(cls, vocab: Vocabulary, dim: int, seed: int = 0) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)
        bound = 0.5 / dim
        return cls(vocab, rng.uniform(-bound, bound, size=(len(vocab), dim)))

    def encode(self, text: str) -> np.ndarray:
        return self.table[self.vocab.ids(text)].mean(axis=0)

    def encode_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.stack([self.encode(t) for t in texts])

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.vocab, self.table.copy())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update("\n".join(self.vocab.tokens).encode())
        h.update(np.ascontiguousarray(self.table).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        lines = [f"{CHECKPOINT_MAGIC}\tdim={self.dim}\tsize={len(self.vocab)}"]
        for tok, row in zip(self.vocab.tokens, self.table):
            lines.append(tok + "\t" + "\t".join(repr(float(x)) for x in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
            raise EncoderError(f"{path}: not an encoder checkpoint")
        toks, rows = [], []
        for line in lines[1:]:
            tok, *vals = line.split("\t")
            toks.append(tok)
            rows.append([float(v) for v in vals])
        vocab = Vocabulary(toks[1:])
        if vocab.tokens != toks:
            raise EncoderError(f"{path}: vocabulary out of order")
        return cls(vocab, np.array(rows, dtype=np.float64))


def distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimMismatch(f"{u.shape} vs {v.shape}")
    return float(np.linalg.norm(u - v))


def _norm_and_unit(x: np.ndarray):
    n = np.linalg.norm(x, axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return n, x / safe[..., None]


# Losses over pre-pooled embeddings.  Each returns (loss, grad_sb, grad_se, grad_i).

def con_loss_and_grad(sb: np.ndarray, se: np.ndarray, ci: np.ndarray, gamma: float):
    m = len(sb)
    pos_vec = sb + se - ci
    pos, u = _norm_and_unit(pos_vec)
    off = ~np.eye(m, dtype=bool)
    # neg_b[k, j] corrupts premise_a of triple k with premise_a of triple j
    nb_vec = sb[None, :, :] + se[:, None, :] - ci[:, None, :]
    ne_vec = sb[:, None, :] + se[None, :, :] - ci[:, None, :]
    nb, vb = _norm_and_unit(nb_vec)
    ne, ve = _norm_and_unit(ne_vec)
    hb = pos[:, None] - nb + gamma
    he = pos[:, None] - ne + gamma
    ab = (hb > 0) & off
    ae = (he > 0) & off
    loss = float(np.sum(np.where(ab, hb, 0.0)) + np.sum(np.where(ae, he, 0.0)))

    cnt = ab.sum(axis=1) + ae.sum(axis=1)
    gpos = u * cnt[:, None]
    vb = vb * ab[..., None]
    ve = ve * ae[..., None]
    g_sb = gpos - vb.sum(axis=0) - ve.sum(axis=1)
    g_se = gpos - vb.sum(axis=1) - ve.sum(axis=0)
    g_i = -gpos + vb.sum(axis=1) + ve.sum(axis=1)
    return loss, g_sb, g_se, g_i


def mut_loss_and_grad(sb: np.ndarray, se: np.ndarray, gamma: float):
    m = len(sb)
    pos, u = _norm_and_unit(sb - se)
    neg_vec = sb[:, None, :] - se[None, :, :]
    neg, v = _norm_and_unit(neg_vec)
    h = pos[:, None] - neg + gamma
    act = (h > 0) & ~np.eye(m, dtype=bool)
    loss = float(np.sum(np.where(act, h, 0.0)))
    cnt = act.sum(axis=1)
    v = v * act[..., None]
    g_sb = u * cnt[:, None] - v.sum(axis=1)
    g_se = -u * cnt[:, None] + v.sum(axis=0)
    return loss, g_sb, g_se


def pooling_matrix(id_lists: Sequence[np.ndarray], vocab_size: int) -> sparse.csr_matrix:
    """Row k averages the token rows of sentence k."""
    rows, cols, vals = [], [], []
    for k, ids in enumerate(id_lists):
        rows.extend([k] * len(ids))
        cols.extend(ids.tolist())
        vals.extend([1.0 / len(ids)] * len(ids))
    # duplicates are summed by csr construction
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(id_lists), vocab_size))


@dataclass
class _Batch:
    pb: sparse.csr_matrix
    pe: sparse.csr_matrix
    pi: sparse.csr_matrix

    def take(self, idx) -> "_Batch":
        return _Batch(self.pb[idx], self.pe[idx], self.pi[idx])


def scatter_to_table(grad_table: np.ndarray, pool: sparse.csr_matrix, grads: np.ndarray) -> None:
    """Push gradients w.r.t. pooled sentences back onto token rows."""
    grad_table += pool.T @ grads


def _tokenize_batch(model: EmbeddingModel, batch: Sequence[StepTriple]) -> _Batch:
    v, n = model.vocab, len(model.vocab)
    return _Batch(
        pooling_matrix([v.ids(t.premise_a) for t in batch], n),
        pooling_matrix([v.ids(t.premise_b) for t in batch], n),
        pooling_matrix([v.ids(t.conclusion) for t in batch], n),
    )


def _cor_loss_and_table_grad(table, tb: _Batch, g1: float, g2: float, want=("con", "mut")):
    sb, se, ci = tb.pb @ table, tb.pe @ table, tb.pi @ table
    grad = np.zeros_like(table)
    total = 0.0
    if "con" in want:
        l, gb, ge, gi = con_loss_and_grad(sb, se, ci, g1)
        total += l
        scatter_to_table(grad, tb.pb, gb)
        scatter_to_table(grad, tb.pe, ge)
        scatter_to_table(grad, tb.pi, gi)
    if "mut" in want:
        l, gb, ge = mut_loss_and_grad(sb, se, g2)
        total += l
        scatter_to_table(grad, tb.pb, gb)
        scatter_to_table(grad, tb.pe, ge)
    return total, grad


def _check_batch(batch):
    if len(batch) < 2:
        raise BatchTooSmall(f"batch of {len(batch)}; in-batch negatives need at least 2")


def loss_con(model: EmbeddingModel, batch: Sequence[StepTriple], gamma1: float = 0.1) -> float:
    _check_batch(batch)
    tb = _tokenize_batch(model, batch)
    return con_loss_and_grad(tb.pb @ model.table, tb.pe @ model.table, tb.pi @ model.table, gamma1)[0]


def loss_mut(model: EmbeddingModel, batch: Sequence[StepTriple], gamma2: float = 0.1) -> float:
    _check_batch(batch)
    tb = _tokenize_batch(model, batch)
    return mut_loss_and_grad(tb.pb @ model.table, tb.pe @ model.table, gamma2)[0]


def loss_cor(model: EmbeddingModel, batch: Sequence[StepTriple], gamma1: float = 0.1, gamma2: float = 0.1) -> float:
    return loss_con(model, batch, gamma1) + loss_mut(model, batch, gamma2)


def loss_grad(model: EmbeddingModel, batch: Sequence[StepTriple], gamma1=0.1, gamma2=0.1, which=("con", "mut")):
    """Loss and its gradient w.r.t. the embedding table."""
    _check_batch(batch)
    return _cor_loss_and_table_grad(model.table, _tokenize_batch(model, batch), gamma1, gamma2, which)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)


def fit_encoder(
    triples: Sequence[StepTriple],
    config: EncoderTrainConfig,
    extra_texts: Iterable[str] = (),
    init: EmbeddingModel | None = None,
):
    """Minibatch SGD on the combined margin loss; returns (model, history).

    ``extra_texts`` only widen the vocabulary (e.g. dataset sentences the
    triples never mention); their rows keep their initial values unless a
    triple uses them.
    """
    if len(triples) < 2:
        raise InsufficientData(f"need at least 2 triples, got {len(triples)}")
    if init is None:
        texts = [t for tr in triples for t in (tr.premise_a, tr.premise_b, tr.conclusion)]
        vocab = Vocabulary.from_texts(list(texts) + list(extra_texts))
        model = EmbeddingModel.initialize(vocab, config.dim, config.seed)
    else:
        model = init.copy()
    table = model.table
    tokenized = _tokenize_batch(model, triples)
    rng = np.random.default_rng(config.seed + 1)
    n = len(triples)
    m = min(config.batch_size, n)
    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, m):
            idx = order[start:start + m]
            if len(idx) < 2:
                continue
            loss, grad = _cor_loss_and_table_grad(table, tokenized.take(idx), config.gamma1, config.gamma2)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} in epoch {epoch}")
            total += loss
            if config.learning_rate:
                table -= config.learning_rate * grad
        history.epoch_loss.append(total)
        log.debug("encoder epoch %d loss %.4f", epoch, total)
    if not np.all(np.isfinite(table)):
        raise DivergenceDetected("non-finite parameters after training")
    return EmbeddingModel(model.vocab, table), history


def train_encoder(triples: Sequence[StepTriple], config: EncoderTrainConfig, extra_texts: Iterable[str] = ()) -> EmbeddingModel:
    return fit_encoder(triples, config, extra_texts)[0]


def dataset_loss(model: EmbeddingModel, triples: Sequence[StepTriple], config: EncoderTrainConfig) -> float:
    """Combined loss over fixed consecutive batches (order-independent of training shuffles)."""
    m = min(config.batch_size, len(triples))
    total = 0.0
    for start in range(0, len(triples), m):
        batch = triples[start:start + m]
        if len(batch) >= 2:
            total += loss_cor(model, batch, config.gamma1, config.gamma2)
    return total


def margin_accuracy(model: EmbeddingModel, triples: Sequence[StepTriple], batch_size: int = 16) -> float:
    """Share of (triple, in-batch corruption) pairs where the true premises sit closer to the conclusion."""
    wins = total = 0
    for start in range(0, len(triples), batch_size):
        batch = triples[start:start + batch_size]
        if len(batch) < 2:
            continue
        sb = model.encode_many([t.premise_a for t in batch])
        se = model.encode_many([t.premise_b for t in batch])
        ci = model.encode_many([t.conclusion for t in batch])
        pos = np.linalg.norm(sb + se - ci, axis=1)
        for k in range(len(batch)):
            for j in range(len(batch)):
                if j == k:
                    continue
                for neg in (sb[j] + se[k], sb[k] + se[j]):
                    total += 1
                    wins += pos[k] < np.linalg.norm(neg - ci[k])
    return wins / total if total else float("nan")


def transmission_rate(model: EmbeddingModel, cases, distractors: Sequence[str], seed: int = 0) -> float:
    """Share of two-level cases (a, b, c, r) where d(a+b+c, r) beats the same sum with a swapped for a distractor."""
    rng = np.random.default_rng(seed)
    wins = total = 0
    for a, b, c, r in cases:
        pool = [d for d in distractors if d != a]
        if not pool:
            continue
        swap = pool[int(rng.integers(len(pool)))]
        A, B, C, R, D = model.encode_many([a, b, c, r, swap])
        total += 1
        wins += np.linalg.norm(A + B + C - R) < np.linalg.norm(D + B + C - R)
    return wins / total if total else float("nan")


def export_embeddings(model: EmbeddingModel, facts, path) -> None:
    header = ["id", "text"] + [f"v{k}" for k in range(model.dim)]
    lines = ["\t".join(header)]
    for f in facts:
        vec = model.encode(f.text)
        text = " ".join(f.text.split())
        lines.append("\t".join([str(f.id), text] + [repr(float(x)) for x in vec]))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise EncoderError(f"cannot write {path}: {exc}") from exc


def load_embeddings(path) -> dict:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = {}
    for line in rows:
        fid, _text, *vals = line.split("\t")
        out[fid] = np.array([float(v) for v in vals])
    return out
