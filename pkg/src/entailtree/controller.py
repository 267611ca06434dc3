"""Selection controller: fact relevance, deductive step and abductive heads.

Each head is one affine layer over a fixed feature map of frozen sentence
vectors.  ``features="concat"`` uses the bare concatenation; the default
``"interaction"`` adds elementwise products and distances, without which a
linear head cannot condition fact relevance on the hypothesis at all.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed import DimMismatch, EmbeddingModel
from .tree import HYPOTHESIS, EntailmentTree, Fact, NodeId, Step, all_levels, topological_steps

HEADS_MAGIC = "entailtree-heads"
HEADS_VERSION = 1


class ControllerError(Exception):
    pass


class PoolTooSmall(ControllerError):
    pass


class NoOpenConclusion(ControllerError):
    pass


class MissingLabels(ControllerError):
    pass


class MissingGoldStep(ControllerError):
    pass


class InvalidTree(ControllerError):
    pass


# ------------------------------------------------------------------ features

def fact_features(h: np.ndarray, S: np.ndarray, mode: str = "interaction") -> np.ndarray:
    """Rows of features for (h, s) with s ranging over the rows of S."""
    S = np.atleast_2d(S)
    H = np.broadcast_to(h, S.shape)
    if mode == "concat":
        return np.hstack([H, S])
    diff = H - S
    return np.hstack([H, S, H * S, diff * diff, np.linalg.norm(diff, axis=1, keepdims=True)])


def _ordered_pair_features(h, A, B, mode):
    H = np.broadcast_to(h, A.shape)
    if mode == "concat":
        return np.hstack([H, A, B])
    r = A + B - H
    return np.hstack([
        H, A, B, H * A, H * B, A * B, r * r,
        np.linalg.norm(r, axis=1, keepdims=True),
        np.linalg.norm(A - H, axis=1, keepdims=True),
        np.linalg.norm(B - H, axis=1, keepdims=True),
    ])


def pair_features(h: np.ndarray, S: np.ndarray, pairs: np.ndarray, mode: str = "interaction") -> np.ndarray:
    """Order-symmetrized features: the mean over (a, b) and (b, a).

    Averaging features is the same as averaging the two logits, because the
    head is affine.
    """
    A, B = S[pairs[:, 0]], S[pairs[:, 1]]
    return 0.5 * (_ordered_pair_features(h, A, B, mode) + _ordered_pair_features(h, B, A, mode))


def feature_sizes(dim: int, mode: str) -> tuple[int, int]:
    if mode == "concat":
        return 2 * dim, 3 * dim
    if mode == "interaction":
        return 4 * dim + 1, 7 * dim + 3
    raise ValueError(f"unknown feature mode {mode!r}")


def all_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1)


# --------------------------------------------------------------------- heads

@dataclass
class Heads:
    dim: int
    features: str = "interaction"
    fact_w: np.ndarray = None
    fact_b: float = 0.0
    step_w: np.ndarray = None
    step_b: float = 0.0
    abd_w: np.ndarray = None
    abd_b: float = 0.0
    encoder_checksum: str = ""

    def __post_init__(self):
        nf, ns = feature_sizes(self.dim, self.features)
        if self.fact_w is None:
            self.fact_w = np.zeros(nf)
        if self.step_w is None:
            self.step_w = np.zeros(ns)
        if self.abd_w is None:
            self.abd_w = np.zeros(nf)
        for name, n in (("fact_w", nf), ("step_w", ns), ("abd_w", nf)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise DimMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
            if not np.all(np.isfinite(arr)):
                raise ControllerError(f"non-finite {name}")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, dim: int, features: str = "interaction") -> "Heads":
        return cls(dim, features)

    def copy(self) -> "Heads":
        return replace(self, fact_w=self.fact_w.copy(), step_w=self.step_w.copy(), abd_w=self.abd_w.copy())

    # flat parameter view, used by the optimizer and gradient checks
    def params(self) -> np.ndarray:
        return np.concatenate([self.fact_w, [self.fact_b], self.step_w, [self.step_b], self.abd_w, [self.abd_b]])

    def with_params(self, theta: np.ndarray) -> "Heads":
        nf, ns = len(self.fact_w), len(self.step_w)
        out, k = self.copy(), 0
        out.fact_w = theta[k:k + nf].copy(); k += nf
        out.fact_b = float(theta[k]); k += 1
        out.step_w = theta[k:k + ns].copy(); k += ns
        out.step_b = float(theta[k]); k += 1
        out.abd_w = theta[k:k + nf].copy(); k += nf
        out.abd_b = float(theta[k])
        return out

    def save(self, path) -> None:
        doc = {
            "format": HEADS_MAGIC,
            "version": HEADS_VERSION,
            "dim": self.dim,
            "features": self.features,
            "encoder_checksum": self.encoder_checksum,
            "fact_w": [float(x) for x in self.fact_w],
            "fact_b": float(self.fact_b),
            "step_w": [float(x) for x in self.step_w],
            "step_b": float(self.step_b),
            "abd_w": [float(x) for x in self.abd_w],
            "abd_b": float(self.abd_b),
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, encoder: EmbeddingModel | None = None) -> "Heads":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != HEADS_MAGIC or doc.get("version") != HEADS_VERSION:
            raise ControllerError(f"{path}: not a v{HEADS_VERSION} heads checkpoint")
        if encoder is not None and doc["encoder_checksum"] and doc["encoder_checksum"] != encoder.checksum():
            raise ControllerError(f"{path}: trained against encoder {doc['encoder_checksum']}, got {encoder.checksum()}")
        return cls(
            doc["dim"], doc["features"],
            np.array(doc["fact_w"]), doc["fact_b"],
            np.array(doc["step_w"]), doc["step_b"],
            np.array(doc["abd_w"]), doc["abd_b"],
            doc["encoder_checksum"],
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ------------------------------------------------------------------- states

@dataclass(frozen=True)
class PoolItem:
    node: NodeId
    text: str
    vec: np.ndarray = field(compare=False, repr=False)
    label: bool | None = None
    level: int | None = None


@dataclass
class ProofState:
    hypothesis: str
    h: np.ndarray
    pool: tuple
    gold_step: Step | None = None
    partial_steps: tuple = ()
    labeled: bool = False            # True when pool labels feed the fact loss

    def __post_init__(self):
        if not self.pool:
            raise ControllerError("empty pool")
        if self.gold_step is not None:
            nodes = {p.node for p in self.pool}
            if not set(self.gold_step.premises) <= nodes:
                raise ControllerError(f"gold premises {self.gold_step} not in pool")

    @property
    def S(self) -> np.ndarray:
        return np.stack([p.vec for p in self.pool])

    @property
    def nodes(self) -> list:
        return [p.node for p in self.pool]

    def gold_pair_index(self) -> int:
        """Row of the gold pair in ``all_pairs(len(pool))`` order."""
        idx = {p.node: k for k, p in enumerate(self.pool)}
        a, b = sorted(idx[n] for n in self.gold_step.premises)
        n = len(self.pool)
        return a * n - a * (a + 1) // 2 + (b - a - 1)


def _encode_all(encoder, texts):
    if encoder is None:
        return [np.zeros(0) for _ in texts]
    return list(encoder.encode_many(list(texts)))


def enumerate_states(tree: EntailmentTree, encoder: EmbeddingModel | None = None,
                     distractors: Sequence[Fact] = ()) -> list[ProofState]:
    """One teacher-forced state per gold step, bottom-up.

    The first state also carries relevance labels (gold leaves positive,
    distractors negative) and gold node levels for the fact loss.
    """
    if len(tree.steps) == 0 or tree.root_step is None:
        raise InvalidTree("tree has no root step")
    if any(len(s.premises) != 2 for s in tree.steps):
        raise InvalidTree("controller states need binary steps")
    levels = all_levels(tree)
    texts = {f.id: f.text for f in tree.leaves}
    texts.update(tree.intermediates)
    texts[HYPOTHESIS] = tree.hypothesis
    extra = [d for d in distractors if d.id not in texts]
    all_texts = [tree.hypothesis] + [texts[n] for n in sorted(texts) if n != HYPOTHESIS] + [d.text for d in extra]
    vecs = dict(zip([HYPOTHESIS] + [n for n in sorted(texts) if n != HYPOTHESIS] + [d.id for d in extra],
                    _encode_all(encoder, all_texts)))
    items = {f.id: PoolItem(f.id, f.text, vecs[f.id], True, levels.get(f.id)) for f in tree.leaves}
    for d in extra:
        items[d.id] = PoolItem(d.id, d.text, vecs[d.id], False, None)
    for node, text in tree.intermediates.items():
        items[node] = PoolItem(node, text, vecs[node], True, levels.get(node))
    pool = sorted([f.id for f in tree.leaves] + [d.id for d in extra])
    states, done = [], []
    for k, step in enumerate(topological_steps(tree)):
        states.append(ProofState(tree.hypothesis, vecs[HYPOTHESIS], tuple(items[n] for n in pool),
                                 step, tuple(done), labeled=(k == 0)))
        pool = sorted([n for n in pool if n not in step.premise_set] +
                      ([step.conclusion] if step.conclusion != HYPOTHESIS else []))
        done.append(step)
    return states


def reencode(states: Sequence[ProofState], encoder: EmbeddingModel) -> list[ProofState]:
    cache: dict = {}

    def enc(t):
        if t not in cache:
            cache[t] = encoder.encode(t)
        return cache[t]

    return [replace(s, h=enc(s.hypothesis), pool=tuple(replace(p, vec=enc(p.text)) for p in s.pool)) for s in states]


# ------------------------------------------------------------------ scoring

def score_fact(heads: Heads, h: np.ndarray, s: np.ndarray) -> float:
    h, s = np.asarray(h, float), np.asarray(s, float)
    if h.shape != (heads.dim,) or s.shape != (heads.dim,):
        raise DimMismatch(f"expected dim {heads.dim}, got {h.shape} and {s.shape}")
    return float(_sigmoid(fact_features(h, s[None], heads.features) @ heads.fact_w + heads.fact_b)[0])


def fact_scores(heads: Heads, h: np.ndarray, S: np.ndarray) -> np.ndarray:
    S = np.atleast_2d(S)
    if S.shape[1] != heads.dim or np.shape(h) != (heads.dim,):
        raise DimMismatch(f"expected dim {heads.dim}")
    return _sigmoid(fact_features(h, S, heads.features) @ heads.fact_w + heads.fact_b)


def step_logits(heads: Heads, h: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pairs = all_pairs(len(S))
    return pairs, pair_features(h, S, pairs, heads.features) @ heads.step_w + heads.step_b


def score_steps(heads: Heads, state: ProofState) -> dict:
    """Softmax over all unordered pool pairs, keyed by (node, node) with node_a < node_b."""
    if len(state.pool) < 2:
        raise PoolTooSmall(f"pool of {len(state.pool)}")
    pairs, z = step_logits(heads, state.h, state.S)
    probs = _softmax(z)
    nodes = state.nodes
    out = {}
    for (i, j), p in zip(pairs, probs):
        a, b = sorted((nodes[i], nodes[j]))
        out[(a, b)] = float(p)
    return dict(sorted(out.items()))


def score_steps_abductive(heads: Heads, state: ProofState, open_nodes: Sequence[tuple] | None = None) -> dict:
    """Softmax over (open conclusion, known premise) pairs.

    ``open_nodes`` is a list of (node id, vector); by default the only open
    node is the hypothesis.
    """
    if open_nodes is None:
        open_nodes = [(HYPOTHESIS, state.h)]
    if not open_nodes:
        raise NoOpenConclusion("nothing left to decompose")
    keys, logits = [], []
    S = state.S
    for node, vec in open_nodes:
        z = fact_features(vec, S, heads.features) @ heads.abd_w + heads.abd_b
        keys.extend((node, p.node) for p in state.pool)
        logits.append(z)
    probs = _softmax(np.concatenate(logits))
    return dict(sorted(zip(keys, map(float, probs))))


# ------------------------------------------------------------------ training

@dataclass
class ControllerTrainConfig:
    gamma3: float = 0.1
    gamma4: float = 0.1
    gamma5: float = 0.1
    lam: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 0.5
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    negatives: int = 8
    features: str = "interaction"
    literal_eq5: bool = False
    train_abductive: bool = True
    encoder_lr: float = 0.0          # > 0 also updates the token table (correlation term only)

    def __post_init__(self):
        if min(self.gamma3, self.gamma4, self.gamma5) <= 0:
            raise ValueError("margins must be positive")
        if self.lam < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("lambda, alpha and beta must be non-negative")
        if self.negatives < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("negatives, batch and epochs must be positive")
        feature_sizes(1, self.features)


def sample_negatives(n_pairs: int, gold: int, k: int, rng: np.random.Generator) -> np.ndarray:
    others = np.array([q for q in range(n_pairs) if q != gold], dtype=int)
    if len(others) <= k:
        return others
    return np.sort(rng.choice(others, size=k, replace=False))


def _state_negatives(states, k, seed):
    rng = np.random.default_rng(seed)
    out = []
    for s in states:
        n = len(s.pool)
        out.append(sample_negatives(n * (n - 1) // 2, s.gold_pair_index(), k, rng))
    return out


def loss_fact(heads: Heads, states: Sequence[ProofState], config: ControllerTrainConfig,
              want_grad: bool = False):
    """Level-ranking hinge plus (lambda-weighted) BCE over labeled pools."""
    labeled = [s for s in states if s.labeled]
    if not labeled:
        raise MissingLabels("no state carries relevance labels")
    g = np.zeros_like(heads.fact_w)
    gb = 0.0
    rank_sum, n1, bce_sum, n2 = 0.0, 0, 0.0, 0
    rank_g, rank_gb, bce_g, bce_gb = np.zeros_like(g), 0.0, np.zeros_like(g), 0.0
    for s in labeled:
        if any(p.label is None for p in s.pool):
            raise MissingLabels("pool item without a relevance label")
        F = fact_features(s.h, s.S, heads.features)
        z = F @ heads.fact_w + heads.fact_b
        sig = _sigmoid(z)
        dsig = sig * (1 - sig)
        rel = [k for k, p in enumerate(s.pool) if p.label and p.level is not None]
        for t in rel:
            for d in rel:
                if s.pool[t].level < s.pool[d].level:
                    n1 += 1
                    m = config.gamma3 - sig[t] + sig[d]
                    if m > 0:
                        rank_sum += m
                        if want_grad:
                            rank_g += dsig[d] * F[d] - dsig[t] * F[t]
                            rank_gb += dsig[d] - dsig[t]
        y = np.array([1.0 if p.label else 0.0 for p in s.pool])
        # log-sigmoid in a stable form
        bce_sum += float(np.sum(np.logaddexp(0, -z) * y + np.logaddexp(0, z) * (1 - y)))
        n2 += len(y)
        if want_grad:
            bce_g += (sig - y) @ F
            bce_gb += float(np.sum(sig - y))
    sign = -1.0 if config.literal_eq5 else 1.0
    loss = (rank_sum / n1 if n1 else 0.0) + sign * config.lam * (bce_sum / n2)
    if not want_grad:
        return loss
    g = (rank_g / n1 if n1 else rank_g) + sign * config.lam * bce_g / n2
    gb = (rank_gb / n1 if n1 else 0.0) + sign * config.lam * bce_gb / n2
    return loss, g, gb


def _prob_hinge(G, Fp, pos, neg, margin):
    """sum over neg of [G[neg] - G[pos] + margin]_+ and its gradient in w."""
    loss, grad, count = 0.0, np.zeros(Fp.shape[1]), 0
    fbar = G @ Fp
    for q in neg:
        count += 1
        m = margin - G[pos] + G[q]
        if m > 0:
            loss += m
            grad += G[q] * (Fp[q] - fbar) - G[pos] * (Fp[pos] - fbar)
    return loss, grad, count


def loss_step(heads: Heads, encoder, states: Sequence[ProofState], config: ControllerTrainConfig,
              negatives: Sequence[np.ndarray] | None = None, want_grad: bool = False):
    """Probability-margin hinge of gold vs sampled pairs plus the correlation hinge.

    The correlation term compares ||s_i + s_j - h|| of gold and negative
    pairs on the frozen vectors, so it carries no head gradient.
    """
    if any(s.gold_step is None for s in states):
        raise MissingGoldStep("every state needs a gold step")
    if negatives is None:
        negatives = _state_negatives(states, config.negatives, config.seed)
    total, n3 = 0.0, 0
    grad = np.zeros_like(heads.step_w)
    for s, neg in zip(states, negatives):
        S = s.S
        pairs = all_pairs(len(S))
        Fp = pair_features(s.h, S, pairs, heads.features)
        G = _softmax(Fp @ heads.step_w + heads.step_b)
        pos = s.gold_pair_index()
        l, g, c = _prob_hinge(G, Fp, pos, neg, config.gamma4)
        r = S[pairs[:, 0]] + S[pairs[:, 1]] - s.h
        d = np.linalg.norm(r, axis=1)
        corr = float(np.sum(np.maximum(0.0, d[pos] - d[neg] + config.gamma5)))
        total += l + corr
        grad += g
        n3 += c
    loss = total / n3 if n3 else 0.0
    if not want_grad:
        return loss
    return loss, (grad / n3 if n3 else grad), 0.0


def loss_abductive(heads: Heads, states: Sequence[ProofState], targets: Sequence[np.ndarray],
                   config: ControllerTrainConfig, want_grad: bool = False):
    """Hinge on abductive probabilities: each gold premise vs every other pool member.

    ``targets[k]`` is the vector of the gold conclusion of ``states[k]``.
    """
    total, count = 0.0, 0
    grad, gb = np.zeros_like(heads.abd_w), 0.0
    for s, t in zip(states, targets):
        F = fact_features(t, s.S, heads.features)
        G = _softmax(F @ heads.abd_w + heads.abd_b)
        idx = {p.node: k for k, p in enumerate(s.pool)}
        gold = [idx[n] for n in s.gold_step.premises]
        others = [k for k in range(len(s.pool)) if k not in gold]
        for pos in gold:
            l, g, c = _prob_hinge(G, F, pos, others, config.gamma4)
            total += l
            grad += g
            count += c
    loss = total / count if count else 0.0
    if not want_grad:
        return loss
    return loss, (grad / count if count else grad), gb


def correlation_table_step(encoder: EmbeddingModel, states: Sequence[ProofState], negatives, gamma5: float,
                           lr: float) -> None:
    """One SGD step of the correlation hinge on the token table, in place."""
    grads: dict = {}

    def add(text, g):
        grads[text] = grads.get(text, 0.0) + g

    count = 0
    for s, neg in zip(states, negatives):
        S = s.S
        pairs = all_pairs(len(S))
        pos = s.gold_pair_index()
        r = S[pairs[:, 0]] + S[pairs[:, 1]] - s.h
        d = np.linalg.norm(r, axis=1)
        safe = np.where(d > 0, d, 1.0)
        for q in neg:
            count += 1
            if d[pos] - d[q] + gamma5 <= 0:
                continue
            up, un = r[pos] / safe[pos], r[q] / safe[q]
            for k in pairs[pos]:
                add(s.pool[k].text, up)
            for k in pairs[q]:
                add(s.pool[k].text, -un)
            add(s.hypothesis, un - up)
    if not count:
        return
    for text, g in sorted(grads.items()):
        ids = encoder.vocab.ids(text)
        np.add.at(encoder.table, ids, -lr * g / (count * len(ids)))


@dataclass
class ControllerHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_step: list = field(default_factory=list)
    epoch_fact: list = field(default_factory=list)
    encoder: EmbeddingModel | None = None


def conclusion_vector(state: ProofState, encoder: EmbeddingModel, text: str) -> np.ndarray:
    return state.h if state.gold_step.conclusion == HYPOTHESIS else encoder.encode(text)


def train_controller(encoder: EmbeddingModel, states: Sequence[ProofState], config: ControllerTrainConfig,
                     conclusion_texts: Sequence[str] | None = None, init: Heads | None = None):
    """SGD on alpha * L_step + beta * L_fact (plus the abductive head).

    ``states`` come from ``enumerate_states``; ``conclusion_texts`` gives the
    gold conclusion text of each state's step and is needed only for the
    abductive head.
    """
    heads = init.copy() if init is not None else Heads.zeros(encoder.dim, config.features)
    if config.encoder_lr > 0:
        encoder = encoder.copy()
    heads.encoder_checksum = encoder.checksum()
    states = list(states)
    if not states:
        raise ControllerError("no training states")
    targets = None
    if config.train_abductive and conclusion_texts is not None:
        targets = [conclusion_vector(s, encoder, t) for s, t in zip(states, conclusion_texts)]
    rng = np.random.default_rng(config.seed)
    hist = ControllerHistory()
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(states))
        sums = np.zeros(2)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [states[i] for i in idx]
            negs = [sample_negatives(len(s.pool) * (len(s.pool) - 1) // 2, s.gold_pair_index(), config.negatives, rng)
                    for s in batch]
            ls = lf = 0.0
            if config.alpha > 0:
                ls, gs, _ = loss_step(heads, encoder, batch, config, negs, want_grad=True)
                heads.step_w -= lr * config.alpha * gs
            if config.beta > 0 and any(s.labeled for s in batch):
                lf, gf, gfb = loss_fact(heads, batch, config, want_grad=True)
                heads.fact_w -= lr * config.beta * gf
                heads.fact_b -= lr * config.beta * gfb
            if targets is not None:
                _, ga, _ = loss_abductive(heads, batch, [targets[i] for i in idx], config, want_grad=True)
                heads.abd_w -= lr * ga
            if config.encoder_lr > 0:
                correlation_table_step(encoder, batch, negs, config.gamma5, config.encoder_lr)
            if not (np.all(np.isfinite(heads.step_w)) and np.all(np.isfinite(heads.fact_w))):
                raise ControllerError(f"divergence in epoch {epoch}")
            sums += (ls, lf)
            n_batches += 1
        if config.encoder_lr > 0:
            states = reencode(states, encoder)
            if targets is not None:
                targets = [conclusion_vector(s, encoder, t) for s, t in zip(states, conclusion_texts)]
        # mean of the pre-update batch losses, as usual for SGD curves
        ls, lf = sums / n_batches
        hist.epoch_step.append(float(ls))
        hist.epoch_fact.append(float(lf))
        hist.epoch_loss.append(float(config.alpha * ls + config.beta * lf))
    heads.encoder_checksum = encoder.checksum()
    hist.encoder = encoder
    return heads, hist


def top1_accuracy(heads: Heads, states: Sequence[ProofState]) -> tuple[float, float]:
    """(gold-pair top-1 accuracy, mean uniform baseline 1/C(n,2))."""
    hits, base = 0, 0.0
    for s in states:
        _, z = step_logits(heads, s.h, s.S)
        hits += int(np.argmax(z) == s.gold_pair_index())
        n = len(s.pool)
        base += 2.0 / (n * (n - 1))
    return hits / len(states), base / len(states)
