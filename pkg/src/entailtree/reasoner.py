"""Tree construction: relevance filtering, greedy iteration and beam search.

Scoring goes through a *scorer*: trained ``Heads`` are wrapped by
``HeadsScorer``; ``GoldScorer`` ranks the steps of a known gold tree first
and is used to certify the search and bookkeeping in isolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import Heads, PoolItem, ProofState, fact_scores, score_steps, score_steps_abductive
from .embed import EmbeddingModel
from .generator import GeneratorError, GenRequest, OracleMiss
from .tree import HYPOTHESIS, EntailmentTree, Fact, NodeId, Step, check_tree
from .text import normalize_space


class ReasonerError(Exception):
    pass


class PoolExhausted(ReasonerError):
    pass


class GeneratorFailure(ReasonerError):
    pass


class EmptyInput(ReasonerError):
    pass


@dataclass
class ReasonConfig:
    delta: float = 0.0
    beam_size: int = 3
    top_p: float = 0.4
    top_abd_p: float = 0.1
    max_steps: int = 30
    stop_distance: float | None = None
    abductive: bool = True
    anchor_greedy: bool = True
    length_normalize: bool = False
    rescore_facts: bool = True          # beam: re-apply the delta filter to the grown pool each step

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.beam_size < 1 or self.max_steps < 1:
            raise ValueError("beam_size and max_steps must be positive")
        if not (0.0 < self.top_p <= 1.0 and 0.0 < self.top_abd_p <= 1.0):
            raise ValueError("top_p and top_abd_p must lie in (0, 1]")


# ------------------------------------------------------------------ scorers

class HeadsScorer:
    def __init__(self, heads: Heads):
        self.heads = heads

    def fact_scores(self, hypothesis: str, h, items: Sequence[PoolItem]) -> np.ndarray:
        return fact_scores(self.heads, h, np.stack([p.vec for p in items]))

    def step_distribution(self, state: ProofState) -> dict:
        return score_steps(self.heads, state)

    def abductive_distribution(self, state: ProofState) -> dict:
        return score_steps_abductive(self.heads, state)


class GoldScorer:
    """Puts (almost) all mass on pairs whose texts form a gold step."""

    def __init__(self, trees: Sequence[EntailmentTree], sharpness: float = 30.0):
        self.steps = set()
        self.leaves = set()
        self.root_premises = set()
        for tree in trees:
            for step in tree.steps:
                texts = frozenset(normalize_space(tree.text_of(p)) for p in step.premises)
                self.steps.add(texts)
                if step.conclusion == HYPOTHESIS:
                    self.root_premises.update((normalize_space(tree.hypothesis), t) for t in texts)
            self.leaves.update(normalize_space(f.text) for f in tree.leaves)
            # gold intermediates count as relevant when a grown pool is re-filtered
            self.leaves.update(normalize_space(t) for t in tree.intermediates.values())
        self.sharpness = sharpness

    def fact_scores(self, hypothesis, h, items):
        return np.array([0.999 if normalize_space(p.text) in self.leaves else 0.001 for p in items])

    def _softmax(self, keys, hits):
        z = self.sharpness * np.array(hits, dtype=float)
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return dict(sorted(zip(keys, map(float, p))))

    def step_distribution(self, state):
        keys, hits = [], []
        pool = state.pool
        for i in range(len(pool)):
            for j in range(i + 1, len(pool)):
                a, b = sorted((pool[i], pool[j]), key=lambda p: p.node)
                keys.append((a.node, b.node))
                hits.append(frozenset((normalize_space(a.text), normalize_space(b.text))) in self.steps)
        return self._softmax(keys, hits)

    def abductive_distribution(self, state):
        hyp = normalize_space(state.hypothesis)
        keys = [(HYPOTHESIS, p.node) for p in state.pool]
        hits = [(hyp, normalize_space(p.text)) in self.root_premises for p in state.pool]
        return self._softmax(keys, hits)


def as_scorer(heads):
    return HeadsScorer(heads) if isinstance(heads, Heads) else heads


# ----------------------------------------------------------------- partials

@dataclass(frozen=True)
class BuiltStep:
    premise_a: NodeId
    premise_b: NodeId
    conclusion: NodeId
    text: str
    log_prob: float


@dataclass
class PartialProof:
    steps: tuple = ()
    pool: tuple = ()
    cumulative_score: float = 0.0
    texts: dict = field(default_factory=dict)      # every node seen -> text
    vecs: dict = field(default_factory=dict, repr=False)
    root: NodeId | None = None                     # node treated as root; default last conclusion

    def __post_init__(self):
        consumed = {p for s in self.steps for p in (s.premise_a, s.premise_b)}
        if consumed & {p.node for p in self.pool}:
            raise ReasonerError("pool overlaps consumed nodes")
        if self.cumulative_score > 1e-12:
            raise ReasonerError("cumulative score must be <= 0")

    @property
    def root_node(self) -> NodeId | None:
        if self.root is not None:
            return self.root
        return self.steps[-1].conclusion if self.steps else None

    def state(self, hypothesis: str, h) -> ProofState:
        return ProofState(hypothesis, h, self.pool)

    def subtree(self, root: NodeId) -> "PartialProof":
        by_concl = {s.conclusion: s for s in self.steps}
        keep, stack = set(), [root]
        while stack:
            n = stack.pop()
            if n in by_concl:
                keep.add(n)
                stack.extend((by_concl[n].premise_a, by_concl[n].premise_b))
        steps = tuple(s for s in self.steps if s.conclusion in keep)
        return PartialProof(steps, (), sum(s.log_prob for s in steps), self.texts, self.vecs, root)

    def subtrees(self) -> list["PartialProof"]:
        """One partial per built step, rooted at that step's conclusion."""
        return [self.subtree(s.conclusion) for s in self.steps]

    def score(self, length_normalize: bool = False) -> float:
        if length_normalize and self.steps:
            return self.cumulative_score / len(self.steps)
        return self.cumulative_score

    def to_tree(self, hypothesis: str) -> EntailmentTree:
        """Subtree under the root, root relabeled as the hypothesis, ints renumbered densely."""
        if not self.steps:
            raise ReasonerError("no steps built")
        part = self.subtree(self.root_node)
        rename = {}
        for s in part.steps:
            if s.conclusion == part.root_node:
                rename[s.conclusion] = HYPOTHESIS
            else:
                rename[s.conclusion] = NodeId.int_(len([v for v in rename.values() if v != HYPOTHESIS]) + 1)
        steps, ints, leaves = [], {}, {}
        for s in part.steps:
            prem = []
            for p in (s.premise_a, s.premise_b):
                if p.is_leaf:
                    leaves[p] = self.texts[p]
                prem.append(rename.get(p, p))
            concl = rename[s.conclusion]
            if concl != HYPOTHESIS:
                ints[concl] = s.text
            steps.append(Step(prem, concl))
        tree = EntailmentTree(hypothesis, tuple(Fact(k, v) for k, v in leaves.items()), ints, tuple(steps))
        return check_tree(tree, strict=True)


# ------------------------------------------------------------------ helpers

def filter_facts(heads, hypothesis: str, h, pool: Sequence[PoolItem], delta: float) -> list[PoolItem]:
    """Keep facts scoring at least delta, in original order; never fewer than two."""
    if not pool:
        raise EmptyInput("empty pool")
    pool = list(pool)
    if delta <= 0:
        return pool
    scores = as_scorer(heads).fact_scores(hypothesis, h, pool)
    keep = [k for k, s in enumerate(scores) if s >= delta]
    if len(keep) < 2 and len(pool) >= 2:
        # floor: best two by score, ties by node id
        ranked = sorted(range(len(pool)), key=lambda k: (-scores[k], pool[k].node))
        keep = sorted(ranked[:2])
    return [pool[k] for k in keep]


def nucleus_select(distribution: dict, p: float) -> list:
    """Smallest score-descending prefix whose mass reaches ``p`` (ties by key)."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if not distribution:
        return []
    ranked = sorted(distribution.items(), key=lambda kv: (-kv[1], kv[0]))
    out, mass = [], 0.0
    for key, prob in ranked:
        out.append(key)
        mass += prob
        # tolerance so that p = 1 is reached despite rounding
        if mass >= p - 1e-12:
            break
    return out


def _pool_items(encoder: EmbeddingModel, facts: Sequence) -> list[PoolItem]:
    items = []
    for f in facts:
        if isinstance(f, PoolItem):
            items.append(f)
        else:
            items.append(PoolItem(f.id, f.text, encoder.encode(f.text)))
    return sorted(items, key=lambda p: p.node)


def _initial(items: Sequence[PoolItem]) -> PartialProof:
    return PartialProof((), tuple(items), 0.0, {p.node: p.text for p in items}, {p.node: p.vec for p in items})


def _apply(part: PartialProof, pair: tuple, text: str, vec, log_prob: float) -> PartialProof:
    n_int = sum(1 for s in part.steps) + 1
    node = NodeId.int_(n_int)
    step = BuiltStep(pair[0], pair[1], node, text, log_prob)
    pool = tuple(sorted([p for p in part.pool if p.node not in pair] + [PoolItem(node, text, vec)],
                        key=lambda p: p.node))
    texts = dict(part.texts)
    texts[node] = text
    vecs = dict(part.vecs)
    vecs[node] = vec
    return PartialProof(part.steps + (step,), pool, part.cumulative_score + log_prob, texts, vecs)


def _deduce(generator, part: PartialProof, pair) -> str:
    try:
        text = generator.generate(GenRequest.deduce(part.texts[pair[0]], part.texts[pair[1]]))
    except GeneratorError as exc:
        raise GeneratorFailure(str(exc)) from exc
    if not text or not text.strip():
        raise GeneratorFailure("generator returned empty text")
    return normalize_space(text)


def _finished(part: PartialProof, h, config: ReasonConfig) -> bool:
    if config.stop_distance is not None:
        last = part.steps[-1].conclusion
        if float(np.linalg.norm(part.vecs[last] - h)) < config.stop_distance:
            return True
    return len(part.pool) <= 1 or len(part.steps) >= config.max_steps


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -1e300


def _greedy(encoder, scorer, generator, hypothesis, h, items, config) -> PartialProof:
    part = _initial(items)
    if len(part.pool) < 2:
        raise PoolExhausted(f"pool of {len(part.pool)} cannot form a step")
    while True:
        dist = scorer.step_distribution(part.state(hypothesis, h))
        pair, prob = min(dist.items(), key=lambda kv: (-kv[1], kv[0]))
        try:
            text = _deduce(generator, part, pair)
        except GeneratorFailure as exc:
            # a lookup generator has nothing past the gold root; keep what was built
            if part.steps and isinstance(exc.__cause__, OracleMiss):
                return part
            raise
        part = _apply(part, pair, text, encoder.encode(text), min(0.0, _log(prob)))
        if _finished(part, h, config):
            return part


def greedy_rollout(encoder, heads, generator, hypothesis: str, pool: Sequence, config: ReasonConfig) -> PartialProof:
    """Greedy construction, returned as the raw partial (all built steps)."""
    h = encoder.encode(hypothesis)
    return _greedy(encoder, as_scorer(heads), generator, hypothesis, h, _pool_items(encoder, pool), config)


def greedy_construct(encoder, heads, generator, hypothesis: str, pool: Sequence, config: ReasonConfig) -> EntailmentTree:
    return greedy_rollout(encoder, heads, generator, hypothesis, pool, config).to_tree(hypothesis)


def _root_distance(part: PartialProof, h) -> float:
    return float(np.linalg.norm(part.vecs[part.root_node] - h))


def _rank_key(part: PartialProof, h, length_normalize=False):
    return (_root_distance(part, h), -part.score(length_normalize), len(part.steps),
            tuple((s.premise_a, s.premise_b) for s in part.steps))


def best_partial(partials: Sequence[PartialProof], hypothesis: str, encoder) -> PartialProof:
    if not partials:
        raise EmptyInput("no partial proofs")
    h = encoder.encode(hypothesis)
    return min(partials, key=lambda p: _rank_key(p, h))


def best_partial_match(partials: Sequence[PartialProof], hypothesis: str, encoder) -> EntailmentTree:
    """Partial whose root is nearest the hypothesis; then higher score, then fewer steps."""
    return best_partial(partials, hypothesis, encoder).to_tree(hypothesis)


def _nearest(part: PartialProof, vec, exclude: NodeId) -> NodeId | None:
    best = None
    for p in part.pool:
        if p.node == exclude:
            continue
        key = (float(np.linalg.norm(p.vec - vec)), p.node)
        if best is None or key < best[0]:
            best = (key, p.node)
    return None if best is None else best[1]


def _candidates(encoder, scorer, generator, hypothesis, h, part, config) -> list:
    """(cumulative log prob, pair, step log prob) expansions: deductive nucleus plus abductive mirror pairs."""
    state = part.state(hypothesis, h)
    dist = scorer.step_distribution(state)
    pairs = nucleus_select(dist, config.top_p)
    if config.abductive and len(part.pool) > 2:
        for _, known in nucleus_select(scorer.abductive_distribution(state), config.top_abd_p):
            try:
                guess = generator.generate(GenRequest.abduce(part.texts[known], hypothesis))
            except GeneratorError:
                # abduction is a proposal mechanism only; a miss just adds nothing
                continue
            mate = _nearest(part, encoder.encode(guess), known)
            if mate is not None:
                pair = tuple(sorted((known, mate)))
                if pair not in pairs:
                    pairs.append(pair)
    out = []
    for p in pairs:
        lp = min(0.0, _log(dist[p]))
        out.append((part.cumulative_score + lp, p, lp))
    return out


def _refilter(scorer, hypothesis, h, part: PartialProof, delta: float) -> PartialProof:
    """Drop pool facts that now score below delta; the newest conclusion always stays."""
    newest = part.steps[-1].conclusion
    rest = [p for p in part.pool if p.node != newest]
    kept = {p.node for p in filter_facts(scorer, hypothesis, h, rest, delta)} | {newest}
    pool = tuple(p for p in part.pool if p.node in kept)
    return PartialProof(part.steps, pool, part.cumulative_score, part.texts, part.vecs)


def beam_search(encoder, heads, generator, hypothesis: str, pool: Sequence, config: ReasonConfig) -> list[PartialProof]:
    """Finished partials ranked by root distance to h, then cumulative score."""
    scorer = as_scorer(heads)
    h = encoder.encode(hypothesis)
    items = _pool_items(encoder, pool)
    if len(items) < 2:
        raise PoolExhausted(f"pool of {len(items)} cannot form a step")
    beam = [_initial(items)]
    finished = []
    while beam:
        cands = []
        for rank, part in enumerate(beam):
            for score, pair, lp in _candidates(encoder, scorer, generator, hypothesis, h, part, config):
                cands.append((score, rank, pair, lp))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt, failures, kept = [], [], 0
        for score, rank, pair, lp in cands:
            if kept == config.beam_size:
                break
            part = beam[rank]
            try:
                text = _deduce(generator, part, pair)
            except GeneratorFailure as exc:
                # a generator that cannot realise a step (oracle miss) prunes it
                failures.append(exc)
                continue
            kept += 1
            new = _apply(part, pair, text, encoder.encode(text), lp)
            if config.rescore_facts and config.delta > 0 and len(new.pool) > 2:
                new = _refilter(scorer, hypothesis, h, new, config.delta)
            (finished if _finished(new, h, config) else nxt).append(new)
        if kept == 0 and failures:
            stranded = [b for b in beam if b.steps]
            if stranded and all(isinstance(f.__cause__, OracleMiss) for f in failures):
                finished.extend(stranded)
            else:
                raise GeneratorFailure(f"every expansion failed: {failures[0]}")
        beam = nxt
    if config.anchor_greedy:
        finished.append(_greedy(encoder, scorer, generator, hypothesis, h, items, config))
    unique, seen = [], set()
    for part in sorted(finished, key=lambda p: _rank_key(p, h, config.length_normalize)):
        sig = tuple((s.premise_a, s.premise_b, s.text) for s in part.steps)
        if sig not in seen:
            seen.add(sig)
            unique.append(part)
    return unique


def beam_construct(encoder, heads, generator, hypothesis: str, pool: Sequence, config: ReasonConfig) -> list[EntailmentTree]:
    return [p.to_tree(hypothesis) for p in beam_search(encoder, heads, generator, hypothesis, pool, config)]
