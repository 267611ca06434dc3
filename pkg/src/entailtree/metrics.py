"""Tree evaluation: intermediate alignment, Leaves/Steps/Intermediates F1 and
AllCorrect, Overall AllCorrect, and P@1/NDCG for single-step ranking."""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .text import tokenize
from .tree import EntailmentTree, leaf_descendants, validate_tree

DEFAULT_TAU = 0.28


class MetricsError(Exception):
    pass


class InvalidTree(MetricsError):
    pass


class EmptyRanking(MetricsError):
    pass


def f1_score(n_correct_pred: int, n_pred: int, n_correct_gold: int, n_gold: int) -> float:
    """F1 from matched counts; two empty sets agree perfectly."""
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0
    p = n_correct_pred / n_pred
    r = n_correct_gold / n_gold
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def set_f1(pred: set, gold: set) -> float:
    hit = len(pred & gold)
    return f1_score(hit, len(pred), hit, len(gold))


def token_f1(pred: str, gold: str) -> float:
    """Multiset token overlap F1 (SQuAD style)."""
    p, g = tokenize(pred), tokenize(gold)
    if not p and not g:
        return 1.0
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    prec, rec = overlap / len(p), overlap / len(g)
    return 2 * prec * rec / (prec + rec)


def jaccard(a: frozenset, b: frozenset) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


# ---------------------------------------------------------------- alignment

@dataclass
class Alignment:
    mapping: dict                       # pred int -> gold int (matched only)
    scores: dict                        # pred int -> Jaccard of the matched pair

    @property
    def total(self) -> float:
        return sum(self.scores.values())


def _check(tree):
    bad = validate_tree(tree)
    if bad:
        raise InvalidTree("; ".join(map(str, bad)))


def _int_leaf_sets(tree: EntailmentTree) -> dict:
    return {n: leaf_descendants(tree, n) for n in tree.intermediates}


def jaccard_matrix(pred: EntailmentTree, gold: EntailmentTree) -> dict:
    P, G = _int_leaf_sets(pred), _int_leaf_sets(gold)
    return {(p, g): jaccard(P[p], G[g]) for p in P for g in G}


def align_trees(pred: EntailmentTree, gold: EntailmentTree) -> Alignment:
    """Greedy maximum-Jaccard injective matching of intermediates.

    Pairs are taken score-descending (ties: smaller gold id, then smaller
    pred id); pairs with no shared leaf never match.
    """
    _check(pred)
    _check(gold)
    J = jaccard_matrix(pred, gold)
    mapping, scores, used = {}, {}, set()
    for (p, g), s in sorted(J.items(), key=lambda kv: (-kv[1], kv[0][1], kv[0][0])):
        if s <= 0 or p in mapping or g in used:
            continue
        mapping[p] = g
        scores[p] = s
        used.add(g)
    return Alignment(mapping, scores)


def optimal_alignment_mass(pred: EntailmentTree, gold: EntailmentTree) -> float:
    """Exhaustive best total Jaccard over injective assignments (small trees only)."""
    J = jaccard_matrix(pred, gold)
    P, G = sorted(pred.intermediates), sorted(gold.intermediates)
    if len(P) > 8 or len(G) > 8:
        raise MetricsError("exhaustive assignment limited to 8 intermediates")
    if not P or not G:
        return 0.0
    best = 0.0
    small, large, flip = (P, G, False) if len(P) <= len(G) else (G, P, True)
    for perm in itertools.permutations(large, len(small)):
        total = sum(J[(b, a) if flip else (a, b)] for a, b in zip(small, perm))
        best = max(best, total)
    return best


# ------------------------------------------------------------------ metrics

def eval_leaves(pred: EntailmentTree, gold: EntailmentTree) -> tuple[float, int]:
    f1 = set_f1(set(pred.leaf_ids), set(gold.leaf_ids))
    return f1, int(f1 == 1.0)


def _mapped_premises(step, mapping):
    out = []
    for p in step.premises:
        if p.is_leaf:
            out.append(p)
        elif p in mapping:
            out.append(mapping[p])
        else:
            out.append(("unmatched", p))
    return frozenset(out)


def eval_steps(pred: EntailmentTree, gold: EntailmentTree, alignment: Alignment) -> tuple[float, int]:
    """A predicted step counts iff its mapped premise set equals some gold step's."""
    gold_sets = Counter(frozenset(s.premises) for s in gold.steps)
    pred_sets = Counter(_mapped_premises(s, alignment.mapping) for s in pred.steps)
    hit = sum((gold_sets & pred_sets).values())
    f1 = f1_score(hit, len(pred.steps), hit, len(gold.steps))
    return f1, int(f1 == 1.0)


def eval_intermediates(pred: EntailmentTree, gold: EntailmentTree, alignment: Alignment,
                       sim: Callable[[str, str], float] = token_f1, tau: float = DEFAULT_TAU) -> tuple[float, int]:
    correct = sum(
        1 for p, g in alignment.mapping.items()
        if sim(pred.intermediates[p], gold.intermediates[g]) > tau
    )
    f1 = f1_score(correct, len(pred.intermediates), correct, len(gold.intermediates))
    return f1, int(f1 == 1.0)


def eval_overall(leaves_ac: int, steps_ac: int, intermediates_ac: int) -> int:
    return int(bool(leaves_ac) and bool(steps_ac) and bool(intermediates_ac))


@dataclass
class TreeScore:
    id: str
    leaves_f1: float
    leaves_allcorrect: int
    steps_f1: float
    steps_allcorrect: int
    intermediates_f1: float
    intermediates_allcorrect: int
    overall_allcorrect: int
    gold_leaves: int


def evaluate_tree(pred: EntailmentTree, gold: EntailmentTree, sim=token_f1, tau: float = DEFAULT_TAU,
                  tree_id: str = "") -> TreeScore:
    al = align_trees(pred, gold)
    lf, la = eval_leaves(pred, gold)
    sf, sa = eval_steps(pred, gold, al)
    inf, ia = eval_intermediates(pred, gold, al, sim, tau)
    return TreeScore(tree_id, lf, la, sf, sa, inf, ia, eval_overall(la, sa, ia), len(gold.leaves))


def empty_score(tree_id: str, gold: EntailmentTree) -> TreeScore:
    """Score for a missing prediction: zero on every axis."""
    return TreeScore(tree_id, 0.0, 0, 0.0, 0, 0.0, 0, 0, len(gold.leaves))


@dataclass
class EvalReport:
    leaves_f1: float
    leaves_allcorrect: float
    steps_f1: float
    steps_allcorrect: float
    intermediates_f1: float
    intermediates_allcorrect: float
    overall_allcorrect: float
    n: int
    per_tree: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_tree")
        return d


def aggregate(scores: Sequence[TreeScore]) -> EvalReport:
    """Macro averages over trees, in input order."""
    n = len(scores)
    if n == 0:
        raise MetricsError("nothing to aggregate")

    def mean(attr):
        total = 0.0
        for s in scores:
            total += getattr(s, attr)
        return total / n

    return EvalReport(
        mean("leaves_f1"), mean("leaves_allcorrect"),
        mean("steps_f1"), mean("steps_allcorrect"),
        mean("intermediates_f1"), mean("intermediates_allcorrect"),
        mean("overall_allcorrect"), n, list(scores),
    )


# ------------------------------------------------------------------ ranking

def rank_metrics(labels: Sequence) -> tuple[float, float]:
    """(P@1, NDCG) for gold labels listed in ranked order.

    Gains are binary and discounts log2(rank + 1); NDCG is 0 without positives.
    """
    if len(labels) == 0:
        raise EmptyRanking("no candidates")
    rel = [1.0 if x else 0.0 for x in labels]
    p1 = rel[0]
    dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel))
    ideal = sum(1.0 / math.log2(i + 2) for i in range(int(sum(rel))))
    return p1, (dcg / ideal if ideal > 0 else 0.0)
