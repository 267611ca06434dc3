"""Random tree builders shared by the test modules."""
from __future__ import annotations

import random

from entailtree.tree import HYPOTHESIS, NodeId, Step, build_tree

WORDS = ["water", "ice", "heat", "sun", "plant", "light", "energy", "cold", "melt", "freeze",
         "animal", "food", "earth", "moon", "rock", "soil", "air", "gas", "liquid", "solid"]


def random_text(rng: random.Random, n: int = 4) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def random_tree(rng: random.Random, n_leaves: int, n_context: int | None = None, texts=None):
    """Binary tree over ``n_leaves`` random leaves of a context of ``n_context`` facts.

    Returns (tree, context).  Intermediates are numbered in creation order.
    """
    n_context = max(n_context or n_leaves, n_leaves)
    context = {NodeId.sent(k): (texts[k - 1] if texts else f"fact {k} " + random_text(rng))
               for k in range(1, n_context + 1)}
    pool = rng.sample(sorted(context), n_leaves)
    steps, ints = [], {}
    k = 0
    while len(pool) > 1:
        a, b = rng.sample(pool, 2)
        pool.remove(a)
        pool.remove(b)
        if not pool:
            steps.append(Step((a, b), HYPOTHESIS))
            break
        k += 1
        node = NodeId.int_(k)
        ints[node] = f"int {k} " + random_text(rng)
        steps.append(Step((a, b), node))
        pool.append(node)
    tree = build_tree("hyp " + random_text(rng), steps, context, ints)
    return tree, context


def perturb(tree, context, rng: random.Random):
    """A different valid tree over (mostly) the same context: re-pair some nodes."""
    n = len(tree.leaves)
    ids = [f.id for f in tree.leaves]
    others = [c for c in context if c not in tree.leaf_ids]
    if others and rng.random() < 0.5:
        ids[rng.randrange(n)] = rng.choice(others)
    if rng.random() < 0.3 and n > 2:
        ids.pop(rng.randrange(n))
    pool = list(ids)
    rng.shuffle(pool)
    steps, ints, k = [], {}, 0
    while len(pool) > 1:
        # bias towards keeping the original pairing order
        i = 0 if rng.random() < 0.6 else rng.randrange(len(pool) - 1)
        a, b = pool[i], pool[i + 1]
        del pool[i:i + 2]
        if not pool:
            steps.append(Step((a, b), HYPOTHESIS))
            break
        k += 1
        node = NodeId.int_(k)
        ints[node] = f"int {k} " + random_text(rng)
        steps.append(Step((a, b), node))
        pool.append(node)
    return build_tree(tree.hypothesis, steps, context, ints)


def finite_difference_check(f, theta, analytic, coords, eps: float = 1e-6) -> float:
    """Worst relative error between ``analytic`` and central differences of ``f`` at ``coords``."""
    worst = 0.0
    for c in coords:
        up, dn = theta.copy(), theta.copy()
        up.flat[c] += eps
        dn.flat[c] -= eps
        num = (f(up) - f(dn)) / (2 * eps)
        ana = analytic.flat[c]
        denom = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / denom)
    return worst


def local_edit(tree, context, rng: random.Random, n_edits: int = 1):
    """Apply small random edits: swap two subtrees across steps, or swap a leaf for a distractor."""
    from entailtree.tree import validate_tree

    concl = [s.conclusion for s in tree.steps]

    def make(steps):
        return build_tree(tree.hypothesis, [Step(p, c) for p, c in zip(steps, concl)], context, tree.intermediates)

    steps = [list(s.premises) for s in tree.steps]
    for _ in range(n_edits):
        for _attempt in range(20):
            trial = [list(s) for s in steps]
            i, j = rng.randrange(len(trial)), rng.randrange(2)
            used = {p for ps in trial for p in ps}
            spare = [c for c in context if c not in used]
            if rng.random() < 0.4:
                if not (spare and trial[i][j].is_leaf):
                    continue
                trial[i][j] = rng.choice(spare)
            else:
                if len(trial) < 2:
                    continue
                k, m = rng.choice([x for x in range(len(trial)) if x != i]), rng.randrange(2)
                trial[i][j], trial[k][m] = trial[k][m], trial[i][j]
            try:
                ok = not validate_tree(make(trial), strict=True)
            except Exception:
                ok = False
            if ok:
                steps = trial
                break
    return make(steps)


# one line per acceptance criterion, printed in the pytest terminal summary
ACCEPTANCE_LINES: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
