"""Seeded synthetic world for silver single steps and toy entailment trees.

The world is a small knowledge base over invented words: a class taxonomy
with inherited properties, part-whole chains and causal chains.  Every
derived statement has a fixed surface form so the template generator can
reproduce gold conclusions exactly.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl", "kr", "pl", "st", "tr", "sk"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
CODAS = ["", "n", "r", "l", "m", "s", "x", "th"]


def kind_of(a, b):
    return f"{a} is a kind of {b}"


def has_property(a, p):
    return f"{a} has property {p}"


def part_of(a, b):
    return f"{a} is a part of {b}"


def causes(a, b):
    return f"{a} causes {b}"


def has_both(a, p, q):
    p, q = sorted((p, q))
    return f"{a} has property {p} and property {q}"


@dataclass
class World:
    parent: dict = field(default_factory=dict)        # class -> parent class
    props: dict = field(default_factory=dict)         # class -> own properties
    whole: dict = field(default_factory=dict)         # object -> containing object
    effect: dict = field(default_factory=dict)        # event -> next event
    classes: list = field(default_factory=list)
    objects: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def ancestors(self, c):
        out = []
        while c in self.parent:
            c = self.parent[c]
            out.append(c)
        return out

    def chain(self, table, x):
        out = []
        while x in table:
            x = table[x]
            out.append(x)
        return out

    def inherited(self, c):
        """(property, owning class) pairs reachable from c, nearest owner first."""
        out = [(p, c) for p in self.props.get(c, ())]
        for a in self.ancestors(c):
            out.extend((p, a) for p in self.props.get(a, ()))
        return out

    def base_facts(self) -> list[str]:
        facts = [kind_of(c, p) for c, p in self.parent.items()]
        facts += [has_property(c, p) for c, ps in self.props.items() for p in ps]
        facts += [part_of(a, b) for a, b in self.whole.items()]
        facts += [causes(a, b) for a, b in self.effect.items()]
        return sorted(facts)


def _words(rng: random.Random, n: int, taken: set) -> list[str]:
    out = []
    while len(out) < n:
        syl = rng.choice([2, 2, 3])
        w = "".join(rng.choice(ONSETS) + rng.choice(VOWELS) for _ in range(syl)) + rng.choice(CODAS)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_world(seed: int = 0, n_roots: int = 6, depth: int = 5, branching: int = 3,
               n_chains: int = 12, chain_len: int = 5) -> World:
    rng = random.Random(seed)
    taken: set = set()
    w = World()
    level = _words(rng, n_roots, taken)
    w.classes.extend(level)
    for _ in range(depth - 1):
        nxt = []
        for p in level:
            kids = _words(rng, rng.randint(1, branching), taken)
            for k in kids:
                w.parent[k] = p
            nxt.extend(kids)
        w.classes.extend(nxt)
        level = nxt
    props = _words(rng, len(w.classes), taken)
    for c, p in zip(w.classes, props):
        if rng.random() < 0.7:
            w.props[c] = [p]
    for table, bucket in ((w.whole, w.objects), (w.effect, w.events)):
        for _ in range(n_chains):
            names = _words(rng, chain_len, taken)
            bucket.extend(names)
            for a, b in zip(names, names[1:]):
                table[a] = b
    return w


# ---------------------------------------------------------------- goals
# A goal is a tuple describing a statement; text() renders it and
# decompositions() lists the premise pairs that entail it.

def text(goal) -> str:
    kind = goal[0]
    if kind == "kind":
        return kind_of(goal[1], goal[2])
    if kind == "prop":
        return has_property(goal[1], goal[2])
    if kind == "part":
        return part_of(goal[1], goal[2])
    if kind == "cause":
        return causes(goal[1], goal[2])
    if kind == "both":
        return has_both(goal[1], goal[2], goal[3])
    raise ValueError(goal)


def is_base(world: World, goal) -> bool:
    kind = goal[0]
    if kind == "kind":
        return world.parent.get(goal[1]) == goal[2]
    if kind == "prop":
        return goal[2] in world.props.get(goal[1], ())
    if kind == "part":
        return world.whole.get(goal[1]) == goal[2]
    if kind == "cause":
        return world.effect.get(goal[1]) == goal[2]
    return False


def decompositions(world: World, goal) -> list[tuple]:
    kind = goal[0]
    out = []
    if kind == "prop":
        # inheritance goes through the direct parent only; the parent's
        # property may itself be inherited and is expanded recursively
        x, z = goal[1], goal[2]
        parent = world.parent.get(x)
        if parent is not None and z not in world.props.get(x, ()) and any(p == z for p, _ in world.inherited(parent)):
            out.append((("kind", x, parent), ("prop", parent, z)))
    elif kind in ("part", "cause"):
        table = world.whole if kind == "part" else world.effect
        x, top = goal[1], goal[2]
        chain = world.chain(table, x)
        for y in chain[:chain.index(top)]:
            out.append(((kind, x, y), (kind, y, top)))
    elif kind == "both":
        out.append((("prop", goal[1], goal[2]), ("prop", goal[1], goal[3])))
    return out


def random_goal(world: World, rng: random.Random, derived_only: bool = True):
    """A derivable statement (not a base fact unless derived_only is False)."""
    for _ in range(1000):
        r = rng.random()
        if r < 0.35:
            x = rng.choice(world.classes)
            inh = [(p, c) for p, c in world.inherited(x) if c != x]
            if not inh:
                continue
            goal = ("prop", x, rng.choice(inh)[0])
        elif r < 0.85:
            kind = rng.choice(["part", "cause"])
            table = world.whole if kind == "part" else world.effect
            x = rng.choice(sorted(table))
            chain = world.chain(table, x)
            if len(chain) < 2:
                continue
            goal = (kind, x, rng.choice(chain[1:]))
        else:
            x = rng.choice(world.classes)
            inh = sorted({p for p, _ in world.inherited(x)})
            if len(inh) < 2:
                continue
            p, q = rng.sample(inh, 2)
            goal = ("both", x, p, q)
        if not derived_only or decompositions(world, goal):
            return goal
    raise RuntimeError("world too small to draw a derivable goal")


def expand(world: World, goal, rng: random.Random, max_leaves: int):
    """Random proof of ``goal`` as nested (goal, left, right) / goal leaves."""
    if is_base(world, goal) or max_leaves < 2:
        return goal
    options = decompositions(world, goal)
    if not options:
        return goal
    a, b = rng.choice(options)
    budget_a = rng.randint(1, max_leaves - 1)
    return (goal, expand(world, a, rng, budget_a), expand(world, b, rng, max_leaves - budget_a))


def proof_is_grounded(world: World, node) -> bool:
    if isinstance(node[0], str):
        return is_base(world, node)
    return proof_is_grounded(world, node[1]) and proof_is_grounded(world, node[2])


def prove(world: World, goal, rng: random.Random):
    """Fully expanded random proof: every leaf is a base fact."""
    if is_base(world, goal):
        return goal
    options = decompositions(world, goal)
    if not options:
        raise ValueError(f"goal not derivable: {goal}")
    a, b = rng.choice(options)
    return (goal, prove(world, a, rng), prove(world, b, rng))


def two_level_cases(world: World, n: int, seed: int = 0) -> list[tuple]:
    """``n`` chained compositions (a, b, c, r) with a+b->i and i+c->r, as texts."""
    rng = random.Random(seed)
    out = []
    for _ in range(200 * n):
        if len(out) == n:
            break
        goal = random_goal(world, rng)
        x, y = rng.choice(decompositions(world, goal))
        inner = [g for g in (x, y) if decompositions(world, g)]
        if not inner:
            continue
        i = rng.choice(inner)
        c = y if i == x else x
        a, b = rng.choice(decompositions(world, i))
        out.append((text(a), text(b), text(c), text(goal)))
    if len(out) < n:
        raise RuntimeError("world too small for the requested number of two-level cases")
    return out


def _proof_leaves(node):
    if isinstance(node[0], str):
        return [node]
    return _proof_leaves(node[1]) + _proof_leaves(node[2])


def _proof_nodes(node):
    if isinstance(node[0], str):
        return [node]
    return [node[0]] + _proof_nodes(node[1]) + _proof_nodes(node[2])


def tree_example(world: World, proof, rng: random.Random, ex_id: str, n_distractors: int = 0) -> dict:
    """Render a nested proof as one benchmark-style JSON record."""
    leaves = [text(g) for g in _proof_leaves(proof)]
    hyp = text(proof[0])
    # distractors: prefer base facts sharing a word with the hypothesis or a leaf
    words = set(hyp.split()) | {w for t in leaves for w in t.split()}
    stop = {"is", "a", "kind", "of", "has", "property", "part", "causes", "and"}
    words -= stop
    pool = [f for f in world.base_facts() if f not in leaves]
    near = [f for f in pool if words & (set(f.split()) - stop)]
    far = [f for f in pool if f not in set(near)]
    rng.shuffle(near)
    rng.shuffle(far)
    distractors = (near + far)[:n_distractors]
    ctx_texts = leaves + distractors
    rng.shuffle(ctx_texts)
    sid = {t: f"sent{k + 1}" for k, t in enumerate(ctx_texts)}
    steps, ints = [], {}

    def walk(node):
        if isinstance(node[0], str):
            return sid[text(node)]
        a, b = walk(node[1]), walk(node[2])
        if node is proof:
            steps.append(f"{a} & {b} -> hypothesis")
            return "hypothesis"
        ints[node[0]] = f"int{len(ints) + 1}"
        steps.append(f"{a} & {b} -> {ints[node[0]]}: {text(node[0])}")
        return ints[node[0]]

    walk(proof)
    return {
        "id": ex_id,
        "hypothesis": hyp,
        "context": {sid[t]: t for t in ctx_texts},
        "proof": "; ".join(steps),
        "meta": {"distractors": sorted((sid[t] for t in distractors), key=lambda s: int(s[4:]))},
    }


def synth_benchmark(n: int, seed: int = 0, n_distractors: int = 0, world: World | None = None,
                    min_leaves: int = 2, max_leaves: int = 12) -> list[dict]:
    """``n`` distinct benchmark-style examples with tree-shaped proofs.

    Proofs whose nodes repeat a statement are rejected, since they would
    not form a tree; hypotheses are unique within one call.
    """
    world = world or make_world(0)
    rng = random.Random(seed)
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise RuntimeError("could not draw enough distinct trees")
        goal = random_goal(world, rng)
        proof = prove(world, goal, rng)
        nodes = [text(g) for g in _proof_nodes(proof)]
        n_leaves = len(_proof_leaves(proof))
        if len(set(nodes)) != len(nodes) or not (min_leaves <= n_leaves <= max_leaves):
            continue
        if nodes[0] in seen:
            continue
        seen.add(nodes[0])
        out.append(tree_example(world, proof, rng, f"synth-{seed}-{len(out)}", n_distractors))
    return out
