"""Entailment tree model and the linearized proof format.

A proof is written as ``step (";" step)*`` where each step is::

    premise ("&" premise)* "->" ( "intK:" text | "hypothesis" )

and a premise is ``sentK`` or ``intK``.  Example::

    sent1 & sent2 -> int1: water freezes; int1 & sent3 -> hypothesis

Whitespace around tokens is free, a trailing ``;`` is allowed, and
intermediate texts have their whitespace collapsed to single spaces.
"""
from __future__ import annotations

import enum
import re
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable, Mapping

from .text import normalize_space


class TreeError(Exception):
    pass


class ParseError(TreeError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ValidationError(TreeError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class UnknownNode(TreeError):
    pass


class NodeKind(enum.IntEnum):
    SENT = 0
    INT = 1
    HYPOTHESIS = 2


_ID_RE = re.compile(r"^(sent|int)(\d+)$")


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int = 0

    @classmethod
    def sent(cls, index: int) -> "NodeId":
        return cls(NodeKind.SENT, index)

    @classmethod
    def int_(cls, index: int) -> "NodeId":
        return cls(NodeKind.INT, index)

    @classmethod
    def parse(cls, token: str) -> "NodeId":
        token = token.strip()
        if token == "hypothesis":
            return HYPOTHESIS
        m = _ID_RE.match(token)
        if not m or int(m.group(2)) < 1:
            raise ValueError(f"not a node id: {token!r}")
        kind = NodeKind.SENT if m.group(1) == "sent" else NodeKind.INT
        return cls(kind, int(m.group(2)))

    @property
    def is_leaf(self) -> bool:
        return self.kind is NodeKind.SENT

    def __str__(self) -> str:
        if self.kind is NodeKind.HYPOTHESIS:
            return "hypothesis"
        prefix = "sent" if self.kind is NodeKind.SENT else "int"
        return f"{prefix}{self.index}"

    def __repr__(self) -> str:
        return f"NodeId({self})"


HYPOTHESIS = NodeId(NodeKind.HYPOTHESIS, 0)


def as_node_id(value) -> NodeId:
    return value if isinstance(value, NodeId) else NodeId.parse(value)


@dataclass(frozen=True)
class Fact:
    id: NodeId
    text: str
    relevance_label: bool | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"empty fact text for {self.id}")


@dataclass(frozen=True)
class Step:
    premises: tuple[NodeId, ...]
    conclusion: NodeId

    def __init__(self, premises: Iterable, conclusion):
        object.__setattr__(self, "premises", tuple(as_node_id(p) for p in premises))
        object.__setattr__(self, "conclusion", as_node_id(conclusion))

    @property
    def premise_a(self) -> NodeId:
        return self.premises[0]

    @property
    def premise_b(self) -> NodeId:
        return self.premises[1]

    @property
    def premise_set(self) -> frozenset:
        return frozenset(self.premises)

    def __str__(self) -> str:
        return " & ".join(map(str, self.premises)) + f" -> {self.conclusion}"


@dataclass(frozen=True)
class Violation:
    kind: str
    node: NodeId | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = f"({self.node})" if self.node is not None else ""
        extra = f": {self.detail}" if self.detail else ""
        return f"{self.kind}{where}{extra}"


@dataclass(frozen=True)
class EntailmentTree:
    hypothesis: str
    leaves: tuple[Fact, ...]
    intermediates: Mapping[NodeId, str]
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(sorted(self.leaves, key=lambda f: f.id)))
        object.__setattr__(self, "intermediates", dict(sorted(self.intermediates.items())))
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def leaf_ids(self) -> frozenset:
        return frozenset(f.id for f in self.leaves)

    @property
    def root_step(self) -> Step | None:
        for step in self.steps:
            if step.conclusion == HYPOTHESIS:
                return step
        return None

    def nodes(self) -> set:
        out = set(self.leaf_ids) | set(self.intermediates) | {HYPOTHESIS}
        for step in self.steps:
            out.update(step.premises)
            out.add(step.conclusion)
        return out

    def text_of(self, node: NodeId) -> str:
        if node == HYPOTHESIS:
            return self.hypothesis
        if node.kind is NodeKind.INT:
            return self.intermediates[node]
        for f in self.leaves:
            if f.id == node:
                return f.text
        raise UnknownNode(str(node))

    def children(self) -> dict:
        """Map conclusion -> premises of the step producing it."""
        out = {}
        for step in self.steps:
            out.setdefault(step.conclusion, step.premises)
        return out

    def structurally_equal(self, other: "EntailmentTree") -> bool:
        """Equality that ignores step order and premise order."""
        mine = sorted((s.conclusion, tuple(sorted(s.premises))) for s in self.steps)
        theirs = sorted((s.conclusion, tuple(sorted(s.premises))) for s in other.steps)
        return (
            mine == theirs
            and self.hypothesis == other.hypothesis
            and self.leaves == other.leaves
            and dict(self.intermediates) == dict(other.intermediates)
        )

    def __hash__(self):
        return hash((self.hypothesis, self.leaves, self.steps))


def build_tree(
    hypothesis: str,
    steps: Iterable[Step],
    context: Mapping,
    intermediates: Mapping | None = None,
) -> EntailmentTree:
    """Assemble a tree, pulling leaf texts for every referenced sent id from ``context``."""
    steps = tuple(steps)
    ctx = {as_node_id(k): v for k, v in context.items()}
    leaf_ids = sorted({p for s in steps for p in s.premises if p.is_leaf})
    leaves = [Fact(i, ctx[i]) for i in leaf_ids if i in ctx]
    ints = {as_node_id(k): v for k, v in (intermediates or {}).items()}
    tree = EntailmentTree(hypothesis, tuple(leaves), ints, steps)
    missing = [i for i in leaf_ids if i not in ctx]
    if missing:
        raise ValidationError([Violation("DanglingReference", i, "not in context") for i in missing])
    return tree


def validate_tree(tree: EntailmentTree, strict: bool = False) -> list[Violation]:
    """Return every broken tree invariant; an empty list means the tree is valid.

    ``strict`` additionally rejects steps with other than two premises (the
    benchmark has a few one- and three-premise steps, which load leniently) and
    nodes used as a premise by more than one step.
    """
    out: list[Violation] = []
    leaf_ids = tree.leaf_ids
    ints = set(tree.intermediates)

    concluded = defaultdict(int)
    used = defaultdict(int)
    for step in tree.steps:
        concluded[step.conclusion] += 1
        if strict and len(step.premises) != 2:
            out.append(Violation("NonBinaryStep", step.conclusion, str(step)))
        if len(set(step.premises)) != len(step.premises):
            out.append(Violation("RepeatedPremise", step.conclusion, str(step)))
        if step.conclusion.is_leaf:
            out.append(Violation("LeafConclusion", step.conclusion, str(step)))
        for p in step.premises:
            used[p] += 1
            if p == HYPOTHESIS:
                out.append(Violation("HypothesisAsPremise", p, str(step)))
            elif p.is_leaf and p not in leaf_ids:
                out.append(Violation("DanglingReference", p, "premise not in context"))
            elif p.kind is NodeKind.INT and p not in ints:
                out.append(Violation("DanglingReference", p, "intermediate has no text"))

    for node, n in sorted(concluded.items()):
        if n > 1:
            out.append(Violation("DuplicateConclusion", node, f"concluded by {n} steps"))
    if concluded.get(HYPOTHESIS, 0) == 0:
        out.append(Violation("MissingRoot", HYPOTHESIS, "no step concludes the hypothesis"))
    for node in sorted(ints):
        if concluded.get(node, 0) == 0:
            out.append(Violation("UnconcludedIntermediate", node))
        if used.get(node, 0) == 0:
            out.append(Violation("UnusedIntermediate", node))
    if ints and sorted(i.index for i in ints) != list(range(1, len(ints) + 1)):
        out.append(Violation("NonDenseIntermediates", None, ", ".join(map(str, sorted(ints)))))
    if strict:
        for node, n in sorted(used.items()):
            if n > 1:
                out.append(Violation("ReusedPremise", node, f"premise of {n} steps"))

    cycle = _find_cycle(tree)
    if cycle is not None:
        out.append(Violation("Cycle", cycle))
    else:
        reachable = _reachable_from_root(tree)
        for leaf in sorted(leaf_ids):
            if leaf not in reachable:
                out.append(Violation("UnreachableLeaf", leaf))
    return out


def _find_cycle(tree: EntailmentTree):
    children = defaultdict(list)
    for step in tree.steps:
        children[step.conclusion].extend(step.premises)
    state = {}
    for start in sorted(children):
        if start in state:
            continue
        stack = [(start, iter(children[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return nxt
            elif nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(children.get(nxt, ()))))
    return None


def _reachable_from_root(tree: EntailmentTree) -> set:
    children = defaultdict(list)
    for step in tree.steps:
        children[step.conclusion].extend(step.premises)
    seen = {HYPOTHESIS}
    queue = deque([HYPOTHESIS])
    while queue:
        node = queue.popleft()
        for c in children.get(node, ()):
            if c not in seen:
                seen.add(c)
                queue.append(c)
    return seen


def check_tree(tree: EntailmentTree, strict: bool = False) -> EntailmentTree:
    violations = validate_tree(tree, strict=strict)
    if violations:
        raise ValidationError(violations)
    return tree


def parse_proof(text: str, context: Mapping, hypothesis: str = "", strict: bool = False) -> EntailmentTree:
    """Parse a linearized proof against its fact context and validate the result."""
    ctx = {as_node_id(k): v for k, v in context.items()}
    steps = []
    ints = {}
    pos = 0
    for chunk in text.split(";"):
        start = pos
        pos += len(chunk) + 1
        if not chunk.strip():
            continue
        arrow = chunk.find("->")
        if arrow < 0:
            raise ParseError("expected '->' in step", start + len(chunk) - len(chunk.lstrip()))
        lhs, rhs = chunk[:arrow], chunk[arrow + 2:]
        premises = []
        offset = start
        for token in lhs.split("&"):
            tok = token.strip()
            try:
                pid = NodeId.parse(tok)
                if pid == HYPOTHESIS:
                    raise ValueError
            except ValueError:
                raise ParseError(f"bad premise id {tok!r}", offset + len(token) - len(token.lstrip())) from None
            premises.append(pid)
            offset += len(token) + 1
        rhs_pos = start + arrow + 2
        rhs_s = rhs.strip()
        if rhs_s == "hypothesis":
            conclusion = HYPOTHESIS
        else:
            head, colon, body = rhs_s.partition(":")
            try:
                conclusion = NodeId.parse(head)
            except ValueError:
                raise ParseError(f"bad conclusion {head.strip()!r}", rhs_pos) from None
            if conclusion.kind is not NodeKind.INT or not colon:
                raise ParseError("intermediate conclusion must be 'intK: text'", rhs_pos)
            body = normalize_space(body)
            if not body:
                raise ParseError(f"empty text for {conclusion}", rhs_pos)
            ints[conclusion] = body
        steps.append(Step(premises, conclusion))
    if not steps:
        raise ParseError("empty proof", 0)

    dangling = sorted({p for s in steps for p in s.premises if p.is_leaf and p not in ctx})
    if dangling:
        raise ValidationError([Violation("DanglingReference", d, "not in context") for d in dangling])
    tree = build_tree(hypothesis, steps, ctx, ints)
    return check_tree(tree, strict=strict)


def topological_steps(tree: EntailmentTree) -> tuple[Step, ...]:
    """Steps in input order if already topological, else Kahn order keyed by conclusion id."""
    steps = tree.steps
    done = set()
    ok = True
    for s in steps:
        if any(p.kind is NodeKind.INT and p not in done for p in s.premises):
            ok = False
            break
        done.add(s.conclusion)
    if ok:
        return steps
    remaining = list(steps)
    done = set()
    out = []
    while remaining:
        ready = [s for s in remaining if all(p.kind is not NodeKind.INT or p in done for p in s.premises)]
        if not ready:
            raise ValidationError([Violation("Cycle")])
        nxt = min(ready, key=lambda s: (s.conclusion, s.premises))
        out.append(nxt)
        done.add(nxt.conclusion)
        remaining.remove(nxt)
    return tuple(out)


def serialize_proof(tree: EntailmentTree) -> str:
    check_tree(tree)
    parts = []
    for s in topological_steps(tree):
        lhs = " & ".join(str(p) for p in s.premises)
        if s.conclusion == HYPOTHESIS:
            parts.append(f"{lhs} -> hypothesis")
        else:
            parts.append(f"{lhs} -> {s.conclusion}: {tree.intermediates[s.conclusion]}")
    return "; ".join(parts)


def _check_node(tree: EntailmentTree, node) -> NodeId:
    node = as_node_id(node)
    if node not in tree.nodes():
        raise UnknownNode(str(node))
    return node


def leaf_descendants(tree: EntailmentTree, node) -> frozenset:
    node = _check_node(tree, node)
    children = tree.children()
    out = set()
    stack = [node]
    seen = set()
    while stack:
        cur = stack.pop()
        if cur in seen:
            continue
        seen.add(cur)
        if cur.is_leaf:
            out.add(cur)
        stack.extend(children.get(cur, ()))
    return frozenset(out)


def node_level(tree: EntailmentTree, node) -> int:
    """Edge distance from the hypothesis root (shortest, if a node is reused)."""
    node = _check_node(tree, node)
    return all_levels(tree)[node]


def all_levels(tree: EntailmentTree) -> dict:
    children = tree.children()
    levels = {HYPOTHESIS: 0}
    queue = deque([HYPOTHESIS])
    while queue:
        cur = queue.popleft()
        for c in children.get(cur, ()):
            if c not in levels:
                levels[c] = levels[cur] + 1
                queue.append(c)
    return levels
