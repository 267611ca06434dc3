"""Dataset ingestion: benchmark-style JSONL with one example per line.

Each record has ``id``, ``hypothesis``, ``context`` and ``proof``, with an
optional ``meta.distractors`` list.  ``context`` may be a ``{"sentK": text}``
map or the benchmark's flat ``"sent1: ... sent2: ..."`` string.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .tree import EntailmentTree, Fact, TreeError, as_node_id, parse_proof, serialize_proof

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "ENTAILMENTBANK_ROOT"
SPLITS = ("train", "dev", "test")
# published split sizes: trees, steps, leaves
BENCHMARK_SIZES = {
    "train": (1131, 3476, 5764),
    "dev": (187, 487, 816),
    "test": (340, 902, 1518),
}
_CTX_RE = re.compile(r"(sent\d+):")


class DataError(Exception):
    pass


class IoError(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class ExampleInvalid(DataError):
    def __init__(self, message: str, line: int, example_id: str):
        super().__init__(f"line {line} ({example_id}): {message}")
        self.line = line
        self.example_id = example_id


@dataclass
class Example:
    id: str
    hypothesis: str
    context: dict                 # NodeId -> text
    tree: EntailmentTree
    distractors: tuple = ()
    proof: str = ""
    extra: dict = field(default_factory=dict)

    def facts(self) -> list[Fact]:
        """Context facts with relevance labels (gold leaf / not)."""
        gold = self.tree.leaf_ids
        return [Fact(k, v, k in gold) for k, v in sorted(self.context.items())]

    def distractor_facts(self) -> list[Fact]:
        gold = self.tree.leaf_ids
        ids = self.distractors or tuple(k for k in self.context if k not in gold)
        return [Fact(k, self.context[k], False) for k in sorted(ids) if k not in gold]

    def to_json(self) -> dict:
        out = dict(self.extra)
        out.update({
            "id": self.id,
            "hypothesis": self.hypothesis,
            "context": {str(k): v for k, v in sorted(self.context.items())},
            "proof": self.proof or serialize_proof(self.tree),
        })
        meta = dict(out.get("meta") or {})
        meta["distractors"] = [str(d) for d in self.distractors]
        out["meta"] = meta
        return out


@dataclass
class Skipped:
    line: int
    id: str
    reason: str


@dataclass
class Dataset:
    split: str
    examples: list
    skipped: list = field(default_factory=list)
    path: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def stats(self) -> tuple[int, int, int]:
        """(trees, steps, leaves)."""
        steps = sum(len(e.tree.steps) for e in self.examples)
        leaves = sum(len(e.tree.leaves) for e in self.examples)
        return len(self.examples), steps, leaves

    def by_id(self) -> dict:
        return {e.id: e for e in self.examples}


def parse_context(ctx) -> dict:
    if isinstance(ctx, dict):
        return {as_node_id(k): " ".join(str(v).split()) for k, v in ctx.items()}
    if isinstance(ctx, str):
        parts = _CTX_RE.split(ctx)
        out = {}
        # parts = [prefix, id1, text1, id2, text2, ...]
        for sid, text in zip(parts[1::2], parts[2::2]):
            out[as_node_id(sid)] = " ".join(text.split())
        return out
    raise ValueError(f"context must be a map or string, got {type(ctx).__name__}")


def parse_record(obj, line: int = 0, strict: bool = False) -> Example:
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object", line)
    for key in ("id", "hypothesis", "context", "proof"):
        if key not in obj:
            raise SchemaError(f"missing field {key!r}", line)
    if not isinstance(obj["id"], str) or not isinstance(obj["hypothesis"], str) or not isinstance(obj["proof"], str):
        raise SchemaError("id, hypothesis and proof must be strings", line)
    try:
        context = parse_context(obj["context"])
    except ValueError as exc:
        raise SchemaError(str(exc), line) from None
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise SchemaError("meta must be an object", line)
    try:
        distractors = tuple(as_node_id(d) for d in meta.get("distractors") or ())
        tree = parse_proof(obj["proof"], context, " ".join(obj["hypothesis"].split()), strict=strict)
    except (TreeError, ValueError) as exc:
        raise ExampleInvalid(str(exc), line, obj["id"]) from exc
    extra = {k: v for k, v in obj.items() if k not in ("id", "hypothesis", "context", "proof")}
    return Example(obj["id"], tree.hypothesis, context, tree, distractors, obj["proof"], extra)


def load_dataset(path, split: str | None = None, skip_invalid: bool = False, strict: bool = False) -> Dataset:
    """Load and validate a JSONL split.

    Malformed JSON or missing fields raise ``SchemaError`` with the line
    number.  Examples whose proofs fail validation raise ``ExampleInvalid``
    unless ``skip_invalid`` is set, in which case they are listed in
    ``Dataset.skipped``.
    """
    path = Path(path)
    if split is None:
        split = next((s for s in SPLITS if s in path.stem), path.stem)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    examples, skipped, seen = [], [], set()
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
        try:
            ex = parse_record(obj, lineno, strict)
        except ExampleInvalid as exc:
            if not skip_invalid:
                raise
            skipped.append(Skipped(lineno, exc.example_id, str(exc)))
            continue
        if ex.id in seen:
            raise SchemaError(f"duplicate id {ex.id!r}", lineno)
        seen.add(ex.id)
        examples.append(ex)
    if not examples and not skipped:
        raise SchemaError("no examples in file", None)
    ds = Dataset(split, examples, skipped, str(path))
    trees, steps, leaves = ds.stats()
    log.info("%s: %d trees, %d steps, %d leaves, %d skipped", path, trees, steps, leaves, len(skipped))
    return ds


def write_jsonl(records: Iterable[dict], path) -> None:
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
    return out


def data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def benchmark_path(task: int, split: str, root=None) -> Path:
    """Locate ``task_N/<split>.jsonl`` under the data root (also tried under ``dataset/``)."""
    root = Path(root) if root is not None else data_root()
    if root is None:
        raise IoError(f"{DATA_ROOT_ENV} is not set")
    for base in (root / "dataset" / f"task_{task}", root / f"task_{task}"):
        p = base / f"{split}.jsonl"
        if p.exists():
            return p
    raise IoError(f"no task_{task}/{split}.jsonl under {root}")


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    text: str


def load_corpus(path) -> list[CorpusEntry]:
    """JSONL ``{id, text}`` records, or one JSON object mapping id to text."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    entries = []
    try:
        obj = json.loads(raw)
        if isinstance(obj, dict) and "id" not in obj:
            return [CorpusEntry(str(k), " ".join(str(v).split())) for k, v in sorted(obj.items())]
    except json.JSONDecodeError:
        pass
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entries.append(CorpusEntry(str(rec["id"]), " ".join(str(rec["text"]).split())))
        except (json.JSONDecodeError, KeyError, TypeError):
            raise SchemaError("corpus lines must be {id, text} objects", lineno) from None
    if not entries:
        raise SchemaError("empty corpus", None)
    return entries


def check_benchmark_sizes(ds: Dataset) -> list[str]:
    """Differences between loaded counts and the published split sizes."""
    want = BENCHMARK_SIZES.get(ds.split)
    if want is None:
        return [f"unknown split {ds.split!r}"]
    got = ds.stats()
    names = ("trees", "steps", "leaves")
    return [f"{n}: expected {w}, got {g}" for n, w, g in zip(names, want, got) if w != g]


def gold_leaf_buckets(examples: Sequence[Example]) -> dict:
    out: dict = {}
    for e in examples:
        out.setdefault(len(e.tree.leaves), []).append(e.id)
    return dict(sorted(out.items()))
