"""Run orchestration: encoder -> controller -> inference -> evaluation.

A run owns its output directory through a lock file; every artifact is
stamped with the config hash and seed (directly where the format allows,
otherwise through ``manifest.json``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from . import generator as gen
from .controller import ControllerTrainConfig, Heads, enumerate_states, train_controller
from .data import Dataset, Example, load_corpus, load_dataset, write_jsonl
from .embed import EmbeddingModel, EncoderTrainConfig, StepTriple, fit_encoder
from .metrics import DEFAULT_TAU, EvalReport, TreeScore, aggregate, empty_score, evaluate_tree, token_f1
from .reasoner import (
    GoldScorer, ReasonConfig, ReasonerError, beam_search, best_partial, filter_facts, greedy_rollout,
)
from .controller import PoolItem
from .retrieval import build_index, lexical_retrieve, recall_at, rerank_refine
from .tree import EntailmentTree, NodeId, parse_proof, serialize_proof

log = logging.getLogger(__name__)

# per-task defaults for the relevance filter and the BCE weight
TASK_DELTA = {1: 0.0, 2: 0.001, 3: 0.1}
TASK_LAMBDA = {1: 0.0, 2: 1.0, 3: 1.0}


class ConfigError(Exception):
    pass


class RunLocked(Exception):
    pass


@dataclass
class RetrievalConfig:
    k: int = 50
    limit: int = 25
    refine_by: str = "score_fact"


@dataclass
class GeneratorConfig:
    kind: str = "template"
    endpoint: str | None = None
    timeout: float = 10.0
    retries: int = 1
    max_in_flight: int = 4


@dataclass
class EvalConfig:
    tau: float = DEFAULT_TAU
    sim: str = "token-f1"
    sim_endpoint: str | None = None


@dataclass
class RunConfig:
    task: int = 1
    train: str | None = None
    eval: str | None = None
    corpus: str | None = None
    out_dir: str = "run"
    seed: int = 0
    scorer: str = "trained"            # or "gold"
    synth_triples: int = 5000
    skip_invalid: bool = True
    encoder: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    controller: ControllerTrainConfig = field(default_factory=ControllerTrainConfig)
    reason: ReasonConfig = field(default_factory=ReasonConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.task not in (1, 2, 3):
            raise ConfigError(f"task must be 1, 2 or 3, got {self.task}")
        if self.task == 3 and not self.corpus:
            raise ConfigError("task 3 needs a corpus path")
        if self.eval is None:
            raise ConfigError("an evaluation split is required")
        if self.scorer == "trained" and self.train is None:
            raise ConfigError("a training split is required unless scorer is 'gold'")
        if self.scorer not in ("trained", "gold"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.generator.kind not in ("template", "oracle", "external"):
            raise ConfigError(f"unknown generator {self.generator.kind!r}")
        if self.generator.kind == "external" and not self.generator.endpoint:
            raise ConfigError("external generator needs an endpoint")
        for p in (self.train, self.eval, self.corpus):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"no such file: {p}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        raw = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


_SECTIONS = {
    "encoder": EncoderTrainConfig,
    "controller": ControllerTrainConfig,
    "reason": ReasonConfig,
    "generator": GeneratorConfig,
    "retrieval": RetrievalConfig,
    "evaluation": EvalConfig,
}


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def config_from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a sectioned mapping.

    ``overrides`` maps ``section.key`` (or a bare run-level key) to a value;
    ``None`` values are ignored so unset CLI flags fall through.  The filter
    threshold and BCE weight default per task unless given.
    """
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in (doc or {}).items()}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        doc.setdefault(section or "run", {})[key] = value
    run = dict(doc.pop("run", {}) or {})
    sections = {name: dict(doc.pop(name, {}) or {}) for name in _SECTIONS}
    if doc:
        raise ConfigError(f"unknown config sections: {sorted(doc)}")
    task = run.get("task", 1)
    sections["reason"].setdefault("delta", TASK_DELTA.get(task, 0.0))
    sections["controller"].setdefault("lam", TASK_LAMBDA.get(task, 0.0))
    kwargs = {name: _build(cls, sections[name]) for name, cls in _SECTIONS.items()}
    return _build(RunConfig, {**run, **kwargs})


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, overrides)


# ------------------------------------------------------------------- stages

def step_triples(examples: Sequence[Example]) -> list[StepTriple]:
    """Gold binary steps as encoder triples (n-ary steps are skipped)."""
    out = []
    for e in examples:
        t = e.tree
        for s in t.steps:
            if len(s.premises) == 2:
                out.append(StepTriple(t.text_of(s.premises[0]), t.text_of(s.premises[1]), t.text_of(s.conclusion)))
    return out


def vocabulary_texts(datasets: Sequence[Dataset], corpus=()) -> list[str]:
    texts = []
    for ds in datasets:
        for e in ds.examples:
            texts.append(e.hypothesis)
            texts.extend(e.context.values())
            texts.extend(e.tree.intermediates.values())
    texts.extend(c.text for c in corpus)
    return texts


def train_encoder_stage(examples: Sequence[Example], n_synth: int, config: EncoderTrainConfig, texts=()):
    triples = gen.synth_singlesteps(n_synth, seed=config.seed) if n_synth > 0 else []
    triples = list(triples) + step_triples(examples)
    return fit_encoder(triples, config, extra_texts=texts)


def controller_states(examples: Sequence[Example], encoder: EmbeddingModel, with_distractors: bool):
    """Teacher-forced states (and gold conclusion texts) for binary-step trees."""
    states, concl = [], []
    for e in examples:
        if any(len(s.premises) != 2 for s in e.tree.steps):
            continue
        st = enumerate_states(e.tree, encoder, e.distractor_facts() if with_distractors else ())
        states.extend(st)
        concl.extend(e.tree.text_of(s.gold_step.conclusion) for s in st)
    return states, concl


def train_controller_stage(examples, encoder, config: ControllerTrainConfig, task: int):
    states, concl = controller_states(examples, encoder, with_distractors=task >= 2)
    heads, hist = train_controller(encoder, states, config, concl)
    return heads, hist


def make_generator(cfg: GeneratorConfig, example: Example | None = None):
    if cfg.kind == "template":
        return gen.TemplateBackend()
    if cfg.kind == "oracle":
        if example is None:
            raise ConfigError("the oracle generator needs a gold example")
        return gen.OracleBackend.from_trees([example.tree])
    return gen.ExternalBackend(cfg.endpoint, timeout=cfg.timeout, retries=cfg.retries,
                               max_in_flight=cfg.max_in_flight)


def make_scorer(kind: str, heads: Heads | None, example: Example):
    if kind == "gold":
        return GoldScorer([example.tree])
    if heads is None:
        raise ConfigError("trained scorer requested without heads")
    return heads


@dataclass
class Prediction:
    id: str
    tree: EntailmentTree | None
    score: float
    error: str = ""
    recall: float | None = None

    def to_json(self, stamp: dict | None = None) -> dict:
        out = {"id": self.id, "proof": serialize_proof(self.tree) if self.tree else "", "score": self.score}
        if self.tree is not None:
            out["leaves"] = {str(f.id): f.text for f in self.tree.leaves}
        if self.error:
            out["error"] = self.error
        if self.recall is not None:
            out["recall"] = self.recall
        if stamp:
            out.update(stamp)
        return out


def _corpus_pool(example: Example, candidates, encoder) -> list[PoolItem]:
    """Retrieved corpus facts as pool items; texts found in the example context keep its ids."""
    by_text = {v: k for k, v in example.context.items()}
    base = max((k.index for k in example.context), default=0)
    items, used = [], set()
    for c in candidates:
        node = by_text.get(c.text)
        if node is None or node in used:
            base += 1
            node = NodeId.sent(base)
        used.add(node)
        items.append(PoolItem(node, c.text, encoder.encode(c.text)))
    return items


def infer_example(example: Example, task: int, encoder: EmbeddingModel, scorer, generator,
                  config: ReasonConfig, index=None, retrieval: RetrievalConfig | None = None) -> Prediction:
    hyp = example.hypothesis
    h = encoder.encode(hyp)
    recall = None
    try:
        if task == 3:
            retrieval = retrieval or RetrievalConfig()
            cands = [c for c, _ in lexical_retrieve(index, hyp, retrieval.k)]
            cands = rerank_refine(encoder, scorer, hyp, cands, retrieval.limit, retrieval.refine_by)
            recall = recall_at(cands, [f.text for f in example.tree.leaves])
            pool = _corpus_pool(example, cands, encoder)
        else:
            pool = [PoolItem(k, v, encoder.encode(v)) for k, v in sorted(example.context.items())]
        if task >= 2:
            pool = filter_facts(scorer, hyp, h, pool, config.delta)
        if task == 1:
            part = greedy_rollout(encoder, scorer, generator, hyp, pool, config)
        elif task == 2:
            part = best_partial(greedy_rollout(encoder, scorer, generator, hyp, pool, config).subtrees(), hyp, encoder)
        else:
            part = beam_search(encoder, scorer, generator, hyp, pool, config)[0]
        return Prediction(example.id, part.to_tree(hyp), part.cumulative_score, recall=recall)
    except (ReasonerError, gen.GeneratorError) as exc:
        log.warning("%s: no tree (%s)", example.id, exc)
        return Prediction(example.id, None, float("-inf"), error=f"{type(exc).__name__}: {exc}", recall=recall)


# --------------------------------------------------------------- evaluation

class ExternalSimilarity:
    """Similarity served over the generator wire protocol; the reply text is a float."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.client = gen.ExternalBackend(endpoint, timeout=timeout)

    def __call__(self, pred: str, gold: str) -> float:
        body = {"id": self.client._next_id(), "direction": "similarity", "suffix": gen.SUFFIX,
                "segments": [pred, gold]}
        reply = self.client._send(body)
        try:
            return float(reply["text"])
        except (KeyError, TypeError, ValueError) as exc:
            raise gen.ExternalProtocolError(f"bad similarity reply {reply!r}") from exc


def make_similarity(cfg: EvalConfig):
    if cfg.sim == "token-f1":
        return token_f1
    if cfg.sim == "external":
        if not cfg.sim_endpoint:
            raise ConfigError("external similarity needs an endpoint")
        return ExternalSimilarity(cfg.sim_endpoint)
    raise ConfigError(f"unknown similarity {cfg.sim!r}")


def prediction_tree(record: dict, gold: Example) -> EntailmentTree | None:
    proof = record.get("proof") or ""
    if not proof.strip():
        return None
    context = dict(gold.context)
    for k, v in (record.get("leaves") or {}).items():
        context[NodeId.parse(k)] = v
    return parse_proof(proof, context, gold.hypothesis)


def evaluate_records(records: Sequence[dict], gold: Dataset, sim=token_f1, tau: float = DEFAULT_TAU) -> EvalReport:
    """Score predictions against gold in gold order; missing predictions score zero."""
    by_id = {r["id"]: r for r in records}
    scores = []
    for e in gold.examples:
        rec = by_id.get(e.id)
        tree = prediction_tree(rec, e) if rec else None
        scores.append(empty_score(e.id, e.tree) if tree is None else evaluate_tree(tree, e.tree, sim, tau, e.id))
    return aggregate(scores)


@dataclass
class BucketRow:
    bucket: str
    count: int
    correct: int
    rate: float


def breakdown_report(scores: Sequence[TreeScore], cap: int | None = None) -> list[BucketRow]:
    """Overall AllCorrect rate per gold leaf count; counts >= cap share one bucket."""
    groups: dict = {}
    for s in scores:
        n = s.gold_leaves if cap is None else min(s.gold_leaves, cap)
        groups.setdefault(n, []).append(s.overall_allcorrect)
    rows = []
    for n in sorted(groups):
        vals = groups[n]
        label = f"{n}+" if cap is not None and n == cap else str(n)
        rows.append(BucketRow(label, len(vals), int(sum(vals)), sum(vals) / len(vals)))
    return rows


def write_tsv(path, header: Sequence[str], rows: Sequence[Sequence], stamp: str = "") -> None:
    def fmt(x):
        return repr(x) if isinstance(x, float) else str(x)

    lines = [f"# {stamp}"] if stamp else []
    lines.append("\t".join(header))
    lines.extend("\t".join(fmt(x) for x in r) for r in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def per_tree_rows(report: EvalReport):
    header = [f.name for f in dataclasses.fields(TreeScore)]
    return header, [[getattr(s, k) for k in header] for s in report.per_tree]


def write_report(report: EvalReport, out: Path, stamp: dict, extra: dict | None = None) -> dict:
    """report.json, per_tree.tsv, breakdown.tsv and breakdown.png under ``out``."""
    from .plotting import plot_breakdown

    tag = f"config_hash={stamp.get('config_hash', '')} seed={stamp.get('seed', '')}"
    doc = {**stamp, **report.summary(), **(extra or {})}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    header, rows = per_tree_rows(report)
    write_tsv(out / "per_tree.tsv", header, rows, tag)
    bd = breakdown_report(report.per_tree)
    write_tsv(out / "breakdown.tsv", ["leaves", "count", "correct", "rate"],
              [[r.bucket, r.count, r.correct, r.rate] for r in bd], tag)
    plot_breakdown(bd, out / "breakdown.png", tag)
    return doc


# --------------------------------------------------------------------- run

class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"{self.path.parent} is in use (remove {self.path} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunResult:
    out_dir: Path
    report: EvalReport
    summary: dict
    files: dict


def run_pipeline(config: RunConfig) -> RunResult:
    """Train (unless the gold scorer is used), infer on the eval split, evaluate, write artifacts."""
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": config.hash(), "seed": config.seed}
    tag = f"config_hash={stamp['config_hash']} seed={config.seed}"
    with _Lock(out):
        failed = out / "FAILED"
        failed.unlink(missing_ok=True)
        try:
            return _run(config, out, stamp, tag)
        except BaseException as exc:
            failed.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            raise


def _run(config: RunConfig, out: Path, stamp: dict, tag: str) -> RunResult:
    from .plotting import plot_curves

    eval_ds = load_dataset(config.eval, skip_invalid=config.skip_invalid)
    train_ds = load_dataset(config.train, skip_invalid=config.skip_invalid) if config.train else None
    corpus = load_corpus(config.corpus) if config.task == 3 else []
    skipped = [dataclasses.asdict(s) | {"split": ds.split} for ds in (train_ds, eval_ds) if ds for s in ds.skipped]
    write_jsonl(skipped, out / "skipped.jsonl")

    enc_cfg = dataclasses.replace(config.encoder, seed=config.seed)
    texts = vocabulary_texts([d for d in (train_ds, eval_ds) if d], corpus)
    encoder, enc_hist = train_encoder_stage(train_ds.examples if train_ds else [], config.synth_triples, enc_cfg, texts)
    curves = {"encoder": enc_hist.epoch_loss}
    heads = None
    if config.scorer == "trained":
        ctl_cfg = dataclasses.replace(config.controller, seed=config.seed)
        heads, ctl_hist = train_controller_stage(train_ds.examples, encoder, ctl_cfg, config.task)
        if ctl_hist.encoder is not None:
            encoder = ctl_hist.encoder
        heads.save(out / "heads.json")
        curves["controller"] = ctl_hist.epoch_loss
    encoder.save(out / "encoder.tsv")
    plot_curves(curves, out / "training_curves.png", tag)

    index = build_index(corpus) if config.task == 3 else None
    preds = []
    for e in eval_ds.examples:
        scorer = make_scorer(config.scorer, heads, e)
        generator = make_generator(config.generator, e)
        preds.append(infer_example(e, config.task, encoder, scorer, generator, config.reason, index, config.retrieval))
    records = [p.to_json(stamp) for p in preds]
    write_jsonl(records, out / "predictions.jsonl")

    report = evaluate_records(records, eval_ds, make_similarity(config.evaluation), config.evaluation.tau)
    extra = {"task": config.task, "n_failed": sum(1 for p in preds if p.tree is None)}
    recalls = [p.recall for p in preds if p.recall is not None]
    if recalls:
        extra["retrieval_recall"] = sum(recalls) / len(recalls)
    summary = write_report(report, out, stamp, extra)

    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
    files = {p.name: _sha(p) for p in sorted(out.iterdir()) if p.is_file() and p.name not in (".lock", "manifest.json")}
    manifest = {**stamp, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(out, report, summary, files)
