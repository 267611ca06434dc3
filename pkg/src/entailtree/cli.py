"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Relative data paths are resolved against $ENTAILMENTBANK_ROOT when they do
not exist as given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
log = logging.getLogger("entailtree")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _path(value: str | None, must_exist: bool = True):
    """Resolve a path, falling back to the data root for relative inputs."""
    if value is None:
        return None
    from .data import data_root

    p = Path(value)
    if p.exists() or not must_exist:
        return str(p)
    root = data_root()
    if root is not None and not p.is_absolute() and (root / p).exists():
        return str(root / p)
    return str(p)


# ----------------------------------------------------------------- flag sets

def _add_config(p):
    p.add_argument("--config", help="YAML config file with per-module sections; flags override it")
    p.add_argument("--seed", type=int)


def _add_encoder_flags(p):
    g = p.add_argument_group("encoder")
    g.add_argument("--dim", type=int)
    g.add_argument("--gamma1", type=float)
    g.add_argument("--gamma2", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--epochs", type=int)


def _add_controller_flags(p):
    g = p.add_argument_group("controller")
    g.add_argument("--gamma3", type=float)
    g.add_argument("--gamma4", type=float)
    g.add_argument("--gamma5", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--negatives", type=int)
    g.add_argument("--ctl-lr", type=float)
    g.add_argument("--ctl-epochs", type=int)
    g.add_argument("--literal-eq5", action="store_true", default=None,
                   help="subtract the BCE term instead of adding it (unbounded below)")
    g.add_argument("--encoder-lr", type=float, help="> 0 also fine-tunes the token table")


def _add_reason_flags(p):
    g = p.add_argument_group("reasoner")
    g.add_argument("--task", type=int, choices=(1, 2, 3))
    g.add_argument("--delta", type=float)
    g.add_argument("--beam", type=int)
    g.add_argument("--top-p", type=float)
    g.add_argument("--top-abd-p", type=float)
    g.add_argument("--max-steps", type=int)
    g.add_argument("--stop-distance", type=float)
    g.add_argument("--length-normalize", action="store_true", default=None,
                   help="rank beam results by mean rather than summed step log-probability")
    g.add_argument("--freeze-fact-scores", dest="rescore_facts", action="store_false", default=None,
                   help="filter facts once up front instead of after every beam step")
    g.add_argument("--generator", choices=("template", "oracle", "external"))
    g.add_argument("--endpoint")
    g.add_argument("--timeout", type=float)
    g.add_argument("--retries", type=int)
    g.add_argument("--scorer", choices=("trained", "gold"))


def _overrides(a) -> dict:
    get = lambda name: getattr(a, name, None)  # noqa: E731
    return {
        "seed": get("seed"), "task": get("task"), "scorer": get("scorer"),
        "train": _path(get("train")), "eval": _path(get("eval")), "corpus": _path(get("corpus")),
        "out_dir": get("out"), "synth_triples": get("synth"),
        "encoder.dim": get("dim"), "encoder.gamma1": get("gamma1"), "encoder.gamma2": get("gamma2"),
        "encoder.learning_rate": get("lr"), "encoder.batch_size": get("batch"), "encoder.epochs": get("epochs"),
        "controller.gamma3": get("gamma3"), "controller.gamma4": get("gamma4"), "controller.gamma5": get("gamma5"),
        "controller.lam": get("lam"), "controller.alpha": get("alpha"), "controller.beta": get("beta"),
        "controller.negatives": get("negatives"), "controller.learning_rate": get("ctl_lr"),
        "controller.epochs": get("ctl_epochs"), "controller.literal_eq5": get("literal_eq5"),
        "controller.encoder_lr": get("encoder_lr"),
        "reason.delta": get("delta"), "reason.beam_size": get("beam"), "reason.top_p": get("top_p"),
        "reason.top_abd_p": get("top_abd_p"), "reason.max_steps": get("max_steps"),
        "reason.stop_distance": get("stop_distance"), "reason.length_normalize": get("length_normalize"),
        "reason.rescore_facts": get("rescore_facts"),
        "generator.kind": get("generator"), "generator.endpoint": get("endpoint"),
        "generator.timeout": get("timeout"), "generator.retries": get("retries"),
        "retrieval.k": get("k"), "retrieval.limit": get("limit"), "retrieval.refine_by": get("refine_by"),
        "evaluation.tau": get("tau"), "evaluation.sim": get("sim"), "evaluation.sim_endpoint": get("sim_endpoint"),
    }


def _config(a):
    from .pipeline import load_config

    return load_config(getattr(a, "config", None), _overrides(a))


def _stamp(cfg) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ commands

def cmd_synth_data(a) -> int:
    from . import generator, synth
    from .data import write_jsonl

    cfg = _config(a)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    if a.trees:
        records = synth.synth_benchmark(a.n, seed=cfg.seed, n_distractors=a.distractors)
    else:
        records = [t.to_json() for t in generator.synth_singlesteps(a.n, seed=cfg.seed)]
    write_jsonl(records, a.out)
    print(f"wrote {len(records)} records to {a.out}")
    return EXIT_OK


def cmd_train_encoder(a) -> int:
    from .data import load_dataset
    from .pipeline import train_encoder_stage, vocabulary_texts
    from .plotting import plot_curves

    cfg = _config(a)
    enc_cfg = dataclasses.replace(cfg.encoder, seed=cfg.seed)
    datasets = [load_dataset(_path(p), skip_invalid=True) for p in (a.data or [])]
    examples = [e for ds in datasets for e in ds.examples]
    model, hist = train_encoder_stage(examples, cfg.synth_triples, enc_cfg, vocabulary_texts(datasets))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(a.out)
    stamp = _stamp(cfg)
    _write_json(a.out + ".meta.json", {**stamp, "checksum": model.checksum(), "epoch_loss": hist.epoch_loss,
                                       "config": dataclasses.asdict(enc_cfg)})
    plot_curves({"encoder": hist.epoch_loss}, a.out + ".curve.png", f"config_hash={stamp['config_hash']}")
    print(f"encoder {model.checksum()} ({len(model.vocab)} tokens, d={model.dim}) -> {a.out}")
    return EXIT_OK


def cmd_train_controller(a) -> int:
    from .data import load_dataset
    from .embed import EmbeddingModel
    from .pipeline import train_controller_stage
    from .plotting import plot_curves

    cfg = _config(a)
    encoder = EmbeddingModel.load(_path(a.encoder))
    ds = load_dataset(_path(a.data), skip_invalid=True)
    ctl = dataclasses.replace(cfg.controller, seed=cfg.seed)
    heads, hist = train_controller_stage(ds.examples, encoder, ctl, cfg.task)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    heads.save(a.out)
    if hist.encoder is not None and ctl.encoder_lr > 0:
        hist.encoder.save(a.out + ".encoder.tsv")
    stamp = _stamp(cfg)
    _write_json(a.out + ".meta.json", {**stamp, "epoch_loss": hist.epoch_loss, "config": dataclasses.asdict(ctl)})
    plot_curves({"controller": hist.epoch_loss}, a.out + ".curve.png", f"config_hash={stamp['config_hash']}")
    print(f"heads -> {a.out} (final loss {hist.epoch_loss[-1]:.4f})")
    return EXIT_OK


def _load_models(a):
    from .controller import Heads
    from .embed import EmbeddingModel

    encoder = EmbeddingModel.load(_path(a.encoder))
    heads = Heads.load(_path(a.heads), encoder) if getattr(a, "heads", None) else None
    return encoder, heads


def cmd_retrieve(a) -> int:
    from .data import load_corpus, load_dataset, write_jsonl
    from .retrieval import CorpusIndex, build_index, lexical_retrieve, rerank_refine

    cfg = _config(a)
    if a.index and Path(a.index).exists():
        index = CorpusIndex.load(a.index)
    else:
        if not a.corpus:
            raise UsageError("retrieve needs --corpus or an existing --index")
        index = build_index(load_corpus(_path(a.corpus)))
        if a.index:
            index.save(a.index)
    queries = [(e.id, e.hypothesis) for e in load_dataset(_path(a.data), skip_invalid=True).examples] \
        if a.data else [("query", a.query)]
    if not queries or queries[0][1] is None:
        raise UsageError("retrieve needs --data or --query")
    encoder = heads = None
    if a.encoder:
        encoder, heads = _load_models(a)
        if heads is None and cfg.retrieval.refine_by == "score_fact":
            raise UsageError("score_fact refinement needs --heads (or use --refine-by distance)")
    records = []
    for qid, text in queries:
        hits = lexical_retrieve(index, text, cfg.retrieval.k)
        score = {c.id: s for c, s in hits}
        cands = [c for c, _ in hits]
        if encoder is not None:
            cands = rerank_refine(encoder, heads, text, cands, cfg.retrieval.limit, cfg.retrieval.refine_by)
        records.append({"id": qid, "candidates": [{"id": c.id, "text": c.text, "bm25": score[c.id]} for c in cands],
                        **_stamp(cfg)})
    write_jsonl(records, a.out)
    print(f"wrote {len(records)} candidate lists to {a.out}")
    return EXIT_OK


def cmd_infer(a) -> int:
    from .data import load_corpus, load_dataset, write_jsonl
    from .pipeline import ConfigError, infer_example, make_generator, make_scorer
    from .retrieval import build_index

    cfg = _config(a)
    if cfg.task == 3 and not cfg.corpus:
        raise UsageError("task 3 needs --corpus")
    if cfg.scorer == "trained" and not a.heads:
        raise UsageError("--heads is required unless --scorer gold")
    encoder, heads = _load_models(a)
    ds = load_dataset(_path(a.data), skip_invalid=True)
    index = build_index(load_corpus(_path(cfg.corpus))) if cfg.task == 3 else None
    stamp = _stamp(cfg)
    records = []
    for e in ds.examples:
        try:
            generator = make_generator(cfg.generator, e)
            scorer = make_scorer(cfg.scorer, heads, e)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        records.append(infer_example(e, cfg.task, encoder, scorer, generator, cfg.reason, index,
                                     cfg.retrieval).to_json(stamp))
    write_jsonl(records, a.out)
    print(f"wrote {len(records)} predictions to {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .data import load_dataset, read_jsonl
    from .pipeline import evaluate_records, make_similarity, write_report

    cfg = _config(a)
    gold = load_dataset(_path(a.gold), skip_invalid=True)
    report = evaluate_records(read_jsonl(_path(a.pred)), gold, make_similarity(cfg.evaluation), cfg.evaluation.tau)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = write_report(report, out, _stamp(cfg), {"tau": cfg.evaluation.tau, "sim": cfg.evaluation.sim})
    print(json.dumps({k: summary[k] for k in sorted(summary) if k.endswith(("f1", "allcorrect"))}, sort_keys=True))
    return EXIT_OK


def cmd_breakdown(a) -> int:
    import csv

    from .metrics import TreeScore
    from .pipeline import breakdown_report, write_tsv
    from .plotting import plot_breakdown

    with open(_path(a.per_tree), encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader((l for l in fh if not l.startswith("#")), delimiter="\t")]
    if not rows:
        from .data import SchemaError

        raise SchemaError("per-tree table is empty")
    scores = [TreeScore(r["id"], 0.0, 0, 0.0, 0, 0.0, 0, int(r["overall_allcorrect"]), int(r["gold_leaves"]))
              for r in rows]
    table = breakdown_report(scores, a.cap)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "breakdown.tsv", ["leaves", "count", "correct", "rate"],
              [[r.bucket, r.count, r.correct, r.rate] for r in table])
    plot_breakdown(table, out / "breakdown.png")
    for r in table:
        print(f"{r.bucket}\t{r.count}\t{r.correct}\t{r.rate:.3f}")
    return EXIT_OK


def cmd_export_embeddings(a) -> int:
    from .data import load_corpus, load_dataset
    from .embed import EmbeddingModel, export_embeddings
    from .tree import Fact, NodeId

    model = EmbeddingModel.load(_path(a.encoder))
    if a.corpus:
        facts = [Fact(NodeId.sent(i + 1), c.text) for i, c in enumerate(load_corpus(_path(a.corpus)))]
        ids = [c.id for c in load_corpus(_path(a.corpus))]
    else:
        facts, ids = [], []
        for e in load_dataset(_path(a.data), skip_invalid=True).examples:
            for k, v in sorted(e.context.items()):
                facts.append(Fact(k, v))
                ids.append(f"{e.id}/{k}")
    export_embeddings(model, [dataclasses.replace(f, id=i) for f, i in zip(facts, ids)], a.out)
    print(f"exported {len(facts)} vectors to {a.out}")
    return EXIT_OK


def cmd_run(a) -> int:
    from .pipeline import run_pipeline

    cfg = _config(a)
    result = run_pipeline(cfg)
    print(json.dumps({k: result.summary[k] for k in sorted(result.summary)
                      if k.endswith(("f1", "allcorrect")) or k == "config_hash"}, sort_keys=True))
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="entailtree", description="Entailment-tree construction and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write synthetic single steps or tree examples as JSONL")
    _add_config(s)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--trees", action="store_true", help="emit benchmark-style tree examples")
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-encoder", help="train the hierarchical sentence encoder")
    _add_config(s)
    _add_encoder_flags(s)
    s.add_argument("--data", nargs="*", help="dataset splits whose gold steps join the synthetic triples")
    s.add_argument("--synth", type=int, help="number of synthetic triples (default 5000)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_encoder)

    s = sub.add_parser("train-controller", help="train the fact/step/abductive heads")
    _add_config(s)
    _add_controller_flags(s)
    s.add_argument("--task", type=int, choices=(1, 2, 3))
    s.add_argument("--encoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_controller)

    s = sub.add_parser("retrieve", help="BM25 retrieval with optional encoder re-ranking")
    _add_config(s)
    s.add_argument("--corpus")
    s.add_argument("--index", help="index file to load, or to write after building")
    s.add_argument("--data")
    s.add_argument("--query")
    s.add_argument("--k", type=int)
    s.add_argument("--limit", type=int)
    s.add_argument("--refine-by", choices=("score_fact", "distance"))
    s.add_argument("--encoder")
    s.add_argument("--heads")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("infer", help="build trees for a dataset")
    _add_config(s)
    _add_reason_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--corpus")
    s.add_argument("--k", type=int)
    s.add_argument("--limit", type=int)
    s.add_argument("--refine-by", choices=("score_fact", "distance"))
    s.add_argument("--encoder", required=True)
    s.add_argument("--heads")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against gold trees")
    _add_config(s)
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--sim", choices=("token-f1", "external"))
    s.add_argument("--sim-endpoint")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("breakdown", help="overall accuracy by gold leaf count")
    s.add_argument("--per-tree", required=True, help="per_tree.tsv written by eval")
    s.add_argument("--cap", type=int, help="merge leaf counts >= cap into one bucket")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_breakdown)

    s = sub.add_parser("export-embeddings", help="write fact vectors as TSV")
    s.add_argument("--encoder", required=True)
    s.add_argument("--data")
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_embeddings)

    s = sub.add_parser("run", help="full pipeline: train, infer, evaluate")
    _add_config(s)
    _add_encoder_flags(s)
    _add_controller_flags(s)
    _add_reason_flags(s)
    s.add_argument("--train")
    s.add_argument("--eval")
    s.add_argument("--corpus")
    s.add_argument("--synth", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--limit", type=int)
    s.add_argument("--refine-by", choices=("score_fact", "distance"))
    s.add_argument("--tau", type=float)
    s.add_argument("--sim", choices=("token-f1", "external"))
    s.add_argument("--sim-endpoint")
    s.add_argument("--out", help="run directory")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    from .controller import ControllerError
    from .data import DataError
    from .embed import EncoderError
    from .pipeline import ConfigError, RunLocked
    from .retrieval import RetrievalError
    from .tree import TreeError

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not getattr(a, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if a.command == "export-embeddings" and not (a.data or a.corpus):
        print("export-embeddings: need --data or --corpus", file=sys.stderr)
        return EXIT_USAGE
    try:
        return a.func(a)
    except (UsageError, ConfigError, RunLocked) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TreeError, RetrievalError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EncoderError, ControllerError) as exc:
        # corrupt checkpoints are data problems; training failures are runtime ones
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if "checkpoint" in str(exc) or "trained against" in str(exc) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
