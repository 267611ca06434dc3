"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Benchmark-backed criteria read ENTAILMENTBANK_ROOT.  When the data is not
there they fail (the criterion cannot be shown to hold) and a synthetic
proxy is reported alongside so the machinery is still exercised.
"""
import itertools
import math
import random
import time
from pathlib import Path

import numpy as np

from entailtree import synth
from entailtree.cli import main as cli_main
from entailtree.controller import (
    ControllerTrainConfig, Heads, enumerate_states, loss_fact, loss_step, sample_negatives, top1_accuracy,
)
from entailtree.data import IoError, benchmark_path, check_benchmark_sizes, data_root, load_dataset
from entailtree.embed import (
    EmbeddingModel, EncoderTrainConfig, Vocabulary, fit_encoder, loss_con, loss_grad, loss_mut, margin_accuracy,
    transmission_rate,
)
from entailtree.generator import OracleBackend, TemplateBackend, synth_singlesteps
from entailtree.metrics import align_trees, eval_leaves, eval_steps, evaluate_tree, optimal_alignment_mass, rank_metrics
from entailtree.pipeline import infer_example, train_controller_stage, train_encoder_stage, vocabulary_texts
from entailtree.reasoner import GoldScorer, ReasonConfig, beam_search, greedy_construct, greedy_rollout
from entailtree.retrieval import CorpusFact, build_index, lexical_retrieve, recall_at, rerank_refine
from entailtree.tree import Fact, parse_proof, serialize_proof
from helpers import finite_difference_check, local_edit, random_tree, record_criterion

TASKS = (1, 2, 3)
SPLITS = ("train", "dev", "test")
FD_TOL = 1e-4
CORPUS_NAMES = ("worldtree_corpus_sentences_extended.json", "corpus.jsonl", "corpus.json")


def _bench(task, split):
    try:
        return benchmark_path(task, split)
    except IoError:
        return None


def _bench_corpus():
    root = data_root()
    if root is None:
        return None
    for name in CORPUS_NAMES:
        hits = sorted(root.rglob(name))
        if hits:
            return hits[0]
    return None


def _missing(*paths):
    return f"benchmark files not found (set ENTAILMENTBANK_ROOT; root={data_root()})" \
        if any(p is None for p in paths) else None


def _finish(n, ok, detail):
    record_criterion(n, ok, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def _rand_encoder(texts, dim, seed):
    vocab = Vocabulary.from_texts(texts)
    return EmbeddingModel(vocab, np.random.default_rng(seed).normal(size=(len(vocab), dim)))


# ------------------------------------------------------------------ 1

def test_criterion_1_parser_round_trip():
    paths = [_bench(t, s) for t in TASKS for s in SPLITS]
    why = _missing(*paths)
    if why:
        _finish(1, False, why)
    t0 = time.perf_counter()
    total = good = 0
    for p in paths:
        for e in load_dataset(p, skip_invalid=True).examples:
            total += 1
            again = parse_proof(serialize_proof(e.tree), e.context, e.hypothesis)
            good += again == e.tree and serialize_proof(again) == serialize_proof(e.tree)
    elapsed = time.perf_counter() - t0
    ok = total > 0 and good == total and elapsed < 10.0
    _finish(1, ok, f"round-trip {good}/{total} trees, {elapsed:.2f}s (limit 10s)")


# ------------------------------------------------------------------ 2

def test_criterion_2_split_sizes():
    paths = {s: _bench(1, s) for s in SPLITS}
    why = _missing(*paths.values())
    if why:
        _finish(2, False, why)
    problems, got = [], {}
    for s, p in paths.items():
        ds = load_dataset(p, split=s)
        got[s] = ds.stats()
        problems += [f"{s} {m}" for m in check_benchmark_sizes(ds)]
    _finish(2, not problems, f"sizes {got}" + (f"; mismatches: {problems}" if problems else ""))


# ------------------------------------------------------------------ 3

def _encoder_fd(seed, which):
    triples = synth_singlesteps(6, seed=seed)
    vocab = Vocabulary.from_texts([t for tr in triples for t in (tr.premise_a, tr.premise_b, tr.conclusion)])
    model = EmbeddingModel(vocab, np.random.default_rng(seed).normal(size=(len(vocab), 8)))
    _, grad = loss_grad(model, triples, 0.5, 0.5, which=(which,))
    live = np.flatnonzero(np.abs(grad) > 1e-9)
    coords = np.random.default_rng(100 + seed).choice(live, size=min(12, len(live)), replace=False)
    fn = loss_con if which == "con" else loss_mut

    def f(table):
        return fn(EmbeddingModel(vocab, table), triples, 0.5)

    return len(coords), finite_difference_check(f, model.table, grad, coords)


def _controller_states(seed):
    rng = random.Random(seed)
    tree, ctx = random_tree(rng, 4, 7)
    enc = _rand_encoder(list(ctx.values()) + list(tree.intermediates.values()) + [tree.hypothesis], 4, seed)
    distractors = [Fact(k, v) for k, v in ctx.items() if k not in tree.leaf_ids]
    heads = Heads.zeros(enc.dim)
    heads = heads.with_params(np.random.default_rng(seed).normal(scale=0.5, size=len(heads.params())))
    return enumerate_states(tree, enc, distractors), enc, heads


def _fact_fd(seed):
    states, _, heads = _controller_states(seed)
    cfg = ControllerTrainConfig(lam=0.7, gamma3=0.3)
    _, g, gb = loss_fact(heads, states, cfg, want_grad=True)
    nf = len(heads.fact_w)
    theta = np.concatenate([heads.fact_w, [heads.fact_b]])

    def f(t):
        return loss_fact(heads.with_params(np.concatenate([t, heads.params()[nf + 1:]])), states, cfg)

    coords = np.random.default_rng(seed).choice(len(theta), size=12, replace=False)
    return 12, finite_difference_check(f, theta, np.concatenate([g, [gb]]), coords)


def _step_fd(seed):
    states, enc, heads = _controller_states(seed)
    cfg = ControllerTrainConfig(gamma4=0.5, negatives=6)
    negs = [sample_negatives(len(s.pool) * (len(s.pool) - 1) // 2, s.gold_pair_index(), 6,
                             np.random.default_rng(seed)) for s in states]
    _, g, _ = loss_step(heads, enc, states, cfg, negs, want_grad=True)
    nf, ns = len(heads.fact_w), len(heads.step_w)

    def f(w):
        p = heads.params().copy()
        p[nf + 1:nf + 1 + ns] = w
        return loss_step(heads.with_params(p), enc, states, cfg, negs)

    live = np.flatnonzero(np.abs(g) > 1e-6)
    coords = np.random.default_rng(seed).choice(live, size=min(12, len(live)), replace=False)
    return len(coords), finite_difference_check(f, heads.step_w, g, coords)


def test_criterion_3_gradient_checks():
    checks = {
        "con": lambda s: _encoder_fd(s, "con"),
        "mut": lambda s: _encoder_fd(s, "mut"),
        "fact": _fact_fd,
        "step": _step_fd,
    }
    worst, ok = {}, True
    for name, fn in checks.items():
        for seed in range(5):
            n, err = fn(seed)
            ok &= n >= 10 and err < FD_TOL
            worst[name] = max(worst.get(name, 0.0), err)
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    _finish(3, ok, f"{detail} (tol {FD_TOL:g}, 5 seeds, >=10 coords)")


# ------------------------------------------------------------------ 4

def test_criterion_4_encoder_geometry():
    world = synth.make_world(0)
    t0 = time.perf_counter()
    train = synth_singlesteps(5000, seed=0, world=world)
    seen = set(train)
    draw = synth_singlesteps(12000, seed=99, world=world)
    held = [t for t in dict.fromkeys(draw) if t not in seen][:1000]
    cases = synth.two_level_cases(world, 500, seed=7)
    extra = [x for t in held for x in (t.premise_a, t.premise_b, t.conclusion)] + [x for c in cases for x in c]
    model, _ = fit_encoder(train, EncoderTrainConfig(dim=64, seed=0), extra_texts=extra)
    elapsed = time.perf_counter() - t0
    acc = margin_accuracy(model, held)
    acc_draw = margin_accuracy(model, draw[:1000])
    trans = transmission_rate(model, cases, sorted({c[0] for c in cases}), seed=0)
    ok = acc >= 0.95 and trans >= 0.90 and elapsed < 300
    _finish(4, ok, f"held-out margin acc {acc:.3f} on {len(held)} unseen triples (>=0.95; "
                   f"{acc_draw:.3f} on an independent draw that overlaps training), "
                   f"transmission {trans:.3f} (>=0.90), train {elapsed:.1f}s (<300s)")


# ------------------------------------------------------------------ 5

def _oracle_run(dataset):
    scores, errors = [], 0
    for e in dataset.examples:
        enc = _rand_encoder(list(e.context.values()) + list(e.tree.intermediates.values()) + [e.hypothesis], 8, 0)
        facts = [Fact(k, v) for k, v in sorted(e.context.items())]
        try:
            out = greedy_construct(enc, GoldScorer([e.tree]), OracleBackend.from_trees([e.tree]), e.hypothesis,
                                   facts, ReasonConfig())
            scores.append(evaluate_tree(out, e.tree, tree_id=e.id))
        except Exception:  # noqa: BLE001 - counted as a miss
            errors += 1
    n = len(scores) + errors
    overall = sum(s.overall_allcorrect for s in scores) / n
    f1s = [min((getattr(s, k) for s in scores), default=0.0) for k in ("leaves_f1", "steps_f1", "intermediates_f1")]
    return n, overall, f1s, errors


def test_criterion_5_oracle_end_to_end(toy_dev):
    n, overall, f1s, errors = _oracle_run(toy_dev)
    proxy = f"synthetic proxy: overall {overall:.3f} on {n} trees"
    p = _bench(1, "dev")
    why = _missing(p)
    if why:
        _finish(5, False, f"{why}; {proxy}")
    n, overall, f1s, errors = _oracle_run(load_dataset(p, split="dev"))
    ok = overall == 1.0 and all(f == 1.0 for f in f1s) and errors == 0
    _finish(5, ok, f"Task1 dev overall AllCorrect {overall:.4f} on {n} trees, min leaves/steps/int F1 "
                   f"{f1s[0]:.3f}/{f1s[1]:.3f}/{f1s[2]:.3f}, {errors} construction failures; {proxy}")


# ------------------------------------------------------------------ 6

def _brute_mass(pred, gold):
    from entailtree.tree import leaf_descendants

    P = {n: leaf_descendants(pred, n) for n in pred.intermediates}
    G = {n: leaf_descendants(gold, n) for n in gold.intermediates}
    ps, gs, best = list(P), list(G), 0.0
    for choice in itertools.product([None] + gs, repeat=len(ps)):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        best = max(best, sum(len(P[p] & G[g]) / len(P[p] | G[g]) for p, g in zip(ps, choice) if g is not None))
    return best


def _brute_leaves(pred, gold):
    p, g = {f.id for f in pred.leaves}, {f.id for f in gold.leaves}
    hit = len(p & g)
    if hit == 0:
        return 1.0 if not p and not g else 0.0
    return 2 * hit / (len(p) + len(g))


def _brute_steps(pred, gold, mapping):
    pool = [frozenset(s.premises) for s in gold.steps]
    hit = 0
    for s in pred.steps:
        key = frozenset(mapping.get(x, ("unmatched", x)) if not x.is_leaf else x for x in s.premises)
        if key in pool:
            pool.remove(key)
            hit += 1
    return 0.0 if hit == 0 else 2 * hit / (len(pred.steps) + len(gold.steps))


def _perturbed_pairs(seed, n):
    rng = random.Random(seed)
    for _ in range(n):
        k = rng.randint(2, 6)                       # at most 5 intermediates
        gold, ctx = random_tree(rng, k, k + 3)
        yield local_edit(gold, ctx, rng, rng.randint(1, 3)), gold


def test_criterion_6_alignment_and_set_oracles():
    n, optimal, agree = 500, 0, 0
    for pred, gold in _perturbed_pairs(2024, n):
        al = align_trees(pred, gold)
        opt = _brute_mass(pred, gold)
        assert abs(opt - optimal_alignment_mass(pred, gold)) < 1e-9
        optimal += al.total >= opt - 1e-12
        agree += (abs(eval_leaves(pred, gold)[0] - _brute_leaves(pred, gold)) < 1e-12
                  and abs(eval_steps(pred, gold, al)[0] - _brute_steps(pred, gold, al.mapping)) < 1e-12)
    rate = optimal / n
    # the rate sits close to the threshold, so report a pooled estimate over more samples too
    pooled = [align_trees(p, g).total >= optimal_alignment_mass(p, g) - 1e-12
              for seed in range(8) for p, g in _perturbed_pairs(seed, n)]
    ok = rate >= 0.95 and agree == n
    _finish(6, ok, f"greedy alignment reaches the exhaustive optimum in {optimal}/{n} = {rate:.3f} (>=0.95; "
                   f"pooled over {len(pooled)} further pairs {sum(pooled) / len(pooled):.3f}); "
                   f"leaves/steps oracle agreement {agree}/{n}")


# ------------------------------------------------------------------ 7

def _controller_signal(train_ds, dev_ds, train2_ds, dev2_ds):
    enc_cfg = EncoderTrainConfig(seed=0)
    texts = vocabulary_texts([train_ds, dev_ds, train2_ds, dev2_ds])
    encoder, _ = train_encoder_stage(train_ds.examples, 5000, enc_cfg, texts)
    heads, _ = train_controller_stage(train_ds.examples, encoder, ControllerTrainConfig(lam=0.0), task=1)
    from entailtree.pipeline import controller_states

    states, _ = controller_states(dev_ds.examples, encoder, with_distractors=False)
    acc, base = top1_accuracy(heads, states)

    heads2, _ = train_controller_stage(train2_ds.examples, encoder, ControllerTrainConfig(lam=1.0), task=2)
    cfg = ReasonConfig(delta=0.001)

    def leaves_f1(h):
        vals = []
        for e in dev2_ds.examples:
            p = infer_example(e, 2, encoder, h, TemplateBackend(), cfg)
            vals.append(eval_leaves(p.tree, e.tree)[0] if p.tree is not None else 0.0)
        return sum(vals) / len(vals)

    return acc, base, leaves_f1(heads2), leaves_f1(Heads.zeros(encoder.dim))


def test_criterion_7_controller_learning_signal(toy_splits):
    ld = lambda p: load_dataset(p, skip_invalid=True)  # noqa: E731
    acc, base, f1, f1_zero = _controller_signal(
        ld(toy_splits / "task_1" / "train.jsonl"), ld(toy_splits / "task_1" / "dev.jsonl"),
        ld(toy_splits / "task_2" / "train.jsonl"), ld(toy_splits / "task_2" / "dev.jsonl"))
    proxy = (f"synthetic proxy: top-1 {acc:.3f} vs baseline {base:.3f}, "
             f"Task2-style leaves F1 {f1:.3f} vs zero heads {f1_zero:.3f}")
    paths = [_bench(1, "train"), _bench(1, "dev"), _bench(2, "train"), _bench(2, "dev")]
    why = _missing(*paths)
    if why:
        _finish(7, False, f"{why}; {proxy}")
    acc, base, f1, f1_zero = _controller_signal(*(ld(p) for p in paths))
    ok = acc >= 3 * base and f1 > f1_zero
    _finish(7, ok, f"Task1 dev top-1 {acc:.3f} vs 3x baseline {3 * base:.3f}; Task2 dev leaves F1 "
                   f"{f1:.3f} vs zero heads {f1_zero:.3f}; {proxy}")


# ------------------------------------------------------------------ 8

def test_criterion_8_beam_greedy_consistency():
    same = dominates = 0
    n = 200
    for seed in range(n):
        rng = random.Random(seed)
        k = rng.randint(2, 6)
        tree, ctx = random_tree(rng, k, k + seed % 4)
        enc = _rand_encoder(list(ctx.values()) + [tree.hypothesis], 6, seed)
        heads = Heads.zeros(enc.dim)
        heads = heads.with_params(np.random.default_rng(seed).normal(size=len(heads.params())))
        facts = [Fact(a, b) for a, b in ctx.items()]
        gen = TemplateBackend()
        greedy = greedy_rollout(enc, heads, gen, tree.hypothesis, facts, ReasonConfig())
        single = ReasonConfig(beam_size=1, top_p=1e-9, abductive=False, anchor_greedy=False)
        (beam1,) = beam_search(enc, heads, gen, tree.hypothesis, facts, single)
        same += beam1.steps == greedy.steps
        wide = beam_search(enc, heads, gen, tree.hypothesis, facts, ReasonConfig(beam_size=3, top_p=0.9))
        dominates += max(p.cumulative_score for p in wide) >= greedy.cumulative_score - 1e-12
    _finish(8, same == n and dominates == n,
            f"beam=1 equals greedy on {same}/{n}; beam best >= greedy on {dominates}/{n}")


# ------------------------------------------------------------------ 9

def _brute_rank(labels):
    gains = [float(bool(x)) for x in labels]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = max(sum(g / math.log2(i + 2) for i, g in enumerate(p)) for p in set(itertools.permutations(gains)))
    return gains[0], (0.0 if ideal == 0 else dcg / ideal)


def test_criterion_9_ranking_metrics():
    rng = np.random.default_rng(9)
    agree = 0
    for _ in range(1000):
        labels = [int(x) for x in rng.integers(0, 2, size=int(rng.integers(1, 8)))]
        p1, nd = rank_metrics(labels)
        bp, bn = _brute_rank(labels)
        agree += p1 == bp and abs(nd - bn) < 1e-12
    _, nd = rank_metrics([0, 1])
    err = abs(nd - 1 / math.log2(3))
    _finish(9, agree == 1000 and err <= 1e-12, f"oracle agreement {agree}/1000; |NDCG([0,1]) - 1/log2 3| = {err:.1e}")


# ------------------------------------------------------------------ 10

def _brute_bm25(docs, query, k1=1.2, b=0.75):
    toks = [d.split() for d in docs]
    avgdl = sum(map(len, toks)) / len(toks)
    out = []
    for d in toks:
        s = 0.0
        for t in query.split():
            tf = d.count(t)
            if tf:
                df = sum(t in x for x in toks)
                idf = math.log(1 + (len(toks) - df + 0.5) / (df + 0.5))
                s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(d) / avgdl))
        out.append(s)
    return out


def _task3_recall():
    dev, corpus_path = _bench(3, "dev"), _bench_corpus()
    if dev is None or corpus_path is None:
        return "recall@25 not reported (Task3 dev or corpus not found)"
    from entailtree.data import load_corpus

    ds = load_dataset(dev, split="dev", skip_invalid=True)
    corpus = load_corpus(corpus_path)
    train = load_dataset(_bench(3, "train"), skip_invalid=True) if _bench(3, "train") else ds
    encoder, _ = train_encoder_stage(train.examples, 5000, EncoderTrainConfig(seed=0),
                                     vocabulary_texts([train, ds], corpus))
    heads, _ = train_controller_stage(train.examples, encoder, ControllerTrainConfig(lam=1.0), task=3)
    index = build_index(corpus)
    rec = []
    for e in ds.examples:
        cands = [c for c, _ in lexical_retrieve(index, e.hypothesis, 50)]
        cands = rerank_refine(encoder, heads, e.hypothesis, cands, 25)
        rec.append(recall_at(cands, [f.text for f in e.tree.leaves]))
    return f"Task3 dev recall@25 after rerank_refine = {sum(rec) / len(rec):.3f} (informational)"


def test_criterion_10_retrieval():
    rng = random.Random(10)
    words = [f"w{k}" for k in range(60)]
    corpus = [CorpusFact(f"sent{i + 1}", " ".join(rng.choice(words) for _ in range(rng.randint(1, 14))))
              for i in range(200)]
    index = build_index(corpus)
    bad = 0
    for k in (1, 10, 50):
        for _ in range(30):
            q = " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
            want = _brute_bm25([c.text for c in corpus], q)
            order = sorted(range(200), key=lambda i: (-want[i], i))[:k]
            got = lexical_retrieve(index, q, k)
            bad += [c.id for c, _ in got] != [corpus[i].id for i in order] or \
                not np.allclose([s for _, s in got], [want[i] for i in order], atol=1e-12)
    _finish(10, bad == 0, f"BM25 top-k vs brute force: {90 - bad}/90 queries agree (k in 1,10,50); {_task3_recall()}")


# ------------------------------------------------------------------ 11

def _snapshot(paths):
    return {str(p): Path(p).read_bytes() for p in paths}


def test_criterion_11_cli_determinism(toy_splits, tmp_path):
    d = tmp_path
    train, dev = str(toy_splits / "task_2" / "train.jsonl"), str(toy_splits / "task_2" / "dev.jsonl")
    fast = ["--epochs", "2", "--dim", "16", "--synth", "300"]
    commands = [
        (["synth-data", "--n", "50", "--trees", "--distractors", "3", "--out", f"{d}/s.jsonl"], [f"{d}/s.jsonl"]),
        (["train-encoder", "--data", train, "--out", f"{d}/enc.tsv", *fast],
         [f"{d}/enc.tsv", f"{d}/enc.tsv.meta.json", f"{d}/enc.tsv.curve.png"]),
        (["train-controller", "--encoder", f"{d}/enc.tsv", "--data", train, "--task", "2", "--ctl-epochs", "2",
          "--out", f"{d}/h.json"], [f"{d}/h.json", f"{d}/h.json.meta.json", f"{d}/h.json.curve.png"]),
        (["infer", "--task", "2", "--data", dev, "--encoder", f"{d}/enc.tsv", "--heads", f"{d}/h.json",
          "--out", f"{d}/p.jsonl"], [f"{d}/p.jsonl"]),
        (["eval", "--pred", f"{d}/p.jsonl", "--gold", dev, "--out", f"{d}/ev"],
         [f"{d}/ev/{n}" for n in ("report.json", "per_tree.tsv", "breakdown.tsv", "breakdown.png")]),
        (["breakdown", "--per-tree", f"{d}/ev/per_tree.tsv", "--cap", "4", "--out", f"{d}/bd"],
         [f"{d}/bd/breakdown.tsv", f"{d}/bd/breakdown.png"]),
        (["export-embeddings", "--encoder", f"{d}/enc.tsv", "--data", dev, "--out", f"{d}/emb.tsv"],
         [f"{d}/emb.tsv"]),
        (["run", "--task", "2", "--train", train, "--eval", dev, "--ctl-epochs", "2", *fast, "--out", f"{d}/run"],
         None),
    ]
    differing, failed = [], []
    for argv, outputs in commands:
        snaps = []
        for _ in range(2):
            if cli_main(argv) != 0:
                failed.append(argv[0])
            files = outputs or sorted(p for p in Path(f"{d}/run").iterdir() if p.is_file())
            snaps.append(_snapshot(files))
        differing += [f"{argv[0]}:{Path(k).name}" for k in snaps[0] if snaps[0][k] != snaps[1].get(k)]
    ok = not differing and not failed
    _finish(11, ok, f"{len(commands)} commands repeated; differing artifacts: {differing or 'none'}"
                    + (f"; failed: {failed}" if failed else ""))
