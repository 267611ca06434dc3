import numpy as np
import pytest

from entailtree import embed
from entailtree.embed import (
    BatchTooSmall,
    DimMismatch,
    EmbeddingModel,
    EncoderError,
    EncoderTrainConfig,
    StepTriple,
    Vocabulary,
    fit_encoder,
    loss_con,
    loss_grad,
    loss_mut,
)
from entailtree.generator import synth_singlesteps
from helpers import finite_difference_check


def _model_and_batch(seed, n=6, dim=8):
    triples = synth_singlesteps(n, seed=seed)
    vocab = Vocabulary.from_texts([t for tr in triples for t in (tr.premise_a, tr.premise_b, tr.conclusion)])
    rng = np.random.default_rng(seed)
    # large init keeps most hinges active and away from kinks
    model = EmbeddingModel(vocab, rng.normal(size=(len(vocab), dim)))
    return model, triples


def _pick(grad, rng, k=12):
    nz = np.flatnonzero(np.abs(grad) > 1e-9)
    return rng.choice(nz, size=min(k, len(nz)), replace=False)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("which", ["con", "mut"])
def test_gradient_matches_finite_differences(seed, which):
    model, batch = _model_and_batch(seed)
    g1 = g2 = 0.5
    _, grad = loss_grad(model, batch, g1, g2, which=(which,))
    coords = _pick(grad, np.random.default_rng(100 + seed))
    assert len(coords) >= 10

    def f(table):
        m = EmbeddingModel(model.vocab, table)
        return loss_con(m, batch, g1) if which == "con" else loss_mut(m, batch, g2)

    assert finite_difference_check(f, model.table, grad, coords) < 1e-4


def test_hand_computed_con_loss():
    # two triples in 1-d: sb=[1,0], se=[0,2], ci=[1,2]; pos distances are 0
    sb, se, ci = np.array([[1.0], [0.0]]), np.array([[0.0], [2.0]]), np.array([[1.0], [2.0]])
    loss, *_ = embed.con_loss_and_grad(sb, se, ci, 0.5)
    # k=0: swap b -> |0+0-1|=1 -> [0-1+.5]+=0 ; swap e -> |1+2-1|=2 -> 0
    # k=1: swap b -> |1+2-2|=1 -> 0 ; swap e -> |0+0-2|=2 -> 0
    assert loss == 0.0
    loss, *_ = embed.con_loss_and_grad(sb, se, ci, 1.5)
    # margins: 1.5-1, 1.5-2 (0), 1.5-1, 1.5-2 (0) -> 1.0
    assert loss == pytest.approx(1.0)


def test_hand_computed_mut_loss():
    sb, se = np.array([[0.0], [3.0]]), np.array([[1.0], [3.5]])
    loss, *_ = embed.mut_loss_and_grad(sb, se, 1.0)
    # k=0: d(0,1)=1 vs d(0,3.5)=3.5 -> [1-3.5+1]+=0 ; k=1: 0.5 vs d(3,1)=2 -> [0.5-2+1]+=0
    assert loss == 0.0
    loss, *_ = embed.mut_loss_and_grad(sb, se, 3.0)
    assert loss == pytest.approx(0.5 + 1.5)


def test_losses_non_negative():
    model, batch = _model_and_batch(3)
    assert loss_con(model, batch) >= 0
    assert loss_mut(model, batch) >= 0


def test_batch_too_small():
    model, batch = _model_and_batch(0)
    with pytest.raises(BatchTooSmall):
        loss_con(model, batch[:1])


def test_distance_dim_mismatch():
    with pytest.raises(DimMismatch):
        embed.distance(np.zeros(3), np.zeros(4))


def test_training_is_deterministic_and_reduces_loss():
    triples = synth_singlesteps(300, seed=1)
    cfg = EncoderTrainConfig(dim=16, epochs=4, seed=3)
    m1, h1 = fit_encoder(triples, cfg)
    m2, _ = fit_encoder(triples, cfg)
    assert m1.checksum() == m2.checksum()
    assert h1.epoch_loss[-1] < h1.epoch_loss[0]


def test_unknown_tokens_map_to_unk_row():
    model, _ = _model_and_batch(0)
    v = model.encode("zzzz qqqq")
    assert np.allclose(v, model.table[0])


def test_checkpoint_round_trip(tmp_path):
    model, _ = _model_and_batch(1)
    model.save(tmp_path / "m.tsv")
    back = EmbeddingModel.load(tmp_path / "m.tsv")
    assert back.vocab.tokens == model.vocab.tokens
    assert np.array_equal(back.table, model.table)
    assert back.checksum() == model.checksum()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x.tsv").write_text("hello\n")
    with pytest.raises(EncoderError):
        EmbeddingModel.load(tmp_path / "x.tsv")


def test_export_embeddings_round_trip(tmp_path):
    from entailtree.tree import Fact, NodeId

    model, _ = _model_and_batch(2, dim=4)
    facts = [Fact(NodeId.sent(k), f"fact number {k}") for k in (1, 2, 3)]
    embed.export_embeddings(model, facts, tmp_path / "e.tsv")
    rows = (tmp_path / "e.tsv").read_text().splitlines()
    assert len(rows) == 4 and len(rows[1].split("\t")) == 2 + 4
    loaded = embed.load_embeddings(tmp_path / "e.tsv")
    for f in facts:
        assert np.array_equal(loaded[str(f.id)], model.encode(f.text))
    embed.export_embeddings(model, [], tmp_path / "empty.tsv")
    assert len((tmp_path / "empty.tsv").read_text().splitlines()) == 1


def test_golden_single_synthetic_triple():
    (t,) = synth_singlesteps(1, seed=0)
    assert isinstance(t, StepTriple)
    assert t == StepTriple("pekrus causes nusur", "briplizur causes pekrus", "briplizur causes nusur")
    assert t.to_json() == {"s_b": t.premise_a, "s_e": t.premise_b, "i": t.conclusion}
