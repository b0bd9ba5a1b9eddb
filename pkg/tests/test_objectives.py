import math

import numpy as np
import pytest

from vdrank import autodiff as ad
from vdrank.encoding import Vocabulary, pack_sequence
from vdrank.model import ModelConfig, init_params
from vdrank.objectives import (
    LossBreakdown,
    Phase,
    QuartetteLabel,
    apply_token_masking,
    ccl4_head,
    ccl4_loss,
    cmtl_loss,
    mlm_logits,
    total_loss,
)
from vdrank.sampling import QuartettePool, build_training_quartette
from vdrank.train import forward, pack_quartette

WORDS = [f"t{i}" for i in range(92)]  # 8 reserved + 92 = vocab of 100


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


def text_seq(vocab, n_words=10, k=2):
    words = WORDS[:n_words]
    return pack_sequence([None] * k, " ".join(words[:4]), [], " ".join(words[4:8]), " ".join(words[8:]), vocab)


def params_for(vocab, **kw):
    cfg = ModelConfig(num_blocks=1, num_heads=2, hidden_dim=8, ffn_dim=16, vocab_size=len(vocab), max_positions=64,
                      visual_dim=4, regions_per_image=2, **kw)
    return init_params(cfg, np.random.default_rng(0))


# -- masking


def test_rate_zero_forces_one_mask(vocab):
    m = apply_token_masking(text_seq(vocab), vocab, np.random.default_rng(0), rate=0.0)
    assert len(m.masked_positions) == 1


def test_rate_one_masks_every_text_token(vocab):
    seq = text_seq(vocab)
    m = apply_token_masking(seq, vocab, np.random.default_rng(0), rate=1.0)
    assert m.masked_positions == seq.text_positions(vocab)
    assert len(m.masked_positions) == 10


def test_masking_never_touches_regions_or_markers(vocab):
    seq = text_seq(vocab)
    m = apply_token_masking(seq, vocab, np.random.default_rng(1), rate=1.0)
    text = set(seq.text_positions(vocab))
    for i, (a, b) in enumerate(zip(seq.token_ids, m.masked_sequence.token_ids)):
        if i not in text:
            assert a == b
    assert [seq.token_ids[p] for p in m.masked_positions] == m.original_ids
    assert m.masked_positions == sorted(set(m.masked_positions))


def test_empirical_mask_rate(vocab):
    rng = np.random.default_rng(2)
    seq = text_seq(vocab, n_words=40)
    hits = total = 0
    while total < 10_000:
        hits += len(apply_token_masking(seq, vocab, rng).masked_positions)
        total += 40
    assert 0.14 <= hits / total <= 0.16


def test_nothing_to_mask(vocab):
    seq = text_seq(vocab)
    only_markers = seq.with_tokens(list(seq.token_ids))
    only_markers.token_ids = [vocab.stoi["[SEP]"]] * len(seq)
    with pytest.raises(ValueError):
        apply_token_masking(only_markers, vocab, np.random.default_rng(0))


# -- token recovery loss


def test_cmtl_uniform_logits_is_log_vocab(vocab):
    params = params_for(vocab)
    params["mlm_w"].data[:] = 0.0
    params["mlm_b"].data[:] = 0.0
    m = apply_token_masking(text_seq(vocab), vocab, np.random.default_rng(3), rate=0.5)
    hidden = ad.Tensor(np.random.default_rng(4).normal(size=(len(m.masked_sequence), 8)))
    assert cmtl_loss(hidden, m, params).item() == pytest.approx(math.log(100), abs=1e-12)


def test_cmtl_saturated_head_is_zero(vocab):
    params = params_for(vocab)
    m = apply_token_masking(text_seq(vocab), vocab, np.random.default_rng(5), rate=1.0)
    n = len(m.masked_sequence)
    # one-hot hidden rows select a huge logit for the right token
    hidden = np.zeros((n, 8))
    w = np.zeros((8, len(vocab)))
    for j, (p, t) in enumerate(zip(m.masked_positions[:8], m.original_ids[:8])):
        hidden[p, j] = 1.0
        w[j, t] = 100.0
    m.masked_positions, m.original_ids = m.masked_positions[:8], m.original_ids[:8]
    params["mlm_w"].data[:] = w
    params["mlm_b"].data[:] = 0.0
    assert cmtl_loss(ad.Tensor(hidden), m, params).item() < 1e-30


def test_cmtl_is_mean_of_per_position_cross_entropy(vocab):
    params = params_for(vocab, init_std=0.5)
    m = apply_token_masking(text_seq(vocab), vocab, np.random.default_rng(6), rate=0.5)
    hidden = np.random.default_rng(7).normal(size=(len(m.masked_sequence), 8))
    manual = []
    for p, t in zip(m.masked_positions, m.original_ids):
        logits = hidden[p : p + 1] @ params["mlm_w"].data + params["mlm_b"].data
        manual.append(ad.cross_entropy(ad.Tensor(logits), [t]).item())
    assert cmtl_loss(ad.Tensor(hidden), m, params).item() == pytest.approx(np.mean(manual), abs=1e-12)


def test_cmtl_ignores_unmasked_rows(vocab):
    params = params_for(vocab, init_std=0.5)
    m = apply_token_masking(text_seq(vocab), vocab, np.random.default_rng(8), rate=0.3)
    hidden = np.random.default_rng(9).normal(size=(len(m.masked_sequence), 8))
    base = cmtl_loss(ad.Tensor(hidden), m, params).item()
    others = [i for i in range(len(hidden)) if i not in m.masked_positions]
    hidden[others] += 50.0
    assert cmtl_loss(ad.Tensor(hidden), m, params).item() == base


def test_mlm_logits_batch_layout(vocab):
    params = params_for(vocab)
    rng = np.random.default_rng(10)
    ms = [apply_token_masking(text_seq(vocab), vocab, rng, rate=0.4) for _ in range(3)]
    logits, targets = mlm_logits(ad.Tensor(rng.normal(size=(3, len(ms[0].masked_sequence), 8))), ms, params)
    assert logits.shape == (sum(len(m.masked_positions) for m in ms), len(vocab))
    assert list(targets) == [t for m in ms for t in m.original_ids]


# -- contrastive head and loss


def test_zero_head_gives_zero_logits(vocab):
    params = params_for(vocab)
    params["cls_w"].data[:] = 0.0
    out = ccl4_head(ad.Tensor(np.ones(8)), params)
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_head_output_length(vocab):
    params = params_for(vocab)
    assert ccl4_head(ad.Tensor(np.ones(8)), params).shape == (4,)
    assert ccl4_head(ad.Tensor(np.ones((5, 8))), params).shape == (5, 4)


def test_ccl4_loss_values():
    assert ccl4_loss(ad.Tensor(np.zeros(4)), QuartetteLabel.MATCHED).item() == pytest.approx(math.log(4), abs=1e-12)
    assert ccl4_loss(ad.Tensor([-30.0, 30.0, -30.0, -30.0]), 1).item() < 1e-20


def test_ccl4_loss_is_core_cross_entropy():
    x = np.random.default_rng(11).normal(size=4)
    assert ccl4_loss(ad.Tensor(x), 2).item() == ad.cross_entropy(ad.Tensor(x[None]), [2]).item()


def test_ccl4_gradient_reaches_first_block_queries(tiny_corpus):
    cfg, corpus = tiny_corpus
    mc = ModelConfig(**{**cfg.model.to_dict(), "vocab_size": len(corpus.vocab)})
    params = init_params(mc, np.random.default_rng(12))
    q = corpus.train[0]
    h = forward(params, [pack_quartette(q, corpus.vocab, 64)], q.roi[None], q.loc[None])
    ad.backward(ccl4_loss(ccl4_head(h[:, 0], params), [3]))
    assert np.abs(params["block0.w_q"].grad).max() > 0


# -- combination


@pytest.mark.parametrize("cmtl,ccl4,phase,total", [
    (1.0, 2.0, "both", 3.0),
    (1.0, 2.0, "ccl4_only", 2.0),
    (0.0, 0.0, "both", 0.0),
])
def test_total_loss_cases(cmtl, ccl4, phase, total):
    out = total_loss(cmtl, ccl4, phase)
    assert isinstance(out, LossBreakdown)
    assert (out.cmtl, out.ccl4, out.total) == (cmtl, ccl4, total)


def test_second_phase_sends_no_gradient_to_token_head():
    p = ad.Parameter("p", np.array([1.0]))
    q = ad.Parameter("q", np.array([2.0]))
    out = total_loss(ad.sum_all(ad.mul(p, 3.0)), ad.sum_all(ad.mul(q, 5.0)), Phase.CCL4_ONLY)
    ad.backward(out.tensor)
    assert p.grad is None
    np.testing.assert_array_equal(q.grad, [5.0])


# -- learnability smoke tests


def _fixed_batch(corpus, rng, size=32):
    pool = QuartettePool(corpus.train)
    items = [build_training_quartette(i, pool, rng) for i in range(size)]
    seqs = [pack_quartette(q, corpus.vocab, 64) for q, _ in items]
    labels = np.array([int(lab) for _, lab in items])
    roi = np.stack([q.roi for q, _ in items])
    loc = np.stack([q.loc for q, _ in items])
    return items, seqs, labels, roi, loc


def test_overfits_fixed_batch_of_quartettes(tiny_corpus):
    cfg, corpus = tiny_corpus
    mc = ModelConfig(**{**cfg.model.to_dict(), "vocab_size": len(corpus.vocab)})
    rng = np.random.default_rng(13)
    params = init_params(mc, rng)
    _, seqs, labels, roi, loc = _fixed_batch(corpus, rng)
    for _ in range(500):
        logits = ccl4_head(forward(params, seqs, roi, loc)[:, 0], params)
        params.zero_grad()
        ad.backward(ccl4_loss(logits, labels))
        ad.adam_step([p for p in params if p.grad is not None], 3e-3)
    with ad.no_grad():
        logits = ccl4_head(forward(params, seqs, roi, loc)[:, 0], params).data
    assert (logits.argmax(axis=1) == labels).mean() >= 0.95


def test_token_loss_falls_on_fixed_batch(tiny_corpus):
    cfg, corpus = tiny_corpus
    mc = ModelConfig(**{**cfg.model.to_dict(), "vocab_size": len(corpus.vocab)})
    rng = np.random.default_rng(14)
    params = init_params(mc, rng)
    _, seqs, _, roi, loc = _fixed_batch(corpus, rng, size=16)
    masked = [apply_token_masking(s, corpus.vocab, rng) for s in seqs]
    trace = []
    for _ in range(200):
        loss = cmtl_loss(forward(params, [m.masked_sequence for m in masked], roi, loc), masked, params)
        params.zero_grad()
        ad.backward(loss)
        ad.adam_step([p for p in params if p.grad is not None], 3e-3)
        trace.append(loss.item())
    ma = np.convolve(trace, np.ones(20) / 20, mode="valid")[::20]
    assert np.all(np.diff(ma) < 0.05)
    assert ma[-1] < 0.5 * ma[0]
