import math

import numpy as np
import pytest

from flowgrasp import autodiff as ad
from flowgrasp import data as D
from flowgrasp.backbone import Backbone, BackboneConfig, SequenceLengthError
from flowgrasp.gradcheck import grad_check
from flowgrasp.trainer import AdamW
from flowgrasp.vocab import EOS, Vocabulary

from conftest import MICRO_BB, micro_stack, random_views


def build_sample(vocab, cfg, rng, user="go right", target="ok then"):
    user_ids = vocab.encode_text(user)
    asst_ids = vocab.encode_text(target)
    ids, mask = D.build_token_sequence(vocab, cfg.n_image_tokens, user_ids,
                                       asst_ids, with_proprio=True)
    views = random_views(rng, cfg)
    proprio = rng.random(cfg.proprio_dim)
    return ids, mask, views, proprio


def test_token_count_arithmetic_desk_config():
    cfg = BackboneConfig()  # 64 px, patch 8
    assert cfg.grid == 8
    assert cfg.tokens_per_view == 4
    assert cfg.n_image_tokens == 12


def test_encoder_output_shape(train_mode):
    bb, _, vocab = micro_stack()
    rng = np.random.default_rng(0)
    out = bb.encode_views(random_views(rng, bb.cfg))
    assert out.shape == (bb.cfg.n_image_tokens, bb.cfg.dim)


def test_encoder_zero_views_identical_and_pixel_weight_independent(train_mode):
    bb, _, _ = micro_stack()
    zeros = [np.zeros((16, 16, 3), dtype=np.float32) for _ in range(3)]
    out = bb.encode_views(zeros)
    per_view = out.data.reshape(3, -1)
    assert np.array_equal(per_view[0], per_view[1])
    assert np.array_equal(per_view[1], per_view[2])
    # pixel-multiplying weights cannot matter on a zero image
    bb.p["enc.patch_w"].data = bb.p["enc.patch_w"].data * 7.5
    out2 = bb.encode_views(zeros)
    assert np.array_equal(out.data, out2.data)


def test_encoder_rejects_bad_shape(train_mode):
    bb, _, _ = micro_stack()
    views = [np.zeros((8, 8, 3))] * 3
    with pytest.raises(ad.DimensionError):
        bb.encode_views(views)


def test_encoder_gradient(test_mode):
    bb, _, vocab = micro_stack()
    bb = bb.astype(np.float64)
    rng = np.random.default_rng(3)
    views = random_views(rng, bb.cfg)
    proj = rng.normal(size=(bb.cfg.n_image_tokens, bb.cfg.dim))
    enc_params = [p for n, p in bb.named_params() if n.startswith("enc.")]

    def f():
        return ad.sum_all(ad.mul(bb.encode_views(views), ad.tensor(proj)))

    report = grad_check(f, enc_params, tol=1e-4, max_elements_per_param=24,
                        rng=np.random.default_rng(0))
    assert report.passed, report.summary()


def test_forward_zero_mask_gives_zero_loss(train_mode):
    bb, _, vocab = micro_stack()
    rng = np.random.default_rng(1)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    _, l_ar, _ = bb.forward(ids, views, proprio, np.zeros_like(mask))
    assert l_ar.item() == 0.0


def test_forward_uniform_logits_single_position(train_mode):
    bb, _, vocab = micro_stack()
    rng = np.random.default_rng(2)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    bb.p["head_w"].data = np.zeros_like(bb.p["head_w"].data)  # uniform logits
    single = np.zeros_like(mask)
    single[-1] = 1.0
    _, l_ar, _ = bb.forward(ids, views, proprio, single)
    assert l_ar.item() == pytest.approx(math.log(len(vocab)), rel=1e-6)


def test_forward_overlong_sequence(train_mode):
    bb, _, vocab = micro_stack()
    rng = np.random.default_rng(4)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    long_ids = np.concatenate([ids, np.full(300, vocab.token_id(EOS))])
    with pytest.raises(SequenceLengthError):
        bb.forward(long_ids, views, proprio)


def test_cache_shapes_and_append_only(train_mode):
    bb, _, vocab = micro_stack()
    rng = np.random.default_rng(5)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    _, _, cache = bb.forward(ids, views, proprio)
    assert cache.n_layers == bb.cfg.layers
    assert len(cache) == len(ids)
    logits, cache2 = bb.step(vocab.token_id("a"), len(ids), cache)
    assert len(cache2) == len(ids) + 1
    assert len(cache) == len(ids)  # original untouched


def test_prefix_logits_independent_of_expert(train_mode):
    bb, ex, vocab = micro_stack()
    rng = np.random.default_rng(6)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    logits1, _, cache = bb.forward(ids, views, proprio)
    snapshot = [(k.data.copy(), v.data.copy()) for k, v in cache.layers]
    noisy = rng.standard_normal((ex.cfg.horizon, ex.cfg.action_dim))
    ex.predict_velocity(noisy, 0.3, cache.slice(len(ids) - 2), proprio)
    logits2, _, _ = bb.forward(ids, views, proprio)
    assert np.array_equal(logits1.data, logits2.data)
    for (k0, v0), (k, v) in zip(snapshot, cache.layers):
        assert np.array_equal(k0, k.data) and np.array_equal(v0, v.data)


def test_greedy_decode_deterministic_and_temp0_equals_greedy(test_mode):
    bb, _, vocab = micro_stack()
    bb = bb.astype(np.float64)
    rng = np.random.default_rng(7)
    ids, _, views, proprio = build_sample(vocab, bb.cfg, rng)
    stop = {vocab.token_id(EOS)}
    g1 = bb.generate_text(ids, views, proprio, stop, max_len=8)
    g2 = bb.generate_text(ids, views, proprio, stop, max_len=8)
    g3 = bb.generate_text(ids, views, proprio, stop, max_len=8,
                          decode="temperature", temperature=0.0,
                          rng=np.random.default_rng(0))
    assert g1.tokens == g2.tokens == g3.tokens


def test_incremental_decode_matches_full_reforward(test_mode):
    bb, _, vocab = micro_stack(seed=11)
    bb = bb.astype(np.float64)
    rng = np.random.default_rng(8)
    ids, _, views, proprio = build_sample(vocab, bb.cfg, rng)
    gen = bb.generate_text(ids, views, proprio, stop_ids=set(), max_len=10)
    assert len(gen.tokens) == 10 and gen.truncated
    full = np.concatenate([ids, np.asarray(gen.tokens)])
    with ad.no_grad():
        logits, _, _ = bb.forward(full, views, proprio)
    for j, tok in enumerate(gen.tokens):
        assert int(np.argmax(logits.data[len(ids) + j - 1])) == tok


def test_decode_logprob_matches_teacher_forced(test_mode):
    bb, _, vocab = micro_stack(seed=13)
    bb = bb.astype(np.float64)
    rng = np.random.default_rng(9)
    ids, _, views, proprio = build_sample(vocab, bb.cfg, rng)
    gen = bb.generate_text(ids, views, proprio, stop_ids=set(), max_len=12)
    tf = bb.teacher_forced_logprob(ids, views, proprio, gen.tokens)
    assert tf == pytest.approx(gen.logprob, abs=1e-9)


def test_full_model_gradcheck_micro(test_mode):
    bb, _, vocab = micro_stack(seed=17)
    bb = bb.astype(np.float64)
    rng = np.random.default_rng(10)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng)
    params = [p for _, p in bb.named_params()]

    def f():
        _, l_ar, _ = bb.forward(ids, views, proprio, mask)
        return l_ar

    report = grad_check(f, params, tol=1e-4, max_elements_per_param=3,
                        rng=np.random.default_rng(1))
    assert report.passed, report.summary()


def test_overfit_memorized_corpus(train_mode):
    bb, _, vocab = micro_stack(seed=19)
    rng = np.random.default_rng(20)
    corpus = []
    words = ["lift the cup", "open the jar", "push the box", "pull the bar"]
    for i in range(20):
        corpus.append(build_sample(vocab, bb.cfg, rng,
                                   user=f"sample {i}",
                                   target=words[i % len(words)]))
    opt = AdamW(bb.named_params(), weight_decay=0.0)
    loss = None
    for step in range(260):
        total = None
        for j in range(4):
            ids, mask, views, proprio = corpus[(step * 4 + j) % len(corpus)]
            _, l_ar, _ = bb.forward(ids, views, proprio, mask)
            total = l_ar if total is None else ad.add(total, l_ar)
        total = ad.scale(total, 0.25)
        opt.zero_grad()
        ad.backward(total)
        opt.step(3e-3)
        opt.zero_grad()
        loss = float(total.data)
    # teacher-forced loss over the whole corpus after overfitting
    final = np.mean([
        float(bb.forward(ids, views, proprio, mask)[1].data)
        for ids, mask, views, proprio in corpus])
    assert final < 0.1, f"memorization loss {final}"


def test_generate_reproduces_memorized_target(train_mode):
    bb, _, vocab = micro_stack(seed=23)
    rng = np.random.default_rng(21)
    ids, mask, views, proprio = build_sample(vocab, bb.cfg, rng,
                                             user="task a", target="grab the lid")
    opt = AdamW(bb.named_params(), weight_decay=0.0)
    for _ in range(220):
        _, l_ar, _ = bb.forward(ids, views, proprio, mask)
        opt.zero_grad()
        ad.backward(l_ar)
        opt.step(3e-3)
        opt.zero_grad()
    prefix_len = int(np.nonzero(ids == vocab.token_id("<asst>"))[0][0]) + 1
    gen = bb.generate_text(ids[:prefix_len], views, proprio,
                           stop_ids={vocab.token_id(EOS)}, max_len=30)
    assert vocab.decode(gen.tokens) == "grab the lid"
