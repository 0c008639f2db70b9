import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as nps

from relcap import autodiff as ad
from relcap import data, gradcheck, model, vqa_head
from relcap.gradcheck import numeric_grad, rel_error


@pytest.fixture
def P():
    cfg = gradcheck.tiny_config()
    batch = gradcheck.tiny_batch(0)
    return {k: ad.Tensor(v) for k, v in gradcheck.tiny_params(cfg, batch).items()}


def test_uniform_scores_give_uniform_adjustment(P):
    P = dict(P)
    P["caa.score.W"] = ad.Tensor(np.zeros((5, 1)))
    Vq = ad.constant(np.random.default_rng(0).normal(size=(2, 4, 5)))
    c = ad.constant(np.ones((2, 5)))
    adj = vqa_head.adjust_attention(P, Vq, np.ones((2, 4), bool), c)
    np.testing.assert_allclose(adj.alpha.value, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(adj.attended.value, Vq.value.sum(axis=1) / 4, rtol=1e-12)


def test_adjustment_off_sums_objects(P):
    u, w = np.array([1.0, 2, 3, 4, 5]), np.array([-1.0, 0, 1, 0, 2])
    Vq = ad.constant(np.stack([u, w])[None])
    adj = vqa_head.adjust_attention(P, Vq, np.ones((1, 2), bool), None, use_caa=False)
    np.testing.assert_array_equal(adj.attended.value[0], u + w)
    assert adj.alpha is None


def test_dominant_score_concentrates_attention():
    a = np.zeros((1, 4))
    a[0, 2] = 50.0
    alpha = ad.softmax(ad.constant(a)).value
    assert alpha[0, 2] > 1 - 1e-9


def test_zero_question_gives_bias_logits(P):
    q = ad.constant(np.zeros((2, 5)))
    pred = vqa_head.predict(P, q, ad.constant(np.ones((2, 5))), ad.constant(np.ones((2, 5))))
    assert np.all(pred.h.value == 0)
    np.testing.assert_array_equal(pred.logits.value, np.broadcast_to(P["answer.b"].value, (2, 3)))
    np.testing.assert_allclose(pred.probs.value, 1 / (1 + np.exp(-P["answer.b"].value))[None].repeat(2, 0))


@given(st.floats(0.01, 20))
def test_doubling_positive_logit_increases_score(x):
    s = ad.sigmoid(ad.constant(np.array([x, 2 * x]))).value
    assert s[1] > s[0] or s[0] == 1.0


def test_answer_logit_gradient_wrt_objects():
    cfg = gradcheck.tiny_config()
    batch = gradcheck.tiny_batch(1)
    params = gradcheck.tiny_params(cfg, batch, seed=1)
    P = model.constants(params)
    q, att = model.encode(P, batch, cfg)
    vq = att.Vq.value.copy()

    def s_pred(tape=None):
        Vq = tape.variable(vq) if tape else ad.Tensor(vq)
        t = model.head(P, batch, cfg, q, Vq, tape=tape, with_captioner=False)
        return ad.sum(t.s_pred), Vq

    tape = ad.Tape()
    L, Vq = s_pred(tape)
    g = tape.backward(L)[Vq]
    num = numeric_grad(lambda: s_pred()[0].item(), vq)
    for k in range(vq.shape[1]):
        assert rel_error(g[:, k], num[:, k]) < 1e-4


def test_confident_rejection_has_near_zero_loss():
    loss = vqa_head.vqa_loss(ad.constant(np.full((1, 6), -50.0)), np.zeros((1, 6))).value
    assert loss[0] / 6 < 1e-9


def test_single_candidate_loss_is_log2():
    loss = vqa_head.vqa_loss(ad.constant(np.zeros((1, 1))), np.ones((1, 1))).value
    assert loss[0] == pytest.approx(np.log(2), abs=1e-15)


@settings(max_examples=50)
# beyond |x| ~ 10 the naive 1 - sigmoid(x) cancels and the naive form is the inaccurate one
@given(nps.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       nps.arrays(np.float64, (3, 4), elements=st.floats(0, 1)))
def test_stable_loss_matches_naive(logits, s):
    p = 1 / (1 + np.exp(-logits))
    with np.errstate(divide="ignore", invalid="ignore"):
        naive = -(s * np.log(p) + (1 - s) * np.log(1 - p)).sum(axis=1)
    stable = vqa_head.vqa_loss(ad.constant(logits), s).value
    ok = np.isfinite(naive)
    np.testing.assert_allclose(stable[ok], naive[ok], rtol=0, atol=1e-9)


@given(nps.arrays(np.float64, (2, 5), elements=st.floats(-40, 40)),
       nps.arrays(np.float64, (2, 5), elements=st.floats(0, 1)))
def test_loss_nonnegative(logits, s):
    assert np.all(vqa_head.vqa_loss(ad.constant(logits), s).value >= -1e-12)


def test_loss_zero_at_extremes():
    logits = np.array([[-800.0, 800.0]])
    assert vqa_head.vqa_loss(ad.constant(logits), np.array([[0.0, 1.0]])).value[0] == 0.0
    assert vqa_head.vqa_loss(ad.constant(logits), np.array([[1.0, 0.0]])).value[0] > 0


def test_soft_accuracy_definition():
    answers = ["yes", "no", "2"]
    assert vqa_head.soft_accuracy(0, {"yes": 1.0}, answers) == 1.0
    assert vqa_head.soft_accuracy(2, {"yes": 1.0}, answers) == 0.0
    assert vqa_head.soft_accuracy(2, {"2": 0.3}, answers) == 0.3


@given(nps.arrays(np.int64, 6, elements=st.integers(-50, 50), unique=True), st.integers(-5, 5), st.floats(0.1, 10))
def test_argmax_invariant_under_increasing_maps(row, shift, scale):
    logits = row.astype(np.float64)[None]
    a = logits.argmax(axis=1)
    np.testing.assert_array_equal((logits + shift).argmax(axis=1), a)
    np.testing.assert_array_equal((logits * scale).argmax(axis=1), a)


def test_caa_off_never_evaluates_adjustment():
    cfg = gradcheck.tiny_config()
    cfg.use_caa = False
    batch = gradcheck.tiny_batch(0)
    params = gradcheck.tiny_params(cfg, batch)
    base = model.forward(params, batch, cfg, with_captioner=False).logits.value
    # poisoning the adjustment weights must not change anything
    poisoned = {k: (np.full_like(v, np.nan) if k.startswith("caa.") else v) for k, v in params.items()}
    out = model.forward(poisoned, batch, cfg, with_captioner=False).logits.value
    assert out.tobytes() == base.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)))
def test_adjustment_permutation_equivariant(perm):
    cfg = gradcheck.tiny_config()
    params = gradcheck.tiny_params(cfg, gradcheck.tiny_batch(0))
    P = {k: ad.Tensor(v) for k, v in params.items()}
    rng = np.random.default_rng(5)
    Vq = rng.normal(size=(1, 4, 5))
    c = ad.constant(rng.normal(size=(1, 5)))
    mask = np.ones((1, 4), bool)
    base = vqa_head.adjust_attention(P, ad.constant(Vq), mask, c).alpha.value
    perm = list(perm)
    out = vqa_head.adjust_attention(P, ad.constant(Vq[:, perm]), mask, c).alpha.value
    np.testing.assert_allclose(out, base[:, perm], rtol=0, atol=1e-15)


def test_uniform_prediction_baseline_is_one_over_n():
    cfg = data.DataConfig(n_train=600, n_val=400)
    recs = data.generate_dataset(cfg, 0)
    train, val = data.split(recs, "train"), data.split(recs, "val")
    _, answers = data.build_vocabs(train)
    # a model that cannot distinguish candidates picks uniformly at random
    expected = np.mean([sum(r.answer_scores.get(a, 0.0) for a in answers) / len(answers) for r in val])
    rng = np.random.default_rng(0)
    sims = [np.mean([vqa_head.soft_accuracy(rng.integers(len(answers)), r.answer_scores, answers) for r in val])
            for _ in range(200)]
    assert abs(np.mean(sims) - expected) < 0.01
    assert abs(expected - 1 / len(answers)) < 0.01
