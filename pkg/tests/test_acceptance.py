"""End-to-end acceptance checks.

Each test carries an ``acceptance(number, title)`` marker; the terminal
summary prints one PASS/FAIL line per number.  The training runs are shared
through session fixtures so the default-scale phase-1 run is done once per
(seed, arm).
"""

import json
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from relcap import attn_eval, autodiff as ad, captioner, cli, data, gradcheck, model, selection, trainer
from relcap.config import RunConfig

SEEDS = (0, 1, 2)


def default_config(seed: int, ablate: bool = False) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.model.ablate_captions = ablate
    return cfg


class Runs:
    """Lazily trained phase-1 models keyed by (seed, arm)."""

    def __init__(self):
        self.cache = {}

    def dataset(self, seed):
        key = ("data", seed)
        if key not in self.cache:
            cfg = default_config(seed)
            recs = data.generate_dataset(cfg.data, seed)
            train, val = data.split(recs, "train"), data.split(recs, "val")
            vocab, answers = data.build_vocabs(train, cfg.data.min_word_count, cfg.data.min_answer_count)
            self.cache[key] = (train, val, vocab, answers)
        return self.cache[key]

    def phase1(self, seed, ablate=False):
        key = ("run", seed, ablate)
        if key not in self.cache:
            cfg = default_config(seed, ablate)
            train, val, vocab, answers = self.dataset(seed)
            t = time.perf_counter()
            tr = trainer.train_phase1(cfg, vocab, answers, train, val)
            self.cache[key] = (tr, time.perf_counter() - t)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


# --------------------------------------------------------------------- 1


@pytest.mark.acceptance(1, "joint-loss gradient matches finite differences")
def test_joint_loss_gradient(record_property):
    cfg = gradcheck.tiny_config()
    batch = gradcheck.tiny_batch(0)
    assert batch.features.shape[1:] == (3, 4) and batch.captions.shape[1] == 2 and batch.scores.shape[1] == 3
    t = time.perf_counter()
    results = gradcheck.joint_loss_checks(cfg, seed=0)
    elapsed = time.perf_counter() - t
    worst = max(results, key=lambda r: r.rel_error)
    n_params = len(model.init_params(cfg, 9, 3, 4, 0))
    record_property("detail", f"{len(results)} checks, worst {worst.name} {worst.rel_error:.1e}, {elapsed:.1f}s")
    assert len(results) == n_params + 3
    assert all(r.rel_error < 1e-4 for r in results)
    assert elapsed < 60


# --------------------------------------------------------------------- 2


def _one(batch, b):
    return data.Batch(*(getattr(batch, f)[b: b + 1] for f in
                        ("features", "mask", "question", "question_len", "captions", "caption_len", "scores",
                         "relevant")))


def _oracle(params, one, cfg):
    """Rebuild the graph for every caption and backpropagate that caption's loss alone."""
    tape = ad.Tape()
    tr = model.forward(params, one, cfg, tape, with_captioner=False)
    g_ans = tape.backward(ad.sum(tr.s_pred), wrt=[tr.Vq])[tr.Vq][0]
    valid = tr.mask[0]
    out = []
    for i in range(one.captions.shape[1]):
        tape = ad.Tape()
        tr = model.forward(params, one, cfg, tape, with_captioner=False)
        nll = captioner.caption_nll(tr.P, tr.Vq, tr.mask, one.captions[:, i], one.caption_len[:, i])
        g_cap = -tape.backward(ad.sum(nll), wrt=[tr.Vq])[tr.Vq][0]
        out.append(float((g_ans[valid] * g_cap[valid]).sum()))
    return np.array(out)


@pytest.mark.acceptance(2, "selection inner products equal the per-caption oracle")
def test_selection_oracle(record_property):
    cfg = gradcheck.tiny_config()
    t = time.perf_counter()
    worst, agree, n = 0.0, 0, 0
    for seed in range(25):
        batch = gradcheck.tiny_batch(seed, B=4, C=3)
        params = gradcheck.tiny_params(cfg, batch, seed=seed)
        tape = ad.Tape()
        G = selection.grad_inner_products(model.forward(params, batch, cfg, tape))
        for b in range(4):
            ref = _oracle(params, _one(batch, b), cfg)
            worst = max(worst, float(np.abs(G[b] - ref).max()))
            feas = ref > 0
            expect = int(np.argmax(np.where(feas, ref, -np.inf))) if feas.any() else None
            agree += selection.select(G[b], 0.0) == expect
            n += 1
    elapsed = time.perf_counter() - t
    record_property("detail", f"{n} examples, max |diff| {worst:.1e}, argmax agreement {agree}/{n}, {elapsed:.1f}s")
    assert n == 100
    assert worst < 1e-6
    assert agree == n
    assert elapsed < 60


# --------------------------------------------------------------------- 3


@pytest.mark.acceptance(3, "selector recovers the planted caption on > 60% of feasible examples")
def test_planted_recovery(runs, record_property):
    tr, seconds = runs.phase1(0)
    t = time.perf_counter()
    ev = tr.evaluate(tr.val_enc, tr.val_records)
    seconds += time.perf_counter() - t
    record_property("detail", f"recovery {ev.planted_recovery:.3f} (chance 0.20), feasible {ev.feasible_rate:.3f}, "
                              f"{seconds / 60:.1f} min")
    assert ev.planted_recovery > 0.60
    assert seconds < 15 * 60


# --------------------------------------------------------------------- 4


@pytest.mark.acceptance(4, "gold captions beat the caption-ablated baseline by 5 points (3 seeds)")
def test_captions_help(runs, record_property):
    with_c, without, seconds = [], [], 0.0
    for seed in SEEDS:
        for ablate, acc in ((False, with_c), (True, without)):
            tr, s = runs.phase1(seed, ablate)
            acc.append(tr.metrics[-1]["val_soft_acc"])
            seconds += s
    gap = np.mean(with_c) - np.mean(without)
    record_property("detail", f"captions {np.mean(with_c):.3f} {np.round(with_c, 3).tolist()} vs ablated "
                              f"{np.mean(without):.3f} {np.round(without, 3).tolist()}, gap {100 * gap:+.1f} pts, "
                              f"{seconds / 60:.1f} min")
    assert gap >= 0.05
    assert seconds < 45 * 60


# --------------------------------------------------------------------- 5


def _lp_emd(p, q, cost):
    p, q = p.ravel(), q.ravel()
    m, n = len(p), len(q)
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n: (i + 1) * n] = 1
    for j in range(n):
        A[m + j, j::n] = 1
    res = linprog(cost.ravel(), A_eq=A, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    return res.fun


@pytest.mark.acceptance(5, "caption-adjusted attention lowers EMD to attention truth")
def test_caa_lowers_emd(runs, record_property):
    tr, _ = runs.phase1(0)
    _, val, vocab, answers = runs.dataset(0)
    with_caa = attn_eval.evaluate_attention(tr.params, val, vocab, answers, tr.cfg.model, caa=True)
    without = attn_eval.evaluate_attention(tr.params, val, vocab, answers, tr.cfg.model, caa=False)

    # metric properties on grids produced by both pipelines
    rng = np.random.default_rng(0)
    trace = model.forward(tr.params, data.collate([data.encode_example(r, vocab, answers) for r in val[:30]]),
                          tr.cfg.model, with_captioner=False)
    grids = []
    for caa in (True, False):
        w = attn_eval.object_attention(trace.alpha_qv.value, trace.alpha_cv.value if caa else None)
        grids += [attn_eval.rasterize(r.boxes, w[i, : len(r.boxes)]) for i, r in enumerate(val[:30])]
    worst = 0.0
    for _ in range(20):
        a, b, c = (grids[i] for i in rng.choice(len(grids), 3, replace=False))
        ab, ba = attn_eval.emd(a, b), attn_eval.emd(b, a)
        worst = max(worst, abs(ab - ba), attn_eval.emd(a, a), ab - attn_eval.emd(a, c) - attn_eval.emd(c, b))
    cost3 = attn_eval.ground_distance(3)
    oracle_gap = 0.0
    for _ in range(50):
        p = rng.uniform(size=9) * (rng.uniform(size=9) < 0.6) + 1e-3 * (rng.uniform(size=9) < 0.2)
        q = rng.uniform(size=9) * (rng.uniform(size=9) < 0.6)
        p[0] += 1e-3
        q[-1] += 1e-3
        p, q = p / p.sum(), q / q.sum()
        oracle_gap = max(oracle_gap, abs(attn_eval.emd(p.reshape(3, 3), q.reshape(3, 3), cost3) - _lp_emd(p, q, cost3)))
    record_property("detail", f"mean EMD with CAA {with_caa.mean:.3f} vs without {without.mean:.3f} "
                              f"({len(with_caa.rows)} records); metric violations {worst:.1e}; 3x3 oracle gap {oracle_gap:.1e}")
    assert worst < 1e-9
    assert oracle_gap < 1e-6
    assert with_caa.mean < without.mean


# --------------------------------------------------------------------- 6


@pytest.mark.acceptance(6, "phase 2 runs at 0.25x the phase-1 rate on 5 generated captions per pair")
def test_schedule_fidelity(runs, tmp_path, record_property):
    tr, _ = runs.phase1(0)
    ds = tmp_path / "d"
    assert cli.main(["gen-data", "--seed", "0", "--out", str(ds)]) == 0
    p1 = tmp_path / "p1"
    p1.mkdir()
    trainer.save_checkpoint(p1 / "phase1.ckpt", tr.checkpoint())
    assert cli.main(["generate-captions", "--data", str(ds), "--ckpt", str(p1 / "phase1.ckpt"), "--out", str(p1)]) == 0
    p2 = tmp_path / "p2"
    assert cli.main(["finetune", "--data", str(ds), "--ckpt", str(p1 / "phase1.ckpt"), "--out", str(p2),
                     "--epochs", "1"]) == 0
    man = json.loads((p2 / "manifest_finetune.json").read_text())
    ck = trainer.load_checkpoint(p2 / "phase2.ckpt")
    counts = []
    for split, n in (("train", 2000), ("val", 400)):
        rows = [json.loads(x) for x in (p1 / f"captions_{split}.jsonl").read_text().splitlines()]
        assert len(rows) == n
        counts += [len(r["captions"]) for r in rows]
    record_property("detail", f"phase-1 lr {man['phase1_lr']!r}, phase-2 lr {man['lr']!r}, "
                              f"captions per pair {sorted(set(counts))}")
    assert man["lr"] == 0.25 * man["phase1_lr"] == 0.25 * tr.opt.lr
    assert ck.optimizer.lr == man["lr"]
    assert set(counts) == {5}


# --------------------------------------------------------------------- 7


@pytest.mark.acceptance(7, "500 steps on 8 examples cut the joint loss by 90%")
def test_overfit(record_property):
    cfg = RunConfig()
    cfg.train.batch_size = 8
    recs = data.generate_dataset(cfg.data, 0)
    train = data.split(recs, "train")[:8]
    vocab, answers = data.build_vocabs(train, 1)
    t = time.perf_counter()
    tr = trainer.Trainer(cfg, vocab, answers, train, train)
    losses = tr.train_steps(500)
    elapsed = time.perf_counter() - t
    drop = 1 - losses[-1] / losses[0]
    record_property("detail", f"loss {losses[0]:.3f} -> {losses[-1]:.2e} ({100 * drop:.2f}% drop), {elapsed:.0f}s")
    assert drop >= 0.90
    assert elapsed < 300


# --------------------------------------------------------------------- 8


@pytest.mark.acceptance(8, "seeded runs and checkpoint resumption are bit-identical")
def test_reproducibility(tmp_path, record_property):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"data": {"n_train": 200, "n_val": 40}, "train": {"epochs": 2}}))
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d")]) == 0
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "d"),
                         "--out", str(tmp_path / name)]) == 0
    same_csv = (tmp_path / "a" / "metrics_phase1.csv").read_bytes() == (tmp_path / "b" / "metrics_phase1.csv").read_bytes()

    cfg = RunConfig()
    recs = data.generate_dataset(cfg.data, 0)
    train, val = data.split(recs, "train")[:320], data.split(recs, "val")[:40]
    vocab, answers = data.build_vocabs(data.split(recs, "train"), cfg.data.min_word_count)
    straight = trainer.Trainer(cfg, vocab, answers, train, val)
    straight.train_steps(12)
    ref = straight.train_steps(8)
    first = trainer.Trainer(cfg, vocab, answers, train, val)
    first.train_steps(12)
    trainer.save_checkpoint(tmp_path / "mid.ckpt", first.checkpoint())
    resumed = trainer.Trainer(cfg, vocab, answers, train, val)
    resumed.restore(trainer.load_checkpoint(tmp_path / "mid.ckpt", resumed.vocab_hash))
    after = resumed.train_steps(8)
    same_losses = np.array(ref).tobytes() == np.array(after).tobytes()
    same_params = all(straight.params[k].tobytes() == resumed.params[k].tobytes() for k in straight.params)
    record_property("detail", f"metrics CSV identical: {same_csv}; resumed losses identical: {same_losses}; "
                              f"parameters identical: {same_params}")
    assert same_csv and same_losses and same_params


# --------------------------------------------------------------------- 9


@pytest.mark.acceptance(9, "anti-aligned captions leave the loss at the VQA loss exactly")
def test_infeasible_rig(record_property):
    cfg = gradcheck.tiny_config()
    batch = gradcheck.tiny_batch(4, B=3, C=3)
    params = gradcheck.tiny_params(cfg, batch, seed=4)
    P = model.constants(params)
    q, att = model.encode(P, batch, cfg)
    vq = att.Vq.value

    # the answer gradient field at V^q, then a caption loss built to be its exact negation
    tape = ad.Tape()
    V = tape.variable(vq)
    tr = model.head(P, batch, cfg, q, V, tape=tape, with_captioner=False)
    G = tape.backward(ad.sum(tr.s_pred), wrt=[V])[V]

    tape = ad.Tape()
    V = tape.variable(vq)
    tr = model.head(P, batch, cfg, q, V, tape=tape, with_captioner=False)
    B, C = 3, 3
    rows = np.repeat(np.arange(B), C)
    tr.Vq_dec = ad.take(V, rows, axis=0)
    lin = ad.sum(ad.reshape(tr.Vq_dec * np.repeat(G, C, axis=0), (B * C, -1)), axis=1)
    tr.nll = ad.reshape(lin + 5.0, (B, C))
    g = selection.grad_inner_products(tr)
    sel = selection.select_batch(g, 0.0)
    L = selection.joint_loss(tr.vqa_loss, tr.nll, sel)
    L_vqa = ad.scale(ad.sum(tr.vqa_loss), 1.0 / B)
    record_property("detail", f"max g {g.max():.3e}; feasible {int((sel >= 0).sum())}/{B}; "
                              f"L - L_vqa = {L.item() - L_vqa.item()!r}")
    assert np.all(g < 0)
    assert np.all(sel == -1)
    assert L.item() == L_vqa.item()
    single = selection.joint_loss(tr.vqa_loss, tr.nll[0], selection.select(g[0], 0.0))
    assert single is tr.vqa_loss
