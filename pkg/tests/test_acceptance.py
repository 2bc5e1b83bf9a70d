"""End-to-end acceptance criteria.

Each test checks one criterion at its stated tolerance and prints a single
``criterion N: PASS|FAIL`` line (also collected in the terminal summary).
"""

import time
from fractions import Fraction

import numpy as np
import pytest
from conftest import kink_free_indices, report_criterion

from jointxfer import numerics as nx
from jointxfer.audio import Waveform, delta, extract_segments, frame_signal, segment
from jointxfer.checkpoint import load_checkpoint, save_checkpoint
from jointxfer.datasets import (Dataset, PairSampler, SynthSpec, synth_audio, synth_generate,
                                train_val_split)
from jointxfer.evaluation import evaluate, metrics_from_predictions
from jointxfer.gradcheck import run_suite
from jointxfer.losses import joint_loss
from jointxfer.network import DESK_ARCH, ArchConfig, build_model, forward_features, group_of
from jointxfer.training import StageSpec, dataset_loss, joint_grads, run_stage

pytestmark = pytest.mark.acceptance

SMALL = ArchConfig(input_size=16, conv_filters=(4, 8), fc_dims=(16, 8, 6))

# criterion 5 budget: joint stage length and learning rate
JOINT_ITERATIONS = 600
JOINT_LR = 1e-4
SEEDS = range(5)


@pytest.fixture(scope="module")
def visual():
    return synth_generate(SynthSpec(per_class=40, shift=0.5), seed=0)


@pytest.fixture(scope="module")
def pretrained_a(visual):
    a, _ = visual
    stage = StageSpec("pretrain", "pretrain", ["A"], lr=1e-4, iterations=2000, batch_size=2)
    params0 = build_model(stage.arch, stage.seed)
    t0 = time.time()
    ck = run_stage(stage, {"A": a})
    return params0, ck, time.time() - t0


# -- 1 -------------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = run_suite(seeds=20, step=1e-3)
    elapsed = time.time() - t0
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results) and worst < 1e-4 and elapsed < 60
    detail = ", ".join(f"{r.name}={r.max_error:.1e}" for r in results)
    report_criterion(1, ok, f"20 seeds in {elapsed:.1f}s; {detail}")
    assert ok


# -- 2 -------------------------------------------------------------------------------

def test_criterion_2_joint_assembly():
    lam = (1.0, 1.0, 0.01)
    worst, probed = 0.0, 0
    for seed in range(3):
        p = build_model(SMALL, seed)
        assert p.arch.feature_dim == 8
        rng = np.random.default_rng(seed)
        for n in ("class1.w", "class2.w"):
            p.tensors[n] = 0.5 * rng.normal(size=p.tensors[n].shape)
        a = Dataset("a", "visual", rng.random((6, 3, 16, 16)), [0, 1, 2, 1, 4, 5])
        b = Dataset("b", "visual", rng.random((6, 3, 16, 16)), [1, 1, 0, 3, 2, 5])
        batch = PairSampler(a, b, 2, np.random.default_rng(seed)).next()
        for name in p.names():
            if group_of(name) not in ("e", "class1", "class2"):
                continue

            def fn(v, name=name):
                q = p.copy()
                q.tensors[name] = v
                l1, l2, lc, g = joint_grads(q, batch, lam, "train", np.random.default_rng(7))
                return joint_loss(l1, l2, lc, *lam), g[name]
            size = p.tensors[name].size
            idx = rng.choice(size, min(size, 6), replace=False)
            idx = kink_free_indices(fn, p.tensors[name], 1e-5, idx)
            if idx:
                worst = max(worst, nx.finite_diff_check(fn, p.tensors[name], 1e-5, idx))
                probed += len(idx)
    ok = worst < 1e-4 and probed > 0
    report_criterion(2, ok, f"max rel err {worst:.2e} over {probed} coordinates "
                            "of theta_e, theta_class1, theta_class2")
    assert ok


# -- 3 -------------------------------------------------------------------------------

def test_criterion_3_group_norm_batch_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(512, 32, 8, 8)) * 3 + 1
    gamma, beta = rng.normal(size=32), rng.normal(size=32)
    full, _ = nx.group_norm(x, gamma, beta, 32)
    gn_err = 0.0
    for i in range(512):
        one, _ = nx.group_norm(x[i:i + 1], gamma, beta, 32)
        gn_err = max(gn_err, np.max(np.abs(one[0] - full[i])))
    for i in range(0, 512, 2):
        two, _ = nx.group_norm(x[i:i + 2], gamma, beta, 32)
        gn_err = max(gn_err, np.max(np.abs(two - full[i:i + 2])))

    p = build_model(DESK_ARCH, 1)
    xs = rng.random((8, 3, 64, 64))
    ref = forward_features(xs, p)
    feat_err = 0.0
    for i in range(8):
        alone = forward_features(xs[i:i + 1], p)[0]
        order = rng.permutation(8)
        mixed = forward_features(xs[order], p)[np.flatnonzero(order == i)[0]]
        feat_err = max(feat_err, np.max(np.abs(alone - ref[i])), np.max(np.abs(mixed - ref[i])))
    ok = gn_err < 1e-12 and feat_err < 1e-10
    report_criterion(3, ok, f"GN max abs diff {gn_err:.1e} (batch 1/2/512), "
                            f"features {feat_err:.1e}")
    assert ok


# -- 4 -------------------------------------------------------------------------------

def test_criterion_4_overfit(visual, pretrained_a):
    a, _ = visual
    params0, ck, elapsed = pretrained_a
    initial = dataset_loss(params0, a)
    acc = evaluate(ck.params, a).accuracy
    ok = abs(initial - np.log(6)) <= 0.2 and acc >= 0.99
    report_criterion(4, ok, f"initial loss {initial:.4f} (ln 6 = {np.log(6):.4f}), "
                            f"train accuracy {acc:.4f} after 2000 it ({elapsed:.0f}s)")
    assert ok


# -- 5 -------------------------------------------------------------------------------

def _cross_domain_distances(params, av, bv):
    fa, fb = forward_features(av.x, params), forward_features(bv.x, params)
    d = np.sqrt(((fa[:, None] - fb[None]) ** 2).sum(-1))
    same = av.labels[:, None] == bv.labels[None]
    return d[same].mean(), d[~same].mean()


def test_criterion_5_joint_vs_naive(visual):
    t0 = time.time()
    a, b = visual
    at, av = train_val_split(a, 5, 0, 0)
    bt, bv = train_val_split(b, 5, 0, 0)
    data = {"A": at, "B": bt}
    pre = run_stage(StageSpec("pretrain", "pretrain", ["A"], iterations=2000), data)
    acc = {0.01: [], 0.0: []}
    geometry = []
    for seed in SEEDS:
        for lam3 in (0.01, 0.0):
            st = StageSpec("joint", "joint", ["A", "B"], init="stage:pretrain",
                           iterations=JOINT_ITERATIONS, lr=JOINT_LR, lambda3=lam3, seed=seed)
            ck = run_stage(st, data, pre.params)
            acc[lam3].append((evaluate(ck.params, av, 1).accuracy
                              + evaluate(ck.params, bv, 2).accuracy) / 2)
            if lam3 == 0.01:
                geometry.append(_cross_domain_distances(ck.params, av, bv))
    elapsed = time.time() - t0
    joint, naive = np.mean(acc[0.01]), np.mean(acc[0.0])
    intra, inter = np.mean(geometry, axis=0)
    ok = joint >= naive and intra < inter and elapsed < 15 * 60
    report_criterion(5, ok, f"held-out acc joint {joint:.4f} vs naive {naive:.4f}; "
                            f"intra {intra:.3f} < inter {inter:.3f}; {elapsed:.0f}s")
    print("  per seed joint", np.round(acc[0.01], 4), "naive", np.round(acc[0.0], 4))
    assert ok


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_finetune_beats_fresh(pretrained_a):
    _, pre, _ = pretrained_a
    au = synth_audio(seed=1)
    tuned, fresh = [], []
    for seed in SEEDS:
        st = StageSpec("finetune", "finetune", [au.name], init="pretrain", iterations=1000,
                       seed=seed)
        tuned.append(dataset_loss(run_stage(st, {au.name: au}, pre.params).params, au))
        scratch = build_model(DESK_ARCH, 100 + seed)
        fresh.append(dataset_loss(run_stage(st, {au.name: au}, scratch).params, au))
    wins = sum(t < f for t, f in zip(tuned, fresh))
    # every pair, not only the mean
    ok = wins == len(tuned) and np.mean(tuned) < np.mean(fresh)
    report_criterion(6, ok, f"final train loss fine-tuned {np.mean(tuned):.4f} vs fresh "
                            f"{np.mean(fresh):.4f} (lower on {wins}/5 seeds)")
    assert ok


# -- 7 -------------------------------------------------------------------------------

def test_criterion_7_audio_exactness():
    sr = 16000
    t = np.arange(int(0.655 * sr)) / sr
    w = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), sr)
    frames = frame_signal(w).shape[0]
    n_segments = len(extract_segments(w, "u"))
    counts_ok = True
    for n in range(64, 2001):
        # brute-force oracle: every start s with a full 64-frame window, stepping 34
        expected = len([s for s in range(0, n, 34) if s + 64 <= n])
        got = len(segment(np.zeros((2, n, 3)), 64, 30))
        counts_ok &= got == expected == (n - 64) // 34 + 1
    ramp = np.tile(np.arange(40.0), (3, 1))
    d = delta(ramp)
    ramp_ok = bool(np.all(d[:, 2:-2] == 1.0))
    ok = frames == 64 and n_segments == 1 and counts_ok and ramp_ok
    report_criterion(7, ok, f"655 ms -> {frames} frames -> {n_segments} segment; count formula "
                            f"{'holds' if counts_ok else 'fails'} on T in [64, 2000]; "
                            f"ramp delta {'exact' if ramp_ok else 'inexact'}")
    assert ok


# -- 8 -------------------------------------------------------------------------------

def test_criterion_8_pair_sampler():
    rng = np.random.default_rng(0)
    a = Dataset("a", "visual", rng.random((30, 3, 4, 4)), np.arange(30) % 6)
    b = Dataset("b", "visual", rng.random((30, 3, 4, 4)), (np.arange(30) * 5) % 6)
    sizes, ok = {}, True
    for k in (2, 3, 8):
        sampler = PairSampler(a, b, k, np.random.default_rng(k))
        for _ in range(20):
            batch = sampler.next()
            pairs = batch.pairs
            sizes[k] = len(pairs)
            ok &= len(pairs) == len(batch) == k * k
            for n, (_, _, la, lb, y) in enumerate(pairs):
                i, j = divmod(n, k)
                ok &= (la, lb) == (batch.labels_a[i], batch.labels_b[j])
                ok &= y == int(la == lb) == batch.pair_labels[i, j]
    ok &= sizes[2] == 4
    report_criterion(8, ok, f"pair counts {sizes}; labels consistent")
    assert ok


# -- 9 -------------------------------------------------------------------------------

def test_criterion_9_persistence_and_determinism(tmp_path):
    a, _ = synth_generate(SynthSpec(per_class=4, size=16), seed=0)
    st = StageSpec("p", "pretrain", ["A"], iterations=40, lr=1e-2, arch=SMALL, seed=3)
    r1, r2 = run_stage(st, {"A": a}), run_stage(st, {"A": a})
    logs_ok = r1.log.to_csv().encode() == r2.log.to_csv().encode()

    save_checkpoint(r1.params, r1.meta, tmp_path / "a.ckpt")
    params, meta = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(params, meta, tmp_path / "b.ckpt")
    bytes_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    ft = StageSpec("f", "finetune", ["A"], init="p", freeze="fc_only", iterations=40, lr=1e-2,
                   arch=SMALL, seed=4)
    after = run_stage(ft, {"A": a}, r1.params).params
    conv = [n for n in r1.params.names() if n.startswith(("e.conv", "e.gn"))]
    changed = [n for n in r1.params.names("e") if n.startswith("e.fc")
               and not np.array_equal(after.tensors[n], r1.params.tensors[n])]
    freeze_ok = all(after.tensors[n].tobytes() == r1.params.tensors[n].tobytes() for n in conv)
    ok = logs_ok and bytes_ok and freeze_ok and bool(changed)
    report_criterion(9, ok, f"checkpoint re-save identical: {bytes_ok}; TrainLog identical: "
                            f"{logs_ok}; {len(conv)} conv/GN tensors unchanged under fc_only: "
                            f"{freeze_ok}")
    assert ok


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_metrics_identities(visual):
    rng = np.random.default_rng(0)
    cases = []
    for _ in range(300):
        n = int(rng.integers(1, 400))
        cases.append(metrics_from_predictions(rng.integers(0, 6, n), rng.integers(0, 6, n)))
    # skewed and single-class label sets
    cases.append(metrics_from_predictions([3] * 7, [3, 3, 1, 3, 0, 3, 3]))
    cases.append(metrics_from_predictions(rng.choice(6, 1000, p=[.7, .1, .1, .05, .03, .02]),
                                          rng.integers(0, 6, 1000)))
    a, b = visual
    for seed in range(3):
        p = build_model(DESK_ARCH, seed)
        for ds in (a, b):
            cases.append(evaluate(p, ds, 1 + seed % 2))
    cases.append(evaluate(build_model(DESK_ARCH, 0), synth_audio(seed=2)))
    bad = 0
    for m in cases:
        trace = Fraction(int(np.trace(m.confusion)), int(m.confusion.sum()))
        if not float(trace) == m.accuracy == m.war:
            bad += 1
    ok = bad == 0
    report_criterion(10, ok, f"trace/total == accuracy == WAR exactly on {len(cases)} "
                             f"evaluations ({bad} mismatches)")
    assert ok
