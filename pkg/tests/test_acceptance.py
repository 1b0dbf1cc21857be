"""End-to-end acceptance gate.

Each test covers one numbered criterion and prints a single PASS/FAIL line
(visible with `pytest -s` or in captured output on failure). Criteria 9 and 10
share one scaled-down training run and together take a few minutes of CPU
time; everything else is fast.
"""
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from fewshot_sed import synthesis as syn
from fewshot_sed.backbones import BackboneConfig
from fewshot_sed.evaluation import (
    GtEvent,
    average_precision,
    evaluate_model_on_split,
    evaluate_proposal_episode,
    f1_per_class,
    match_regions,
    Region,
    EpisodeEval,
    aggregate_report,
)
from fewshot_sed.features import SAMPLE_RATE, frame_count
from fewshot_sed.heads import ProtoHead, ProtoHeadConfig, compute_prototypes
from fewshot_sed.models import (
    ClassifiedProposal,
    ModelConfig,
    build_model,
)
from fewshot_sed.proposals import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    RpnConfig,
    anchors_to_intervals,
    assign_targets,
    generate_anchors,
    iou,
    nms,
    refine,
)
from fewshot_sed.synthesis import AudioClip, SourceClip, synthesize_query
from fewshot_sed.training import (
    EpisodeLoader,
    LossConfig,
    OptimConfig,
    episode_loss,
    fit,
    focal_loss,
    smooth_l1,
)


def report(number: int, description: str, ok: bool) -> bool:
    print(f"criterion {number} [{'PASS' if ok else 'FAIL'}]: {description}")
    return ok


# --- criterion 1: frame math -------------------------------------------------


def test_criterion_1_frame_math():
    frames = frame_count(30 * SAMPLE_RATE)
    ok = frames == 2998
    assert report(1, f"30 s @ 16 kHz -> {frames} frames (want 2998)", ok)


# --- criterion 2: geometry oracles -------------------------------------------


def _oracle_iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _oracle_nms(intervals, scores, threshold):
    order = sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], intervals[i][0], intervals[i][1] - intervals[i][0]),
    )
    kept = []
    for i in order:
        if all(_oracle_iou(intervals[i], intervals[j]) < threshold for j in kept):
            kept.append(i)
    return kept


def _oracle_assign(anchors, gts, cfg):
    labels, matched = [], []
    for c, l in anchors:
        a = (c - l / 2, c + l / 2)
        ious = [_oracle_iou(a, g) for g in gts]
        best = max(ious) if ious else 0.0
        if best >= cfg.iou_positive:
            labels.append(POSITIVE)
            matched.append(int(np.argmax(ious)))
        elif best <= cfg.iou_negative:
            labels.append(NEGATIVE)
            matched.append(-1)
        else:
            labels.append(IGNORE)
            matched.append(-1)
    if cfg.force_best_anchor:
        for gi, g in enumerate(gts):
            ious = [_oracle_iou((c - l / 2, c + l / 2), g) for c, l in anchors]
            if max(ious) > 0:
                ai = int(np.argmax(ious))
                labels[ai] = POSITIVE
                matched[ai] = gi
    return labels, matched


def _random_intervals(rng, n, span=100.0):
    starts = rng.uniform(0, span, n)
    lengths = rng.uniform(0.5, span / 3, n)
    return np.stack([starts, starts + lengths], axis=1)


def test_criterion_2_geometry_oracles():
    rng = np.random.default_rng(2024)
    cfg = RpnConfig()
    iou_ok = nms_ok = assign_ok = True
    for _ in range(1000):
        a = _random_intervals(rng, 1)[0]
        b = _random_intervals(rng, 1)[0]
        if not math.isclose(iou(a, b), _oracle_iou(a, b), rel_tol=0, abs_tol=0):
            iou_ok = False
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        intervals = _random_intervals(rng, n, span=40)
        scores = rng.uniform(0, 1, n)
        if nms(intervals, scores, 0.1) != _oracle_nms(intervals.tolist(), scores.tolist(), 0.1):
            nms_ok = False
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        anchors = np.stack([rng.uniform(0, 100, n), rng.choice([4.0, 8.0, 16.0, 32.0], n)], axis=1)
        gts = _random_intervals(rng, int(rng.integers(1, 4)), span=90)
        got = assign_targets(anchors, gts, cfg)
        labels, matched = _oracle_assign(anchors.tolist(), gts.tolist(), cfg)
        if not (np.array_equal(got.labels, labels) and np.array_equal(got.matched_gt, matched)):
            assign_ok = False
    ok = iou_ok and nms_ok and assign_ok
    assert report(2, f"geometry oracles exact over 1000 instances (iou={iou_ok} nms={nms_ok} assign={assign_ok})", ok)


# --- criterion 3: refinement algebra -----------------------------------------


def test_criterion_3_refinement_round_trip():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        c = rng.uniform(0, 300)
        l = rng.choice([4.0, 8.0, 16.0, 32.0, 64.0])
        gt = _random_intervals(rng, 1, span=290)[0]
        lo = (gt[1] - gt[0]) - l
        co = (gt[0] + gt[1]) / 2 - c
        out = refine((c - l / 2, c + l / 2), lo, co)
        worst = max(worst, abs(out[0] - gt[0]), abs(out[1] - gt[1]))
    ok = worst < 1e-6
    assert report(3, f"refine round-trip worst error {worst:.2e} (< 1e-6)", ok)


# --- criterion 4: anchor inventory -------------------------------------------


def test_criterion_4_anchor_inventory():
    cfg = RpnConfig()
    anchors = generate_anchors(375, cfg)
    lengths = sorted(int(v) for v in set(anchors[:, 1]))
    centers_even = np.all(anchors[:, 0] % 2 == 0)
    ok = len(anchors) == 940 and lengths == [4, 8, 16, 32, 64] and bool(centers_even)
    assert report(4, f"375 frames -> {len(anchors)} anchors, lengths {lengths}, stride-2 centers", ok)


# --- criterion 5: loss correctness -------------------------------------------


def test_criterion_5_losses():
    # focal at gamma=0, alpha=0.5 equals half cross-entropy
    ce_ok = True
    for p in [0.01, 0.2, 0.5, 0.8, 0.99]:
        for y in [0.0, 1.0]:
            got = float(
                focal_loss(
                    torch.tensor([p], dtype=torch.float64),
                    torch.tensor([y], dtype=torch.float64),
                    gamma=0.0,
                    alpha=0.5,
                )
            )
            ce = -math.log(p) if y == 1.0 else -math.log(1 - p)
            if abs(got - 0.5 * ce) > 1e-9:
                ce_ok = False
    # smooth L1 continuous at d = beta
    cont_ok = True
    for beta in [0.5, 1.0, 2.0]:
        lo = float(smooth_l1(torch.tensor([beta - 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64), beta))
        hi = float(smooth_l1(torch.tensor([beta + 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64), beta))
        if abs(lo - hi) > 1e-6:
            cont_ok = False
    # analytic gradients vs central differences, double precision
    grad_ok = True
    eps = 1e-7
    p = torch.tensor([0.3, 0.7], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    focal_loss(p, y).backward()
    for i in range(2):
        pp, pm = p.detach().clone(), p.detach().clone()
        pp[i] += eps
        pm[i] -= eps
        fd = (float(focal_loss(pp, y)) - float(focal_loss(pm, y))) / (2 * eps)
        if abs(fd - float(p.grad[i])) / max(abs(fd), 1e-12) > 1e-4:
            grad_ok = False
    x = torch.tensor([0.4, 3.0], dtype=torch.float64, requires_grad=True)
    smooth_l1(x, torch.zeros(2, dtype=torch.float64)).backward()
    for i in range(2):
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[i] += eps
        xm[i] -= eps
        fd = (
            float(smooth_l1(xp, torch.zeros(2, dtype=torch.float64)))
            - float(smooth_l1(xm, torch.zeros(2, dtype=torch.float64)))
        ) / (2 * eps)
        if abs(fd - float(x.grad[i])) / max(abs(fd), 1e-12) > 1e-4:
            grad_ok = False
    ok = ce_ok and cont_ok and grad_ok
    assert report(5, f"losses: half-CE={ce_ok} continuity={cont_ok} gradients={grad_ok}", ok)


# --- criterion 6: prototypical head ------------------------------------------


def test_criterion_6_prototypes():
    torch.manual_seed(6)
    embs = [torch.randn(256, dtype=torch.float64) for _ in range(5)]
    protos = compute_prototypes(embs)
    mean_err = float((protos - torch.stack(embs).mean(dim=0)).abs().max())
    head = ProtoHead(ProtoHeadConfig())
    p = torch.randn(4, 8, dtype=torch.float64)
    q = torch.randn(50, 8, dtype=torch.float64)
    with torch.no_grad():
        dist = head(q, p)
        z = head.logits(q, p)
    sum_err = float((dist.sum(dim=1) - 1.0).abs().max())
    shift_err = float((torch.softmax(z + 5.0, dim=-1) - torch.softmax(z, dim=-1)).abs().max())
    ok = mean_err < 1e-7 and sum_err < 1e-6 and shift_err < 1e-6
    assert report(
        6,
        f"prototypes: mean err {mean_err:.1e} (<1e-7), sum err {sum_err:.1e}, shift err {shift_err:.1e} (<1e-6)",
        ok,
    )


# --- criterion 7: synthesis fidelity ------------------------------------------


def _tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _tone(duration_s, freq=440.0, amp=0.3):
    t = np.arange(int(duration_s * SAMPLE_RATE)) / SAMPLE_RATE
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), SAMPLE_RATE)


def test_criterion_7_synthesis_fidelity(tmp_path):
    overlap_ok = True
    ebr_worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng([7, seed])
        bg_rng = np.random.default_rng([8, seed])
        bg = AudioClip(
            0.05 * bg_rng.normal(size=30 * SAMPLE_RATE).clip(-3, 3) / 3, SAMPLE_RATE
        )
        events = [
            (SourceClip("a", _tone(2.0, 500)), -6.0),
            (SourceClip("b", _tone(1.5, 1200)), 6.0),
            (SourceClip("c", _tone(1.0, 2500)), 12.0),
        ]
        q = synthesize_query(bg, events, rng)
        spans = sorted((a.start_s, a.end_s) for a in q.annotations)
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            if e1 > s2:
                overlap_ok = False
        # recover the global rescale factor from background-only samples
        mix = q.audio.samples
        idx = [(int(a.start_s * SAMPLE_RATE), int(a.end_s * SAMPLE_RATE)) for a in q.annotations]
        outside = np.ones(len(mix), dtype=bool)
        for s, e in idx:
            outside[s:e] = False
        ratio = mix[outside] / bg.samples[outside]
        scale = np.median(ratio[np.isfinite(ratio)])
        pre = mix / scale
        for ann, (s, e) in zip(q.annotations, idx):
            event = pre[s:e] - bg.samples[s:e]
            measured = 20 * np.log10(
                np.sqrt(np.mean(event**2)) / np.sqrt(np.mean(bg.samples[s:e] ** 2))
            )
            ebr_worst = max(ebr_worst, abs(measured - ann.ebr_db))

    cfg = syn.SynthConfig(
        n_way=3,
        k_shot=2,
        queries_per_episode=2,
        episodes={"train": 2, "val": 1, "test": 1},
        class_split_sizes=(4, 3, 3),
        background_split_sizes=(2, 2, 2),
        ebr_choices_db=(12,),
    )
    corpora = syn.Corpora(
        events=syn.procedural_corpus(10, 4, 0), backgrounds=syn.procedural_backgrounds(6, 0)
    )
    hashes = []
    for name in ["a", "b"]:
        out = tmp_path / name
        syn.generate_dataset(cfg, corpora, 0, out)
        hashes.append(_tree_hash(out))
    regen_ok = hashes[0] == hashes[1]
    ok = overlap_ok and ebr_worst <= 0.1 and regen_ok
    assert report(
        7,
        f"synthesis: overlaps={overlap_ok}, EBR worst dev {ebr_worst:.3f} dB (<=0.1), byte-identical regen={regen_ok}",
        ok,
    )


# --- criterion 8: metric oracle -----------------------------------------------


def test_criterion_8_metric_oracle():
    gts = [
        [GtEvent(0, "a", 1.0, 3.0, 0.0)],
        [GtEvent(1, "b", 10.0, 14.0, 6.0)],
    ]
    dets = [
        [ClassifiedProposal(1.0, 3.0, 1.0, np.array([1.0, 0.0, 0.0]), 1.0, 1.0, 3.0)],
        [ClassifiedProposal(10.0, 14.0, 1.0, np.array([0.0, 1.0, 0.0]), 1.0, 10.0, 14.0)],
    ]
    ev = evaluate_proposal_episode(dets, gts, ["a", "b"])
    rep = aggregate_report([ev], "proto-rcrnn", "test")
    oracle_ok = rep.ap_mean == 1.0 and rep.f1_macro == 1.0

    ap = average_precision([0.9, 0.8, 0.7], [True, False, True])
    ap_ok = abs(ap - (1.0 + 2 / 3) / 2) < 1e-12

    # hand-traced greedy F1: duplicate on a matched GT is a FP, miss is a FN
    trace_gts = [[GtEvent(0, "a", 0.0, 2.0, 0.0), GtEvent(1, "b", 5.0, 7.0, 0.0)]]
    trace_regions = [
        [
            Region(0.1, 2.0, 0, "a", 0.9),
            Region(0.0, 1.9, 0, "a", 0.8),
            Region(10.0, 12.0, 1, "b", 0.7),
        ]
    ]
    episode = EpisodeEval("t", 2, None, 0.0, np.zeros((3, 3), dtype=np.int64), trace_regions, trace_gts)
    macro, table, _ = f1_per_class([episode])
    f1_ok = abs(table["a"] - 2 / 3) < 1e-12 and table["b"] == 0.0 and abs(macro - 1 / 3) < 1e-12
    ok = oracle_ok and ap_ok and f1_ok
    assert report(8, f"metric oracle: detector AP/F1=1 {oracle_ok}, AP trace {ap_ok}, F1 trace {f1_ok}", ok)


# --- criteria 9 & 10: overfit smoke test --------------------------------------

TRAIN_BUDGET_S = 28 * 60


@pytest.fixture(scope="module")
def overfit_dataset(tmp_path_factory):
    cfg = syn.SynthConfig(
        n_way=5,
        k_shot=5,
        queries_per_episode=4,
        episodes={"train": 100, "val": 0, "test": 0},
        class_split_sizes=(6, 3, 3),
        background_split_sizes=(8, 3, 3),
        ebr_choices_db=(12,),
    )
    corpora = syn.Corpora(
        events=syn.procedural_corpus(12, 10, 0), backgrounds=syn.procedural_backgrounds(14, 0)
    )
    root = tmp_path_factory.mktemp("overfit")
    manifest = syn.generate_dataset(cfg, corpora, 0, root)
    return manifest, root


def _train_budgeted(model, loader, loss_cfg, lr, budget_s, eval_every, met):
    """Train on the cyclic 100-episode schedule until the thresholds hold on
    the 20 held-in episodes or the budget expires; returns the last report."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    start = time.time()
    step = 0
    rep = None
    while time.time() - start < budget_s:
        ep = loader.load("train", step % 100)
        model.train()
        total, _ = episode_loss(model, ep, loss_cfg)
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
        opt.step()
        step += 1
        if step % eval_every == 0:
            rep = evaluate_model_on_split(model, loader, "train", range(20))
            if met(rep):
                break
    if rep is None:
        rep = evaluate_model_on_split(model, loader, "train", range(20))
    return rep, step, time.time() - start


@pytest.fixture(scope="module")
def proposal_overfit(overfit_dataset):
    manifest, root = overfit_dataset
    torch.manual_seed(9)
    loader = EpisodeLoader(manifest, root, cache_size=8192)
    model = build_model(
        ModelConfig(
            variant="proto-rcrnn",
            backbone=BackboneConfig(conv_channels=(16, 16, 32, 32, 64, 64, 64), hidden_size=64),
            rpn=RpnConfig(hidden_dim=256),
            second_stage_hidden=256,
        )
    )
    loss_cfg = LossConfig(rpn_reg_weight=0.25, weight_cls=2.0)
    return _train_budgeted(
        model,
        loader,
        loss_cfg,
        lr=1e-3,
        budget_s=TRAIN_BUDGET_S,
        eval_every=200,
        met=lambda r: r.ap_mean >= 0.92 and r.f1_macro >= 0.82,
    )


def test_criterion_9_overfit(overfit_dataset, proposal_overfit):
    rep, steps, elapsed = proposal_overfit
    prop_ok = rep.ap_mean >= 0.90 and rep.f1_macro >= 0.80
    print(
        f"criterion 9a [{'PASS' if prop_ok else 'FAIL'}]: proto-rcrnn AP {rep.ap_mean:.3f} (>=0.90), "
        f"macro F1 {rep.f1_macro:.3f} (>=0.80) after {steps} steps / {elapsed:.0f}s"
    )

    manifest, root = overfit_dataset
    torch.manual_seed(9)
    loader = EpisodeLoader(manifest, root, cache_size=8192)
    window = build_model(ModelConfig(variant="window-crnn"))
    wrep, wsteps, welapsed = _train_budgeted(
        window,
        loader,
        LossConfig(),
        lr=1e-4,
        budget_s=TRAIN_BUDGET_S,
        eval_every=100,
        met=lambda r: r.acc_mean >= 0.92,
    )
    win_ok = wrep.acc_mean >= 0.90
    print(
        f"criterion 9b [{'PASS' if win_ok else 'FAIL'}]: window-crnn accuracy {wrep.acc_mean:.3f} "
        f"(>=0.90) after {wsteps} steps / {welapsed:.0f}s"
    )
    assert prop_ok and win_ok


def test_criterion_10_stage_two_benefit(proposal_overfit):
    rep, _, _ = proposal_overfit
    ok = rep.ap_mean >= rep.ap_stage1_mean - 0.02
    assert report(
        10,
        f"stage-II AP {rep.ap_mean:.3f} >= stage-I AP {rep.ap_stage1_mean:.3f} - 0.02",
        ok,
    )


# --- criterion 11: determinism -------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    cfg = syn.SynthConfig(
        n_way=3,
        k_shot=2,
        queries_per_episode=2,
        episodes={"train": 2, "val": 1, "test": 1},
        class_split_sizes=(4, 3, 3),
        background_split_sizes=(2, 2, 2),
        ebr_choices_db=(12,),
    )
    corpora = syn.Corpora(
        events=syn.procedural_corpus(10, 4, 0), backgrounds=syn.procedural_backgrounds(6, 0)
    )
    manifest = syn.generate_dataset(cfg, corpora, 0, tmp_path / "data")
    blobs = []
    for name in ["r1", "r2"]:
        torch.manual_seed(11)
        model = build_model(ModelConfig(variant="window-crnn"))
        best = fit(
            model,
            manifest,
            tmp_path / "data",
            OptimConfig(learning_rate=1e-4, eval_every=100, val_sample=1, max_steps=3),
            LossConfig(),
            seed=11,
            out_dir=tmp_path / name,
            deterministic=True,
        )
        blobs.append((best / "weights.pt").read_bytes())
    ok = blobs[0] == blobs[1]
    assert report(11, f"two seeded single-threaded runs bit-identical: {ok}", ok)
