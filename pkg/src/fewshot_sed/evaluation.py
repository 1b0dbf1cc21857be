"""Metric protocol: per-episode AP and accuracy, cross-episode per-class F1
with top-5 filtering, window-to-proposal conversion, EBR breakdown, and
confusion matrices.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models import ClassifiedProposal, ProposalModel, WindowModel, load_checkpoint
from .training import EpisodeLoader, window_targets

REPORT_SCHEMA_VERSION = 1
MATCH_IOU = 0.5
TOP_K_PER_QUERY = 5


def interval_iou(a_lo, a_hi, b_lo, b_hi) -> float:
    inter = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    union = (a_hi - a_lo) + (b_hi - b_lo) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class GtEvent:
    class_slot: int
    class_id: str
    start_s: float
    end_s: float
    ebr_db: float


@dataclass
class Region:
    """A scored, classified temporal region (proposal or grouped windows)."""

    start_s: float
    end_s: float
    class_slot: int  # 0..n-1, or n for no-event
    class_id: str | None
    confidence: float


@dataclass
class EpisodeEval:
    """Per-episode metric inputs after inference."""

    episode_id: str
    n_way: int
    ap: float | None
    accuracy: float
    confusion: np.ndarray  # (n+1, n+1), rows = GT slot, cols = predicted
    regions: list[list[Region]]  # per query, top-5 by event probability
    gts: list[list[GtEvent]]
    ap_stage1: float | None = None


def average_precision(scores, positives) -> float | None:
    """Information-retrieval AP over descending score; None when there are
    no positive units (excluded from the episode mean)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if positives.sum() == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / positives.sum())


def unit_accuracy(predicted, gt) -> float:
    predicted = np.asarray(predicted)
    gt = np.asarray(gt)
    if len(predicted) == 0:
        return 0.0
    return float((predicted == gt).mean())


def confusion_matrix(predicted, gt, n_way: int) -> np.ndarray:
    """(n+1, n+1) counts, rows = ground truth, columns = prediction; slot n
    is no-event."""
    m = np.zeros((n_way + 1, n_way + 1), dtype=np.int64)
    for p, g in zip(predicted, gt):
        m[int(g), int(p)] += 1
    return m


def windows_to_proposals(
    window_starts: list[int],
    posteriors: np.ndarray,
    frame_s: float = 0.010,
    window_frames: int = 128,
) -> list[Region]:
    """Group consecutive windows sharing an argmax class into one region.

    Region span runs from the first window's start to the last window's end;
    confidence is the mean posterior of the run's class; no-event runs emit
    nothing. Timestamps are seconds."""
    posteriors = np.asarray(posteriors)
    n_way = posteriors.shape[1] - 1
    argmax = posteriors.argmax(axis=1)
    regions: list[Region] = []
    i = 0
    while i < len(window_starts):
        j = i
        while j + 1 < len(window_starts) and argmax[j + 1] == argmax[i]:
            j += 1
        cls = int(argmax[i])
        if cls != n_way:
            regions.append(
                Region(
                    start_s=window_starts[i] * frame_s,
                    end_s=(window_starts[j] + window_frames) * frame_s,
                    class_slot=cls,
                    class_id=None,
                    confidence=float(posteriors[i : j + 1, cls].mean()),
                )
            )
        i = j + 1
    return regions


def _proposal_gt_slot(start_s, end_s, gts: list[GtEvent], n_way: int) -> int:
    """Ground-truth label of a proposal: best-overlap GT class at IoU >= 0.5,
    else no-event (slot n)."""
    best, slot = 0.0, n_way
    for g in gts:
        v = interval_iou(start_s, end_s, g.start_s, g.end_s)
        if v > best:
            best, slot = v, g.class_slot
    return slot if best >= MATCH_IOU else n_way


def _top_regions(regions: list[Region], classes: list[str]) -> list[Region]:
    kept = sorted(regions, key=lambda r: -r.confidence)[:TOP_K_PER_QUERY]
    return [
        dataclasses.replace(r, class_id=classes[r.class_slot] if r.class_slot < len(classes) else None)
        for r in kept
    ]


def evaluate_proposal_episode(
    detections: list[list[ClassifiedProposal]],
    gts: list[list[GtEvent]],
    classes: list[str],
    episode_id: str = "",
) -> EpisodeEval:
    """Metrics over one episode of a proposal model's detections."""
    n_way = len(classes)
    scores, labels, s1_scores, s1_pos = [], [], [], []
    predicted, gt_slots = [], []
    regions: list[list[Region]] = []
    for dets, q_gts in zip(detections, gts):
        q_regions = []
        for d in dets:
            positive = _proposal_gt_slot(d.start_s, d.end_s, q_gts, n_way) != n_way
            scores.append(d.event_score)
            labels.append(positive)
            s1_scores.append(d.stage1_score)
            s1_pos.append(_proposal_gt_slot(d.stage1_start_s, d.stage1_end_s, q_gts, n_way) != n_way)
            predicted.append(d.predicted_class)
            gt_slots.append(_proposal_gt_slot(d.start_s, d.end_s, q_gts, n_way))
            q_regions.append(
                Region(d.start_s, d.end_s, d.predicted_class, None, d.event_score)
            )
        # top-5 keeps the highest event-probability proposals regardless of
        # predicted class; no-event-predicted ones are neither TP nor FP
        regions.append(_top_regions(q_regions, classes))
    return EpisodeEval(
        episode_id=episode_id,
        n_way=n_way,
        ap=average_precision(scores, labels),
        ap_stage1=average_precision(s1_scores, s1_pos),
        accuracy=unit_accuracy(predicted, gt_slots),
        confusion=confusion_matrix(predicted, gt_slots, n_way),
        regions=regions,
        gts=gts,
    )


def evaluate_window_episode(
    predictions: list[tuple[list[int], np.ndarray]],
    annotations: list[list[tuple[int, float, float, float]]],
    gts: list[list[GtEvent]],
    classes: list[str],
    episode_id: str = "",
    window_frames: int = 128,
) -> EpisodeEval:
    """Metrics over one episode of a window model's posteriors. AP and
    accuracy are window-level; F1 regions come from grouped windows."""
    n_way = len(classes)
    scores, labels, predicted, gt_slots = [], [], [], []
    regions: list[list[Region]] = []
    for (starts, posteriors), anns in zip(predictions, annotations):
        posteriors = np.asarray(posteriors)
        w_labels = window_targets(anns, starts, window_frames)
        w_gt = np.where(w_labels < 0, n_way, w_labels)
        scores.extend(1.0 - posteriors[:, n_way])
        labels.extend(w_labels >= 0)
        predicted.extend(posteriors.argmax(axis=1))
        gt_slots.extend(w_gt)
        regions.append(
            _top_regions(windows_to_proposals(starts, posteriors, window_frames=window_frames), classes)
        )
    return EpisodeEval(
        episode_id=episode_id,
        n_way=n_way,
        ap=average_precision(scores, labels),
        accuracy=unit_accuracy(predicted, gt_slots),
        confusion=confusion_matrix(predicted, gt_slots, n_way),
        regions=regions,
        gts=gts,
    )


@dataclass
class MatchRecord:
    """Outcome of greedy proposal-GT matching, kept for EBR breakdown."""

    tp_pairs: list[tuple[str, float]] = field(default_factory=list)  # (class_id, gt ebr)
    fn_gts: list[tuple[str, float]] = field(default_factory=list)
    fp_classes: list[str] = field(default_factory=list)
    gt_classes: set = field(default_factory=set)


def match_regions(episodes: list[EpisodeEval]) -> MatchRecord:
    """Greedy per-query matching of kept regions to ground truth: descending
    confidence, TP iff same class and IoU >= 0.5 with an unmatched GT."""
    rec = MatchRecord()
    for ep in episodes:
        for regions, gts in zip(ep.regions, ep.gts):
            for g in gts:
                rec.gt_classes.add(g.class_id)
            matched = [False] * len(gts)
            for r in sorted(regions, key=lambda r: -r.confidence):
                if r.class_id is None:  # predicted no-event: neither TP nor FP
                    continue
                hit = None
                for gi, g in enumerate(gts):
                    if matched[gi] or g.class_id != r.class_id:
                        continue
                    if interval_iou(r.start_s, r.end_s, g.start_s, g.end_s) >= MATCH_IOU:
                        hit = gi
                        break
                if hit is not None:
                    matched[hit] = True
                    rec.tp_pairs.append((r.class_id, gts[hit].ebr_db))
                else:
                    rec.fp_classes.append(r.class_id)
            for gi, g in enumerate(gts):
                if not matched[gi]:
                    rec.fn_gts.append((g.class_id, g.ebr_db))
    return rec


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_per_class(episodes: list[EpisodeEval]) -> tuple[float, dict[str, float], MatchRecord]:
    """Macro F1 over classes with at least one GT occurrence, computed over
    all episodes jointly (not per episode)."""
    rec = match_regions(episodes)
    table = {}
    for c in sorted(rec.gt_classes):
        tp = sum(1 for cid, _ in rec.tp_pairs if cid == c)
        fn = sum(1 for cid, _ in rec.fn_gts if cid == c)
        fp = sum(1 for cid in rec.fp_classes if cid == c)
        table[c] = _f1_from_counts(tp, fp, fn)
    macro = float(np.mean(list(table.values()))) if table else 0.0
    return macro, table, rec


def ebr_breakdown(rec: MatchRecord, buckets=( -12, -6, 0, 6, 12 )) -> dict[float, float | None]:
    """Macro F1 restricted to ground truth (and matches) at each EBR; FPs
    are unassignable to a bucket and count against every bucket's classes."""
    out: dict[float, float | None] = {}
    for db in buckets:
        classes = sorted(
            {c for c, e in rec.tp_pairs if e == db} | {c for c, e in rec.fn_gts if e == db}
        )
        if not classes:
            out[float(db)] = None
            continue
        f1s = []
        for c in classes:
            tp = sum(1 for cid, e in rec.tp_pairs if cid == c and e == db)
            fn = sum(1 for cid, e in rec.fn_gts if cid == c and e == db)
            fp = sum(1 for cid in rec.fp_classes if cid == c)
            f1s.append(_f1_from_counts(tp, fp, fn))
        out[float(db)] = float(np.mean(f1s))
    return out


@dataclass
class MetricsReport:
    variant: str
    split: str
    num_episodes: int
    n_way: int
    ap_mean: float
    ap_std: float
    ap_undefined_count: int
    acc_mean: float
    acc_std: float
    f1_macro: float
    f1_per_class: dict
    ebr_f1: dict
    confusion: list
    ap_stage1_mean: float | None = None
    ap_stage1_std: float | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as f:
            d = json.load(f)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError("unsupported report schema version")
        return cls(**d)


def aggregate_report(episodes: list[EpisodeEval], variant: str, split: str) -> MetricsReport:
    aps = [e.ap for e in episodes if e.ap is not None]
    s1 = [e.ap_stage1 for e in episodes if e.ap_stage1 is not None]
    accs = [e.accuracy for e in episodes]
    macro, table, rec = f1_per_class(episodes)
    confusion = sum((e.confusion for e in episodes[1:]), episodes[0].confusion.copy()) if episodes else np.zeros((1, 1))
    return MetricsReport(
        variant=variant,
        split=split,
        num_episodes=len(episodes),
        n_way=episodes[0].n_way if episodes else 0,
        ap_mean=float(np.mean(aps)) if aps else 0.0,
        ap_std=float(np.std(aps)) if aps else 0.0,
        ap_undefined_count=sum(1 for e in episodes if e.ap is None),
        acc_mean=float(np.mean(accs)) if accs else 0.0,
        acc_std=float(np.std(accs)) if accs else 0.0,
        f1_macro=macro,
        f1_per_class=table,
        ebr_f1={str(k): v for k, v in ebr_breakdown(rec).items()},
        confusion=confusion.tolist(),
        ap_stage1_mean=float(np.mean(s1)) if s1 else None,
        ap_stage1_std=float(np.std(s1)) if s1 else None,
    )


def gts_from_annotations(annotations, classes) -> list[list[GtEvent]]:
    return [
        [GtEvent(slot, classes[slot], start, end, ebr) for slot, start, end, ebr in anns]
        for anns in annotations
    ]


def evaluate(
    checkpoint_dir,
    manifest: dict,
    data_root,
    split: str = "test",
    max_episodes: int | None = None,
    dump_detections_path=None,
) -> MetricsReport:
    """Run inference over a split and aggregate the full metric suite."""
    model, cfg, _ = load_checkpoint(checkpoint_dir)
    loader = EpisodeLoader(manifest, data_root)
    count = loader.num_episodes(split)
    if max_episodes is not None:
        count = min(count, max_episodes)
    episodes: list[EpisodeEval] = []
    dump = open(dump_detections_path, "w") if dump_detections_path else None
    try:
        for i in range(count):
            ep = loader.load(split, i)
            gts = gts_from_annotations(ep.annotations, ep.classes)
            if isinstance(model, WindowModel):
                preds = [(s, d.cpu().numpy()) for s, d in model.predict(ep)]
                ev = evaluate_window_episode(
                    preds, ep.annotations, gts, ep.classes, ep.episode_id, model.window_frames
                )
            else:
                dets = model.detect(ep)
                ev = evaluate_proposal_episode(dets, gts, ep.classes, ep.episode_id)
                if dump:
                    for qi, q_dets in enumerate(dets):
                        for d in q_dets:
                            dump.write(
                                json.dumps(
                                    {
                                        "episode_id": ep.episode_id,
                                        "query": qi,
                                        "start_s": d.start_s,
                                        "end_s": d.end_s,
                                        "event_score": d.event_score,
                                        "predicted_class": ep.classes[d.predicted_class]
                                        if d.predicted_class < len(ep.classes)
                                        else "no-event",
                                    }
                                )
                                + "\n"
                            )
            episodes.append(ev)
    finally:
        if dump:
            dump.close()
    return aggregate_report(episodes, cfg.variant, split)


def evaluate_model_on_split(model, loader: EpisodeLoader, split: str, indices) -> MetricsReport:
    """Aggregate metrics for an in-memory model over specific episodes."""
    episodes = []
    for i in indices:
        ep = loader.load(split, int(i))
        gts = gts_from_annotations(ep.annotations, ep.classes)
        if isinstance(model, WindowModel):
            preds = [(s, d.cpu().numpy()) for s, d in model.predict(ep)]
            episodes.append(
                evaluate_window_episode(preds, ep.annotations, gts, ep.classes, ep.episode_id, model.window_frames)
            )
        else:
            episodes.append(evaluate_proposal_episode(model.detect(ep), gts, ep.classes, ep.episode_id))
    variant = model.cfg.variant
    return aggregate_report(episodes, variant, split)
