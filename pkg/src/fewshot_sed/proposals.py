"""Stage-I proposal machinery: anchors, interval geometry, target
assignment, the RPN heads, refinement algebra, and NMS filtering.

All geometry lives in feature-frame coordinates (one feature frame = 8
spectrogram frames = 0.08 s). Refinement uses absolute offsets:
L' = L + lo, C' = C + co.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

FEATURE_FRAME_SECONDS = 8 * 0.010


@dataclass
class RpnConfig:
    anchor_base: int = 4
    anchor_scales: tuple = (1, 2, 4, 8, 16)
    anchor_stride: int = 2
    hidden_dim: int = 512
    iou_positive: float = 0.7
    iou_negative: float = 0.3
    nms_threshold: float = 0.1
    top_s: int = 10
    force_best_anchor: bool = True

    @property
    def anchor_lengths(self) -> tuple:
        return tuple(self.anchor_base * s for s in self.anchor_scales)


@dataclass
class Proposal:
    start: float  # feature frames
    end: float
    event_score: float
    source_anchor: int = -1
    lo: float = 0.0
    co: float = 0.0

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start, self.end)

    def to_seconds(self) -> tuple[float, float]:
        return (self.start * FEATURE_FRAME_SECONDS, self.end * FEATURE_FRAME_SECONDS)


def generate_anchors(feature_len: int, cfg: RpnConfig) -> np.ndarray:
    """(A, 2) array of (center, length), center-major ordering.

    Centers sit at 0, stride, 2*stride, ... < feature_len; each center hosts
    one anchor per scale. Anchors may overhang the boundaries.
    """
    centers = np.arange(0, feature_len, cfg.anchor_stride, dtype=np.float64)
    lengths = np.asarray(cfg.anchor_lengths, dtype=np.float64)
    cc = np.repeat(centers, len(lengths))
    ll = np.tile(lengths, len(centers))
    return np.stack([cc, ll], axis=1)


def anchors_to_intervals(anchors: np.ndarray) -> np.ndarray:
    """(A, 2) (center, length) -> (A, 2) (start, end)."""
    c, l = anchors[:, 0], anchors[:, 1]
    return np.stack([c - l / 2, c + l / 2], axis=1)


def iou(a, b) -> float:
    """1-D interval intersection-over-union."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU between interval sets a (N, 2) and b (M, 2)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


POSITIVE, IGNORE, NEGATIVE = 1, 0, -1


@dataclass
class TargetAssignment:
    labels: np.ndarray  # (A,) in {POSITIVE, IGNORE, NEGATIVE}
    reg_targets: np.ndarray  # (A, 2) (lo*, co*), defined where positive
    matched_gt: np.ndarray  # (A,) GT index, -1 where not positive


def assign_targets(anchors: np.ndarray, gt: np.ndarray, cfg: RpnConfig) -> TargetAssignment:
    """Label anchors against ground-truth intervals (feature frames).

    Positive at max-IoU >= iou_positive (matched to the argmax GT), negative
    at <= iou_negative, ignore in between. Each GT's best-overlapping anchor
    is additionally forced positive when enabled. Regression targets are
    absolute offsets lo* = L_gt - L, co* = C_gt - C.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    num = len(anchors)
    labels = np.full(num, NEGATIVE, dtype=np.int64)
    reg = np.zeros((num, 2), dtype=np.float64)
    matched = np.full(num, -1, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(gt) == 0:
        return TargetAssignment(labels, reg, matched)

    ious = iou_matrix(anchors_to_intervals(anchors), gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[best_iou >= cfg.iou_positive] = POSITIVE
    labels[(best_iou > cfg.iou_negative) & (best_iou < cfg.iou_positive)] = IGNORE
    if cfg.force_best_anchor:
        for g in range(len(gt)):
            if ious[:, g].max() > 0:
                a = int(ious[:, g].argmax())
                labels[a] = POSITIVE
                best_gt[a] = g

    pos = labels == POSITIVE
    matched[pos] = best_gt[pos]
    gt_c = (gt[:, 0] + gt[:, 1]) / 2
    gt_l = gt[:, 1] - gt[:, 0]
    reg[pos, 0] = gt_l[best_gt[pos]] - anchors[pos, 1]
    reg[pos, 1] = gt_c[best_gt[pos]] - anchors[pos, 0]
    return TargetAssignment(labels, reg, matched)


def refine(interval, lo: float, co: float):
    """Apply absolute offsets: L' = L + lo, C' = C + co.

    Returns the refined (start, end), or None when the refined length is
    non-positive (the proposal is invalid and removed by filtering).
    """
    start, end = interval
    length = (end - start) + lo
    center = (start + end) / 2 + co
    if length <= 0:
        return None
    return (center - length / 2, center + length / 2)


def refine_batch(intervals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Vectorized refine; invalid rows come back with end <= start."""
    length = intervals[:, 1] - intervals[:, 0] + offsets[:, 0]
    center = (intervals[:, 0] + intervals[:, 1]) / 2 + offsets[:, 1]
    return np.stack([center - length / 2, center + length / 2], axis=1)


def nms(intervals: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    """Greedy NMS by descending score; ties broken by earlier start, then
    shorter length. Returns kept indices in keep order."""
    order = sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], intervals[i, 0], intervals[i, 1] - intervals[i, 0]),
    )
    kept: list[int] = []
    for i in order:
        if all(iou(intervals[i], intervals[j]) < threshold for j in kept):
            kept.append(i)
    return kept


def filter_proposals(
    intervals: np.ndarray,
    scores: np.ndarray,
    feature_len: int,
    cfg: RpnConfig,
    source_anchor: np.ndarray | None = None,
) -> list[Proposal]:
    """Drop sub-frame proposals, clamp to the feature map, NMS, keep top_s."""
    intervals = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    keep = (intervals[:, 1] - intervals[:, 0]) >= 1.0
    idx = np.nonzero(keep)[0]
    clamped = np.clip(intervals[idx], 0.0, float(feature_len))
    # clamping can empty an interval that straddled a boundary
    nonempty = (clamped[:, 1] - clamped[:, 0]) > 0
    idx, clamped = idx[nonempty], clamped[nonempty]
    if len(idx) == 0:
        return []
    kept = nms(clamped, scores[idx], cfg.nms_threshold)[: cfg.top_s]
    out = []
    for k in kept:
        i = int(idx[k])
        out.append(
            Proposal(
                start=float(clamped[k, 0]),
                end=float(clamped[k, 1]),
                event_score=float(scores[i]),
                source_anchor=int(source_anchor[i]) if source_anchor is not None else i,
            )
        )
    return out


class RpnHead(nn.Module):
    """Sliding-window projection plus classification and regression heads.

    A width-3 1-D convolution maps each feature position to hidden_dim; the
    heads emit, per position, one event logit and one (lo, co) pair for each
    anchor scale. Outputs are gathered at the anchor centers (every
    anchor_stride-th position) in the generate_anchors ordering.
    """

    def __init__(self, in_dim: int, cfg: RpnConfig):
        super().__init__()
        self.cfg = cfg
        self.num_scales = len(cfg.anchor_scales)
        self.proj = nn.Conv1d(in_dim, cfg.hidden_dim, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.cls = nn.Conv1d(cfg.hidden_dim, self.num_scales, kernel_size=1)
        self.reg = nn.Conv1d(cfg.hidden_dim, 2 * self.num_scales, kernel_size=1)
        # almost every anchor is background, so start the event logits at a
        # low prior instead of 0.5 to keep early gradients from being swamped
        nn.init.constant_(self.cls.bias, -2.0)
        # raw regression outputs are expressed per unit of anchor length so
        # every scale trains at a comparable magnitude; the emitted offsets
        # remain absolute (lo, co) in feature frames
        self.register_buffer(
            "_anchor_lengths", torch.tensor(cfg.anchor_lengths, dtype=torch.float32)
        )

    def forward(self, fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """fm: (T_f, D) or (B, T_f, D) -> logits (.., A), offsets (.., A, 2)
        for A = S * ceil(T_f / stride), ordered center-major."""
        squeeze = fm.dim() == 2
        if squeeze:
            fm = fm.unsqueeze(0)
        b, t, _ = fm.shape
        x = fm.transpose(1, 2)  # (B, D, T)
        h = self.act(self.proj(x))
        centers = torch.arange(0, t, self.cfg.anchor_stride, device=fm.device)
        logits = self.cls(h)[:, :, centers]  # (B, S, C)
        offsets = self.reg(h)[:, :, centers]  # (B, 2S, C)
        logits = logits.transpose(1, 2).reshape(b, -1)  # center-major
        offsets = offsets.reshape(b, self.num_scales, 2, -1).permute(0, 3, 1, 2)
        offsets = offsets * self._anchor_lengths.view(1, 1, -1, 1)
        offsets = offsets.reshape(b, -1, 2)
        return (logits[0], offsets[0]) if squeeze else (logits, offsets)
