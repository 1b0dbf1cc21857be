"""Losses (focal, smooth L1, the three-term proposal combination), window
labeling, and the episodic optimization loop with validation-driven early
stopping.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import proposals as prop
from .features import read_wav, log_mel
from .models import (
    EpisodeTensors,
    ModelConfig,
    ProposalModel,
    WindowModel,
    save_checkpoint,
)

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    weight_rpn: float = 1.0
    weight_refine: float = 1.0
    weight_cls: float = 1.0
    rpn_reg_weight: float = 1.0
    proto_iou_threshold: float = 0.5

    def __post_init__(self):
        if self.focal_gamma < 0 or not 0 < self.focal_alpha <= 1 or self.smooth_l1_beta <= 0:
            raise ValueError("invalid focal/smooth-l1 parameters")
        if min(self.weight_rpn, self.weight_refine, self.weight_cls) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    eval_every: int = 1250
    val_sample: int = 750
    patience: int = 10
    max_steps: int | None = None
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.eval_every <= 0 or self.val_sample <= 0:
            raise ValueError("invalid optimizer configuration")


def default_learning_rate(variant: str) -> float:
    return 1e-4 if variant.startswith("window") else 1e-7


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25):
    """Binary focal loss on probabilities; mean over contributing items."""
    p = torch.as_tensor(p).clamp(PROB_EPS, 1 - PROB_EPS)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p**gamma * torch.log(1 - p)
    per_item = torch.where(y > 0.5, pos, neg)
    return per_item.mean()


def focal_multiclass(dist: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25):
    """Binary focal form applied to the target class's predicted probability."""
    p_t = dist.gather(1, targets.view(-1, 1)).squeeze(1).clamp(PROB_EPS, 1 - PROB_EPS)
    return (-alpha * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def smooth_l1(pred, target, beta: float = 1.0):
    """Huber-style loss: 0.5 d^2/beta below beta, d - 0.5 beta above.

    Sums over the trailing (lo, co) axis and averages over rows."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    d = (pred - target).abs()
    per = torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    if per.dim() > 1:
        per = per.sum(dim=-1)
    return per.mean()


def detection_stage_loss(
    logits: torch.Tensor,
    offsets: torch.Tensor,
    assignment: prop.TargetAssignment,
    cfg: LossConfig,
    reg_weight: float = 1.0,
):
    """Focal classification over positive/negative items (ignore masked out)
    plus smooth L1 regression over positives."""
    labels = torch.as_tensor(assignment.labels)
    contributing = labels != prop.IGNORE
    cls_loss = logits.new_zeros(())
    if contributing.any():
        p = torch.sigmoid(logits[contributing])
        y = (labels[contributing] == prop.POSITIVE).to(p.dtype)
        cls_loss = focal_loss(p, y, cfg.focal_gamma, cfg.focal_alpha)
    reg_loss = logits.new_zeros(())
    positive = labels == prop.POSITIVE
    if positive.any():
        targets = torch.as_tensor(assignment.reg_targets[positive.numpy()], dtype=offsets.dtype)
        reg_loss = smooth_l1(offsets[positive], targets, cfg.smooth_l1_beta)
    return cls_loss + reg_weight * reg_loss, cls_loss, reg_loss


def _intervals_to_anchors(intervals: np.ndarray) -> np.ndarray:
    c = (intervals[:, 0] + intervals[:, 1]) / 2
    l = intervals[:, 1] - intervals[:, 0]
    return np.stack([c, l], axis=1)


def episode_loss_proposal(model: ProposalModel, episode: EpisodeTensors, cfg: LossConfig):
    """Three-term loss for one episode of a proposal model.

    Stage-I targets come from anchors vs ground truth; stage-II targets from
    re-running assignment on the stage-I proposals (before their stage-II
    refinement); prototypical targets label a proposal with its matched
    ground-truth class at IoU >= proto_iou_threshold, else no-event.
    """
    protos = model.prototypes(episode)
    n_classes = len(episode.classes)
    rpn_cfg = model.cfg.rpn
    zero = protos.new_zeros(())
    comps = {"rpn_cls": zero, "rpn_reg": zero, "refine_cls": zero, "refine_reg": zero, "proto": zero}
    num_q = len(episode.query_specs)
    fm_b, logits_b, offsets_b = model.forward_queries(episode.query_specs)
    for qi in range(num_q):
        gt = episode.gt_feature_intervals(qi)
        fm, logits, offsets = fm_b[qi], logits_b[qi], offsets_b[qi]
        anchors = prop.generate_anchors(fm.shape[0], rpn_cfg)
        assign1 = prop.assign_targets(anchors, gt, rpn_cfg)
        _, c1, r1 = detection_stage_loss(logits, offsets, assign1, cfg, cfg.rpn_reg_weight)
        comps["rpn_cls"] = comps["rpn_cls"] + c1 / num_q
        comps["rpn_reg"] = comps["rpn_reg"] + r1 / num_q

        proposal_list = model.propose(fm, logits, offsets)
        if not proposal_list:
            continue
        intervals = np.array([[p.start, p.end] for p in proposal_list])
        assign2 = prop.assign_targets(_intervals_to_anchors(intervals), gt, rpn_cfg)
        embs, logits2, offsets2, _ = model.stage2(fm, proposal_list)
        _, c2, r2 = detection_stage_loss(logits2, offsets2, assign2, cfg, cfg.rpn_reg_weight)
        comps["refine_cls"] = comps["refine_cls"] + c2 / num_q
        comps["refine_reg"] = comps["refine_reg"] + r2 / num_q

        # prototypical targets: matched GT class at IoU >= threshold, else no-event
        targets = np.full(len(proposal_list), n_classes, dtype=np.int64)
        if len(gt):
            ious = prop.iou_matrix(intervals, gt)
            best = ious.argmax(axis=1)
            hit = ious.max(axis=1) >= cfg.proto_iou_threshold
            gt_classes = np.array([a[0] for a in episode.annotations[qi]])
            targets[hit] = gt_classes[best[hit]]
        dist = model.proto(embs, protos)
        ploss = focal_multiclass(dist, torch.as_tensor(targets), cfg.focal_gamma, cfg.focal_alpha)
        comps["proto"] = comps["proto"] + ploss / num_q

    total = (
        cfg.weight_rpn * (comps["rpn_cls"] + cfg.rpn_reg_weight * comps["rpn_reg"])
        + cfg.weight_refine * (comps["refine_cls"] + cfg.rpn_reg_weight * comps["refine_reg"])
        + cfg.weight_cls * comps["proto"]
    )
    return total, {k: float(v.detach()) for k, v in comps.items()}


def window_targets(
    annotations: list[tuple[int, float, float, float]],
    window_starts: list[int],
    window_frames: int = 128,
    frame_s: float = 0.010,
) -> np.ndarray:
    """Per-window class labels: a window takes class c when an event of class
    c covers at least half its duration (ties go to the earlier event);
    -1 means no event."""
    labels = np.full(len(window_starts), -1, dtype=np.int64)
    win_dur = window_frames * frame_s
    for w, start in enumerate(window_starts):
        w_lo, w_hi = start * frame_s, start * frame_s + win_dur
        candidates = []  # (coverage, event start, class)
        for class_slot, ev_lo, ev_hi, _ in annotations:
            cov = max(0.0, min(w_hi, ev_hi) - max(w_lo, ev_lo))
            if cov >= 0.5 * win_dur - 1e-12:
                candidates.append((cov, ev_lo, class_slot))
        if candidates:
            # highest coverage wins; ties go to the earlier-starting event
            labels[w] = max(candidates, key=lambda c: (c[0], -c[1]))[2]
    return labels


def episode_loss_window(model: WindowModel, episode: EpisodeTensors, cfg: LossConfig):
    """Per-window multiclass focal loss for one episode."""
    protos = model.prototypes(episode)
    n_classes = len(episode.classes)
    total = protos.new_zeros(())
    num_q = len(episode.query_specs)
    for qi, spec in enumerate(episode.query_specs):
        starts, dist = model.forward_query(spec, protos)
        labels = window_targets(episode.annotations[qi], starts, model.window_frames)
        targets = torch.as_tensor(np.where(labels < 0, n_classes, labels))
        total = total + focal_multiclass(dist, targets, cfg.focal_gamma, cfg.focal_alpha) / num_q
    return total, {"window": float(total.detach())}


def episode_loss(model, episode: EpisodeTensors, cfg: LossConfig):
    if isinstance(model, WindowModel):
        return episode_loss_window(model, episode, cfg)
    return episode_loss_proposal(model, episode, cfg)


# ---------------------------------------------------------------------------
# Manifest-backed episode loading


class EpisodeLoader:
    """Loads manifest episodes as tensors, caching spectrograms per path."""

    def __init__(self, manifest: dict, root, dtype=torch.float32, cache_size: int = 4096):
        self.manifest = manifest
        self.root = Path(root)
        self.dtype = dtype
        self._cache: dict[str, torch.Tensor] = {}
        self._cache_size = cache_size

    def _spec(self, rel_path: str) -> torch.Tensor:
        if rel_path not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.clear()
            clip = read_wav(self.root / rel_path)
            self._cache[rel_path] = torch.as_tensor(log_mel(clip).values, dtype=self.dtype)
        return self._cache[rel_path]

    def num_episodes(self, split: str) -> int:
        return len(self.manifest["splits"][split]["episodes"])

    def load(self, split: str, index: int) -> EpisodeTensors:
        entry = self.manifest["splits"][split]["episodes"][index]
        classes = list(entry["classes"])
        slot = {c: i for i, c in enumerate(classes)}
        support = {
            c: [self._spec(p) for p in paths] for c, paths in entry["support"].items()
        }
        queries, annotations = [], []
        for q in entry["queries"]:
            queries.append(self._spec(q["path"]))
            annotations.append(
                [(slot[a["class_id"]], a["start_s"], a["end_s"], a["ebr_db"]) for a in q["annotations"]]
            )
        return EpisodeTensors(entry["episode_id"], classes, support, queries, annotations)


# ---------------------------------------------------------------------------
# Fit loop


def fit(
    model,
    manifest: dict,
    data_root,
    optim_cfg: OptimConfig,
    loss_cfg: LossConfig,
    seed: int,
    out_dir,
    model_cfg: ModelConfig | None = None,
    deterministic: bool = True,
) -> Path:
    """Episodic training with early stopping; one optimizer step per episode.

    Every eval_every episodes the mean loss over a random sample of
    validation episodes is computed; the best checkpoint is kept and training
    stops after `patience` non-improving evaluations (or max_steps).
    Returns the best checkpoint directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model_cfg is None:
        model_cfg = model.cfg
    if deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 65537])
    loader = EpisodeLoader(manifest, data_root)
    n_train = loader.num_episodes("train")
    n_val = loader.num_episodes("val")
    if n_train == 0:
        raise ValueError("manifest has no training episodes")

    opt = torch.optim.Adam(model.parameters(), lr=optim_cfg.learning_rate)
    best_val = float("inf")
    rounds_since_best = 0
    best_dir = out / "best"
    log_path = out / "train_log.jsonl"

    def validation_loss() -> float:
        if n_val == 0:
            return float("nan")
        sample = rng.choice(n_val, size=min(optim_cfg.val_sample, n_val), replace=False)
        model.eval()
        with torch.no_grad():
            losses = [float(episode_loss(model, loader.load("val", int(i)), loss_cfg)[0]) for i in sample]
        return float(np.mean(losses))

    step = 0
    stop = False
    with open(log_path, "w") as log_file:
        while not stop:
            episode = loader.load("train", step % n_train)
            model.train()
            total, comps = episode_loss(model, episode, loss_cfg)
            opt.zero_grad()
            total.backward()
            if optim_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), optim_cfg.grad_clip)
            opt.step()
            step += 1

            record = {"step": step, "train_loss": float(total.detach()), **comps}
            if step % optim_cfg.eval_every == 0:
                val = validation_loss()
                record["val_loss"] = val
                if np.isnan(val) or val < best_val:
                    best_val = min(best_val, val if not np.isnan(val) else best_val)
                    rounds_since_best = 0
                    save_checkpoint(model, model_cfg, best_dir, step=step, extra={"val_loss": val})
                else:
                    rounds_since_best += 1
                if rounds_since_best >= optim_cfg.patience:
                    stop = True
            log_file.write(json.dumps(record) + "\n")
            if optim_cfg.max_steps is not None and step >= optim_cfg.max_steps:
                stop = True

    if not best_dir.exists():
        save_checkpoint(model, model_cfg, best_dir, step=step)
    return best_dir
