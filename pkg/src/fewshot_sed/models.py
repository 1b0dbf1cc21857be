"""The four detector variants assembled from the encoder and head modules,
plus episode tensorization and checkpoint I/O.

Variants: "window-crnn", "window-perceiver", "proto-rcrnn" (RoI max-pool),
"proto-rcrnn-perceiver" (RoI Perceiver).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import proposals as prop
from .backbones import (
    BackboneConfig,
    CRNNBackbone,
    PerceiverConfig,
    WindowEncoderConfig,
    WindowEncoderCRNN,
    WindowEncoderPerceiver,
    fit_to_window,
    window_slices,
)
from .features import log_mel
from .heads import ProtoHead, ProtoHeadConfig, RoiPerceiver, SecondStageHead, compute_prototypes, roi_pool
from .proposals import FEATURE_FRAME_SECONDS, RpnConfig

VARIANTS = ("window-crnn", "window-perceiver", "proto-rcrnn", "proto-rcrnn-perceiver")
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    variant: str = "proto-rcrnn"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    window: WindowEncoderConfig = field(default_factory=WindowEncoderConfig)
    roi_perceiver: PerceiverConfig = field(default_factory=PerceiverConfig)
    proto: ProtoHeadConfig = field(default_factory=ProtoHeadConfig)
    second_stage_hidden: int = 512

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        """Build from a possibly partial nested dict; omitted keys keep their
        defaults (so hand-written YAML configs need not spell everything out)."""
        defaults = cls(variant=d.get("variant", "proto-rcrnn")).to_dict()
        backbone = {**defaults["backbone"], **d.get("backbone", {})}
        rpn = {**defaults["rpn"], **d.get("rpn", {})}
        window = {**defaults["window"], **d.get("window", {})}
        perceiver = window["perceiver"]
        if isinstance(perceiver, dict):
            perceiver = PerceiverConfig(**{**defaults["window"]["perceiver"], **perceiver})
        roi = d.get("roi_perceiver", {})
        return cls(
            variant=defaults["variant"],
            backbone=BackboneConfig(
                **{
                    **backbone,
                    "conv_channels": tuple(backbone["conv_channels"]),
                    "time_pool_layers": tuple(backbone["time_pool_layers"]),
                }
            ),
            rpn=RpnConfig(**{**rpn, "anchor_scales": tuple(rpn["anchor_scales"])}),
            window=WindowEncoderConfig(
                **{
                    **window,
                    "cnn_channels": tuple(window["cnn_channels"]),
                    "perceiver": perceiver,
                }
            ),
            roi_perceiver=PerceiverConfig(**{**defaults["roi_perceiver"], **roi}),
            proto=ProtoHeadConfig(**{**defaults["proto"], **d.get("proto", {})}),
            second_stage_hidden=d.get("second_stage_hidden", defaults["second_stage_hidden"]),
        )


@dataclass
class EpisodeTensors:
    """One episode turned into model inputs: spectrogram tensors plus
    annotations in both seconds and feature frames."""

    episode_id: str
    classes: list[str]
    support_specs: dict[str, list[torch.Tensor]]
    query_specs: list[torch.Tensor]
    # per query: list of (class_slot, start_s, end_s, ebr_db)
    annotations: list[list[tuple[int, float, float, float]]]

    def gt_feature_intervals(self, query_index: int) -> np.ndarray:
        anns = self.annotations[query_index]
        if not anns:
            return np.zeros((0, 2))
        return np.array(
            [[a[1] / FEATURE_FRAME_SECONDS, a[2] / FEATURE_FRAME_SECONDS] for a in anns]
        )


def episode_tensors_from_clips(episode, dtype=torch.float32) -> EpisodeTensors:
    """Tensorize an in-memory synthesis.Episode."""
    classes = list(episode.classes)
    slot = {c: i for i, c in enumerate(classes)}
    support = {
        c: [torch.as_tensor(log_mel(clip).values, dtype=dtype) for clip in clips]
        for c, clips in episode.support.items()
    }
    queries, annotations = [], []
    for q in episode.queries:
        queries.append(torch.as_tensor(log_mel(q.audio).values, dtype=dtype))
        annotations.append([(slot[a.class_id], a.start_s, a.end_s, a.ebr_db) for a in q.annotations])
    return EpisodeTensors(episode.episode_id, classes, support, queries, annotations)


@dataclass
class ClassifiedProposal:
    """Final detection: an interval in seconds with event score and a class
    distribution over the episode's n classes plus no-event (last slot)."""

    start_s: float
    end_s: float
    event_score: float
    class_distribution: np.ndarray
    stage1_score: float = 0.0
    stage1_start_s: float = 0.0
    stage1_end_s: float = 0.0

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_distribution))


class ProposalModel(nn.Module):
    """Proto-RCRNN: CRNN backbone, RPN, region encoding (max-pool or
    Perceiver), second refinement stage, and prototypical classification."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant not in ("proto-rcrnn", "proto-rcrnn-perceiver"):
            raise ValueError("ProposalModel requires a proto-rcrnn variant")
        self.cfg = cfg
        self.backbone = CRNNBackbone(cfg.backbone)
        self.rpn = prop.RpnHead(self.backbone.out_dim, cfg.rpn)
        if cfg.variant == "proto-rcrnn-perceiver":
            self.roi = RoiPerceiver(self.backbone.out_dim, cfg.roi_perceiver)
            emb_dim = self.roi.out_dim
        else:
            self.roi = None
            emb_dim = self.backbone.out_dim
        self.emb_dim = emb_dim
        self.second = SecondStageHead(emb_dim, cfg.second_stage_hidden)
        self.proto = ProtoHead(cfg.proto)

    def encode_region(self, fm: torch.Tensor, interval: tuple[float, float]) -> torch.Tensor:
        if self.roi is None:
            return roi_pool(fm, interval)
        return self.roi(fm, interval)

    def embed_support(self, spec: torch.Tensor) -> torch.Tensor:
        """Whole-clip embedding through the shared region head."""
        fm = self.backbone(spec)
        return self.encode_region(fm, (0.0, float(fm.shape[0])))

    def prototypes(self, episode: EpisodeTensors) -> torch.Tensor:
        protos = []
        for class_id in episode.classes:
            embs = [self.embed_support(s) for s in episode.support_specs[class_id]]
            protos.append(compute_prototypes(embs))
        return torch.stack(protos)

    def forward_query(self, spec: torch.Tensor):
        """-> (feature map (T_f, D), rpn logits (A,), rpn offsets (A, 2))."""
        fm = self.backbone(spec)
        logits, offsets = self.rpn(fm)
        return fm, logits, offsets

    def forward_queries(self, specs: list[torch.Tensor]):
        """Batched query forward; all query spectrograms share one length."""
        fm = self.backbone(torch.stack(specs))
        logits, offsets = self.rpn(fm)
        return fm, logits, offsets

    def propose(self, fm, logits, offsets) -> list[prop.Proposal]:
        """Stage-I proposals: refine anchors by predicted offsets, then
        filter (drop short, clamp, NMS, top_s). Scores are pre-refinement
        sigmoid logits; intervals are post-refinement."""
        feature_len = fm.shape[0]
        anchors = prop.generate_anchors(feature_len, self.cfg.rpn)
        intervals = prop.anchors_to_intervals(anchors)
        refined = prop.refine_batch(intervals, offsets.detach().cpu().double().numpy())
        scores = torch.sigmoid(logits).detach().cpu().double().numpy()
        return prop.filter_proposals(
            refined, scores, feature_len, self.cfg.rpn, source_anchor=np.arange(len(anchors))
        )

    def stage2(self, fm: torch.Tensor, proposal_list: list[prop.Proposal]):
        """Encode each proposal region and run the second head.

        Returns (embeddings (P, E), logits (P,), offsets (P, 2),
        final intervals (P, 2) np.ndarray in feature frames)."""
        if not proposal_list:
            e = fm.new_zeros((0, self.emb_dim))
            return e, fm.new_zeros(0), fm.new_zeros((0, 2)), np.zeros((0, 2))
        embs = torch.stack([self.encode_region(fm, p.interval) for p in proposal_list])
        logits, offsets = self.second(embs)
        base = np.array([[p.start, p.end] for p in proposal_list])
        final = prop.refine_batch(base, offsets.detach().cpu().double().numpy())
        final = np.clip(final, 0.0, float(fm.shape[0]))
        return embs, logits, offsets, final

    @torch.no_grad()
    def detect(self, episode: EpisodeTensors) -> list[list[ClassifiedProposal]]:
        """Full inference for one episode: per query, classified proposals."""
        self.eval()
        protos = self.prototypes(episode)
        results = []
        fm_b, logits_b, offsets_b = self.forward_queries(episode.query_specs)
        for qi in range(len(episode.query_specs)):
            fm, logits, offsets = fm_b[qi], logits_b[qi], offsets_b[qi]
            proposal_list = self.propose(fm, logits, offsets)
            dets: list[ClassifiedProposal] = []
            if proposal_list:
                embs, logits2, _, final = self.stage2(fm, proposal_list)
                dist = self.proto(embs, protos).cpu().numpy()
                score2 = torch.sigmoid(logits2).cpu().numpy()
                for i, p in enumerate(proposal_list):
                    if final[i, 1] - final[i, 0] < 1.0:  # sub-frame after stage II
                        continue
                    dets.append(
                        ClassifiedProposal(
                            start_s=final[i, 0] * FEATURE_FRAME_SECONDS,
                            end_s=final[i, 1] * FEATURE_FRAME_SECONDS,
                            event_score=float(score2[i]),
                            class_distribution=dist[i],
                            stage1_score=p.event_score,
                            stage1_start_s=p.start * FEATURE_FRAME_SECONDS,
                            stage1_end_s=p.end * FEATURE_FRAME_SECONDS,
                        )
                    )
            results.append(dets)
        return results


class WindowModel(nn.Module):
    """Window-level detector: per-window embedding (CRNN or Perceiver)
    classified prototypically against support embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.variant not in ("window-crnn", "window-perceiver"):
            raise ValueError("WindowModel requires a window variant")
        self.cfg = cfg
        wcfg = dataclasses.replace(cfg.window, variant="crnn" if cfg.variant == "window-crnn" else "perceiver")
        if cfg.variant == "window-crnn":
            self.encoder = WindowEncoderCRNN(wcfg)
        else:
            self.encoder = WindowEncoderPerceiver(wcfg)
        self.proto = ProtoHead(cfg.proto)
        self.window_frames = wcfg.window_frames
        self.hop_frames = wcfg.hop_frames

    def embed_support(self, spec: torch.Tensor) -> torch.Tensor:
        return self.encoder(fit_to_window(spec, self.window_frames))

    def prototypes(self, episode: EpisodeTensors) -> torch.Tensor:
        protos = []
        for class_id in episode.classes:
            embs = [self.embed_support(s) for s in episode.support_specs[class_id]]
            protos.append(compute_prototypes(embs))
        return torch.stack(protos)

    def forward_query(self, spec: torch.Tensor, protos: torch.Tensor):
        """-> (window start frames, distributions (W, n+1))."""
        starts = window_slices(spec.shape[0], self.window_frames, self.hop_frames)
        windows = torch.stack([spec[s : s + self.window_frames] for s in starts])
        embs = self.encoder(windows)
        dist = self.proto(embs, protos)
        return starts, dist

    @torch.no_grad()
    def predict(self, episode: EpisodeTensors):
        """Per query: (window starts, posterior matrix (W, n+1))."""
        self.eval()
        protos = self.prototypes(episode)
        return [self.forward_query(spec, protos) for spec in episode.query_specs]


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.variant.startswith("window"):
        return WindowModel(cfg)
    return ProposalModel(cfg)


def save_checkpoint(model: nn.Module, cfg: ModelConfig, out_dir, step: int = 0, extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "weights.pt")
    sidecar = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "variant": cfg.variant,
        "model_config": cfg.to_dict(),
        "step": step,
    }
    if extra:
        sidecar.update(extra)
    with open(out / "config.json", "w") as f:
        json.dump(sidecar, f, indent=1)


def load_checkpoint(ckpt_dir) -> tuple[nn.Module, ModelConfig, dict]:
    ckpt = Path(ckpt_dir)
    with open(ckpt / "config.json") as f:
        sidecar = json.load(f)
    if sidecar.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError("unsupported checkpoint schema version")
    cfg = ModelConfig.from_dict(sidecar["model_config"])
    model = build_model(cfg)
    model.load_state_dict(torch.load(ckpt / "weights.pt", weights_only=True))
    model.eval()
    return model, cfg, sidecar
