"""Stage-II heads: fixed-length region encoding (max-pool or Perceiver),
the second refinement/scoring stack, and prototypical classification with a
learned no-event logit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbones import PerceiverConfig, PerceiverEncoder


@dataclass
class ProtoHeadConfig:
    squared_distance: bool = True  # squared Euclidean by default


def region_rows(start: float, end: float, num_rows: int) -> tuple[int, int]:
    """Feature-map row range [floor(start), ceil(end)) covered by a region,
    clamped into the map; guarantees >= 1 row for any region of length >= 1."""
    lo = max(0, min(num_rows - 1, math.floor(start)))
    hi = min(num_rows, max(lo + 1, math.ceil(end)))
    if hi <= lo:
        raise ValueError("degenerate region")
    return lo, hi


def roi_pool(fm: torch.Tensor, region: tuple[float, float]) -> torch.Tensor:
    """Element-wise max over the rows covered by the region; output (D,)."""
    lo, hi = region_rows(region[0], region[1], fm.shape[0])
    return fm[lo:hi].max(dim=0).values


class RoiPerceiver(nn.Module):
    """Region encoder: the covered row subsequence, positionally encoded
    relative to the region start, summarized by a Perceiver."""

    def __init__(self, in_dim: int, cfg: PerceiverConfig | None = None):
        super().__init__()
        self.perceiver = PerceiverEncoder(in_dim, cfg)

    @property
    def out_dim(self) -> int:
        return self.perceiver.out_dim

    def forward(self, fm: torch.Tensor, region: tuple[float, float]) -> torch.Tensor:
        lo, hi = region_rows(region[0], region[1], fm.shape[0])
        rows = fm[lo:hi]
        positions = torch.arange(hi - lo, dtype=fm.dtype, device=fm.device)
        return self.perceiver(rows, positions=positions)


class SecondStageHead(nn.Module):
    """Dense stack over region embeddings emitting a second event logit and
    a second (lo, co) refinement pair."""

    def __init__(self, in_dim: int, hidden: int = 512):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.LeakyReLU(0.1),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.1),
        )
        self.cls = nn.Linear(hidden, 1)
        self.reg = nn.Linear(hidden, 2)
        # proposals reaching this head are still mostly background; start the
        # event logit at a low prior so early gradients stay balanced
        nn.init.constant_(self.cls.bias, -2.0)

    def forward(self, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """emb: (E,) or (B, E) -> (event_logit, offsets (.., 2))."""
        h = self.body(emb)
        return self.cls(h).squeeze(-1), self.reg(h)


def compute_prototypes(support_embs: list[torch.Tensor]) -> torch.Tensor:
    """Mean of the class's support embeddings, summed in a deterministic
    (sorted) order so permuting supports leaves the prototype bit-identical."""
    if len(support_embs) == 0:
        raise ValueError("empty support class")
    stacked = torch.stack(support_embs)
    order = sorted(range(len(support_embs)), key=lambda i: tuple(stacked[i].tolist()))
    total = stacked[order[0]]
    for i in order[1:]:
        total = total + stacked[i]
    return total / len(support_embs)


class ProtoHead(nn.Module):
    """Prototypical classifier over n classes plus a learned no-event logit."""

    def __init__(self, cfg: ProtoHeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or ProtoHeadConfig()
        self.no_event_logit = nn.Parameter(torch.zeros(1))

    def logits(self, query_embs: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        """(M, E) queries x (n, E) prototypes -> (M, n+1) logits, the last
        column being the shared no-event scalar."""
        if query_embs.shape[-1] != prototypes.shape[-1]:
            raise ValueError("embedding dimension mismatch")
        diff = query_embs[:, None, :] - prototypes[None, :, :]
        d2 = (diff * diff).sum(dim=-1)
        dist = d2 if self.cfg.squared_distance else torch.sqrt(d2 + 1e-12)
        no_event = self.no_event_logit.to(query_embs.dtype).expand(len(query_embs), 1)
        return torch.cat([-dist, no_event], dim=1)

    def forward(self, query_embs: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        """Softmax distribution over n classes + no-event, shape (M, n+1)."""
        return torch.softmax(self.logits(query_embs, prototypes), dim=-1)
