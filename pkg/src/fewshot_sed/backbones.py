"""Trainable encoders: the CRNN backbone feeding the proposal models, the
two window-level encoders, and the Perceiver block shared across variants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

N_MELS = 64
BACKBONE_STRIDE = 8
WINDOW_FRAMES = 128
WINDOW_HOP = 64


@dataclass
class BackboneConfig:
    conv_channels: tuple = (32, 32, 64, 64, 128, 128, 128)
    leaky_relu_slope: float = 0.1
    time_pool_layers: tuple = (0, 2, 4)  # pool-by-2 here; product must be 8
    hidden_size: int = 128
    bidirectional: bool = True

    def __post_init__(self):
        if 2 ** len(self.time_pool_layers) != BACKBONE_STRIDE:
            raise ValueError("temporal pooling must multiply to 8")
        if len(self.conv_channels) != 7:
            raise ValueError("backbone uses seven convolutional layers")

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden_size if self.bidirectional else self.hidden_size


@dataclass
class PerceiverConfig:
    num_latents: int = 32
    latent_dim: int = 128
    cross_blocks: int = 2
    self_blocks_per_cross: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.num_latents < 1:
            raise ValueError("num_latents must be >= 1")


@dataclass
class WindowEncoderConfig:
    variant: str = "crnn"  # "crnn" | "perceiver"
    window_frames: int = WINDOW_FRAMES
    hop_frames: int = WINDOW_HOP
    embedding_dim: int = 256
    cnn_channels: tuple = (16, 32, 64, 64, 128)
    lstm_hidden: int = 128
    perceiver: PerceiverConfig = field(default_factory=PerceiverConfig)


def sinusoidal_positions(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal encoding of integer positions, shape (T, dim)."""
    half = dim // 2
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=positions.dtype, device=positions.device) / half
    )
    ang = positions[:, None] * freq[None, :]
    pe = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if pe.shape[1] < dim:  # odd dim
        pe = torch.cat([pe, torch.zeros(len(positions), 1, dtype=pe.dtype, device=pe.device)], dim=1)
    return pe


class CRNNBackbone(nn.Module):
    """Seven conv + LeakyReLU layers with pooling (temporal factor 8), the
    mel axis collapsed into channels, then a bidirectional LSTM.

    Input (T, 64) log-mel frames; output (ceil(T/8), 2H). The time axis is
    right-padded with zeros to a multiple of 8 before convolution.
    """

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        layers = []
        in_ch = 1
        freq = N_MELS
        for i, out_ch in enumerate(self.cfg.conv_channels):
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1))
            layers.append(nn.LeakyReLU(self.cfg.leaky_relu_slope))
            t_pool = 2 if i in self.cfg.time_pool_layers else 1
            f_pool = 2 if freq > 1 else 1
            if t_pool > 1 or f_pool > 1:
                layers.append(nn.MaxPool2d(kernel_size=(t_pool, f_pool)))
            freq //= f_pool
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        self.rnn = nn.LSTM(
            input_size=in_ch * freq,
            hidden_size=self.cfg.hidden_size,
            batch_first=True,
            bidirectional=self.cfg.bidirectional,
        )

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        """spec: (T, 64) or (B, T, 64) -> (T_f, 2H) or (B, T_f, 2H)."""
        squeeze = spec.dim() == 2
        if squeeze:
            spec = spec.unsqueeze(0)
        b, t, _ = spec.shape
        if t < BACKBONE_STRIDE:
            raise ValueError("input too short for backbone")
        pad = (-t) % BACKBONE_STRIDE
        if pad:
            spec = torch.nn.functional.pad(spec, (0, 0, 0, pad))
        x = spec.unsqueeze(1)  # (B, 1, T, F)
        h = self.conv(x)  # (B, C, T/8, F')
        h = h.permute(0, 2, 1, 3).flatten(2)  # (B, T/8, C*F')
        out, _ = self.rnn(h)
        return out[0] if squeeze else out


class Attention(nn.Module):
    """Multi-head attention of queries over a key/value sequence."""

    def __init__(self, q_dim: int, kv_dim: int, heads: int):
        super().__init__()
        if q_dim % heads:
            raise ValueError("q_dim must be divisible by heads")
        self.heads = heads
        self.head_dim = q_dim // heads
        self.to_q = nn.Linear(q_dim, q_dim)
        self.to_k = nn.Linear(kv_dim, q_dim)
        self.to_v = nn.Linear(kv_dim, q_dim)
        self.out = nn.Linear(q_dim, q_dim)

    def forward(self, q: torch.Tensor, kv: torch.Tensor, return_weights: bool = False):
        nq, nk = q.shape[0], kv.shape[0]
        qh = self.to_q(q).reshape(nq, self.heads, self.head_dim).transpose(0, 1)
        kh = self.to_k(kv).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        vh = self.to_v(kv).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ vh).transpose(0, 1).reshape(nq, -1)
        out = self.out(out)
        return (out, attn) if return_weights else out


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.attn = Attention(dim, kv_dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, q, kv, return_weights: bool = False):
        res = self.attn(self.norm_q(q), self.norm_kv(kv), return_weights=return_weights)
        attn = None
        if return_weights:
            res, attn = res
        q = q + res
        q = q + self.ff(self.norm_ff(q))
        return (q, attn) if return_weights else q


class PerceiverEncoder(nn.Module):
    """Learned latents cross-attend to a variable-length input sequence and
    are mean-pooled to one latent_dim vector."""

    def __init__(self, input_dim: int, cfg: PerceiverConfig | None = None):
        super().__init__()
        self.cfg = cfg or PerceiverConfig()
        d = self.cfg.latent_dim
        self.input_proj = nn.Linear(input_dim, d)
        self.latents = nn.Parameter(torch.randn(self.cfg.num_latents, d) * 0.02)
        self.blocks = nn.ModuleList()
        for _ in range(self.cfg.cross_blocks):
            self.blocks.append(TransformerBlock(d, d, self.cfg.num_heads))  # cross
            for _ in range(self.cfg.self_blocks_per_cross):
                self.blocks.append(TransformerBlock(d, d, self.cfg.num_heads))  # self
        self.block_kinds = []
        for _ in range(self.cfg.cross_blocks):
            self.block_kinds.append("cross")
            self.block_kinds.extend(["self"] * self.cfg.self_blocks_per_cross)

    @property
    def out_dim(self) -> int:
        return self.cfg.latent_dim

    def forward(
        self,
        sequence: torch.Tensor,
        positions: torch.Tensor | None = None,
        return_attention: bool = False,
    ) -> torch.Tensor:
        """sequence: (T', D_in), positions: (T',) indices for the positional
        encoding (defaults to 0..T'-1)."""
        if sequence.dim() != 2 or sequence.shape[0] < 1:
            raise ValueError("empty sequence")
        if positions is None:
            positions = torch.arange(sequence.shape[0], dtype=sequence.dtype, device=sequence.device)
        x = self.input_proj(sequence) + sinusoidal_positions(
            positions.to(sequence.dtype), self.cfg.latent_dim
        )
        h = self.latents.to(sequence.dtype)
        cross_attn = None
        for kind, block in zip(self.block_kinds, self.blocks):
            if kind == "cross":
                h, attn = block(h, x, return_weights=True)
                if cross_attn is None:
                    cross_attn = attn
            else:
                h = block(h, h)
        pooled = h.mean(dim=0)
        return (pooled, cross_attn) if return_attention else pooled


class WindowEncoderCRNN(nn.Module):
    """Per-window embedding: 5-layer 2-D CNN then a 2-layer bidirectional
    LSTM, mean-pooled and projected to the embedding dimension."""

    def __init__(self, cfg: WindowEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or WindowEncoderConfig(variant="crnn")
        layers = []
        in_ch = 1
        for out_ch in self.cfg.cnn_channels:
            layers.extend(
                [
                    nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                    nn.LeakyReLU(0.1),
                    nn.MaxPool2d(2),
                ]
            )
            in_ch = out_ch
        self.conv = nn.Sequential(*layers)
        t_red = self.cfg.window_frames // 2 ** len(self.cfg.cnn_channels)
        f_red = N_MELS // 2 ** len(self.cfg.cnn_channels)
        self.rnn = nn.LSTM(
            input_size=in_ch * f_red,
            hidden_size=self.cfg.lstm_hidden,
            num_layers=2,
            batch_first=True,
            bidirectional=True,
        )
        self.proj = nn.Linear(2 * self.cfg.lstm_hidden, self.cfg.embedding_dim)
        self._t_red = t_red

    @property
    def out_dim(self) -> int:
        return self.cfg.embedding_dim

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """window: (128, 64) or (B, 128, 64) -> (E,) or (B, E)."""
        squeeze = window.dim() == 2
        if squeeze:
            window = window.unsqueeze(0)
        if window.shape[1] != self.cfg.window_frames or window.shape[2] != N_MELS:
            raise ValueError(f"expected ({self.cfg.window_frames}, {N_MELS}) windows")
        h = self.conv(window.unsqueeze(1))  # (B, C, T', F')
        h = h.permute(0, 2, 1, 3).flatten(2)
        out, _ = self.rnn(h)
        emb = self.proj(out.mean(dim=1))
        return emb[0] if squeeze else emb


class WindowEncoderPerceiver(nn.Module):
    """Per-window embedding via the Perceiver over raw spectrogram frames."""

    def __init__(self, cfg: WindowEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or WindowEncoderConfig(variant="perceiver")
        self.perceiver = PerceiverEncoder(N_MELS, self.cfg.perceiver)

    @property
    def out_dim(self) -> int:
        return self.cfg.perceiver.latent_dim

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        if window.dim() == 2:
            if window.shape != (self.cfg.window_frames, N_MELS):
                raise ValueError(f"expected ({self.cfg.window_frames}, {N_MELS}) windows")
            return self.perceiver(window)
        return torch.stack([self.perceiver(w) for w in window])


def window_slices(num_frames: int, window: int = WINDOW_FRAMES, hop: int = WINDOW_HOP) -> list[int]:
    """Start frames of the overlapping windows; trailing partial dropped."""
    if num_frames < window:
        raise ValueError("spectrogram shorter than one window")
    return list(range(0, num_frames - window + 1, hop))


def fit_to_window(spec: torch.Tensor, window: int = WINDOW_FRAMES) -> torch.Tensor:
    """Zero-pad (right) or center-crop a (T, F) spectrogram to T == window."""
    t = spec.shape[0]
    if t == window:
        return spec
    if t < window:
        return torch.nn.functional.pad(spec, (0, 0, 0, window - t))
    start = (t - window) // 2
    return spec[start : start + window]
