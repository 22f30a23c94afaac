"""Temporal heads mapping foreground/background feature streams to a score."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

VARIANTS = ("bilstm", "temporal_pool_mlp")
GRS_MIN, GRS_SPAN = 6.0, 24.0


@dataclass(frozen=True)
class SkillScore:
    normalized: float
    raw: float

    @classmethod
    def from_normalized(cls, value: float) -> "SkillScore":
        return cls(float(value), denormalize(float(value)))


def normalize_grs(grs):
    return (grs - GRS_MIN) / GRS_SPAN


def denormalize(value):
    """Normalised output -> GRS scale, clamped to [6, 30]."""
    if isinstance(value, torch.Tensor):
        return GRS_MIN + GRS_SPAN * value.clamp(0.0, 1.0)
    return GRS_MIN + GRS_SPAN * min(1.0, max(0.0, value))


def pool_time(seq: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis (``... x T x e -> ... x e``).

    Values are summed in sorted order so the result is bitwise independent
    of frame order, not just up to rounding.
    """
    return seq.sort(dim=-2).values.mean(dim=-2)


class TemporalHead(nn.Module):
    """Per-stream encoder + pooling + regressor.

    ``bilstm``: one bidirectional LSTM layer per stream (separate weights),
    temporal mean, concatenation, one linear layer.
    ``temporal_pool_mlp``: temporal mean of the raw features, concatenation,
    a 3-layer MLP.
    """

    def __init__(self, in_dim: int, variant: str = "bilstm", hidden: int = 256,
                 mlp_widths: tuple[int, int] = (512, 128), init_bias: float = 0.5):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown head variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        self.in_dim = in_dim
        self.hidden = hidden
        if variant == "bilstm":
            self.fg_lstm = nn.LSTM(in_dim, hidden, num_layers=1, batch_first=True, bidirectional=True)
            self.bg_lstm = nn.LSTM(in_dim, hidden, num_layers=1, batch_first=True, bidirectional=True)
            self.regressor = nn.Linear(4 * hidden, 1)
            last = self.regressor
        else:
            w1, w2 = mlp_widths
            self.regressor = nn.Sequential(
                nn.Linear(2 * in_dim, w1), nn.ReLU(),
                nn.Linear(w1, w2), nn.ReLU(),
                nn.Linear(w2, 1),
            )
            last = self.regressor[-1]
        nn.init.normal_(last.weight, std=0.01)
        nn.init.constant_(last.bias, init_bias)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden if self.variant == "bilstm" else self.in_dim

    def encode_stream(self, seq: torch.Tensor, stream: str = "foreground") -> torch.Tensor:
        """``B x T x d`` (or ``T x d``) -> ``B x T x e``."""
        if self.variant != "bilstm":
            return seq
        lstm = self.fg_lstm if stream == "foreground" else self.bg_lstm
        squeeze = seq.ndim == 2
        out, _ = lstm(seq[None] if squeeze else seq)
        return out[0] if squeeze else out

    def pooled(self, fg: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
        if fg.shape != bg.shape:
            raise ValueError(f"stream shapes differ: {tuple(fg.shape)} vs {tuple(bg.shape)}")
        return torch.cat([pool_time(self.encode_stream(fg, "foreground")),
                          pool_time(self.encode_stream(bg, "background"))], dim=-1)

    def forward(self, fg: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
        """Normalised scores, shape ``B`` (or scalar for unbatched input)."""
        return self.regressor(self.pooled(fg, bg)).squeeze(-1)


@torch.no_grad()
def score(features, head: TemporalHead) -> SkillScore:
    """Score one FeatureSequence (or any object with foreground/background)."""
    dtype = next(head.parameters()).dtype
    fg = torch.as_tensor(features.foreground, dtype=dtype)
    bg = torch.as_tensor(features.background, dtype=dtype)
    return SkillScore.from_normalized(float(head(fg, bg)))
