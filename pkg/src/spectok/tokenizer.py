"""Tokenizers that turn a spectrogram into a transformer input sequence.

Two families:

* SpectroTemporalTokenizer slices the spectrogram into full-height temporal
  clips (t frames wide) and full-width spectral clips (f mel bins tall) and
  embeds each clip with a strided 1-d convolution. Sequence length grows
  additively, floor(T / t) + floor(F / f), so long inputs stay cheap.
* PatchTokenizer is the square-patch baseline: non-overlapping p x p patches
  embedded with a shared linear map, floor(F / p) * floor(T / p) tokens.

Clip tokens get GELU, a learnable position embedding and LayerNorm; temporal
tokens come first in the output sequence, then spectral tokens. Patch tokens
follow the usual convention of a plain linear projection plus position
embedding, with the encoder's first LayerNorm doing the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

VARIANT_CLIPS = {
    "alpha": (3, 1),
    "beta": (5, 3),
    "gamma": (7, 5),
}


@dataclass(frozen=True)
class ClipConfig:
    """Clip widths for the spectro-temporal tokenizer.

    t is the temporal clip width in frames, f the spectral clip height in mel
    bins. Either branch can be disabled for ablations, but not both.
    """

    t: int = 7
    f: int = 5
    temporal_enabled: bool = True
    spectral_enabled: bool = True
    variant: str = "custom"

    def __post_init__(self):
        if self.temporal_enabled and self.t <= 0:
            raise ValueError(f"temporal clip width must be positive, got {self.t}")
        if self.spectral_enabled and self.f <= 0:
            raise ValueError(f"spectral clip height must be positive, got {self.f}")
        if not (self.temporal_enabled or self.spectral_enabled):
            raise ValueError("at least one of the temporal/spectral branches must be enabled")

    @classmethod
    def from_variant(
        cls, name: str, temporal_enabled: bool = True, spectral_enabled: bool = True
    ) -> "ClipConfig":
        if name not in VARIANT_CLIPS:
            raise ValueError(f"unknown variant {name!r}, expected one of {sorted(VARIANT_CLIPS)}")
        t, f = VARIANT_CLIPS[name]
        return cls(
            t=t,
            f=f,
            temporal_enabled=temporal_enabled,
            spectral_enabled=spectral_enabled,
            variant=name,
        )


@dataclass(frozen=True)
class PatchConfig:
    """Square patch size for the baseline tokenizer."""

    p: int = 16

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError(f"patch size must be positive, got {self.p}")


@dataclass
class TokenSequence:
    """Token tensor (n, dim) plus the temporal/spectral segment boundary.

    Temporal tokens occupy [0, n_temporal), spectral tokens the rest. Patch
    baselines have no spectral segment, so their grid tokens are all recorded
    on the temporal side.
    """

    tokens: torch.Tensor
    n_temporal: int
    n_spectral: int

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (n, dim), got shape {tuple(self.tokens.shape)}")
        if self.n_temporal < 0 or self.n_spectral < 0:
            raise ValueError("segment sizes must be non-negative")
        if self.tokens.shape[0] != self.n_temporal + self.n_spectral:
            raise ValueError(
                f"{self.tokens.shape[0]} tokens != {self.n_temporal} temporal"
                f" + {self.n_spectral} spectral"
            )

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


def st_token_count(n_mels: int, n_frames: int, clip: ClipConfig) -> tuple[int, int]:
    """(n_temporal, n_spectral) token counts; trailing remainders are dropped."""
    if n_mels <= 0 or n_frames <= 0:
        raise ValueError(f"spectrogram dims must be positive, got {n_mels}x{n_frames}")
    n_temporal = n_frames // clip.t if clip.temporal_enabled else 0
    n_spectral = n_mels // clip.f if clip.spectral_enabled else 0
    if clip.temporal_enabled and n_temporal == 0:
        raise ValueError(f"temporal clip width {clip.t} exceeds {n_frames} frames")
    if clip.spectral_enabled and n_spectral == 0:
        raise ValueError(f"spectral clip height {clip.f} exceeds {n_mels} mel bins")
    return n_temporal, n_spectral


def vit_token_count(n_mels: int, n_frames: int, patch: PatchConfig) -> int:
    """Patch-grid token count floor(F / p) * floor(T / p)."""
    if n_mels <= 0 or n_frames <= 0:
        raise ValueError(f"spectrogram dims must be positive, got {n_mels}x{n_frames}")
    n = (n_mels // patch.p) * (n_frames // patch.p)
    if n == 0:
        raise ValueError(f"patch size {patch.p} exceeds spectrogram {n_mels}x{n_frames}")
    return n


def _init_projection(weight: torch.Tensor) -> None:
    nn.init.trunc_normal_(weight, std=0.02)


class SpectroTemporalTokenizer(nn.Module):
    """Embeds temporal and spectral clips of a fixed-size spectrogram.

    Input (B, n_mels, n_frames); output (B, n_tokens, embed_dim) with temporal
    tokens first. Each branch is Conv1d(kernel=stride=clip width, no bias)
    -> GELU -> + position embedding -> LayerNorm(eps=1e-6). The spectral
    branch runs on the transposed spectrogram, so its conv mixes frames as
    channels.
    """

    def __init__(self, n_mels: int, n_frames: int, embed_dim: int, clip: ClipConfig):
        super().__init__()
        if embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {embed_dim}")
        self.n_mels = n_mels
        self.n_frames = n_frames
        self.embed_dim = embed_dim
        self.clip = clip
        self.n_temporal, self.n_spectral = st_token_count(n_mels, n_frames, clip)
        if clip.temporal_enabled:
            self.temporal_conv = nn.Conv1d(n_mels, embed_dim, clip.t, stride=clip.t, bias=False)
            self.temporal_pos = nn.Parameter(torch.randn(self.n_temporal, embed_dim) * 0.02)
            self.temporal_norm = nn.LayerNorm(embed_dim, eps=1e-6)
            _init_projection(self.temporal_conv.weight)
        if clip.spectral_enabled:
            self.spectral_conv = nn.Conv1d(n_frames, embed_dim, clip.f, stride=clip.f, bias=False)
            self.spectral_pos = nn.Parameter(torch.randn(self.n_spectral, embed_dim) * 0.02)
            self.spectral_norm = nn.LayerNorm(embed_dim, eps=1e-6)
            _init_projection(self.spectral_conv.weight)

    @property
    def n_tokens(self) -> int:
        return self.n_temporal + self.n_spectral

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 3 or x.shape[1] != self.n_mels or x.shape[2] != self.n_frames:
            raise ValueError(
                f"expected input (B, {self.n_mels}, {self.n_frames}),"
                f" got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        parts = []
        if self.clip.temporal_enabled:
            h = F.gelu(self.temporal_conv(x)).transpose(1, 2)
            parts.append(self.temporal_norm(h + self.temporal_pos))
        if self.clip.spectral_enabled:
            h = F.gelu(self.spectral_conv(x.transpose(1, 2))).transpose(1, 2)
            parts.append(self.spectral_norm(h + self.spectral_pos))
        return torch.cat(parts, dim=1)


class PatchTokenizer(nn.Module):
    """Square-patch baseline: p x p patches, shared linear embedding, + position.

    Patches are taken row-major over the (mel, frame) grid and each patch is
    flattened row-major before the projection. Trailing rows/columns that do
    not fill a patch are dropped.
    """

    def __init__(self, n_mels: int, n_frames: int, embed_dim: int, patch: PatchConfig):
        super().__init__()
        if embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {embed_dim}")
        self.n_mels = n_mels
        self.n_frames = n_frames
        self.embed_dim = embed_dim
        self.patch = patch
        self.grid = (n_mels // patch.p, n_frames // patch.p)
        self.n_tokens_ = vit_token_count(n_mels, n_frames, patch)
        self.proj = nn.Linear(patch.p * patch.p, embed_dim, bias=False)
        self.pos = nn.Parameter(torch.randn(self.n_tokens_, embed_dim) * 0.02)
        _init_projection(self.proj.weight)

    @property
    def n_tokens(self) -> int:
        return self.n_tokens_

    @property
    def n_temporal(self) -> int:
        return self.n_tokens_

    @property
    def n_spectral(self) -> int:
        return 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.n_mels or x.shape[2] != self.n_frames:
            raise ValueError(
                f"expected input (B, {self.n_mels}, {self.n_frames}),"
                f" got {tuple(x.shape)}"
            )
        p = self.patch.p
        gh, gw = self.grid
        x = x[:, : gh * p, : gw * p]
        x = x.reshape(x.shape[0], gh, p, gw, p)
        x = x.permute(0, 1, 3, 2, 4).reshape(x.shape[0], gh * gw, p * p)
        return self.proj(x) + self.pos


def tokenize(values: torch.Tensor, tokenizer: nn.Module) -> TokenSequence:
    """Run a single (n_mels, n_frames) input through a tokenizer module."""
    if values.ndim != 2:
        raise ValueError(f"expected a single (n_mels, n_frames) input, got {tuple(values.shape)}")
    tokens = tokenizer(values.unsqueeze(0)).squeeze(0)
    return TokenSequence(
        tokens=tokens,
        n_temporal=tokenizer.n_temporal,
        n_spectral=tokenizer.n_spectral,
    )
