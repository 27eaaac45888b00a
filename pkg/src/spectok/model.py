"""Pre-norm transformer encoder and the binary fake-song classifier head.

The encoder is a standard pre-norm ViT stack written out by hand: qkv and
output projections with biases, GELU MLP whose hidden width is
round(embed_dim * mlp_ratio), residuals around both sublayers, then a final
LayerNorm. Classification mean-pools over all tokens and maps to a single
logit; sigmoid(logit) is the fake probability (fake is the positive class).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .audio import MelSpectrogram
from .tokenizer import ClipConfig, PatchConfig, PatchTokenizer, SpectroTemporalTokenizer


class NonFiniteActivationError(RuntimeError):
    """Raised when a forward pass produces NaN/Inf, tagged with the layer."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite activations after {layer}")
        self.layer = layer


@dataclass(frozen=True)
class EncoderConfig:
    """Transformer encoder hyperparameters.

    n_layers = 0 is allowed (tokenizer + pooling + head only); it is useful
    for isolating tokenizer costs in the profiler.
    """

    embed_dim: int = 384
    n_heads: int = 6
    n_layers: int = 12
    mlp_ratio: float = 2.67
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.n_heads <= 0:
            raise ValueError("embed_dim and n_heads must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be non-negative, got {self.n_layers}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def mlp_hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class Attention(nn.Module):
    """Multi-head self-attention with fused qkv, both projections biased."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim, bias=True)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=True)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.drop(self.proj(out))
        if need_weights:
            return out, attn
        return out


class Mlp(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.mlp_hidden_dim, bias=True)
        self.fc2 = nn.Linear(cfg.mlp_hidden_dim, cfg.embed_dim, bias=True)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(F.gelu(self.fc1(x))))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        self.mlp = Mlp(cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SpectroTemporalClassifier(nn.Module):
    """Tokenizer + encoder + mean pool + single-logit head.

    check_finite guards every block output during normal runs; gradient
    checks that vectorize the forward over parameter batches switch it off
    because data-dependent branching does not vectorize.
    """

    def __init__(self, tokenizer: nn.Module, encoder: EncoderConfig):
        super().__init__()
        if tokenizer.embed_dim != encoder.embed_dim:
            raise ValueError(
                f"tokenizer dim {tokenizer.embed_dim} != encoder dim {encoder.embed_dim}"
            )
        self.tokenizer = tokenizer
        self.encoder_config = encoder
        self.blocks = nn.ModuleList(Block(encoder) for _ in range(encoder.n_layers))
        self.norm = nn.LayerNorm(encoder.embed_dim, eps=1e-6)
        self.head = nn.Linear(encoder.embed_dim, 1, bias=True)
        self.check_finite = True
        self.apply(_init_weights)

    @property
    def n_tokens(self) -> int:
        return self.tokenizer.n_tokens

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode a (B, n, dim) token batch into (B,) logits."""
        x = tokens
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NonFiniteActivationError(f"encoder block {i}")
        x = self.norm(x)
        pooled = x.mean(dim=1)
        return self.head(pooled).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n_mels, n_frames) spectrogram batch -> (B,) logits."""
        tokens = self.tokenizer(x)
        if self.check_finite and not torch.isfinite(tokens).all():
            raise NonFiniteActivationError("tokenizer")
        return self.forward_tokens(tokens)

    @torch.no_grad()
    def predict(self, spec: MelSpectrogram) -> tuple[float, float]:
        """Score one spectrogram; returns (logit, fake probability)."""
        x = torch.from_numpy(np.ascontiguousarray(spec.values)).unsqueeze(0)
        logit = float(self.forward(x)[0])
        return logit, 1.0 / (1.0 + math.exp(-logit))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(
    encoder: EncoderConfig,
    n_mels: int,
    n_frames: int,
    clip: ClipConfig | None = None,
    patch: PatchConfig | None = None,
) -> SpectroTemporalClassifier:
    """Build a classifier with either a clip tokenizer or the patch baseline."""
    if (clip is None) == (patch is None):
        raise ValueError("pass exactly one of clip= or patch=")
    if clip is not None:
        tok = SpectroTemporalTokenizer(n_mels, n_frames, encoder.embed_dim, clip)
    else:
        tok = PatchTokenizer(n_mels, n_frames, encoder.embed_dim, patch)
    return SpectroTemporalClassifier(tok, encoder)


def count_params(module: nn.Module) -> int:
    """Trainable parameter count."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# tiny is the desk-scale preset the test suite trains; small is the
# full-scale configuration (vit_small-like: 384 wide, 6 heads, 12 layers).
ENCODER_PRESETS = {
    "tiny": EncoderConfig(embed_dim=16, n_heads=2, n_layers=2, mlp_ratio=2.67),
    "small": EncoderConfig(embed_dim=384, n_heads=6, n_layers=12, mlp_ratio=2.67),
}
