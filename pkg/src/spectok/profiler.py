"""Analytic cost model and wall-clock throughput measurement.

FLOP counts use the multiply-accumulate = 2 FLOPs convention and cover the
linear-algebra terms only (softmax, GELU, LayerNorm and residual adds are
dropped; they are O(n * dim) next to the O(n * dim^2) matmuls). Per encoder
layer with n tokens, width D, heads H and MLP hidden width M:

    qkv + output projections   8 n D^2
    attention scores + mix     4 n^2 D
    MLP                        4 n D M

Activation counts sum the block-boundary tensors one forward pass emits per
example: the tokenizer's token matrix, then per layer the attention output,
the MLP hidden and the block's output token matrix, then the pooled vector
and the logit. All terms are linear in n by construction (intra-block
scratch such as the attention maps is not a block boundary):

    n D + L (n D + n M + n D) + D + 1

Everything analytic is exact integer arithmetic; measure_speed wraps a
warmup-then-timed-runs wall-clock protocol and records the machine it ran on.

docs/formats.md restates these formulas next to the checkpoint layout.
"""

from __future__ import annotations

import platform
import time
import warnings
from dataclasses import dataclass

import torch

from .model import EncoderConfig, SpectroTemporalClassifier, count_params
from .tokenizer import ClipConfig, PatchConfig, st_token_count, vit_token_count


@dataclass(frozen=True)
class TimingProtocol:
    warmup_runs: int = 5
    timed_runs: int = 100
    batch_size: int = 1

    def __post_init__(self):
        if self.warmup_runs < 0 or self.timed_runs <= 0 or self.batch_size <= 0:
            raise ValueError("bad timing protocol")


@dataclass(frozen=True)
class ActivationCount:
    tokens: int
    encoder: int
    head: int

    @property
    def total(self) -> int:
        return self.tokens + self.encoder + self.head


@dataclass
class SpeedMeasurement:
    audio_per_second: float
    mean_run_seconds: float
    runs: int
    warmup_runs: int
    batch_size: int
    machine: str


@dataclass
class ProfileReport:
    name: str
    n_tokens: int
    n_temporal: int
    n_spectral: int
    params: int
    flops_total: int
    flops_attention: int
    activations: int
    peak_bytes_estimate: int
    speed: SpeedMeasurement | None = None


def encoder_flops(cfg: EncoderConfig, n_tokens: int) -> tuple[int, int]:
    """(total, attention-only) FLOPs for the encoder stack at n_tokens."""
    if n_tokens <= 0:
        raise ValueError(f"n_tokens must be positive, got {n_tokens}")
    d, m = cfg.embed_dim, cfg.mlp_hidden_dim
    proj = 8 * n_tokens * d * d
    attn = 4 * n_tokens * n_tokens * d
    mlp = 4 * n_tokens * d * m
    per_layer = proj + attn + mlp
    return cfg.n_layers * per_layer, cfg.n_layers * attn


def st_tokenizer_flops(n_mels: int, n_frames: int, clip: ClipConfig, embed_dim: int) -> int:
    """Conv embedding cost: every input cell of a kept clip is touched once per
    output channel, so each branch costs 2 * D * n_clips * (cells per clip)."""
    n_t, n_s = st_token_count(n_mels, n_frames, clip)
    total = 0
    if clip.temporal_enabled:
        total += 2 * embed_dim * n_t * n_mels * clip.t
    if clip.spectral_enabled:
        total += 2 * embed_dim * n_s * n_frames * clip.f
    return total


def patch_tokenizer_flops(n_mels: int, n_frames: int, patch: PatchConfig, embed_dim: int) -> int:
    n = vit_token_count(n_mels, n_frames, patch)
    return 2 * embed_dim * n * patch.p * patch.p


def head_flops(embed_dim: int) -> int:
    return 2 * embed_dim


def analytic_flops(
    cfg: EncoderConfig, n_tokens: int, tokenizer_flops: int = 0
) -> tuple[int, int]:
    """(total, attention) FLOPs for tokenizer + encoder + head, one example."""
    enc_total, enc_attn = encoder_flops(cfg, n_tokens)
    return tokenizer_flops + enc_total + head_flops(cfg.embed_dim), enc_attn


def count_activations(cfg: EncoderConfig, n_tokens: int) -> ActivationCount:
    """Block-boundary float elements per example; formula in the module docstring."""
    if n_tokens <= 0:
        raise ValueError(f"n_tokens must be positive, got {n_tokens}")
    d = cfg.embed_dim
    tokens = n_tokens * d
    per_layer = n_tokens * (2 * d + cfg.mlp_hidden_dim)
    return ActivationCount(
        tokens=tokens,
        encoder=cfg.n_layers * per_layer,
        head=d + 1,
    )


def machine_descriptor() -> str:
    return (
        f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}"
        f" / torch {torch.__version__} / {torch.get_num_threads()} threads"
    )


def measure_speed(
    forward,
    audio_seconds: float,
    protocol: TimingProtocol = TimingProtocol(),
) -> SpeedMeasurement:
    """Wall-clock throughput of a zero-arg forward callable.

    Runs warmup_runs untimed then times timed_runs individually with
    perf_counter. audio_per_second = audio_seconds * batch_size / mean run
    time. If the mean run lands within 100x the timer resolution the
    measurement re-runs with 10x the repetitions (once) and warns.
    """
    if audio_seconds <= 0:
        raise ValueError(f"audio_seconds must be positive, got {audio_seconds}")
    torch.set_num_threads(1)
    resolution = time.get_clock_info("perf_counter").resolution
    runs = protocol.timed_runs
    for attempt in range(2):
        for _ in range(protocol.warmup_runs):
            forward()
        times = []
        for _ in range(runs):
            tic = time.perf_counter()
            forward()
            times.append(time.perf_counter() - tic)
        mean = sum(times) / len(times)
        if mean >= 100.0 * resolution or attempt == 1:
            break
        warnings.warn(
            f"mean run time {mean:.3e}s is within 100x timer resolution"
            f" {resolution:.1e}s; re-running with {runs * 10} repetitions"
        )
        runs *= 10
    return SpeedMeasurement(
        audio_per_second=audio_seconds * protocol.batch_size / mean,
        mean_run_seconds=mean,
        runs=runs,
        warmup_runs=protocol.warmup_runs,
        batch_size=protocol.batch_size,
        machine=machine_descriptor(),
    )


def profile_model(
    model: SpectroTemporalClassifier,
    name: str = "model",
    measure: bool = False,
    audio_seconds: float | None = None,
    protocol: TimingProtocol = TimingProtocol(),
    bytes_per_element: int = 4,
) -> ProfileReport:
    """Assemble the analytic profile of a built classifier, optionally timed."""
    tok = model.tokenizer
    cfg = model.encoder_config
    if hasattr(tok, "clip"):
        tok_flops = st_tokenizer_flops(tok.n_mels, tok.n_frames, tok.clip, tok.embed_dim)
    else:
        tok_flops = patch_tokenizer_flops(tok.n_mels, tok.n_frames, tok.patch, tok.embed_dim)
    total, attn = analytic_flops(cfg, tok.n_tokens, tok_flops)
    acts = count_activations(cfg, tok.n_tokens)
    params = count_params(model)
    report = ProfileReport(
        name=name,
        n_tokens=tok.n_tokens,
        n_temporal=tok.n_temporal,
        n_spectral=tok.n_spectral,
        params=params,
        flops_total=total,
        flops_attention=attn,
        activations=acts.total,
        peak_bytes_estimate=(params + acts.total) * bytes_per_element,
    )
    if measure:
        if audio_seconds is None:
            raise ValueError("measure=True needs audio_seconds")
        x = torch.randn(protocol.batch_size, tok.n_mels, tok.n_frames)
        model.eval()

        @torch.no_grad()
        def forward():
            model(x)

        report.speed = measure_speed(forward, audio_seconds, protocol)
    return report


def profile_to_csv(reports: list[ProfileReport]) -> str:
    """One CSV row per report; timing rows carry the protocol and machine."""
    lines = [
        "name,n_tokens,n_temporal,n_spectral,params,flops_total,flops_attention,"
        "activations,peak_bytes_estimate,audio_per_second,mean_run_seconds,"
        "runs,warmup_runs,batch_size,machine"
    ]
    for r in reports:
        s = r.speed
        timing = (
            f"{s.audio_per_second:.6g},{s.mean_run_seconds:.6g},{s.runs},"
            f"{s.warmup_runs},{s.batch_size},\"{s.machine}\""
            if s is not None
            else ",,,,,"
        )
        lines.append(
            f"{r.name},{r.n_tokens},{r.n_temporal},{r.n_spectral},{r.params},"
            f"{r.flops_total},{r.flops_attention},{r.activations},"
            f"{r.peak_bytes_estimate},{timing}"
        )
    return "\n".join(lines) + "\n"


def format_profile(report: ProfileReport) -> str:
    lines = [
        f"model              {report.name}",
        f"tokens             {report.n_tokens}"
        f" ({report.n_temporal} temporal + {report.n_spectral} spectral)",
        f"params             {report.params:,}",
        f"flops              {report.flops_total:,} ({report.flops_attention:,} attention)",
        f"activations        {report.activations:,} floats",
        f"peak bytes (est.)  {report.peak_bytes_estimate:,}",
    ]
    if report.speed is not None:
        s = report.speed
        lines += [
            f"audio/s            {s.audio_per_second:.1f}",
            f"mean run           {s.mean_run_seconds * 1e3:.2f} ms"
            f" ({s.runs} runs, {s.warmup_runs} warmup, batch {s.batch_size})",
            f"machine            {s.machine}",
        ]
    return "\n".join(lines)
