"""Training recipe: smoothed BCE, warmup+cosine schedule, decoupled AdamW,
and the epoch loop with MixUp/SpecAugment, validation F1/EER tracking and
best-checkpoint saving.

The optimizer update and the schedule are written out explicitly so they can
be unit-tested against closed forms. Weight decay is decoupled (applied as a
separate shrink before the moment step) and skips every 1-d parameter, which
here means exactly the LayerNorm weights/biases and all bias vectors;
position embeddings and projection matrices do decay.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio as audio_mod
from .audio import SpectrogramConfig, fit_frames, read_wav, resample
from .augment import AugmentConfig, mixup, spec_augment
from .checkpoint import save_model
from .dataio import ManifestEntry
from .evaluation import binary_metrics, confusion, eer
from .model import NonFiniteActivationError, SpectroTemporalClassifier


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    base_lr: float = 3e-4
    min_lr_ratio: float = 0.01
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    label_smoothing: float = 0.02
    grad_clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(
                f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}/{self.epochs}"
            )
        if self.base_lr <= 0 or not 0 <= self.min_lr_ratio <= 1:
            raise ValueError("base_lr must be positive and min_lr_ratio in [0, 1]")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


def bce_smoothed(logits: torch.Tensor, targets: torch.Tensor, smoothing: float) -> torch.Tensor:
    """Per-example binary cross-entropy on logits with symmetric label smoothing.

    Targets move to y * (1 - s) + s / 2; the loss uses the overflow-safe form
    max(z, 0) - z * y + log(1 + exp(-|z|)).
    """
    y = targets * (1.0 - smoothing) + 0.5 * smoothing
    return torch.clamp(logits, min=0) - logits * y + torch.log1p(torch.exp(-logits.abs()))


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at a global step: linear warmup, then cosine to the floor.

    The cosine phase reaches min_lr_ratio * base_lr exactly at the last step
    (total_steps - 1); steps past the end stay at the floor.
    """
    if steps_per_epoch <= 0:
        raise ValueError(f"steps_per_epoch must be positive, got {steps_per_epoch}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    floor = cfg.base_lr * cfg.min_lr_ratio
    last = total - 1
    if last <= warm:
        return cfg.base_lr
    u = min(1.0, (step - warm) / (last - warm))
    return floor + 0.5 * (cfg.base_lr - floor) * (1.0 + math.cos(math.pi * u))


@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0


def init_optimizer_state(model: torch.nn.Module) -> OptimizerState:
    return OptimizerState(
        exp_avg={n: torch.zeros_like(p) for n, p in model.named_parameters()},
        exp_avg_sq={n: torch.zeros_like(p) for n, p in model.named_parameters()},
    )


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-AdamW update, in place. Decay skips 1-d parameters."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if cfg.weight_decay != 0.0 and p.dim() >= 2:
            p.mul_(1.0 - lr * cfg.weight_decay)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))


class NonFiniteGradError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def backward(
    model: SpectroTemporalClassifier,
    x: torch.Tensor,
    targets: torch.Tensor,
    smoothing: float,
) -> tuple[dict[str, torch.Tensor], float]:
    """Mean smoothed-BCE loss over the batch and its gradients, by name."""
    logits = model(x)
    loss = bce_smoothed(logits, targets, smoothing).mean()
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    for name, g in zip(names, grads):
        if not torch.isfinite(g).all():
            raise NonFiniteGradError(name)
    return dict(zip(names, grads)), float(loss.detach())


class SpectrogramDataset:
    """Manifest-backed dataset that caches full-length standardized log-mels.

    The frontend (STFT, mel, log, standardize) runs once per file at native
    length; pad/crop to the model's frame count happens per draw, which is
    exactly what compute_mel does since standardization precedes length
    fitting there too.
    """

    def __init__(
        self,
        entries: list[ManifestEntry],
        config: SpectrogramConfig,
        root: str | Path = ".",
    ):
        self.entries = entries
        self.config = config
        root = Path(root)
        self.features: list[np.ndarray] = []
        self.labels = np.array([e.label_index for e in entries], dtype=np.int64)
        bank = audio_mod.mel_filterbank(config)
        for entry in entries:
            buf = read_wav(root / entry.path)
            if buf.sample_rate != config.sample_rate:
                buf = resample(buf, config.sample_rate)
            spec = audio_mod.stft_magnitude(buf.samples, config)
            logmel = np.log(bank @ spec + audio_mod.LOG_OFFSET)
            self.features.append(audio_mod.standardize(logmel).astype(np.float32))

    def split_indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def sample(
        self, index: int, target_frames: int, mode: str, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        return fit_frames(self.features[index], target_frames, mode, rng)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_f1: float
    valid_eer: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_f1: float
    best_epoch: int
    checkpoint_path: Path | None
    aborted: bool = False
    abort_reason: str = ""


@torch.no_grad()
def score_split(
    model: SpectroTemporalClassifier,
    data: SpectrogramDataset,
    indices: list[int],
    target_frames: int,
    batch_size: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic eval-mode scores (fake probabilities) for a split."""
    was_training = model.training
    model.eval()
    scores = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        x = np.stack([data.sample(i, target_frames, "eval") for i in chunk])
        logits = model(torch.from_numpy(x))
        scores.extend(torch.sigmoid(logits).tolist())
    if was_training:
        model.train()
    return np.asarray(scores), data.labels[indices]


def train_loop(
    model: SpectroTemporalClassifier,
    data: SpectrogramDataset,
    target_frames: int,
    cfg: TrainConfig,
    augment: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
    threshold: float = 0.5,
    extra_meta: dict | None = None,
    log=print,
) -> TrainResult:
    """Run the full recipe and keep the checkpoint with best validation F1.

    Uses the manifest's train split for updates and valid split for model
    selection. Aborts (keeping the last best checkpoint) if the loss or any
    gradient goes non-finite. Pins torch to one thread so runs with the same
    seed are bitwise-reproducible; multi-threaded reductions are not.
    """
    torch.set_num_threads(1)
    rng = np.random.default_rng(cfg.seed)
    train_idx = data.split_indices("train")
    valid_idx = data.split_indices("valid")
    if not train_idx:
        raise ValueError("manifest has no train split entries")
    if not valid_idx:
        raise ValueError("manifest has no valid split entries")
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    params = dict(model.named_parameters())
    state = init_optimizer_state(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "best.ckpt"
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                ["epoch", "lr", "train_loss", "valid_f1", "valid_eer", "seconds"]
            )

    history: list[EpochStats] = []
    best_f1, best_epoch = -1.0, -1
    meta = dict(extra_meta or {})
    meta.setdefault("spectrogram", dataclasses.asdict(data.config))
    meta["target_frames"] = target_frames
    meta["train_config"] = dataclasses.asdict(cfg)
    global_step = 0
    aborted = False
    abort_reason = ""

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        lr = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            feats = [data.sample(int(i), target_frames, "train", rng) for i in batch]
            targets = [float(data.labels[int(i)]) for i in batch]
            if augment is not None:
                partner = rng.permutation(len(batch))
                feats, targets = _augment_batch(feats, targets, partner, augment, rng)
            x = torch.from_numpy(np.stack(feats))
            y = torch.tensor(targets, dtype=x.dtype)
            lr = lr_at(global_step, steps_per_epoch, cfg)
            try:
                grads, loss = backward(model, x, y, cfg.label_smoothing)
            except (NonFiniteGradError, NonFiniteActivationError) as exc:
                aborted, abort_reason = True, str(exc)
                break
            if not math.isfinite(loss):
                aborted, abort_reason = True, f"non-finite loss {loss}"
                break
            if cfg.grad_clip_norm is not None:
                _clip_grads(grads, cfg.grad_clip_norm)
            adamw_step(params, grads, state, lr, cfg)
            losses.append(loss)
            global_step += 1
        if aborted:
            log(f"epoch {epoch}: aborted ({abort_reason})")
            break

        scores, labels = score_split(model, data, valid_idx, target_frames, cfg.batch_size)
        m = binary_metrics(confusion(scores, labels, threshold))
        both = (labels == 0).any() and (labels == 1).any()
        valid_eer = eer(scores, labels) if both else float("nan")
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            valid_f1=m.f1,
            valid_eer=valid_eer,
            lr=lr,
            seconds=time.perf_counter() - tic,
        )
        history.append(stats)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [
                        stats.epoch,
                        f"{stats.lr:.8f}",
                        f"{stats.train_loss:.6f}",
                        f"{stats.valid_f1:.6f}",
                        f"{stats.valid_eer:.6f}",
                        f"{stats.seconds:.3f}",
                    ]
                )
        log(
            f"epoch {stats.epoch}: loss {stats.train_loss:.4f}"
            f" valid_f1 {stats.valid_f1:.4f} valid_eer {stats.valid_eer:.4f}"
            f" lr {stats.lr:.2e} ({stats.seconds:.1f}s)"
        )
        if m.f1 > best_f1:
            best_f1, best_epoch = m.f1, epoch
            if ckpt_path is not None:
                save_model(ckpt_path, model, {**meta, "epoch": epoch, "valid_f1": m.f1})

    return TrainResult(
        history=history,
        best_f1=best_f1,
        best_epoch=best_epoch,
        checkpoint_path=ckpt_path,
        aborted=aborted,
        abort_reason=abort_reason,
    )


def _augment_batch(feats, targets, partner, cfg: AugmentConfig, rng):
    mixed_feats, mixed_targets = [], []
    for j, feat in enumerate(feats):
        mf, mt = mixup(feat, feats[int(partner[j])], targets[j], targets[int(partner[j])], cfg, rng)
        mixed_feats.append(spec_augment(mf, cfg, rng))
        mixed_targets.append(mt)
    return mixed_feats, mixed_targets


def _clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
