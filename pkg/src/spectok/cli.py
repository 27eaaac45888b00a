"""Command-line entry points.

    spectok gen-toy   --out DIR [--n 32] [--duration 24] [--seed 0]
    spectok train     --manifest CSV --out DIR [--preset tiny] [--variant gamma] ...
    spectok eval      --checkpoint CKPT --manifest CSV [--split test] [--threshold 0.5]
    spectok profile   [--variant gamma | --baseline vit] [--frames 3744] [--sweep ...]
    spectok tokenize  --wav FILE [--variant gamma] [--dump tokens.npy]

Every command takes --config FILE (YAML mapping of long option names);
explicit flags override file values which override built-in defaults, and
the effective configuration is echoed to <out>/config.yaml whenever a
command has an output directory. Exit codes: 0 ok, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .audio import SpectrogramConfig, compute_mel, read_wav, resample, stft_frame_count
from .augment import AugmentConfig
from .checkpoint import load_model
from .dataio import ManifestError, ToySpec, generate_toy, load_manifest
from .evaluation import ScoredExample, format_report, partitioned_report, report_to_csv
from .model import ENCODER_PRESETS, EncoderConfig, build_model
from .profiler import (
    TimingProtocol,
    format_profile,
    profile_model,
    profile_to_csv,
)
from .tokenizer import (
    ClipConfig,
    PatchConfig,
    PatchTokenizer,
    SpectroTemporalTokenizer,
    tokenize,
)
from .training import SpectrogramDataset, TrainConfig, score_split, train_loop


class UsageError(ValueError):
    pass


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with long-option defaults")


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags (parser defaults are SUPPRESS)."""
    eff = dict(defaults)
    given = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{cfg_path}: config must be a mapping")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"{cfg_path}: unknown config key {key!r}")
            eff[key] = value
    eff.update(given)
    return eff


def _echo_config(eff: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = {k: (str(v) if isinstance(v, Path) else v) for k, v in eff.items()}
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(clean, fh, sort_keys=True)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _resolve_clip(eff: dict) -> ClipConfig | PatchConfig:
    """Exactly one tokenizer family per run; bad clip geometry is a usage error."""
    if eff.get("baseline"):
        if eff["baseline"] != "vit":
            raise UsageError(f"unknown baseline {eff['baseline']!r}")
        if eff.get("temporal_only") or eff.get("spectral_only"):
            raise UsageError("--temporal-only/--spectral-only do not apply to --baseline vit")
        if eff["patch"] <= 0:
            raise UsageError(f"patch size must be positive, got {eff['patch']}")
        return PatchConfig(p=eff["patch"])
    if eff.get("temporal_only") and eff.get("spectral_only"):
        raise UsageError("--temporal-only and --spectral-only are mutually exclusive")
    temporal = not eff.get("spectral_only", False)
    spectral = not eff.get("temporal_only", False)
    try:
        if eff.get("clip_t") is not None or eff.get("clip_f") is not None:
            if eff.get("clip_t") is None or eff.get("clip_f") is None:
                raise UsageError("--clip-t and --clip-f must be given together")
            return ClipConfig(
                t=eff["clip_t"],
                f=eff["clip_f"],
                temporal_enabled=temporal,
                spectral_enabled=spectral,
            )
        return ClipConfig.from_variant(
            eff["variant"], temporal_enabled=temporal, spectral_enabled=spectral
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _build_tokenizer(kind, n_mels, n_frames, embed_dim):
    if isinstance(kind, PatchConfig):
        return PatchTokenizer(n_mels, n_frames, embed_dim, kind)
    return SpectroTemporalTokenizer(n_mels, n_frames, embed_dim, kind)


def _encoder_from(eff: dict) -> EncoderConfig:
    preset = eff["preset"]
    if preset not in ENCODER_PRESETS:
        raise UsageError(f"unknown preset {preset!r}, expected one of {sorted(ENCODER_PRESETS)}")
    return ENCODER_PRESETS[preset]


GEN_TOY_DEFAULTS = {"out": None, "n": 32, "duration": 24.0, "seed": 0}


def cmd_gen_toy(args: argparse.Namespace) -> int:
    eff = _merged(args, GEN_TOY_DEFAULTS)
    spec = ToySpec(n_per_class=eff["n"], duration=eff["duration"], seed=eff["seed"])
    out_dir = Path(eff["out"])
    manifest, entries = generate_toy(spec, out_dir)
    _echo_config(eff, out_dir)
    n_fake = sum(e.label == "fake" for e in entries)
    print(f"wrote {len(entries)} songs ({n_fake} fake) and {manifest}")
    return 0


TRAIN_DEFAULTS = {
    "manifest": None,
    "out": None,
    "preset": "tiny",
    "variant": "gamma",
    "baseline": None,
    "clip_t": None,
    "clip_f": None,
    "patch": 16,
    "temporal_only": False,
    "spectral_only": False,
    "frames": 704,
    "epochs": 20,
    "warmup_epochs": 2,
    "batch_size": 2,
    "lr": 3e-4,
    "weight_decay": 0.05,
    "label_smoothing": 0.02,
    "threshold": 0.5,
    "no_augment": False,
    "seed": 0,
}


def cmd_train(args: argparse.Namespace) -> int:
    eff = _merged(args, TRAIN_DEFAULTS)
    entries = load_manifest(eff["manifest"])
    root = Path(eff["manifest"]).parent
    out_dir = Path(eff["out"])
    spec_cfg = SpectrogramConfig(target_frames=eff["frames"])
    train_cfg = TrainConfig(
        epochs=eff["epochs"],
        warmup_epochs=eff["warmup_epochs"],
        base_lr=eff["lr"],
        weight_decay=eff["weight_decay"],
        batch_size=eff["batch_size"],
        label_smoothing=eff["label_smoothing"],
        seed=eff["seed"],
    )
    kind = _resolve_clip(eff)
    encoder = _encoder_from(eff)
    _seed_everything(eff["seed"])
    if isinstance(kind, PatchConfig):
        model = build_model(encoder, spec_cfg.n_mels, eff["frames"], patch=kind)
    else:
        model = build_model(encoder, spec_cfg.n_mels, eff["frames"], clip=kind)
    data = SpectrogramDataset(entries, spec_cfg, root=root)
    augment = None if eff["no_augment"] else AugmentConfig()
    _echo_config(eff, out_dir)
    result = train_loop(
        model,
        data,
        eff["frames"],
        train_cfg,
        augment=augment,
        out_dir=out_dir,
        threshold=eff["threshold"],
    )
    if result.aborted:
        print(f"error: training aborted: {result.abort_reason}", file=sys.stderr)
        return 1
    print(
        f"best valid F1 {result.best_f1:.4f} at epoch {result.best_epoch};"
        f" checkpoint {result.checkpoint_path}"
    )
    return 0


EVAL_DEFAULTS = {
    "checkpoint": None,
    "manifest": None,
    "split": "test",
    "threshold": 0.5,
    "batch_size": 8,
    "out": None,
}


def cmd_eval(args: argparse.Namespace) -> int:
    eff = _merged(args, EVAL_DEFAULTS)
    model, meta = load_model(eff["checkpoint"])
    entries = load_manifest(eff["manifest"])
    root = Path(eff["manifest"]).parent
    picked = [e for e in entries if e.split == eff["split"]]
    if not picked:
        raise ValueError(f"no entries with split {eff['split']!r}")
    spec_meta = meta.get("spectrogram")
    if spec_meta is None:
        raise ValueError("checkpoint lacks spectrogram config metadata")
    spec_cfg = SpectrogramConfig(**spec_meta)
    frames = meta.get("target_frames", spec_cfg.target_frames)
    data = SpectrogramDataset(picked, spec_cfg, root=root)
    scores, _labels = score_split(
        model, data, list(range(len(picked))), frames, eff["batch_size"]
    )
    examples = [
        ScoredExample(
            score=float(s),
            label=e.label_index,
            partitions={
                "algorithm": e.algorithm,
                "fake_type": e.fake_type,
                "singer_seen": e.singer_seen,
            },
        )
        for s, e in zip(scores, picked)
    ]
    report = partitioned_report(examples, threshold=eff["threshold"])
    print(format_report(report))
    if eff["out"]:
        out_dir = Path(eff["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        report_to_csv(report, out_dir / "report.csv")
        (out_dir / "report.txt").write_text(format_report(report) + "\n")
        _echo_config(eff, out_dir)
    return 0


PROFILE_DEFAULTS = {
    "preset": "small",
    "variant": "gamma",
    "baseline": None,
    "clip_t": None,
    "clip_f": None,
    "patch": 16,
    "temporal_only": False,
    "spectral_only": False,
    "frames": 3744,
    "mels": 128,
    "measure": False,
    "runs": 100,
    "warmup": 5,
    "seconds": None,
    "sweep": None,
    "out": None,
    "seed": 0,
}


def cmd_profile(args: argparse.Namespace) -> int:
    eff = _merged(args, PROFILE_DEFAULTS)
    kind = _resolve_clip(eff)
    encoder = _encoder_from(eff)
    hop, sr = SpectrogramConfig().hop_length, SpectrogramConfig().sample_rate
    _seed_everything(eff["seed"])

    def build(frames: int):
        if isinstance(kind, PatchConfig):
            return build_model(encoder, eff["mels"], frames, patch=kind)
        return build_model(encoder, eff["mels"], frames, clip=kind)

    name = eff["baseline"] or (
        eff["variant"] if eff.get("clip_t") is None else f"clip{eff['clip_t']}x{eff['clip_f']}"
    )
    if eff["sweep"]:
        frames_list = [int(v) for v in str(eff["sweep"]).split(",") if v]
        rows = [profile_model(build(fr), name=f"{name}@{fr}") for fr in frames_list]
        text = profile_to_csv(rows)
        print(text, end="")
        if eff["out"]:
            out_dir = Path(eff["out"])
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "sweep.csv").write_text(text)
            _echo_config(eff, out_dir)
        return 0
    audio_seconds = eff["seconds"] or eff["frames"] * hop / sr
    protocol = TimingProtocol(warmup_runs=eff["warmup"], timed_runs=eff["runs"])
    report = profile_model(
        build(eff["frames"]),
        name=name,
        measure=eff["measure"],
        audio_seconds=audio_seconds,
        protocol=protocol,
    )
    print(format_profile(report))
    if eff["out"]:
        out_dir = Path(eff["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "profile.csv").write_text(profile_to_csv([report]))
        _echo_config(eff, out_dir)
    return 0


TOKENIZE_DEFAULTS = {
    "wav": None,
    "variant": "gamma",
    "baseline": None,
    "clip_t": None,
    "clip_f": None,
    "patch": 16,
    "temporal_only": False,
    "spectral_only": False,
    "frames": None,
    "embed_dim": 16,
    "dump": None,
    "seed": 0,
}


def cmd_tokenize(args: argparse.Namespace) -> int:
    eff = _merged(args, TOKENIZE_DEFAULTS)
    kind = _resolve_clip(eff)
    buf = read_wav(eff["wav"])
    base = SpectrogramConfig()
    if buf.sample_rate != base.sample_rate:
        buf = resample(buf, base.sample_rate)
    frames = eff["frames"] or stft_frame_count(len(buf.samples), base)
    cfg = dataclasses.replace(base, target_frames=frames)
    _seed_everything(eff["seed"])
    mel = compute_mel(buf, cfg, mode="eval")
    tok = _build_tokenizer(kind, cfg.n_mels, frames, eff["embed_dim"])
    seq = tokenize(torch.from_numpy(mel.values), tok)
    print(
        f"{eff['wav']}: {cfg.n_mels}x{frames} spectrogram ->"
        f" {seq.n_tokens} tokens ({seq.n_temporal} temporal + {seq.n_spectral} spectral)"
        f" x {tok.embed_dim} dims"
    )
    if eff["dump"]:
        np.save(eff["dump"], seq.tokens.detach().numpy())
        print(f"tokens written to {eff['dump']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectok", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("gen-toy", help="generate the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=S, help="songs per class")
    p.add_argument("--duration", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    _add_config_arg(p)
    p.set_defaults(func=cmd_gen_toy)

    def tokenizer_flags(p):
        p.add_argument("--variant", choices=("alpha", "beta", "gamma"), default=S)
        p.add_argument("--baseline", choices=("vit",), default=S)
        p.add_argument("--clip-t", dest="clip_t", type=int, default=S)
        p.add_argument("--clip-f", dest="clip_f", type=int, default=S)
        p.add_argument("--patch", type=int, default=S, help="patch size for --baseline vit")
        p.add_argument("--temporal-only", dest="temporal_only", action="store_true", default=S)
        p.add_argument("--spectral-only", dest="spectral_only", action="store_true", default=S)

    p = sub.add_parser("train", help="train a classifier on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=tuple(ENCODER_PRESETS), default=S)
    tokenizer_flags(p)
    p.add_argument("--frames", type=int, default=S, help="spectrogram frames fed to the model")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=S)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--no-augment", dest="no_augment", action="store_true", default=S)
    p.add_argument("--seed", type=int, default=S)
    _add_config_arg(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default=S)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--out", default=S)
    _add_config_arg(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="analytic FLOPs/activations and optional timing")
    p.add_argument("--preset", choices=tuple(ENCODER_PRESETS), default=S)
    tokenizer_flags(p)
    p.add_argument("--frames", type=int, default=S)
    p.add_argument("--mels", type=int, default=S)
    p.add_argument("--measure", action="store_true", default=S)
    p.add_argument("--runs", type=int, default=S)
    p.add_argument("--warmup", type=int, default=S)
    p.add_argument("--seconds", type=float, default=S, help="audio seconds the input stands for")
    p.add_argument("--sweep", default=S, help="comma-separated frame counts")
    p.add_argument("--out", default=S)
    p.add_argument("--seed", type=int, default=S)
    _add_config_arg(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("tokenize", help="inspect the token layout of a WAV file")
    p.add_argument("--wav", required=True)
    tokenizer_flags(p)
    p.add_argument("--frames", type=int, default=S)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=S)
    p.add_argument("--dump", default=S, help="write the token matrix to this .npy file")
    p.add_argument("--seed", type=int, default=S)
    _add_config_arg(p)
    p.set_defaults(func=cmd_tokenize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
