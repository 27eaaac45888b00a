"""Manifest IO, the train/valid-test leakage rule, and the toy corpus.

The manifest is a CSV with the fixed header

    path,label,algorithm,fake_type,split,group_id,singer_seen,duration

group_id names the generation recipe a song came from; songs sharing a
group_id must not straddle train and valid/test (valid and test together
form one side of the split rule).

The toy generator builds a corpus whose classes differ only in song-scale
structure, so models that see whole songs can separate them while short
crops carry almost no signal:

* both classes: a few sinusoidal "voice" tones with slow random loudness
  envelopes, a short tonal motif pasted in a few times, pink-ish noise, a
  smooth loudness drift, and a sectioned mastering gain whose level moves
  during the song. Each recipe (tone set + motif waveform) appears in both
  classes, so carrier identity says nothing about the label;
* fake: one key for the whole song, the motif repeats on an exact R-second
  grid (sample-aligned, identical waveform), the mastering gain glides
  smoothly between section levels, and the render holds full level to the
  last sample;
* real: a human cover. Midway through, the whole tone set modulates by a
  common ratio (a key change, equal-power crossfade), the motif onsets sit
  off the grid (no pair near a multiple of R), the mastering cuts hard at
  section boundaries, and the outro fades down like a performance ending.

A short crop from the middle shows the same picture for both classes: the
same number of active tone bands, at most one motif, some nonzero loudness
offset drawn from the same section-level distribution. The label lives in
song-scale structure: whether the song's ending fades or stops cold,
whether section transitions are cuts or glides, whether the motifs land on
a grid, and whether the key ever changes. None of these fit inside a 2 s
window taken from the body of the song; a view that spans the song sees
them all, the fade-out loudest of all. Every tone frequency is snapped to
the 1/R Hz grid so each carrier is exactly R-periodic; the class gap in
raw-audio autocorrelation at lag R * sample_rate then isolates motif
alignment plus the key change, which is what the autocorrelation oracle in
the tests checks. fake_type and algorithm values are reporting labels for
the partitioned metrics, not audio properties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav

MANIFEST_FIELDS = (
    "path",
    "label",
    "algorithm",
    "fake_type",
    "split",
    "group_id",
    "singer_seen",
    "duration",
)

LABELS = ("real", "fake")
FAKE_TYPES = ("half", "mostly", "full", "none")
SPLITS = ("train", "valid", "test")
SINGER_SEEN = ("seen", "unseen", "n/a")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    algorithm: str
    fake_type: str
    split: str
    group_id: str
    singer_seen: str
    duration: float

    def __post_init__(self):
        if not self.path:
            raise ManifestError("empty path")
        if self.label not in LABELS:
            raise ManifestError(f"bad label {self.label!r}")
        if self.fake_type not in FAKE_TYPES:
            raise ManifestError(f"bad fake_type {self.fake_type!r}")
        if self.label == "real" and self.fake_type != "none":
            raise ManifestError(f"real song {self.path!r} has fake_type {self.fake_type!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"bad split {self.split!r}")
        if not self.group_id:
            raise ManifestError(f"empty group_id for {self.path!r}")
        if self.singer_seen not in SINGER_SEEN:
            raise ManifestError(f"bad singer_seen {self.singer_seen!r}")
        if not self.duration > 0:
            raise ManifestError(f"non-positive duration for {self.path!r}")

    @property
    def label_index(self) -> int:
        """fake is the positive class."""
        return 1 if self.label == "fake" else 0


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse and validate a manifest CSV; errors carry 1-based line numbers."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    if tuple(rows[0]) != MANIFEST_FIELDS:
        raise ManifestError(f"{path}:1: bad header {rows[0]!r}")
    entries = []
    seen_paths: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_FIELDS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
        rec = dict(zip(MANIFEST_FIELDS, row))
        try:
            entry = ManifestEntry(
                path=rec["path"],
                label=rec["label"],
                algorithm=rec["algorithm"],
                fake_type=rec["fake_type"],
                split=rec["split"],
                group_id=rec["group_id"],
                singer_seen=rec["singer_seen"],
                duration=float(rec["duration"]),
            )
        except (ManifestError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if entry.path in seen_paths:
            raise ManifestError(
                f"{path}:{lineno}: duplicate path {entry.path!r}"
                f" (first at line {seen_paths[entry.path]})"
            )
        seen_paths[entry.path] = lineno
        entries.append(entry)
    return entries


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow(
                [
                    e.path,
                    e.label,
                    e.algorithm,
                    e.fake_type,
                    e.split,
                    e.group_id,
                    e.singer_seen,
                    f"{e.duration:g}",
                ]
            )


@dataclass(frozen=True)
class LeakageViolation:
    group_id: str
    splits: tuple[str, ...]


def check_leakage(entries: list[ManifestEntry]) -> list[LeakageViolation]:
    """Groups appearing in train and in valid or test. Empty list means ok."""
    by_group: dict[str, set[str]] = {}
    for e in entries:
        by_group.setdefault(e.group_id, set()).add(e.split)
    violations = []
    for gid in sorted(by_group):
        splits = by_group[gid]
        if "train" in splits and splits & {"valid", "test"}:
            violations.append(LeakageViolation(gid, tuple(sorted(splits))))
    return violations


@dataclass(frozen=True)
class ToySpec:
    n_per_class: int = 32
    duration: float = 24.0
    sample_rate: int = 16000
    seed: int = 0
    motif_period: float = 6.0
    motif_length: float = 0.6
    motif_amp: float = 0.6
    n_tones: int = 4
    tone_amp: float = 0.16
    noise_amp: float = 0.02
    envelope_spacing: float = 4.0
    envelope_sigma: float = 0.15
    drift_sigma: float = 0.06
    level_sigma: float = 0.12
    level_jumps: int = 3
    level_min_step: float = 0.08
    level_ramp: float = 4.0
    fade_time: float = 2.5
    fade_depth: float = 1.8
    modulate_lo: float = 1.10
    modulate_hi: float = 1.25
    modulate_frac_lo: float = 0.35
    modulate_frac_hi: float = 0.65

    def __post_init__(self):
        if self.n_per_class < 2:
            raise ValueError(f"n_per_class must be >= 2, got {self.n_per_class}")
        if self.duration < 2 * self.motif_period + 2:
            raise ValueError(
                f"duration {self.duration} too short for motif period {self.motif_period}"
            )
        if self.sample_rate <= 0 or self.motif_length <= 0:
            raise ValueError("sample_rate and motif_length must be positive")
        if self.level_jumps < 1 or self.level_sigma <= 0:
            raise ValueError("the mastering profile needs at least one level change")
        if not 0 < self.level_min_step < 3 * self.level_sigma:
            raise ValueError("level_min_step must be positive and well inside the level spread")
        if not 0 < self.fade_time < self.duration / 4:
            raise ValueError("fade_time must be positive and short next to the song")
        if self.fade_depth <= 0:
            raise ValueError(f"fade_depth must be positive, got {self.fade_depth}")
        if self.level_ramp <= 0:
            raise ValueError(f"level_ramp must be positive, got {self.level_ramp}")
        if self.drift_sigma < 0:
            raise ValueError(f"drift_sigma must be non-negative, got {self.drift_sigma}")
        if not 1.0 < self.modulate_lo <= self.modulate_hi:
            raise ValueError("key-change ratios must satisfy 1 < modulate_lo <= modulate_hi")
        if not 0.0 < self.modulate_frac_lo <= self.modulate_frac_hi < 1.0:
            raise ValueError("key-change position fractions must sit strictly inside the song")

    @property
    def n_motifs(self) -> int:
        """Motif repeats per song (both classes): what the exact grid fits."""
        return int((self.duration - 1.5) / self.motif_period) + 1


def _grid_freq(rng: np.random.Generator, lo: float, hi: float, period: float) -> float:
    """Random frequency snapped to the 1/period Hz grid (exactly period-periodic)."""
    f = rng.uniform(lo, hi)
    return round(f * period) / period


def _pink_noise(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spec *= np.sqrt(50.0 / (freqs + 50.0))
    out = np.fft.irfft(spec, n=n)
    return out / max(out.std(), 1e-12)


def _slow_log_envelope(
    rng: np.random.Generator, times: np.ndarray, duration: float, spacing: float, sigma: float
) -> np.ndarray:
    n_ctrl = int(duration / spacing) + 2
    ctrl_t = np.linspace(0.0, duration, n_ctrl)
    ctrl_v = rng.normal(0.0, sigma, n_ctrl)
    return np.exp(np.interp(times, ctrl_t, ctrl_v))


def _level_profile(
    rng: np.random.Generator, times: np.ndarray, spec: ToySpec, smooth: bool
) -> np.ndarray:
    """Sectioned mastering gain. Section boundaries and levels are drawn the
    same way for both classes, so how loud any short window is says nothing
    about the label. The classes differ only in how one level turns into the
    next: a real engineer cuts instantly between takes, the synthesizer
    glides over a level_ramp seconds long raised-cosine ramp. A short crop
    away from a transition looks identical either way."""
    for _ in range(100):
        edges = 2.0 + np.sort(rng.uniform(0.0, 1.0, spec.level_jumps)) * (spec.duration - 4.0)
        if np.diff(np.concatenate([[2.0], edges, [spec.duration - 2.0]])).min() >= 3.0:
            break
    for _ in range(100):
        logs = rng.normal(0.0, spec.level_sigma, spec.level_jumps + 1)
        if np.abs(np.diff(logs)).min() >= spec.level_min_step:
            break
    out = np.full_like(times, logs[0])
    for edge, log_level in zip(edges, logs[1:]):
        if smooth:
            w = np.clip((times - edge) / spec.level_ramp + 0.5, 0.0, 1.0)
            w = 0.5 - 0.5 * np.cos(np.pi * w)
            out = out * (1.0 - w) + log_level * w
        else:
            out[times >= edge] = log_level
    return np.exp(out)


def _motif_snippet(rng: np.random.Generator, spec: ToySpec) -> np.ndarray:
    n = int(spec.motif_length * spec.sample_rate)
    tau = np.arange(n) / spec.sample_rate
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    out = np.zeros(n)
    for _ in range(3):
        f = _grid_freq(rng, 500.0, 2600.0, spec.motif_period)
        out += rng.uniform(0.7, 1.0) * np.sin(2.0 * np.pi * f * tau + rng.uniform(0, 2 * np.pi))
    return spec.motif_amp * window * out / 3.0


def _periodic_onsets(rng: np.random.Generator, spec: ToySpec) -> np.ndarray:
    period_samples = int(round(spec.motif_period * spec.sample_rate))
    # the whole periodic train, last repeat included, must fit inside the song
    hi = min(
        spec.motif_period - spec.motif_length - 0.3,
        spec.duration - spec.motif_period * (spec.n_motifs - 1) - spec.motif_length - 0.1,
    )
    if hi <= 0.3:
        raise ValueError(
            f"duration {spec.duration} cannot fit {spec.n_motifs} motifs at period"
            f" {spec.motif_period}; adjust duration or motif_period"
        )
    start = rng.uniform(0.3, hi)
    first = int(round(start * spec.sample_rate))
    return first + period_samples * np.arange(spec.n_motifs)

def _aperiodic_onsets(rng: np.random.Generator, spec: ToySpec) -> np.ndarray:
    """Motif onsets with no pair of gaps near a multiple of the period."""
    lo = 0.3
    hi = spec.duration - spec.motif_length - 0.3
    n = spec.n_motifs
    for _ in range(5000):
        times = np.sort(rng.uniform(lo, hi, n))
        if np.diff(times).min() < 1.0:
            continue
        pair_gaps = (times[None, :] - times[:, None])[np.triu_indices(n, 1)]
        off_grid = np.abs(pair_gaps - np.round(pair_gaps / spec.motif_period) * spec.motif_period)
        if off_grid.min() >= 0.35:
            return np.round(times * spec.sample_rate).astype(np.int64)
    raise RuntimeError("could not place aperiodic motif onsets; widen the margins")


def _render_song(
    rng: np.random.Generator,
    spec: ToySpec,
    tone_freqs: np.ndarray,
    motif: np.ndarray,
    is_fake: bool,
) -> np.ndarray:
    n = int(spec.duration * spec.sample_rate)
    times = np.arange(n) / spec.sample_rate
    song = np.zeros(n)
    if is_fake:
        w_before = np.ones_like(times)
    else:
        # the cover's key change: every tone modulates by one common ratio at
        # one common moment, with a short equal-power crossfade (no click, no
        # level dip a local detector could key on)
        t_change = spec.duration * rng.uniform(spec.modulate_frac_lo, spec.modulate_frac_hi)
        ratio = rng.uniform(spec.modulate_lo, spec.modulate_hi) ** (2.0 * rng.integers(0, 2) - 1.0)
        fade = np.clip((times - t_change) / 0.2 + 0.5, 0.0, 1.0)
        w_before = np.cos(0.5 * np.pi * fade)
    w_after = np.sqrt(1.0 - w_before**2)
    for f in tone_freqs:
        env = _slow_log_envelope(
            rng, times, spec.duration, spec.envelope_spacing, spec.envelope_sigma
        )
        tone = w_before * np.sin(2.0 * np.pi * f * times + rng.uniform(0, 2 * np.pi))
        if not is_fake:
            f2 = round(f * ratio * spec.motif_period) / spec.motif_period
            tone += w_after * np.sin(2.0 * np.pi * f2 * times + rng.uniform(0, 2 * np.pi))
        song += spec.tone_amp * env * tone
    onsets = _periodic_onsets(rng, spec) if is_fake else _aperiodic_onsets(rng, spec)
    for onset in onsets:
        song[onset : onset + len(motif)] += motif[: n - onset]
    song += spec.noise_amp * _pink_noise(rng, n, spec.sample_rate)
    # Loudness dynamics share one recipe across classes (same drift scale,
    # same section levels); fakes glide between sections while reals cut.
    drift = _slow_log_envelope(rng, times, spec.duration, spec.envelope_spacing, spec.drift_sigma)
    song *= drift * _level_profile(rng, times, spec, smooth=is_fake)
    if not is_fake:
        # a cover ends like a performance: the outro fades down. The
        # synthesizer holds full level to the last sample. Nothing short of a
        # view that reaches the song's end can see this.
        ramp = np.clip((times - (spec.duration - spec.fade_time)) / spec.fade_time, 0.0, 1.0)
        song *= np.exp(-spec.fade_depth * (3.0 - 2.0 * ramp) * ramp**2)
    # equalize average loudness per song (the log-mel frontend removes global
    # scale anyway); clamp the rare hot song instead of peak-normalizing all,
    # which would let the loudest section set the whole song's scale
    song *= 0.08 / max(np.abs(song).mean(), 1e-9)
    peak = np.abs(song).max()
    if peak > 0.99:
        song *= 0.99 / peak
    return song


def generate_toy(spec: ToySpec, out_dir: str | Path) -> tuple[Path, list[ManifestEntry]]:
    """Write n_per_class songs per class plus a manifest; same seed, same bytes.

    Fakes come in recipe pairs sharing a group_id (same tones and motif,
    fresh phases/noise/placement), so the leakage rule has something real
    to protect. Every recipe is also rendered as real covers, which keeps
    tone and motif identity class-independent. Reals are one-per-group; their singer_seen field marks
    whether the song's tone set also appears in the train split.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries: list[ManifestEntry] = []

    def song_splits(count: int) -> list[str]:
        n_valid = max(1, count // 5)
        n_test = max(1, count // 5)
        if n_valid + n_test > count:
            n_valid, n_test = 1, count - 1
        return ["valid"] * n_valid + ["test"] * n_test + ["train"] * (count - n_valid - n_test)

    # One recipe (tone set + motif waveform) per group. Each recipe is rendered
    # both as fakes and as real covers, so carrier identity carries no label
    # information and only the long-range dynamics separate the classes.
    n_groups = spec.n_per_class // 2
    extra = spec.n_per_class - 2 * n_groups
    group_sizes = [2] * n_groups + [1] * extra
    recipes = []
    for _ in range(len(group_sizes)):
        tone_freqs = np.array(
            [_grid_freq(rng, 180.0, 2800.0, spec.motif_period) for _ in range(spec.n_tones)]
        )
        recipes.append((tone_freqs, _motif_snippet(rng, spec)))

    # fakes: n_per_class songs as pairs from the group recipes
    fake_splits = song_splits(len(group_sizes))
    fake_types = ("full", "mostly", "half")
    song_idx = 0
    for g, (size, split) in enumerate(zip(group_sizes, fake_splits)):
        tone_freqs, motif = recipes[g]
        for _ in range(size):
            samples = _render_song(rng, spec, tone_freqs, motif, is_fake=True)
            rel = f"wav/fake_{song_idx:03d}.wav"
            write_wav(out_dir / rel, AudioBuffer(samples, spec.sample_rate), fmt="pcm16")
            entries.append(
                ManifestEntry(
                    path=rel,
                    label="fake",
                    algorithm="toysynth_a" if g % 2 == 0 else "toysynth_b",
                    fake_type=fake_types[g % len(fake_types)],
                    split=split,
                    group_id=f"grp_f{g:03d}",
                    singer_seen="n/a",
                    duration=spec.duration,
                )
            )
            song_idx += 1

    # reals: covers of the group recipes. Train reals stick to train-side
    # recipes; holdout reals alternate between train-side recipes ("seen"
    # singer) and holdout-side recipes ("unseen" singer).
    real_splits = song_splits(spec.n_per_class)
    train_groups = [g for g, s in enumerate(fake_splits) if s == "train"]
    holdout_groups = [g for g, s in enumerate(fake_splits) if s != "train"]
    holdout_rows = [i for i, s in enumerate(real_splits) if s != "train"]
    unseen_rows = set(holdout_rows[::2])
    seen_counter = 0
    unseen_counter = 0
    real_groups = []
    for i in range(spec.n_per_class):
        if i in unseen_rows and holdout_groups:
            g = holdout_groups[unseen_counter % len(holdout_groups)]
            unseen_counter += 1
        else:
            pool = train_groups or holdout_groups
            g = pool[seen_counter % len(pool)]
            seen_counter += 1
        real_groups.append(g)
    # a singer counts as seen if any train song (fake or real) uses its recipe
    train_side = {g for g, s in zip(range(len(group_sizes)), fake_splits) if s == "train"}
    train_side |= {g for g, s in zip(real_groups, real_splits) if s == "train"}
    for i, (g, split) in enumerate(zip(real_groups, real_splits)):
        tone_freqs, motif = recipes[g]
        samples = _render_song(rng, spec, tone_freqs, motif, is_fake=False)
        rel = f"wav/real_{i:03d}.wav"
        write_wav(out_dir / rel, AudioBuffer(samples, spec.sample_rate), fmt="pcm16")
        entries.append(
            ManifestEntry(
                path=rel,
                label="real",
                algorithm="toyreal",
                fake_type="none",
                split=split,
                group_id=f"grp_r{i:03d}",
                singer_seen="seen" if g in train_side else "unseen",
                duration=spec.duration,
            )
        )

    manifest_path = out_dir / "manifest.csv"
    write_manifest(entries, manifest_path)
    loaded = load_manifest(manifest_path)
    violations = check_leakage(loaded)
    if violations:
        raise RuntimeError(f"toy generator produced leakage: {violations}")
    return manifest_path, loaded
