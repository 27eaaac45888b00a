import csv
import dataclasses
import math

import mpmath
import numpy as np
import pytest
import torch

from spectok.audio import AudioBuffer, SpectrogramConfig, compute_mel, write_wav
from spectok.augment import AugmentConfig
from spectok.checkpoint import load_model
from spectok.dataio import ManifestEntry
from spectok.model import EncoderConfig, build_model
from spectok.tokenizer import ClipConfig
from spectok.training import (
    NonFiniteGradError,
    SpectrogramDataset,
    TrainConfig,
    adamw_step,
    backward,
    bce_smoothed,
    init_optimizer_state,
    lr_at,
    score_split,
    train_loop,
)

SMALL_CFG = SpectrogramConfig(n_mels=32, target_frames=32)
FRAMES = 32


def small_model(seed=0, n_layers=2):
    torch.manual_seed(seed)
    enc = EncoderConfig(embed_dim=16, n_heads=2, n_layers=n_layers, mlp_ratio=2.67)
    return build_model(enc, 32, FRAMES, clip=ClipConfig(t=4, f=4))


def toy_corpus(tmp_path, n_train=6, n_valid=2, n_test=2):
    """Tiny trivially-separable corpus: fakes carry an 880 Hz tone, reals 220 Hz."""
    rng = np.random.default_rng(0)
    sr = 16000
    t = np.arange(int(1.5 * sr)) / sr
    entries = []
    counts = [("train", n_train), ("valid", n_valid), ("test", n_test)]
    k = 0
    for split, n in counts:
        for i in range(n):
            label = "fake" if i % 2 == 0 else "real"
            freq = 880.0 if label == "fake" else 220.0
            wave = 0.4 * np.sin(2 * np.pi * freq * t) + 0.01 * rng.normal(size=t.size)
            name = f"{split}_{i}.wav"
            write_wav(tmp_path / name, AudioBuffer(samples=wave, sample_rate=sr))
            entries.append(
                ManifestEntry(
                    path=name,
                    label=label,
                    algorithm="synth" if label == "fake" else "none",
                    fake_type="full" if label == "fake" else "none",
                    split=split,
                    group_id=f"g{k}",
                    singer_seen="n/a" if label == "fake" else "seen",
                    duration=1.5,
                )
            )
            k += 1
    return entries


class TestBceSmoothed:
    def test_matches_library_bce_on_smoothed_targets(self):
        torch.manual_seed(0)
        z = torch.randn(64, dtype=torch.float64) * 4
        y = torch.randint(0, 2, (64,), dtype=torch.float64)
        s = 0.02
        got = bce_smoothed(z, y, s)
        ref = torch.nn.functional.binary_cross_entropy_with_logits(
            z, y * (1 - s) + s / 2, reduction="none"
        )
        assert torch.allclose(got, ref, atol=1e-12)

    @pytest.mark.parametrize("z,y", [(500.0, 1.0), (-500.0, 1.0), (500.0, 0.0), (-737.0, 0.0)])
    def test_extreme_logits_match_high_precision(self, z, y):
        s = 0.02
        got = float(bce_smoothed(torch.tensor([z], dtype=torch.float64), torch.tensor([y], dtype=torch.float64), s))
        assert math.isfinite(got)
        # enough digits that 1 + exp(-500) is still distinguishable from 1,
        # so the naive sigmoid route gives the true value
        with mpmath.workdps(400):
            zz = mpmath.mpf(z)
            yy = mpmath.mpf(y) * (1 - mpmath.mpf(s)) + mpmath.mpf(s) / 2
            sig = 1 / (1 + mpmath.e**-zz)
            want = -(yy * mpmath.log(sig) + (1 - yy) * mpmath.log(1 - sig))
            assert got == pytest.approx(float(want), rel=1e-12)

    def test_no_smoothing_at_zero_logit(self):
        got = bce_smoothed(torch.zeros(1), torch.ones(1), 0.0)
        assert float(got) == pytest.approx(math.log(2), rel=1e-6)

    def test_class_symmetry(self):
        z = torch.linspace(-6, 6, 25, dtype=torch.float64)
        a = bce_smoothed(z, torch.ones_like(z), 0.02)
        b = bce_smoothed(-z, torch.zeros_like(z), 0.02)
        assert torch.allclose(a, b, atol=1e-12)


class TestLrSchedule:
    CFG = TrainConfig(epochs=2, warmup_epochs=1, base_lr=1e-3, min_lr_ratio=0.01)

    def test_warmup_endpoints(self):
        assert lr_at(0, 2, self.CFG) == 0.0
        assert lr_at(1, 2, self.CFG) == pytest.approx(5e-4)
        assert lr_at(2, 2, self.CFG) == pytest.approx(1e-3)

    def test_final_step_hits_floor_exactly(self):
        cfg = TrainConfig(epochs=7, warmup_epochs=2, base_lr=3e-4, min_lr_ratio=0.01)
        spe = 5
        assert lr_at(cfg.epochs * spe - 1, spe, cfg) == pytest.approx(3e-6, rel=1e-12)

    def test_steps_past_end_stay_at_floor(self):
        cfg = TrainConfig(epochs=3, warmup_epochs=1, base_lr=1e-3, min_lr_ratio=0.1)
        assert lr_at(500, 4, cfg) == pytest.approx(1e-4, rel=1e-12)

    def test_cosine_quarter_point(self):
        # no warmup, 4 steps: u at step 1 is 1/3, cos(pi/3) = 1/2
        cfg = TrainConfig(epochs=1, warmup_epochs=0, base_lr=1.0, min_lr_ratio=0.0)
        assert lr_at(0, 4, cfg) == pytest.approx(1.0)
        assert lr_at(1, 4, cfg) == pytest.approx(0.75, rel=1e-12)
        assert lr_at(3, 4, cfg) == pytest.approx(0.0, abs=1e-15)

    def test_monotone_after_warmup(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=2, base_lr=1e-3)
        spe = 7
        values = [lr_at(s, spe, cfg) for s in range(2 * spe, 10 * spe)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_warmup_is_linear(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=4, base_lr=2e-3)
        spe = 10
        for s in range(40):
            assert lr_at(s, spe, cfg) == pytest.approx(2e-3 * s / 40, rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            lr_at(-1, 4, self.CFG)
        with pytest.raises(ValueError):
            lr_at(0, 0, self.CFG)
        with pytest.raises(ValueError):
            TrainConfig(epochs=2, warmup_epochs=3)


class TestAdamW:
    def test_matches_torch_adamw(self):
        torch.manual_seed(0)
        cfg = TrainConfig(weight_decay=0.05, betas=(0.9, 0.999), adam_eps=1e-8)
        w0 = torch.randn(5, 4, dtype=torch.float64)
        b0 = torch.randn(4, dtype=torch.float64)

        mine = {"w": w0.clone(), "b": b0.clone()}

        class Shell(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(w0.clone())
                self.b = torch.nn.Parameter(b0.clone())

        shell = Shell()
        opt = torch.optim.AdamW(
            [
                {"params": [shell.w], "weight_decay": cfg.weight_decay},
                {"params": [shell.b], "weight_decay": 0.0},
            ],
            lr=1e-3,
            betas=cfg.betas,
            eps=cfg.adam_eps,
        )

        class FakeModel:
            def named_parameters(self):
                return list(mine.items())

        state = init_optimizer_state(FakeModel())
        g = torch.Generator().manual_seed(7)
        for k in range(20):
            lr = 1e-3 * (1.0 + 0.1 * k)
            grads = {
                "w": torch.randn(5, 4, dtype=torch.float64, generator=g),
                "b": torch.randn(4, dtype=torch.float64, generator=g),
            }
            adamw_step(mine, grads, state, lr, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            shell.w.grad = grads["w"].clone()
            shell.b.grad = grads["b"].clone()
            opt.step()
        assert torch.allclose(mine["w"], shell.w.detach(), atol=1e-10)
        assert torch.allclose(mine["b"], shell.b.detach(), atol=1e-10)

    def test_decay_skips_exactly_1d_params(self):
        # zero gradients isolate the decay shrink: matrices shrink by
        # (1 - lr * wd), vectors stay put
        model = small_model()
        params = dict(model.named_parameters())
        before = {n: p.detach().clone() for n, p in params.items()}
        state = init_optimizer_state(model)
        grads = {n: torch.zeros_like(p) for n, p in params.items()}
        cfg = TrainConfig(weight_decay=0.05)
        lr = 0.1
        adamw_step(params, grads, state, lr, cfg)
        for name, p in params.items():
            if before[name].dim() >= 2:
                assert torch.allclose(p, before[name] * (1 - lr * 0.05), atol=1e-12), name
            else:
                assert torch.equal(p, before[name]), name

    def test_decayed_set_is_norms_and_biases_complement(self):
        model = small_model()
        skipped = {n for n, p in model.named_parameters() if p.dim() < 2}
        for name in skipped:
            assert name.endswith(".bias") or ".norm" in name or name.endswith("norm.weight"), name
        decayed = {n for n, p in model.named_parameters() if p.dim() >= 2}
        assert any("pos" in n for n in decayed)
        assert any("conv.weight" in n for n in decayed)
        assert "head.weight" in decayed


class TestBackward:
    def test_grads_cover_all_params_and_loss_matches(self):
        model = small_model()
        torch.manual_seed(1)
        x = torch.randn(4, 32, FRAMES)
        y = torch.tensor([1.0, 0.0, 1.0, 0.0])
        grads, loss = backward(model, x, y, 0.02)
        assert set(grads) == {n for n, _ in model.named_parameters()}
        with torch.no_grad():
            want = float(bce_smoothed(model(x), y, 0.02).mean())
        assert loss == pytest.approx(want, rel=1e-6)
        assert all(torch.isfinite(g).all() for g in grads.values())

    def test_nonfinite_grad_raises_named_error(self):
        model = small_model()
        model.check_finite = False
        with torch.no_grad():
            model.blocks[0].attn.proj.weight.fill_(float("nan"))
        x = torch.randn(2, 32, FRAMES)
        y = torch.tensor([1.0, 0.0])
        with pytest.raises(NonFiniteGradError) as err:
            backward(model, x, y, 0.02)
        assert err.value.name in dict(model.named_parameters())


class TestSpectrogramDataset:
    def test_eval_sample_matches_direct_frontend(self, tmp_path):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        from spectok.audio import read_wav

        buf = read_wav(tmp_path / entries[0].path)
        cfg = dataclasses.replace(SMALL_CFG, target_frames=FRAMES)
        direct = compute_mel(buf, cfg, mode="eval")
        cached = data.sample(0, FRAMES, "eval")
        assert np.array_equal(cached, direct.values)

    def test_train_sample_matches_direct_with_same_rng(self, tmp_path):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        from spectok.audio import read_wav

        buf = read_wav(tmp_path / entries[0].path)
        cfg = dataclasses.replace(SMALL_CFG, target_frames=FRAMES)
        direct = compute_mel(buf, cfg, mode="train", rng=np.random.default_rng(5))
        cached = data.sample(0, FRAMES, "train", np.random.default_rng(5))
        assert np.array_equal(cached, direct.values)

    def test_split_indices_and_labels(self, tmp_path):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        assert data.split_indices("train") == [0, 1, 2, 3, 4, 5]
        assert data.split_indices("valid") == [6, 7]
        assert data.split_indices("test") == [8, 9]
        assert data.labels.tolist() == [1, 0, 1, 0, 1, 0, 1, 0, 1, 0]

    def test_features_are_standardized_float32(self, tmp_path):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        for feat in data.features:
            assert feat.dtype == np.float32
            assert abs(float(feat.mean())) < 1e-4
            assert float(feat.std()) == pytest.approx(1.0, abs=1e-3)


class TestScoreSplit:
    def test_scores_are_sigmoid_logits_and_mode_restored(self, tmp_path):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        model = small_model()
        model.train()
        idx = data.split_indices("valid")
        scores, labels = score_split(model, data, idx, FRAMES, batch_size=1)
        assert model.training
        assert labels.tolist() == [1, 0]
        x = np.stack([data.sample(i, FRAMES, "eval") for i in idx])
        model.eval()
        with torch.no_grad():
            want = torch.sigmoid(model(torch.from_numpy(x))).numpy()
        assert np.allclose(scores, want, atol=1e-7)
        assert np.all((scores > 0) & (scores < 1))


class TestTrainLoop:
    def loop(self, tmp_path, out=None, epochs=2, augment=None, seed=0, model=None):
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        if model is None:
            model = small_model(seed=1)
        cfg = TrainConfig(
            epochs=epochs, warmup_epochs=1, base_lr=1e-3, batch_size=4, seed=seed
        )
        logs = []
        result = train_loop(
            model, data, FRAMES, cfg, augment=augment, out_dir=out, log=logs.append
        )
        return result, logs, model

    def test_runs_and_writes_artifacts(self, tmp_path):
        out = tmp_path / "run"
        result, logs, _ = self.loop(tmp_path, out=out, epochs=3)
        assert len(result.history) == 3
        assert not result.aborted
        assert (out / "best.ckpt").exists()
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "lr", "train_loss", "valid_f1", "valid_eer", "seconds"]
        assert len(rows) == 4
        assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
        assert len(logs) == 3

    def test_best_checkpoint_reproduces_best_f1(self, tmp_path):
        out = tmp_path / "run"
        result, _, _ = self.loop(tmp_path, out=out, epochs=3)
        loaded, meta = load_model(out / "best.ckpt")
        assert meta["epoch"] == result.best_epoch
        assert meta["valid_f1"] == pytest.approx(result.best_f1)
        assert meta["target_frames"] == FRAMES
        entries = toy_corpus(tmp_path)
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        scores, labels = score_split(loaded, data, data.split_indices("valid"), FRAMES)
        from spectok.evaluation import binary_metrics, confusion

        m = binary_metrics(confusion(scores, labels, 0.5))
        assert m.f1 == pytest.approx(result.best_f1, abs=1e-12)

    def test_same_seed_same_loss_trace(self, tmp_path):
        r1, _, _ = self.loop(tmp_path, epochs=2, seed=3, model=small_model(seed=2))
        r2, _, _ = self.loop(tmp_path, epochs=2, seed=3, model=small_model(seed=2))
        t1 = [h.train_loss for h in r1.history]
        t2 = [h.train_loss for h in r2.history]
        assert t1 == t2

    def test_augmentation_changes_the_trace(self, tmp_path):
        aug = AugmentConfig(mixup_prob=1.0, mask_prob=1.0)
        r1, _, _ = self.loop(tmp_path, epochs=1, model=small_model(seed=2))
        r2, _, _ = self.loop(tmp_path, epochs=1, augment=aug, model=small_model(seed=2))
        assert r1.history[0].train_loss != r2.history[0].train_loss

    def test_abort_on_poisoned_model(self, tmp_path):
        model = small_model(seed=1)
        with torch.no_grad():
            model.tokenizer.temporal_conv.weight.fill_(float("nan"))
        result, logs, _ = self.loop(tmp_path, epochs=2, model=model)
        assert result.aborted
        assert "tokenizer" in result.abort_reason
        assert result.history == []
        assert any("aborted" in line for line in logs)

    def test_empty_split_rejected(self, tmp_path):
        entries = [e for e in toy_corpus(tmp_path) if e.split != "valid"]
        data = SpectrogramDataset(entries, SMALL_CFG, root=tmp_path)
        with pytest.raises(ValueError, match="valid"):
            train_loop(small_model(), data, FRAMES, TrainConfig(epochs=1, warmup_epochs=0))

    def test_learns_separable_toy(self, tmp_path):
        # 880 Hz vs 220 Hz tones are linearly separable in mel space, so a
        # few epochs must reach perfect validation F1
        result, _, _ = self.loop(tmp_path, epochs=8, model=small_model(seed=0))
        assert result.best_f1 == 1.0
