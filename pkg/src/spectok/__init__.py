"""Fake-song detection on long audio via spectro-temporal tokenization.

The package covers the full loop: waveform loading and log-mel frontend,
clip-based and patch-based tokenizers, a pre-norm transformer classifier,
training with MixUp/SpecAugment, threshold-based and EER evaluation,
an analytic efficiency profiler, and a synthetic toy corpus for tests.
"""

__version__ = "0.1.0"
