"""Stochastic augmentations for contrastive view generation: cyclic temporal
shift plus multiplicative gain with additive sensor jitter.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .config import AugmentConfig
from .data import Window


def temporal_shift(x: np.ndarray, s: float) -> np.ndarray:
    """Cyclically rotate x by round(s * len(x)) samples.

    output[t] = x[(t - round(s*L)) mod L]; the multiset of values is
    preserved exactly.
    """
    x = np.asarray(x)
    shift = round(s * x.shape[0]) % x.shape[0]
    return np.roll(x, shift)


def apply_scale_jitter(x: np.ndarray, scale: float, jitter: np.ndarray) -> np.ndarray:
    """Deterministic core of scale_jitter: output[t] = scale * x[t] + jitter[t]."""
    return scale * np.asarray(x, dtype=np.float64) + np.asarray(jitter, dtype=np.float64)


def scale_jitter(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one per-window gain draw and per-timestep additive noise."""
    x = np.asarray(x)
    scale = rng.normal(cfg.scale_mean, cfg.scale_std)
    jitter = rng.normal(0.0, cfg.jitter_std, size=x.shape[0])
    return apply_scale_jitter(x, scale, jitter)


def make_views(
    x: Window | np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmented views: shift, then scale with jitter.

    The shift ratio and all noise are drawn independently per view, in a
    fixed order, so one rng yields a reproducible pair.
    """
    values = x.values if isinstance(x, Window) else np.asarray(x)

    def one_view() -> np.ndarray:
        s = rng.uniform(cfg.shift_range[0], cfg.shift_range[1])
        return scale_jitter(temporal_shift(values, s), cfg, rng)

    return one_view(), one_view()


def rng_for_window(seed: int, epoch: int, window_id: str) -> np.random.Generator:
    """Per-window random stream, independent of batch composition.

    Derived from (seed, epoch, sha256(window_id)) so concurrent or reordered
    batching reproduces the same views.
    """
    id_hash = int.from_bytes(hashlib.sha256(window_id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, id_hash]))
