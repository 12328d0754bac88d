"""Cross-domain temporal fusion: synthesize intermediate-domain windows by
blending a dominant window with a moving-average-smoothed window from another
dataset, in both directions.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from .config import FusionConfig
from .data import PROVENANCE_FUSED, Window
from .errors import ConfigurationError, InvalidPairError, ShapeError

log = logging.getLogger(__name__)


def _check_window_size(t: int) -> None:
    if t < 1 or t % 2 == 0:
        raise ConfigurationError(f"moving-average window must be odd and >= 1, got {t}")


def moving_average(x: Sequence[float], i: int, t: int) -> float:
    """Mean of x over the t-wide window centered at i, truncated at the edges.

    The divisor is the number of in-range indices, so boundary windows shrink
    instead of padding.
    """
    _check_window_size(t)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 <= i < n:
        raise ShapeError(f"index {i} outside sequence of length {n}")
    half = (t - 1) // 2
    lo = max(0, i - half)
    hi = min(n - 1, i + half)
    return float(np.mean(x[lo : hi + 1]))


def moving_average_series(x: np.ndarray, t: int) -> np.ndarray:
    """Vectorized truncated moving average at every index."""
    _check_window_size(t)
    x = np.asarray(x, dtype=np.float64)
    if t == 1:
        return x.copy()
    # Zero-pad by half the window and convolve in 'valid' mode; unlike
    # 'same', this stays centered even when t exceeds the sequence length.
    half = (t - 1) // 2
    kernel = np.ones(t)
    padded = np.concatenate([np.zeros(half), x, np.zeros(half)])
    sums = np.convolve(padded, kernel, mode="valid")
    mask = np.concatenate([np.zeros(half), np.ones_like(x), np.zeros(half)])
    counts = np.convolve(mask, kernel, mode="valid")
    return sums / counts


def fuse_pair(
    xa: Window, xb: Window, lam: float, t: int, pair_tag: str | None = None
) -> tuple[Window, Window]:
    """Blend two windows bidirectionally.

    First output: lam * xa + (1 - lam) * MA(xb); second swaps the roles. Both
    carry provenance ``fused`` and dataset id ``fused:<a>+<b>``.
    """
    if len(xa) != len(xb):
        raise InvalidPairError(f"window lengths differ: {len(xa)} vs {len(xb)}")
    if not 0.5 < lam < 1.0:
        raise ConfigurationError(f"lambda must lie in (0.5, 1), got {lam}")
    a = xa.values.astype(np.float64)
    b = xb.values.astype(np.float64)
    fused_a = lam * a + (1.0 - lam) * moving_average_series(b, t)
    fused_b = lam * b + (1.0 - lam) * moving_average_series(a, t)
    dataset_id = f"fused:{xa.dataset_id}+{xb.dataset_id}"
    tag = pair_tag if pair_tag is not None else f"{xa.window_id}|{xb.window_id}"

    def _mk(values: np.ndarray, dominant: Window, direction: str) -> Window:
        return Window(
            window_id=f"{dataset_id}#{tag}#{direction}",
            values=values.astype(np.float32),
            source_recording=dominant.source_recording,
            source_channel=dominant.source_channel,
            dataset_id=dataset_id,
            label=None,
            provenance=PROVENANCE_FUSED,
        )

    return _mk(fused_a, xa, "a"), _mk(fused_b, xb, "b")


def generate_fused_corpus(
    corpora: Mapping[str, Sequence[Window]], cfg: FusionConfig
) -> list[Window]:
    """Sample cross-dataset pairs and emit both directional fusions.

    The budget is floor(fused_fraction * |raw corpus|) rounded down to even;
    dataset pairs are drawn uniformly, one uniform window from each, with a
    fresh lambda ~ U(lambda_range) per pair. Deterministic in cfg.seed.
    """
    dataset_ids = sorted(corpora)
    raw_total = sum(len(corpora[d]) for d in dataset_ids)
    if len(dataset_ids) < 2:
        log.warning("fusion needs at least two datasets, got %d; emitting none", len(dataset_ids))
        return []
    budget = int(cfg.fused_fraction * raw_total)
    budget -= budget % 2
    rng = np.random.default_rng(cfg.seed)
    fused: list[Window] = []
    for k in range(budget // 2):
        ia, ib = rng.choice(len(dataset_ids), size=2, replace=False)
        pool_a = corpora[dataset_ids[ia]]
        pool_b = corpora[dataset_ids[ib]]
        wa = pool_a[int(rng.integers(len(pool_a)))]
        wb = pool_b[int(rng.integers(len(pool_b)))]
        lam = float(rng.uniform(cfg.lambda_range[0], cfg.lambda_range[1]))
        fa, fb = fuse_pair(wa, wb, lam, cfg.window_t, pair_tag=f"{k:06d}")
        fused.append(fa)
        fused.append(fb)
    return fused
