"""Five-stage standardization: per-recording splitting, fixed-duration
segmentation, length standardization, channel unification, and leakage-free
min-max normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import SPLIT_NAMES, HarmonizeConfig
from .data import (
    DatasetManifest,
    MultichannelWindow,
    RawRecording,
    SplitAssignment,
    Window,
    iter_recordings,
)
from .errors import ConfigurationError, MissingStatsError, ShapeError


@dataclass(frozen=True)
class NormalizerStats:
    """Per-(dataset, channel) extrema, fitted on the training split only."""

    groups: Mapping[tuple[str, int], tuple[float, float]]
    fitted_on: str = "train"

    def __post_init__(self) -> None:
        for key, (mn, mx) in self.groups.items():
            if mn > mx:
                raise ShapeError(f"group {key}: min {mn} exceeds max {mx}")

    def to_dict(self) -> dict:
        return {
            "fitted_on": self.fitted_on,
            "groups": {
                f"{ds}||{ch}": {"min": mn, "max": mx}
                for (ds, ch), (mn, mx) in sorted(self.groups.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizerStats":
        groups = {}
        for key, entry in data["groups"].items():
            ds, ch = key.rsplit("||", 1)
            groups[(ds, int(ch))] = (float(entry["min"]), float(entry["max"]))
        return cls(groups=groups, fitted_on=data.get("fitted_on", "train"))


@dataclass(frozen=True)
class HarmonizedSplit:
    windows: tuple[Window, ...] = ()
    multichannel: tuple[MultichannelWindow, ...] = ()


@dataclass(frozen=True)
class HarmonizedDataset:
    splits: Mapping[str, HarmonizedSplit]
    stats: NormalizerStats

    @property
    def train(self) -> HarmonizedSplit:
        return self.splits["train"]


def split_dataset(
    manifest: DatasetManifest, ratios: Sequence[float], seed: int
) -> SplitAssignment:
    """Assign whole recordings to train/validation/test.

    Counts follow largest-remainder rounding of the ratios; the shuffle is a
    pure function of the seed.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError("ratios must be three non-negative reals")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)}")

    rids = [manifest.recording_id(e) for e in manifest.recordings]
    order = np.random.default_rng(seed).permutation(len(rids))

    n = len(rids)
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    leftover = n - sum(counts)  # at most 2, since the quotas sum to n
    by_remainder = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in range(leftover):
        counts[by_remainder[i]] += 1

    assignment: dict[str, str] = {}
    cursor = 0
    for split_name, count in zip(SPLIT_NAMES, counts):
        for idx in order[cursor : cursor + count]:
            assignment[rids[idx]] = split_name
        cursor += count
    return SplitAssignment(assignment=assignment, seed=seed, ratios=ratios)


def segment_windows(rec: RawRecording, cfg: HarmonizeConfig) -> list[np.ndarray]:
    """Cut a recording into consecutive fixed-duration segments.

    Each segment is a (channels, floor(rate * duration)) view; a trailing
    partial segment is dropped. A recording shorter than one window yields an
    empty list.
    """
    seg_len = math.floor(rec.sample_rate_hz * cfg.window_duration_s)
    if seg_len < 1 or rec.length < seg_len:
        return []
    count = rec.length // seg_len
    return [rec.samples[:, i * seg_len : (i + 1) * seg_len] for i in range(count)]


def standardize_length(
    segment: np.ndarray, target_length: int, antialias: bool = False
) -> np.ndarray:
    """Map a 1-D segment onto exactly ``target_length`` samples.

    Output index k reads input position k*(n-1)/(target_length-1) by linear
    interpolation, so endpoints are preserved and affine inputs are
    reproduced exactly. ``antialias`` applies a low-pass prefilter before
    downsampling (off by default).
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 1 or segment.shape[0] < 2:
        raise ShapeError(f"segment must be 1-D with at least 2 samples, got {segment.shape}")
    n = segment.shape[0]
    if antialias and n > target_length:
        from scipy import signal as _signal

        sos = _signal.butter(8, target_length / n, output="sos")
        segment = _signal.sosfiltfilt(sos, segment)
    positions = np.arange(target_length, dtype=np.float64) * (n - 1) / (target_length - 1)
    return np.interp(positions, np.arange(n, dtype=np.float64), segment)


def unify_channels(mw: MultichannelWindow) -> list[Window]:
    """Flatten one multichannel window into independent univariate windows."""
    return list(mw.per_channel)


def windows_from_recording(
    rec: RawRecording, cfg: HarmonizeConfig
) -> list[MultichannelWindow]:
    """Segment + standardize one recording into per-slot multichannel windows."""
    out = []
    for slot, segment in enumerate(segment_windows(rec, cfg)):
        channels = []
        for ch in range(rec.channels):
            values = standardize_length(
                segment[ch].astype(np.float64), cfg.target_length, cfg.antialias
            )
            channels.append(
                Window(
                    window_id=f"{rec.recording_id}#w{slot:04d}#c{ch}",
                    values=values.astype(np.float32),
                    source_recording=rec.recording_id,
                    source_channel=ch,
                    dataset_id=rec.dataset_id,
                    label=rec.label,
                )
            )
        out.append(MultichannelWindow(per_channel=tuple(channels)))
    return out


def fit_normalizer(train_windows: Iterable[Window]) -> NormalizerStats:
    """Exact per-(dataset, channel) extrema over training values only."""
    groups: dict[tuple[str, int], tuple[float, float]] = {}
    for w in train_windows:
        key = (w.dataset_id, w.source_channel)
        mn = float(np.min(w.values))
        mx = float(np.max(w.values))
        if key in groups:
            old_mn, old_mx = groups[key]
            groups[key] = (min(old_mn, mn), max(old_mx, mx))
        else:
            groups[key] = (mn, mx)
    return NormalizerStats(groups=groups)


def apply_normalizer(w: Window, stats: NormalizerStats, cfg: HarmonizeConfig) -> Window:
    """Scale one window into the configured range using its group's extrema.

    Values are not clamped: test-time values outside the training extrema map
    outside the range. A degenerate group (max - min below epsilon) maps
    everything to the range's low end.
    """
    key = (w.dataset_id, w.source_channel)
    if key not in stats.groups:
        raise MissingStatsError(f"no normalizer stats for group {key}")
    mn, mx = stats.groups[key]
    low, high = cfg.normalize_range
    values = w.values.astype(np.float64)
    if mx - mn < cfg.epsilon_degenerate:
        scaled = np.full_like(values, low)
    else:
        scaled = low + (values - mn) / (mx - mn) * (high - low)
    return Window(
        window_id=w.window_id,
        values=scaled.astype(np.float32),
        source_recording=w.source_recording,
        source_channel=w.source_channel,
        dataset_id=w.dataset_id,
        label=w.label,
        provenance=w.provenance,
    )


def harmonize_dataset(
    manifest: DatasetManifest,
    cfg: HarmonizeConfig,
    split: SplitAssignment,
    root: str | Path,
    emit_multichannel: bool = False,
) -> HarmonizedDataset:
    """Run the full standardization over one dataset.

    Normalizer stats come from the training split alone, so the train corpus
    is byte-identical whether or not validation/test recordings exist.
    ``emit_multichannel`` additionally groups windows per recording slot
    (fine-tune mode, channel structure preserved).
    """
    raw_mc: dict[str, list[MultichannelWindow]] = {name: [] for name in SPLIT_NAMES}
    for name in SPLIT_NAMES:
        rids = split.recordings_in(name)
        for rec in iter_recordings(manifest, root, rids):
            raw_mc[name].extend(windows_from_recording(rec, cfg))

    train_flat = [w for mw in raw_mc["train"] for w in unify_channels(mw)]
    stats = fit_normalizer(train_flat)

    splits: dict[str, HarmonizedSplit] = {}
    for name in SPLIT_NAMES:
        flat: list[Window] = []
        grouped: list[MultichannelWindow] = []
        for mw in raw_mc[name]:
            normed = tuple(apply_normalizer(w, stats, cfg) for w in mw.per_channel)
            flat.extend(normed)
            if emit_multichannel:
                grouped.append(MultichannelWindow(per_channel=normed))
        splits[name] = HarmonizedSplit(windows=tuple(flat), multichannel=tuple(grouped))
    return HarmonizedDataset(splits=splits, stats=stats)
