"""Canonical records exchanged between pipeline stages and the on-disk
signal/manifest formats.

Binary signal format (little-endian, no padding):
    magic ``UFB1`` | u32 version=1 | u32 channels | u64 length |
    f64 sample_rate_hz | channels*length float32 values, channel-major.

Manifest: JSON object with ``dataset_id``, ``label_names``, ``recordings``
(list of ``{path, label, condition_id}``; ``label`` may be null) and free-text
``notes``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ManifestError, NumericError, ShapeError, SignalFormatError

UFB1_MAGIC = b"UFB1"
UFB1_VERSION = 1
_UFB1_HEADER = struct.Struct("<4sIIQd")

PROVENANCE_RAW = "raw"
PROVENANCE_FUSED = "fused"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RawRecording:
    """One multi-channel vibration recording at its native sampling rate."""

    recording_id: str
    dataset_id: str
    sample_rate_hz: float
    samples: np.ndarray  # (channels, length) float32
    label: int | None = None
    condition_id: str | None = None

    def __post_init__(self) -> None:
        if self.samples.ndim != 2:
            raise ShapeError(f"samples must be (channels, length), got {self.samples.shape}")
        if self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ShapeError("recording needs at least one channel and one sample")
        if self.sample_rate_hz <= 0:
            raise NumericError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError(f"recording {self.recording_id} contains non-finite samples")
        object.__setattr__(self, "samples", _freeze(self.samples.astype(np.float32, copy=False)))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class Window:
    """One standardized univariate sequence, the model's input unit."""

    window_id: str
    values: np.ndarray  # (target_length,) float32
    source_recording: str
    source_channel: int
    dataset_id: str
    label: int | None = None
    provenance: str = PROVENANCE_RAW

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ShapeError(f"window values must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"window {self.window_id} contains non-finite values")
        if self.provenance not in (PROVENANCE_RAW, PROVENANCE_FUSED):
            raise ShapeError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", _freeze(self.values.astype(np.float32, copy=False)))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MultichannelWindow:
    """Time-aligned windows from all channels of one recording slot."""

    per_channel: tuple[Window, ...]

    def __post_init__(self) -> None:
        if not self.per_channel:
            raise ShapeError("multichannel window needs at least one channel")
        first = self.per_channel[0]
        for w in self.per_channel[1:]:
            if len(w) != len(first):
                raise ShapeError("channel windows must share the same length")
            if w.label != first.label:
                raise ShapeError("channel windows must share the same label")
            if w.source_recording != first.source_recording:
                raise ShapeError("channel windows must come from one recording")

    @property
    def channels(self) -> int:
        return len(self.per_channel)

    @property
    def label(self) -> int | None:
        return self.per_channel[0].label

    @property
    def window_id(self) -> str:
        return self.per_channel[0].window_id.rsplit("#c", 1)[0]

    def as_array(self) -> np.ndarray:
        return np.stack([w.values for w in self.per_channel])


@dataclass(frozen=True)
class SplitAssignment:
    """Per-recording split membership; a pure function of (manifest, ratios, seed)."""

    assignment: Mapping[str, str]
    seed: int
    ratios: tuple[float, float, float]

    def recordings_in(self, split: str) -> list[str]:
        return sorted(rid for rid, s in self.assignment.items() if s == split)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int | None = None
    condition_id: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    label_names: tuple[str, ...]
    recordings: tuple[ManifestEntry, ...]
    notes: str = ""

    def recording_id(self, entry: ManifestEntry) -> str:
        return f"{self.dataset_id}:{entry.path}"


# ---------------------------------------------------------------------------
# UFB1 signal files


def write_signal(path: str | Path, samples: np.ndarray, sample_rate_hz: float) -> None:
    """Write a (channels, length) float32 grid as a UFB1 file."""
    samples = np.ascontiguousarray(samples, dtype=np.float32)
    if samples.ndim == 1:
        samples = samples[None, :]
    if samples.ndim != 2:
        raise ShapeError(f"samples must be 1-D or 2-D, got shape {samples.shape}")
    channels, length = samples.shape
    header = _UFB1_HEADER.pack(UFB1_MAGIC, UFB1_VERSION, channels, length, float(sample_rate_hz))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.astype("<f4").tobytes())


def read_signal(path: str | Path) -> tuple[np.ndarray, float]:
    """Read a UFB1 file; returns ((channels, length) float32, sample_rate_hz)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _UFB1_HEADER.size:
        raise SignalFormatError(f"{path}: truncated header")
    magic, version, channels, length, rate = _UFB1_HEADER.unpack_from(raw)
    if magic != UFB1_MAGIC:
        raise SignalFormatError(f"{path}: bad magic {magic!r}")
    if version != UFB1_VERSION:
        raise SignalFormatError(f"{path}: unsupported version {version}")
    expected = _UFB1_HEADER.size + channels * length * 4
    if len(raw) != expected:
        raise SignalFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", offset=_UFB1_HEADER.size)
    return payload.reshape(channels, length).copy(), rate


def save_recording(rec: RawRecording, root: str | Path, rel_path: str) -> Path:
    path = Path(root) / rel_path
    path.parent.mkdir(parents=True, exist_ok=True)
    write_signal(path, rec.samples, rec.sample_rate_hz)
    return path


def load_recording(root: str | Path, manifest: DatasetManifest, entry: ManifestEntry) -> RawRecording:
    samples, rate = read_signal(Path(root) / entry.path)
    return RawRecording(
        recording_id=manifest.recording_id(entry),
        dataset_id=manifest.dataset_id,
        sample_rate_hz=rate,
        samples=samples,
        label=entry.label,
        condition_id=entry.condition_id,
    )


# ---------------------------------------------------------------------------
# Manifests


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    payload = {
        "dataset_id": manifest.dataset_id,
        "label_names": list(manifest.label_names),
        "recordings": [
            {"path": e.path, "label": e.label, "condition_id": e.condition_id}
            for e in manifest.recordings
        ],
        "notes": manifest.notes,
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        entries = tuple(
            ManifestEntry(path=r["path"], label=r.get("label"), condition_id=r.get("condition_id"))
            for r in data["recordings"]
        )
        return DatasetManifest(
            dataset_id=data["dataset_id"],
            label_names=tuple(data["label_names"]),
            recordings=entries,
            notes=data.get("notes", ""),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} is missing required fields: {exc}") from exc


def validate_manifest(manifest: DatasetManifest, root: str | Path) -> list[str]:
    """Check every referenced recording; one issue string per violation."""
    issues: list[str] = []
    seen: set[str] = set()
    n_labels = len(manifest.label_names)
    for entry in manifest.recordings:
        if entry.path in seen:
            issues.append(f"duplicate recording path {entry.path!r}")
        seen.add(entry.path)
        if entry.label is not None and not 0 <= entry.label < n_labels:
            issues.append(
                f"{entry.path}: label {entry.label} out of range for {n_labels} label names"
            )
        full = Path(root) / entry.path
        if not full.is_file():
            issues.append(f"missing recording file {entry.path!r}")
            continue
        try:
            load_recording(root, manifest, entry)
        except (SignalFormatError, ShapeError, NumericError) as exc:
            issues.append(f"{entry.path}: {exc}")
    return issues


def iter_recordings(
    manifest: DatasetManifest, root: str | Path, ids: Iterable[str] | None = None
) -> Iterable[RawRecording]:
    """Load recordings, optionally restricted to the given recording ids."""
    wanted = None if ids is None else set(ids)
    for entry in manifest.recordings:
        rid = manifest.recording_id(entry)
        if wanted is None or rid in wanted:
            yield load_recording(root, manifest, entry)
