import numpy as np
import pytest

from unifault.data import DatasetManifest, ManifestEntry, RawRecording, Window, save_manifest, save_recording


def make_window(
    values,
    window_id="ds:a.ufb#w0000#c0",
    dataset_id="ds",
    channel=0,
    label=None,
    recording="ds:a.ufb",
    provenance="raw",
) -> Window:
    return Window(
        window_id=window_id,
        values=np.asarray(values, dtype=np.float32),
        source_recording=recording,
        source_channel=channel,
        dataset_id=dataset_id,
        label=label,
        provenance=provenance,
    )


def make_recording(
    rng: np.random.Generator,
    recording_id="ds:a.ufb",
    dataset_id="ds",
    channels=1,
    length=2048,
    rate=10240.0,
    label=None,
) -> RawRecording:
    return RawRecording(
        recording_id=recording_id,
        dataset_id=dataset_id,
        sample_rate_hz=rate,
        samples=rng.normal(size=(channels, length)).astype(np.float32),
        label=label,
    )


@pytest.fixture
def disk_dataset(tmp_path):
    """Small on-disk dataset: 6 single-channel recordings, 3 classes."""
    rng = np.random.default_rng(1234)
    root = tmp_path / "ds"
    entries = []
    for i in range(6):
        label = i % 3
        rel = f"cls{label}/rec{i}.ufb"
        rec = RawRecording(
            recording_id=f"ds:{rel}",
            dataset_id="ds",
            sample_rate_hz=10240.0,
            samples=rng.normal(loc=label, size=(1, 3072)).astype(np.float32),
            label=label,
        )
        save_recording(rec, root, rel)
        entries.append(ManifestEntry(path=rel, label=label))
    manifest = DatasetManifest(
        dataset_id="ds", label_names=("h", "f1", "f2"), recordings=tuple(entries)
    )
    save_manifest(manifest, root / "manifest.json")
    return root, manifest
