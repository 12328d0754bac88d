"""On-disk layout for harmonized window corpora: one UFB1 file per window
(channels=1) under ``windows/`` plus ``index.json`` mapping window ids to
metadata and split.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import MultichannelWindow, Window, read_signal, write_signal
from .errors import DataError

INDEX_NAME = "index.json"
WINDOW_SUBDIR = "windows"


def write_corpus(
    directory: str | Path,
    windows_by_split: Mapping[str, Sequence[Window]],
    window_rate_hz: float,
) -> Path:
    """Write windows and their index; returns the index path."""
    directory = Path(directory)
    (directory / WINDOW_SUBDIR).mkdir(parents=True, exist_ok=True)
    entries = []
    counter = 0
    for split in sorted(windows_by_split):
        for w in windows_by_split[split]:
            rel = f"{WINDOW_SUBDIR}/{counter:06d}.ufb"
            write_signal(directory / rel, w.values[None, :], window_rate_hz)
            entries.append(
                {
                    "id": w.window_id,
                    "file": rel,
                    "dataset_id": w.dataset_id,
                    "split": split,
                    "label": w.label,
                    "source_recording": w.source_recording,
                    "source_channel": w.source_channel,
                    "provenance": w.provenance,
                }
            )
            counter += 1
    index = {
        "format": "ufw-index",
        "version": 1,
        "sample_rate_hz": window_rate_hz,
        "windows": entries,
    }
    index_path = directory / INDEX_NAME
    index_path.write_text(json.dumps(index, indent=2))
    return index_path


def read_index(directory: str | Path) -> dict:
    path = Path(directory) / INDEX_NAME
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read corpus index {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corpus index {path} is not valid JSON: {exc}") from exc


def read_corpus(
    directory: str | Path,
    split: str | None = None,
    dataset_id: str | None = None,
    provenance: str | None = None,
) -> list[Window]:
    """Load windows, optionally filtered by split, dataset, or provenance."""
    directory = Path(directory)
    index = read_index(directory)
    out = []
    for entry in index["windows"]:
        if split is not None and entry["split"] != split:
            continue
        if dataset_id is not None and entry["dataset_id"] != dataset_id:
            continue
        if provenance is not None and entry["provenance"] != provenance:
            continue
        values, _ = read_signal(directory / entry["file"])
        out.append(
            Window(
                window_id=entry["id"],
                values=values[0],
                source_recording=entry["source_recording"],
                source_channel=entry["source_channel"],
                dataset_id=entry["dataset_id"],
                label=entry["label"],
                provenance=entry["provenance"],
            )
        )
    return out


def group_multichannel(windows: Sequence[Window]) -> list[MultichannelWindow]:
    """Rebuild per-slot channel groups from flat windows.

    Windows sharing everything up to the ``#c<channel>`` suffix of their id
    belong to one slot; channels are ordered by channel index.
    """
    by_base: dict[str, list[Window]] = {}
    for w in windows:
        base = w.window_id.rsplit("#c", 1)[0]
        by_base.setdefault(base, []).append(w)
    grouped = []
    for base in sorted(by_base):
        members = sorted(by_base[base], key=lambda w: w.source_channel)
        grouped.append(MultichannelWindow(per_channel=tuple(members)))
    return grouped


def read_multichannel(directory: str | Path, split: str, dataset_id: str | None = None) -> list[MultichannelWindow]:
    return group_multichannel(read_corpus(directory, split=split, dataset_id=dataset_id))


def corpus_digest(directory: str | Path) -> str:
    """Order-independent content hash of every file under a directory."""
    import hashlib

    directory = Path(directory)
    h = hashlib.sha256()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(directory)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
