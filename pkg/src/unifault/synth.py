"""Synthetic bearing-signal benchmark: impulse trains exciting a decaying
resonance, with per-domain shifts in sampling rate, channel count, amplitude,
resonance placement, and noise floor.

Three domains are emitted; the last is held out of pretraining as the
fine-tune target, and its class parameters sit between the two pretraining
domains so cross-domain fusion genuinely synthesizes near-target samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestEntry, RawRecording, save_manifest, save_recording
from .errors import ConfigurationError

# Decay tails are evaluated until they fall below this fraction of the peak.
_TAIL_CUTOFF = 1e-4


@dataclass(frozen=True)
class FaultClassSpec:
    """One health state: impulse repetition rate and resonance it excites."""

    class_name: str
    impulse_rate_hz: float  # 0 = healthy (no impacts)
    impulse_amplitude: float
    resonance_hz: float
    resonance_decay: float  # 1/s
    amplitude_jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.impulse_rate_hz < 0 or self.impulse_amplitude < 0:
            raise ConfigurationError("impulse rate and amplitude must be >= 0")
        if self.resonance_decay <= 0:
            raise ConfigurationError("resonance_decay must be positive")
        if self.amplitude_jitter < 0:
            raise ConfigurationError("amplitude_jitter must be >= 0")


@dataclass(frozen=True)
class SynthDomainSpec:
    domain_id: str
    sample_rate_hz: float
    channels: int
    classes: tuple[FaultClassSpec, ...]
    recording_duration_s: float
    num_recordings_per_class: int
    noise_std: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ConfigurationError("sample_rate_hz must be positive")
        if self.channels < 1 or self.num_recordings_per_class < 1:
            raise ConfigurationError("channels and recordings per class must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        for cls in self.classes:
            if cls.impulse_amplitude > 0 and cls.resonance_hz >= self.sample_rate_hz / 2:
                raise ConfigurationError(
                    f"class {cls.class_name!r}: resonance {cls.resonance_hz} Hz violates "
                    f"Nyquist at {self.sample_rate_hz} Hz"
                )

    def channel_gain(self, channel: int) -> float:
        return 1.0 + 0.1 * channel


def _rec_path(cls: FaultClassSpec, rec_idx: int) -> str:
    return f"{cls.class_name}/rec{rec_idx:03d}.ufb"


def generate_recording(spec: SynthDomainSpec, class_idx: int, rec_idx: int) -> RawRecording:
    """One recording, deterministic in (spec.seed, class_idx, rec_idx).

    Impulses sit 1/impulse_rate apart with +/-2% timing jitter; each excites
    amplitude * (1 + N(0, jitter)) * exp(-decay t) * sin(2 pi resonance t).
    Channels share the excitation (fixed per-channel gain) and carry
    independent Gaussian noise.
    """
    cls = spec.classes[class_idx]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_idx, rec_idx]))
    rate = spec.sample_rate_hz
    n = round(spec.recording_duration_s * rate)
    base = np.zeros(n, dtype=np.float64)

    if cls.impulse_rate_hz > 0 and cls.impulse_amplitude > 0:
        spacing = 1.0 / cls.impulse_rate_hz
        tail_samples = min(n, math.ceil(rate * math.log(1.0 / _TAIL_CUTOFF) / cls.resonance_decay))
        t_k = rng.uniform(0.0, spacing)
        while t_k < spec.recording_duration_s:
            a_k = cls.impulse_amplitude * (1.0 + rng.normal(0.0, cls.amplitude_jitter))
            start = math.ceil(t_k * rate)
            stop = min(n, start + tail_samples)
            if start < stop:
                tt = np.arange(start, stop) / rate - t_k
                base[start:stop] += (
                    a_k * np.exp(-cls.resonance_decay * tt) * np.sin(2 * np.pi * cls.resonance_hz * tt)
                )
            t_k += spacing * (1.0 + rng.uniform(-0.02, 0.02))

    samples = np.empty((spec.channels, n), dtype=np.float64)
    for ch in range(spec.channels):
        noise = rng.normal(0.0, spec.noise_std, size=n) if spec.noise_std > 0 else 0.0
        samples[ch] = spec.channel_gain(ch) * base + noise

    return RawRecording(
        recording_id=f"{spec.domain_id}:{_rec_path(cls, rec_idx)}",
        dataset_id=spec.domain_id,
        sample_rate_hz=rate,
        samples=samples.astype(np.float32),
        label=class_idx,
        condition_id=None,
    )


# Shared class semantics; per-domain scaling applied below.
_CLASS_TEMPLATES = (
    FaultClassSpec("healthy", 0.0, 0.0, 0.0, 1.0, 0.0),
    FaultClassSpec("fault_low", 45.0, 1.0, 900.0, 500.0, 0.1),
    FaultClassSpec("fault_mid", 85.0, 1.0, 1400.0, 500.0, 0.1),
    FaultClassSpec("fault_high", 140.0, 1.0, 2100.0, 500.0, 0.1),
)

# (domain_id, rate, channels, duration_s, recs/class, noise, resonance scale,
#  amplitude scale). The last row is the held-out fine-tune target; its
# resonance/amplitude/noise sit between the first two.
_DOMAIN_TEMPLATES = (
    ("dom_a", 8192.0, 1, 2.0, 40, 0.30, 0.80, 1.0),
    ("dom_b", 12800.0, 2, 1.5, 24, 0.55, 1.30, 1.8),
    ("dom_c", 20480.0, 3, 1.0, 30, 0.42, 1.05, 1.4),
)


def benchmark_domain_specs(
    num_domains: int = 3,
    classes: int = 4,
    seed: int = 0,
    recordings_scale: float = 1.0,
    noise_scale: float = 1.0,
) -> list[SynthDomainSpec]:
    if not 2 <= num_domains <= len(_DOMAIN_TEMPLATES):
        raise ConfigurationError(f"num_domains must be 2..{len(_DOMAIN_TEMPLATES)}")
    if not 2 <= classes <= len(_CLASS_TEMPLATES):
        raise ConfigurationError(f"classes must be 2..{len(_CLASS_TEMPLATES)}")
    specs = []
    for i, (domain_id, rate, channels, duration, recs, noise, res_scale, amp_scale) in enumerate(
        _DOMAIN_TEMPLATES[:num_domains]
    ):
        domain_classes = tuple(
            replace(
                cls,
                resonance_hz=cls.resonance_hz * res_scale,
                impulse_amplitude=cls.impulse_amplitude * amp_scale,
            )
            for cls in _CLASS_TEMPLATES[:classes]
        )
        specs.append(
            SynthDomainSpec(
                domain_id=domain_id,
                sample_rate_hz=rate,
                channels=channels,
                classes=domain_classes,
                recording_duration_s=duration,
                num_recordings_per_class=max(1, round(recs * recordings_scale)),
                noise_std=noise * noise_scale,
                seed=seed + i,
            )
        )
    return specs


def generate_benchmark(
    out_dir: str | Path,
    num_domains: int = 3,
    classes: int = 4,
    seed: int = 0,
    recordings_scale: float = 1.0,
    noise_scale: float = 1.0,
) -> dict:
    """Write all domains (recordings + manifests) and a layout file.

    The last domain is the held-out fine-tune target: downstream stages must
    exclude it from pretraining. Returns the layout dict
    (also saved as ``benchmark.json``).
    """
    out_dir = Path(out_dir)
    specs = benchmark_domain_specs(num_domains, classes, seed, recordings_scale, noise_scale)
    domains = []
    for spec in specs:
        root = out_dir / spec.domain_id
        entries = []
        for class_idx, cls in enumerate(spec.classes):
            for rec_idx in range(spec.num_recordings_per_class):
                rec = generate_recording(spec, class_idx, rec_idx)
                rel = _rec_path(cls, rec_idx)
                save_recording(rec, root, rel)
                entries.append(ManifestEntry(path=rel, label=class_idx))
        manifest = DatasetManifest(
            dataset_id=spec.domain_id,
            label_names=tuple(cls.class_name for cls in spec.classes),
            recordings=tuple(entries),
            notes=f"synthetic benchmark domain at {spec.sample_rate_hz:.0f} Hz",
        )
        save_manifest(manifest, root / "manifest.json")
        domains.append(
            {
                "dataset_id": spec.domain_id,
                "root": spec.domain_id,
                "manifest": f"{spec.domain_id}/manifest.json",
                "sample_rate_hz": spec.sample_rate_hz,
                "channels": spec.channels,
                "recordings": len(entries),
            }
        )
    layout = {
        "format": "benchmark-layout",
        "version": 1,
        "seed": seed,
        "domains": domains,
        "pretrain_datasets": [d["dataset_id"] for d in domains[:-1]],
        "target_dataset": domains[-1]["dataset_id"],
    }
    (out_dir / "benchmark.json").write_text(json.dumps(layout, indent=2))
    return layout
