"""Synthetic EEG generator.

Stands in for clinical corpora: background is band-limited noise, seizure
intervals superimpose class-specific narrow-band oscillation bursts with a
smooth onset/offset envelope. Each class signature must differ from every
other in at least one band parameter so the classes stay learnable.
Generation is deterministic per (seed, recording index).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .signal import Annotation, EegRecording, TEN_TWENTY_19


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class ClassSignature:
    band_low_hz: float
    band_high_hz: float
    amplitude: float          # oscillation amplitude as a multiple of background RMS
    burst_s: float            # seizure interval duration

    def band(self) -> tuple[float, float]:
        return (self.band_low_hz, self.band_high_hz)


@dataclass
class SyntheticSpec:
    num_recordings: int = 8
    channels: int = 19
    sample_rate_hz: float = 256.0
    duration_s: float = 30.0
    signatures: dict[str, ClassSignature] = field(default_factory=dict)
    noise_uv: float = 10.0
    noise_band_hz: tuple[float, float] = (0.5, 45.0)
    seizures_per_recording: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.signatures:
            raise SynthError("at least one seizure class signature required")
        sigs = list(self.signatures.items())
        for i, (name_a, a) in enumerate(sigs):
            for name_b, b in sigs[i + 1:]:
                if a.band() == b.band() and a.amplitude == b.amplitude:
                    raise SynthError(f"class signatures {name_a!r} and {name_b!r} are "
                                     "indistinguishable (same band and amplitude)")
        total_burst = self.seizures_per_recording * max(s.burst_s for s in self.signatures.values())
        if total_burst * 2 > self.duration_s:
            raise SynthError("recording too short for the requested seizure bursts")


def channel_names(n: int) -> list[str]:
    if n <= len(TEN_TWENTY_19):
        return TEN_TWENTY_19[:n]
    return TEN_TWENTY_19 + [f"CH{i:02d}" for i in range(len(TEN_TWENTY_19), n)]


def _band_noise(rng: np.random.Generator, shape, rate: float,
                band: tuple[float, float]) -> np.ndarray:
    white = rng.standard_normal(shape)
    low, high = band
    high = min(high, rate / 2 * 0.95)
    sos = sps.butter(4, [low, high], btype="bandpass", fs=rate, output="sos")
    out = sps.sosfiltfilt(sos, white, axis=-1)
    rms = out.std(axis=-1, keepdims=True)
    return out / np.where(rms > 0, rms, 1.0)


def generate_recording(spec: SyntheticSpec, index: int) -> EegRecording:
    rng = np.random.default_rng((spec.seed, index))
    rate = spec.sample_rate_hz
    n = int(round(spec.duration_s * rate))
    e = spec.channels

    signal = _band_noise(rng, (e, n), rate, spec.noise_band_hz) * spec.noise_uv

    labels = sorted(spec.signatures)
    annotations: list[Annotation] = []
    slots = spec.seizures_per_recording
    seg = spec.duration_s / slots
    t = np.arange(n) / rate
    for k in range(slots):
        label = labels[(index * slots + k) % len(labels)]
        sig = spec.signatures[label]
        margin = 0.5
        lo = k * seg + margin
        hi = (k + 1) * seg - margin - sig.burst_s
        if hi <= lo:
            raise SynthError(f"burst of {sig.burst_s}s does not fit in a "
                             f"{seg:.2f}s slot of recording {index}")
        onset = float(rng.uniform(lo, hi))
        offset = onset + sig.burst_s
        freq = float(rng.uniform(*sig.band()))
        inside = (t >= onset) & (t < offset)
        ramp = min(0.1, sig.burst_s / 4)
        env = np.clip(np.minimum(t - onset, offset - t) / ramp, 0.0, 1.0) * inside
        phases = rng.uniform(0, 2 * np.pi, size=(e, 1))
        burst = np.sin(2 * np.pi * freq * t[None, :] + phases)
        signal = signal + sig.amplitude * spec.noise_uv * env[None, :] * burst
        annotations.append(Annotation(onset, offset, label))

    annotations.sort(key=lambda a: a.onset_s)
    return EegRecording(sample_rate_hz=rate, channels=channel_names(e),
                        samples=signal, annotations=annotations,
                        source_id=f"synth{index:03d}")


def generate_all(spec: SyntheticSpec) -> list[EegRecording]:
    return [generate_recording(spec, i) for i in range(spec.num_recordings)]


def band_power_ratio(rec: EegRecording, annotation: Annotation,
                     band: tuple[float, float]) -> float:
    """Welch band power inside the annotated interval versus the background,
    averaged over channels. Used to verify signatures are present."""
    rate = rec.sample_rate_hz
    on, off = int(annotation.onset_s * rate), int(annotation.offset_s * rate)
    inside = rec.samples[:, on:off]
    mask = np.ones(rec.samples.shape[1], dtype=bool)
    for a in rec.annotations:
        mask[int(a.onset_s * rate):int(a.offset_s * rate)] = False
    outside = rec.samples[:, mask]

    def power(x):
        nper = min(x.shape[1], 256)
        f, p = sps.welch(x, fs=rate, nperseg=nper, axis=1)
        sel = (f >= band[0]) & (f <= band[1])
        return p[:, sel].sum(axis=1).mean()

    return float(power(inside) / power(outside))
