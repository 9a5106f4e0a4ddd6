"""EEG preprocessing: filtering, resampling, windowing, balancing, scaling.

Raw recordings (microvolt channel-by-time matrices with onset/offset
annotations) become balanced, normalized, fixed-length labeled epochs.
Everything is a pure function over immutable inputs; ``balance`` is the one
seeded stochastic step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

BACKGROUND_LABEL = "bckg"

TEN_TWENTY_19 = ["Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
                 "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2"]


class PipelineError(Exception):
    pass


class SegmentationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Annotation:
    onset_s: float
    offset_s: float
    label: str


@dataclass
class EegRecording:
    sample_rate_hz: float
    channels: list[str]
    samples: np.ndarray                      # [E, T] microvolts
    annotations: list[Annotation] = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise PipelineError(f"samples must be [channels, time], got shape {self.samples.shape}")
        if len(self.channels) != self.samples.shape[0]:
            raise PipelineError(f"{len(self.channels)} channel names for "
                                f"{self.samples.shape[0]} sample rows")
        dur = self.duration_s
        for a in self.annotations:
            if not (0.0 <= a.onset_s < a.offset_s <= dur + 1e-9):
                raise PipelineError(f"annotation [{a.onset_s}, {a.offset_s}) outside "
                                    f"recording of {dur:.3f}s")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sample_rate_hz


@dataclass
class EegEpoch:
    data: np.ndarray                         # [E, W]
    label: str
    source_id: str
    window_start_s: float


@dataclass
class SegmentationPolicy:
    epoch_seconds: float = 1.0
    seizure_overlap_fraction: float = 0.5
    nonseizure_overlap_fraction: float = 0.0
    balance_ratio: float = 1.0
    include_boundary_windows: bool = False

    def __post_init__(self):
        for f in (self.seizure_overlap_fraction, self.nonseizure_overlap_fraction):
            if not 0.0 <= f < 1.0:
                raise ValueError(f"overlap fractions must be in [0, 1), got {f}")
        if self.epoch_seconds <= 0:
            raise ValueError("epoch_seconds must be positive")


def bandpass_filter(rec: EegRecording, low_hz: float, high_hz: float,
                    order: int = 4) -> EegRecording:
    """Zero-phase Butterworth band-pass (forward-backward, second-order
    sections). Output length equals input length."""
    nyq = rec.sample_rate_hz / 2.0
    if not 0.0 < low_hz < high_hz:
        raise PipelineError(f"need 0 < low < high, got [{low_hz}, {high_hz}]")
    if high_hz >= nyq:
        raise PipelineError(f"high edge {high_hz} Hz >= Nyquist {nyq} Hz")
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass",
                     fs=rec.sample_rate_hz, output="sos")
    try:
        filtered = sps.sosfiltfilt(sos, rec.samples, axis=1)
    except ValueError as exc:
        raise PipelineError(f"recording too short for filter warm-up: {exc}") from exc
    return replace(rec, samples=filtered)


def resample(rec: EegRecording, target_hz: float) -> EegRecording:
    """Fourier resampling to round(T * target/source) samples per channel.
    Annotations are in seconds and carry over unchanged."""
    if target_hz <= 0:
        raise PipelineError(f"target rate must be positive, got {target_hz}")
    if target_hz == rec.sample_rate_hz:
        return replace(rec, samples=rec.samples.copy())
    n_new = int(round(rec.samples.shape[1] * target_hz / rec.sample_rate_hz))
    out = sps.resample(rec.samples, n_new, axis=1)
    return replace(rec, samples=out, sample_rate_hz=float(target_hz))


def clip_amplitude(rec: EegRecording, limit_uv: float = 500.0) -> EegRecording:
    return replace(rec, samples=np.clip(rec.samples, -limit_uv, limit_uv))


def _intersects(start: int, stop: int, onset: int, offset: int) -> bool:
    # >= 1 sample of overlap
    return start < offset and onset < stop


def segment(rec: EegRecording, policy: SegmentationPolicy) -> list[EegEpoch]:
    """Slice a recording into labeled fixed-length windows.

    Seizure windows ride a stride grid anchored at each annotated interval's
    onset (stride = epoch * (1 - seizure_overlap)); by default only windows
    fully inside the interval are kept, optionally also boundary-crossing
    ones. Background windows ride a grid anchored at the recording start and
    skip anything that touches a seizure interval. All index arithmetic runs
    in the integer sample domain.
    """
    rate = rec.sample_rate_hz
    total = rec.samples.shape[1]
    w = int(round(policy.epoch_seconds * rate))
    if w > total:
        warnings.warn(f"epoch of {w} samples longer than recording of {total}; "
                      "no windows produced", SegmentationWarning)
        return []

    seiz_stride = max(1, int(round(w * (1.0 - policy.seizure_overlap_fraction))))
    bg_stride = max(1, int(round(w * (1.0 - policy.nonseizure_overlap_fraction))))

    intervals = [(int(round(a.onset_s * rate)), int(round(a.offset_s * rate)), a.label)
                 for a in rec.annotations]

    chosen: dict[int, tuple[str, int]] = {}   # start -> (label, overlap)
    for onset, offset, label in intervals:
        start = onset
        while start + w <= total:
            contained = start + w <= offset
            if not contained and not (policy.include_boundary_windows and start < offset):
                break
            overlap = min(start + w, offset) - max(start, onset)
            prev = chosen.get(start)
            if prev is None or overlap > prev[1]:
                chosen[start] = (label, overlap)
            start += seiz_stride

    epochs: list[EegEpoch] = []
    for start in sorted(chosen):
        label, _ = chosen[start]
        epochs.append(EegEpoch(rec.samples[:, start:start + w].copy(), label,
                               rec.source_id, start / rate))

    start = 0
    while start + w <= total:
        if not any(_intersects(start, start + w, on, off) for on, off, _ in intervals):
            epochs.append(EegEpoch(rec.samples[:, start:start + w].copy(),
                                   BACKGROUND_LABEL, rec.source_id, start / rate))
        start += bg_stride

    epochs.sort(key=lambda e: (e.window_start_s, e.label))
    return epochs


def balance(epochs: list[EegEpoch], policy: SegmentationPolicy, seed: int) -> list[EegEpoch]:
    """Keep every seizure epoch; subsample background without replacement to
    balance_ratio * seizure count (or keep all if fewer exist)."""
    seiz = [e for e in epochs if e.label != BACKGROUND_LABEL]
    bg = [e for e in epochs if e.label == BACKGROUND_LABEL]
    if not seiz:
        raise PipelineError("no seizure epochs present; dataset unusable for this task")
    n_keep = min(len(bg), int(round(policy.balance_ratio * len(seiz))))
    rng = np.random.default_rng(seed)
    keep_idx = set(rng.choice(len(bg), size=n_keep, replace=False).tolist()) if bg else set()
    kept_bg = [e for i, e in enumerate(bg) if i in keep_idx]
    return seiz + kept_bg


def zscore(epoch: EegEpoch, eps: float = 1e-12) -> EegEpoch:
    """Per-channel standardization within the epoch (population sigma);
    constant channels map to zeros."""
    x = epoch.data
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    out = np.where(sd > eps, (x - mu) / np.where(sd > eps, sd, 1.0), 0.0)
    return EegEpoch(out, epoch.label, epoch.source_id, epoch.window_start_s)


def zscore_recording(rec: EegRecording, eps: float = 1e-12) -> EegRecording:
    """Per-channel standardization over the whole recording (the alternative
    statistics scope; the default pipeline standardizes per epoch)."""
    x = rec.samples
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    out = np.where(sd > eps, (x - mu) / np.where(sd > eps, sd, 1.0), 0.0)
    return replace(rec, samples=out)


def reject_artifact_epochs(epochs: list[EegEpoch], max_abs_uv: float = 500.0,
                           flatline_std: float = 1e-7) -> list[EegEpoch]:
    """Drop epochs with extreme amplitudes or an all-channel flatline."""
    kept = []
    for e in epochs:
        if np.abs(e.data).max() > max_abs_uv:
            continue
        if e.data.std(axis=1).max() < flatline_std:
            continue
        kept.append(e)
    return kept


def convert_edf(path):
    """EDF ingestion is intentionally unsupported; convert to DCEEG-RAW.

    Field mapping for a converter: EDF signal labels -> header ``channels``
    (strip 'EEG ' prefixes and reference suffixes), EDF sample rate ->
    ``rate_hz``, physical-dimension-scaled samples -> float32 channel-major
    body, and seizure annotations -> the onset_s/offset_s/label CSV.
    """
    raise NotImplementedError(
        f"cannot ingest {path}: EDF parsing is out of scope; convert the file "
        "to the DCEEG-RAW format described in the README")
