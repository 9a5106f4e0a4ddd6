"""On-disk formats: DCEEG-RAW recordings and DCEEG-SET epoch datasets.

DCEEG-RAW is a plain-text header (magic, rate, channel names, sample count)
followed by a blank line and little-endian float32 channel-major samples.
Annotations live next to the signal as a CSV with columns
onset_s,offset_s,label. DCEEG-SET packs preprocessed epochs: a text header
with per-class counts and dimensions, then uint16 labels and float32 epoch
data.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .signal import Annotation, BACKGROUND_LABEL, EegEpoch, EegRecording

RAW_MAGIC = "DCEEG-RAW 1"
SET_MAGIC = "DCEEG-SET 1"


class FormatError(Exception):
    pass


def annotation_path(signal_path) -> Path:
    return Path(signal_path).with_suffix(".csv")


def save_recording(path, rec: EegRecording) -> None:
    path = Path(path)
    header = (f"{RAW_MAGIC}\n"
              f"rate_hz {rec.sample_rate_hz!r}\n"
              f"channels {','.join(rec.channels)}\n"
              f"samples {rec.samples.shape[1]}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    with open(annotation_path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["onset_s", "offset_s", "label"])
        for a in rec.annotations:
            writer.writerow([f"{a.onset_s!r}", f"{a.offset_s!r}", a.label])


def load_recording(path) -> EegRecording:
    path = Path(path)
    raw = path.read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing blank line after header")
    fields = {}
    lines = raw[:sep].decode("utf-8").splitlines()
    if not lines or lines[0] != RAW_MAGIC:
        raise FormatError(f"{path}: not a {RAW_MAGIC} file")
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        fields[key] = value
    channels = fields["channels"].split(",")
    n = int(fields["samples"])
    body = np.frombuffer(raw[sep + 2:], dtype="<f4")
    if body.size != len(channels) * n:
        raise FormatError(f"{path}: expected {len(channels) * n} samples, found {body.size}")
    annotations = load_annotations(annotation_path(path))
    return EegRecording(sample_rate_hz=float(fields["rate_hz"]), channels=channels,
                        samples=body.reshape(len(channels), n).astype(np.float64),
                        annotations=annotations, source_id=path.stem)


def load_annotations(path) -> list[Annotation]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Annotation(float(row["onset_s"]), float(row["offset_s"]),
                                  row["label"].strip()))
    return out


def class_order(labels) -> list[str]:
    """Stable class ordering: background first, then sorted seizure labels."""
    rest = sorted(set(labels) - {BACKGROUND_LABEL})
    return ([BACKGROUND_LABEL] if BACKGROUND_LABEL in set(labels) else []) + rest


def save_dataset(path, epochs: list[EegEpoch], channels: list[str],
                 rate_hz: float) -> None:
    if not epochs:
        raise FormatError("refusing to write an empty dataset")
    classes = class_order([e.label for e in epochs])
    index = {c: i for i, c in enumerate(classes)}
    labels = np.asarray([index[e.label] for e in epochs], dtype="<u2")
    counts = np.bincount(labels, minlength=len(classes))
    data = np.stack([e.data for e in epochs]).astype("<f4")
    sources = [f"{e.source_id}@{e.window_start_s!r}" for e in epochs]
    header = (f"{SET_MAGIC}\n"
              f"classes {','.join(classes)}\n"
              f"class_counts {','.join(str(int(c)) for c in counts)}\n"
              f"epochs {len(epochs)}\n"
              f"channels {data.shape[1]}\n"
              f"window_samples {data.shape[2]}\n"
              f"rate_hz {rate_hz!r}\n"
              f"channel_names {','.join(channels)}\n"
              f"sources {';'.join(sources)}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(labels.tobytes())
        fh.write(np.ascontiguousarray(data).tobytes())


class EpochDataset:
    """In-memory view of a DCEEG-SET file."""

    def __init__(self, data: np.ndarray, labels: np.ndarray, classes: list[str],
                 channel_names: list[str], rate_hz: float, sources: list[str]):
        self.data = data                      # [N, E, W] float32
        self.labels = labels                  # [N] int
        self.classes = classes
        self.channel_names = channel_names
        self.rate_hz = rate_hz
        self.sources = sources

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def source_ids(self) -> list[str]:
        return [s.partition("@")[0] for s in self.sources]


def load_dataset(path) -> EpochDataset:
    path = Path(path)
    raw = path.read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing blank line after header")
    lines = raw[:sep].decode("utf-8").splitlines()
    if not lines or lines[0] != SET_MAGIC:
        raise FormatError(f"{path}: not a {SET_MAGIC} file")
    fields = dict(ln.partition(" ")[::2] for ln in lines[1:])
    n = int(fields["epochs"])
    e = int(fields["channels"])
    w = int(fields["window_samples"])
    classes = fields["classes"].split(",")
    counts = [int(c) for c in fields["class_counts"].split(",")]
    body = raw[sep + 2:]
    labels = np.frombuffer(body[:2 * n], dtype="<u2").astype(np.int64)
    data = np.frombuffer(body[2 * n:], dtype="<f4")
    if data.size != n * e * w:
        raise FormatError(f"{path}: expected {n * e * w} values, found {data.size}")
    actual = np.bincount(labels, minlength=len(classes))
    if list(actual) != counts:
        raise FormatError(f"{path}: header class_counts {counts} != body counts {list(actual)}")
    sources = fields.get("sources", "").split(";") if fields.get("sources") else [""] * n
    return EpochDataset(data.reshape(n, e, w).copy(), labels, classes,
                        fields["channel_names"].split(","), float(fields["rate_hz"]),
                        sources)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
