"""RF dataset files and plain-text score lists.

Layout (little-endian)::

    b"USRF" | u32 version | u32 count | u32 axial | u32 lateral | f64 fs_hz
    | i8 label * count | f32 samples, frame-major (count, axial, lateral)

Patches travel in the same container, one patch per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .patches import PatchSet
from .rfsim import NOMINAL_SOS, RFFrame

MAGIC = b"USRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


@dataclass
class RFDataset:
    samples: np.ndarray  # (count, axial, lateral) float32
    labels: np.ndarray  # int8, -1 = unlabeled
    fs: float  # MHz

    def __len__(self) -> int:
        return len(self.samples)

    def frames(self, machine_name: str = "", phantom_name: str = "") -> list:
        depth = self.samples.shape[1] / (self.fs * 1e6) * NOMINAL_SOS / 2 * 100 if len(self) else 0.0
        return [RFFrame(self.samples[i].astype(float), self.fs, depth, machine_name, phantom_name, 0,
                        int(self.labels[i])) for i in range(len(self))]

    def patches(self) -> PatchSet:
        n = len(self)
        sources = np.column_stack([np.arange(n), np.zeros(n, int), np.zeros(n, int)])
        return PatchSet(self.samples.astype(float), sources, np.zeros((n, 2), int), self.fs)

    @classmethod
    def from_frames(cls, frames, labels=None) -> "RFDataset":
        frames = list(frames)
        if not frames:
            raise FormatError("refusing to write a dataset with no frames")
        shapes = {np.shape(f.samples) for f in frames}
        rates = {float(f.fs) for f in frames}
        if len(shapes) != 1 or len(rates) != 1:
            raise FormatError("frames in one dataset must share shape and sampling rate")
        if labels is None:
            labels = [getattr(f, "label", -1) for f in frames]
        return cls(np.stack([np.asarray(f.samples, np.float32) for f in frames]),
                   np.asarray(labels, np.int8), rates.pop())

    @classmethod
    def from_patches(cls, patches: PatchSet, labels=None) -> "RFDataset":
        n = len(patches)
        lab = np.full(n, -1, np.int8) if labels is None else np.asarray(labels, np.int8)
        return cls(np.asarray(patches.samples, np.float32), lab, patches.fs)


def write_dataset(ds: RFDataset, path) -> None:
    path = Path(path)
    n, axial, lateral = ds.samples.shape
    if len(ds.labels) != n:
        raise FormatError(f"{path}: {len(ds.labels)} labels for {n} frames")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, axial, lateral, ds.fs * 1e6))
            fh.write(np.asarray(ds.labels, "<i1").tobytes())
            fh.write(np.asarray(ds.samples, "<f4").tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def read_dataset(path) -> RFDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, axial, lateral, fs_hz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not an RF dataset (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    expected = off + n + 4 * n * axial * lateral
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, "<i1", n, off).astype(np.int8)
    samples = np.frombuffer(raw, "<f4", n * axial * lateral, off + n).reshape(n, axial, lateral)
    return RFDataset(samples.astype(np.float32), labels, fs_hz / 1e6)


def write_scores(scores, path) -> None:
    try:
        Path(path).write_text("".join(f"{float(s):.9g}\n" for s in scores))
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def read_scores(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        return np.array([float(t) for t in text.split()], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed score list") from exc
