"""Patch grids, patch containers and patch-wise standardization."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class PatchGrid:
    axial_skip: int
    axial_stride: int
    lateral_stride: int
    patch_h: int
    patch_w: int
    n_axial: int
    n_lateral: int
    lateral_skip: int = 0

    @property
    def count(self) -> int:
        return self.n_axial * self.n_lateral

    @property
    def shape(self) -> tuple:
        return (self.patch_h, self.patch_w)

    def required_shape(self) -> tuple:
        rows = self.axial_skip + (self.n_axial - 1) * self.axial_stride + self.patch_h
        cols = self.lateral_skip + (self.n_lateral - 1) * self.lateral_stride + self.patch_w
        return rows, cols

    def check_fits(self, shape) -> None:
        rows, cols = self.required_shape()
        if rows > shape[0]:
            raise ArgumentError(
                f"patch grid overflows the axial dimension: needs {rows} samples, frame has {shape[0]}")
        if cols > shape[1]:
            raise ArgumentError(
                f"patch grid overflows the lateral dimension: needs {cols} lines, frame has {shape[1]}")

    def corners(self) -> list:
        """Top-left (row, col) of every patch in axial-major order."""
        return [(self.axial_skip + i * self.axial_stride, self.lateral_skip + j * self.lateral_stride)
                for i in range(self.n_axial) for j in range(self.n_lateral)]


FULL_GRID = PatchGrid(axial_skip=540, axial_stride=100, lateral_stride=26,
                      patch_h=200, patch_w=26, n_axial=9, n_lateral=9)
DESK_GRID = PatchGrid(axial_skip=270, axial_stride=50, lateral_stride=13,
                      patch_h=100, patch_w=13, n_axial=9, n_lateral=9)
GRIDS = {"full": FULL_GRID, "desk": DESK_GRID}


@dataclass
class Patch:
    samples: np.ndarray
    source: tuple  # (frame id, axial index, lateral index)
    fs: float
    origin: tuple = (0, 0)  # (row, col) of the top-left sample in the frame


@dataclass
class PatchSet:
    """Patches stacked into one ``(n, h, w)`` array.

    Order is the join key with any label vector, so nothing here reorders
    patches implicitly.
    """

    samples: np.ndarray
    sources: np.ndarray  # (n, 3) int
    origins: np.ndarray  # (n, 2) int
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.sources = np.asarray(self.sources, dtype=np.int64).reshape(-1, 3)
        self.origins = np.asarray(self.origins, dtype=np.int64).reshape(-1, 2)
        if not (len(self.samples) == len(self.sources) == len(self.origins)):
            raise ArgumentError("patch samples, sources and origins differ in length")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Patch(self.samples[idx], tuple(int(v) for v in self.sources[idx]), self.fs,
                         tuple(int(v) for v in self.origins[idx]))
        return PatchSet(self.samples[idx], self.sources[idx], self.origins[idx], self.fs)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def patch_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    @property
    def frame_ids(self) -> np.ndarray:
        return self.sources[:, 0]

    def with_samples(self, samples: np.ndarray) -> "PatchSet":
        return replace(self, samples=samples)

    @classmethod
    def empty(cls, shape=(0, 0), fs: float = 0.0) -> "PatchSet":
        return cls(np.zeros((0,) + tuple(shape)), np.zeros((0, 3)), np.zeros((0, 2)), fs)

    @classmethod
    def from_patches(cls, patches) -> "PatchSet":
        patches = list(patches)
        if not patches:
            return cls.empty()
        return cls(np.stack([p.samples for p in patches]), [p.source for p in patches],
                   [p.origin for p in patches], patches[0].fs)

    @classmethod
    def concat(cls, sets) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        fs = {s.fs for s in sets}
        if len(fs) != 1:
            raise ArgumentError(f"cannot concatenate patch sets with sampling rates {sorted(fs)}")
        return cls(np.concatenate([s.samples for s in sets]),
                   np.concatenate([s.sources for s in sets]),
                   np.concatenate([s.origins for s in sets]), sets[0].fs)


def extract_patches(frame, grid: PatchGrid, frame_id: int = 0) -> PatchSet:
    """Cut ``grid`` out of one frame, axial-major then lateral."""
    samples = np.asarray(frame.samples)
    grid.check_fits(samples.shape)
    h, w = grid.shape
    out = np.empty((grid.count, h, w), dtype=samples.dtype)
    sources, origins = [], []
    for k, (r, c) in enumerate(grid.corners()):
        out[k] = samples[r:r + h, c:c + w]
        sources.append((frame_id, k // grid.n_lateral, k % grid.n_lateral))
        origins.append((r, c))
    return PatchSet(out, sources, origins, frame.fs)


def extract_many(frames, grid: PatchGrid, frame_ids=None) -> PatchSet:
    frames = list(frames)
    if frame_ids is None:
        frame_ids = range(len(frames))
    return PatchSet.concat([extract_patches(f, grid, int(i)) for f, i in zip(frames, frame_ids)])


def _zscore_array(x: np.ndarray) -> np.ndarray:
    axes = tuple(range(x.ndim - 2, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return (x - mean) / (std + 1e-8)


def zscore(p):
    """Patch-wise standardization: subtract the patch mean, divide by its std."""
    if isinstance(p, PatchSet):
        return p.with_samples(_zscore_array(np.asarray(p.samples, dtype=float)))
    if isinstance(p, Patch):
        return replace(p, samples=_zscore_array(np.asarray(p.samples, dtype=float)))
    return _zscore_array(np.asarray(p, dtype=float))


def hflip(p):
    """Reverse the lateral axis."""
    if isinstance(p, PatchSet):
        return p.with_samples(p.samples[:, :, ::-1].copy())
    if isinstance(p, Patch):
        return replace(p, samples=p.samples[:, ::-1].copy())
    return np.asarray(p)[..., ::-1].copy()
