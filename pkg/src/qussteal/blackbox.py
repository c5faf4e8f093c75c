"""The victim classifier behind a score-only interface.

An :class:`Oracle` answers exactly three questions: what input geometry it
accepts, how many patches it has scored, and the scores of a batch of
patches.  Weights never leave the closure that holds them.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import ArgumentError, InterfaceError
from .metrics import accuracy, compute_auc
from .patches import DESK_GRID, PatchGrid, PatchSet, extract_many, zscore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Geometry:
    patch_h: int
    patch_w: int
    fs: float


class Oracle:
    __slots__ = ("_Oracle__score", "_Oracle__lock", "_Oracle__count", "_Oracle__geometry")

    def __init__(self, params: model.ClassifierParams):
        net = model.to_module(params)
        net.eval()

        def _score(samples):
            return model.predict(params, samples, net=net)

        self.__score = _score
        self.__lock = threading.Lock()
        self.__count = 0
        self.__geometry = Geometry(int(params.input_shape[0]), int(params.input_shape[1]),
                                   float(params.fs))

    @property
    def geometry(self) -> Geometry:
        return self.__geometry

    @property
    def query_count(self) -> int:
        return self.__count

    def score(self, patches: PatchSet) -> np.ndarray:
        """Scores in input order.  Foreign geometry or sampling rate is rejected."""
        if not isinstance(patches, PatchSet):
            raise InterfaceError(f"oracle accepts PatchSet input, got {type(patches).__name__}")
        if len(patches) == 0:
            return np.zeros(0)
        g = self.__geometry
        if patches.patch_shape != (g.patch_h, g.patch_w):
            raise InterfaceError(f"patch shape {patches.patch_shape} != expected {(g.patch_h, g.patch_w)}")
        if g.fs and not np.isclose(patches.fs, g.fs):
            raise InterfaceError(f"patches sampled at {patches.fs} MHz, oracle expects {g.fs} MHz")
        scores = self.__score(patches.samples)
        with self.__lock:
            self.__count += len(patches)
        return scores


def score(oracle: Oracle, patches: PatchSet) -> np.ndarray:
    return oracle.score(patches)


@dataclass
class VictimModel:
    params: model.ClassifierParams
    val_accuracy: float
    val_auc: float
    train_frames: np.ndarray  # frame ids
    val_frames: np.ndarray
    val_patches: PatchSet
    val_labels: np.ndarray


def split_frames(n: int, val_fraction: float, rng) -> tuple:
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_victim(frames_class0, frames_class1, cfg: model.TrainConfig, grid: PatchGrid = DESK_GRID,
               widths=model.VICTIM_WIDTHS, val_fraction: float = 0.2) -> VictimModel:
    """Train the victim network with a 4:1 frame-level train/validation split."""
    frames_class0, frames_class1 = list(frames_class0), list(frames_class1)
    if not frames_class0 or not frames_class1:
        raise ArgumentError("victim training needs frames of both classes")
    frames = frames_class0 + frames_class1
    labels = np.array([0] * len(frames_class0) + [1] * len(frames_class1))
    rng = np.random.default_rng([cfg.seed, 0x71C7])
    train_ids, val_ids = [], []
    for cls in (0, 1):
        ids = np.flatnonzero(labels == cls)
        tr, va = split_frames(len(ids), val_fraction, rng)
        train_ids.append(ids[tr])
        val_ids.append(ids[va])
    train_ids, val_ids = np.concatenate(train_ids), np.concatenate(val_ids)

    def patches_of(ids):
        ps = zscore(extract_many([frames[i] for i in ids], grid, ids))
        return ps, np.repeat(labels[ids], grid.count)

    x_tr, y_tr = patches_of(train_ids)
    x_va, y_va = patches_of(val_ids)
    init = model.init_params(widths, grid.shape, seed=cfg.seed, fs=frames[0].fs)
    params = model.train(init, x_tr, y_tr, cfg)
    s = model.predict(params, x_va)
    acc, auc = accuracy(s, y_va), compute_auc(s, y_va)
    log.info("victim validation accuracy %.2f%%, AUC %.4f", acc, auc)
    return VictimModel(params, acc, auc, train_ids, val_ids, x_va, y_va)


def train_victim(frames_class0, frames_class1, cfg: model.TrainConfig, grid: PatchGrid = DESK_GRID,
                 widths=model.VICTIM_WIDTHS) -> Oracle:
    return Oracle(fit_victim(frames_class0, frames_class1, cfg, grid, widths).params)
