"""Copying a black-box classifier onto another machine.

The perpetrator's unlabeled patches are mapped into the victim domain with
the calibration transfer function, labeled once by the oracle, and then
refined by iterative learning with noisy labels: each round trains a fresh
network only on the lowest-loss ``100 - epsilon`` percent of the patches
(the anchors) and re-selects the anchors after every epoch.  A last round
retrains on the raw perpetrator patches so the deployed model needs no
transfer function.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import model
from .calibration import TransferFunction, apply
from .errors import ArgumentError
from .patches import PatchSet, zscore

log = logging.getLogger(__name__)


@dataclass
class ExtractionConfig:
    epsilon: float = 20.0  # assumed noise rate, percent
    iterations: int = 2
    label_percentile: float = 50.0
    snr: float = 100.0
    inner_train: model.TrainConfig = field(default_factory=model.TrainConfig)
    seed: int = 0
    widths: tuple = model.PERPETRATOR_WIDTHS
    requery_oracle: bool = False

    def __post_init__(self):
        _check_epsilon(self.epsilon)
        if not 0 < self.label_percentile < 100:
            raise ArgumentError(f"label_percentile must lie in (0, 100), got {self.label_percentile}")
        if self.iterations < 1:
            raise ArgumentError(f"iterations must be >= 1, got {self.iterations}")

    @property
    def anchor_fraction(self) -> float:
        return (100.0 - self.epsilon) / 100.0


@dataclass(frozen=True)
class AnchorSet:
    indices: np.ndarray
    losses: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _check_epsilon(epsilon: float) -> None:
    if not 0 <= epsilon < 100:
        raise ArgumentError(f"epsilon must lie in [0, 100), got {epsilon}")


def anchor_count(n: int, epsilon: float) -> int:
    """floor((100 - epsilon) / 100 * n), computed without float round-off."""
    frac = (100 - Fraction(epsilon).limit_denominator(10 ** 9)) / 100
    return math.floor(frac * n)


def select_anchors(losses, epsilon: float) -> AnchorSet:
    """Indices of the ``100 - epsilon`` percent smallest losses (ties: lower index first)."""
    _check_epsilon(epsilon)
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ArgumentError("no losses to select anchors from")
    k = anchor_count(losses.size, epsilon)
    idx = np.sort(np.argsort(losses, kind="stable")[:k])
    return AnchorSet(idx, losses[idx])


def pseudo_label(scores, percentile: float = 50.0) -> np.ndarray:
    """Threshold scores at their ``percentile``-th percentile.

    Scores above the threshold get label 1.  Scores equal to it are split in
    index order, spreading the ones evenly, until the number of ones matches
    ``round((100 - percentile) / 100 * n)``.
    """
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ArgumentError("cannot pseudo-label an empty score list")
    if not 0 < percentile < 100:
        raise ArgumentError(f"percentile must lie in (0, 100), got {percentile}")
    t = np.percentile(s, percentile)
    labels = (s > t).astype(np.int64)
    tied = np.flatnonzero(s == t)
    if tied.size:
        n_zero = math.floor(Fraction(percentile).limit_denominator(10 ** 9) * s.size / 100 + Fraction(1, 2))
        need = min(max(s.size - n_zero - int(labels.sum()), 0), tied.size)
        i = np.arange(tied.size)
        pick = (i + 1) * need // tied.size > i * need // tied.size
        labels[tied[pick]] = 1
    return labels


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def map_to_victim(x_perp: PatchSet, tf: TransferFunction) -> PatchSet:
    """Transfer-function mapping followed by patch-wise standardization."""
    return zscore(apply(tf, x_perp))


def iterate_steps(oracle, x_perp: PatchSet, tf: TransferFunction, cfg: ExtractionConfig):
    """Run the iterative loop, yielding ``(iteration, params)`` after each round.

    Only the first labeling pass queries the oracle (unless
    ``cfg.requery_oracle``); later rounds are labeled by the previous round's
    network.
    """
    if len(x_perp) == 0:
        raise ArgumentError("no unlabeled perpetrator patches")
    x = map_to_victim(x_perp, tf).samples.astype(np.float32)
    n = len(x)
    inner = cfg.inner_train
    labeler = None
    for it in range(cfg.iterations):
        if labeler is None or cfg.requery_oracle:
            scores = oracle.score(PatchSet(x, x_perp.sources, x_perp.origins, x_perp.fs))
        else:
            scores = model.predict(labeler, x)
        y = pseudo_label(scores, cfg.label_percentile).astype(np.float32)

        seed = _derive_seed(cfg.seed, 1, it)
        init = model.init_params(cfg.widths, x.shape[1:], seed=seed, fs=x_perp.fs)
        trainer = model.Trainer(init, replace(inner, seed=seed))
        anchors = select_anchors(trainer.losses(x, y), cfg.epsilon).indices
        for _ in range(inner.epochs_for(len(anchors))):
            trainer.epoch(x, y, anchors)
            anchors = select_anchors(trainer.losses(x, y), cfg.epsilon).indices
            assert len(anchors) == anchor_count(n, cfg.epsilon)
        # the network after the last epoch becomes the next labeler
        labeler = trainer.snapshot()
        log.info("iteration %d done (%d patches, %d anchors)", it + 1, n, len(anchors))
        yield it + 1, labeler


def iterate(oracle, x_perp: PatchSet, tf: TransferFunction, cfg: ExtractionConfig) -> model.ClassifierParams:
    """Train a perpetrator network on transfer-mapped patches; it expects mapped input."""
    params = None
    for _, params in iterate_steps(oracle, x_perp, tf, cfg):
        pass
    return params


def refined_labels(f_iter: model.ClassifierParams, x_perp: PatchSet, tf: TransferFunction,
                   cfg: ExtractionConfig) -> np.ndarray:
    scores = model.predict(f_iter, map_to_victim(x_perp, tf))
    return pseudo_label(scores, cfg.label_percentile)


def finalize(f_iter: model.ClassifierParams, x_perp: PatchSet, tf: TransferFunction,
             cfg: ExtractionConfig) -> model.ClassifierParams:
    """Retrain on raw, standardized perpetrator patches so inference needs no transfer function."""
    y = refined_labels(f_iter, x_perp, tf, cfg)
    seed = _derive_seed(cfg.seed, 2)
    init = model.init_params(cfg.widths, x_perp.patch_shape, seed=seed, fs=x_perp.fs)
    return model.train(init, zscore(x_perp), y, replace(cfg.inner_train, seed=seed))


def extract(oracle, x_perp: PatchSet, tf: TransferFunction, cfg: ExtractionConfig) -> model.ClassifierParams:
    """Iterate then finalize."""
    return finalize(iterate(oracle, x_perp, tf, cfg), x_perp, tf, cfg)
