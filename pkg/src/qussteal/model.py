"""A small convolutional patch classifier and its training loop.

The same architecture family stands in for both the victim and the
perpetrator network; only the channel widths differ.  Parameters are kept as
plain numpy arrays in :class:`ClassifierParams` so that they can be copied,
compared and serialized without touching torch.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ArgumentError, FormatError
from .patches import DESK_GRID, Patch, PatchGrid, PatchSet, extract_patches, zscore

__all__ = [
    "ClassifierParams", "ConvClassifier", "PatchGrid", "TrainConfig", "Trainer", "extract_patches",
    "init_params", "load_params", "loss", "predict", "save_params", "train", "zscore",
]

VICTIM_WIDTHS = (8, 16, 32)
PERPETRATOR_WIDTHS = (4, 8, 16)
KERNEL = (5, 3)
SCORE_CLAMP = 1e-7
PREDICT_BATCH = 256


class ConvClassifier(nn.Module):
    """Conv(5x3) -> ReLU -> 2x axial max-pool, repeated, then global average and a linear head."""

    def __init__(self, widths, kernel=KERNEL):
        super().__init__()
        layers = []
        c_in = 1
        for c_out in widths:
            layers += [nn.Conv2d(c_in, c_out, kernel, padding=(kernel[0] // 2, kernel[1] // 2)),
                       nn.ReLU(), nn.MaxPool2d((2, 1))]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 1)

    def forward(self, x):
        h = self.features(x.unsqueeze(1))
        return self.head(h.mean(dim=(2, 3))).squeeze(-1)


@dataclass
class ClassifierParams:
    widths: tuple
    input_shape: tuple
    tensors: dict = field(repr=False)
    kernel: tuple = KERNEL
    seed: int = 0
    fs: float = 0.0  # MHz the classifier expects; 0 = unspecified

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ClassifierParams":
        return copy.deepcopy(self)

    def equals(self, other: "ClassifierParams") -> bool:
        return (self.widths == other.widths and self.input_shape == other.input_shape
                and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init_params(widths=PERPETRATOR_WIDTHS, input_shape=DESK_GRID.shape, seed: int = 0,
                fs: float = 0.0, kernel=KERNEL) -> ClassifierParams:
    """Seeded variance-scaled initialization (torch's default Kaiming-uniform scheme)."""
    if input_shape[0] < 2 ** len(widths):
        raise ArgumentError(f"patch height {input_shape[0]} too small for {len(widths)} pooling stages")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ConvClassifier(widths, kernel)
    tensors = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
    return ClassifierParams(tuple(widths), tuple(input_shape), tensors, tuple(kernel), int(seed), fs)


def to_module(params: ClassifierParams, dtype=torch.float32) -> ConvClassifier:
    net = ConvClassifier(params.widths, params.kernel).to(dtype)
    # cast after conversion so float64 callers keep full precision
    net.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in params.tensors.items()})
    return net


def from_module(net: nn.Module, like: ClassifierParams) -> ClassifierParams:
    tensors = {k: v.detach().to(torch.float32).numpy().copy() for k, v in net.state_dict().items()}
    return ClassifierParams(like.widths, like.input_shape, tensors, like.kernel, like.seed, like.fs)


def _as_array(p, params: ClassifierParams) -> tuple:
    """Return (array (n,h,w), single?) after checking geometry."""
    if isinstance(p, PatchSet):
        x, single = p.samples, False
    elif isinstance(p, Patch):
        x, single = p.samples[None], True
    else:
        x = np.asarray(p)
        single = x.ndim == 2
        if single:
            x = x[None]
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(params.input_shape):
        raise ArgumentError(f"patch shape {tuple(x.shape[1:])} does not match classifier input "
                            f"{tuple(params.input_shape)}")
    return x, single


def _logits(net, x: np.ndarray, dtype=torch.float32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(x), PREDICT_BATCH):
            out.append(net(torch.as_tensor(np.ascontiguousarray(x[i:i + PREDICT_BATCH]), dtype=dtype)))
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def _squash(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def predict(params: ClassifierParams, p, net=None):
    """Score(s) in [0, 1]; a single patch yields a float, a batch an array."""
    x, single = _as_array(p, params)
    net = net if net is not None else to_module(params)
    s = _squash(_logits(net, x))
    return float(s[0]) if single else s


def bce(scores, labels) -> np.ndarray:
    s = np.clip(np.asarray(scores, dtype=float), SCORE_CLAMP, 1 - SCORE_CLAMP)
    y = np.asarray(labels, dtype=float)
    return -(y * np.log(s) + (1 - y) * np.log(1 - s))


def loss(params: ClassifierParams, p, y):
    """Binary cross-entropy of the clamped score; per patch for a batch."""
    s = predict(params, p)
    out = bce(s, y)
    return float(out) if np.ndim(out) == 0 else out


def _check_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ArgumentError(f"{y.size} labels for {n} patches")
    if not np.all((y == 0) | (y == 1)):
        raise ArgumentError("labels must be 0 or 1")
    return y.astype(np.float32)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    flip_prob: float = 0.5
    validation_fraction: float = 0.1
    seed: int = 0
    # small training sets get extra epochs up to this many optimizer steps; with
    # skewed labels a short run learns the label prior before the classes
    min_steps: int = 256

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ArgumentError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0 < self.validation_fraction < 1:
            raise ArgumentError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be positive")
        if self.min_steps < 0:
            raise ArgumentError(f"min_steps must be >= 0, got {self.min_steps}")

    def epochs_for(self, n_train: int) -> int:
        per_epoch = max(1, math.ceil(n_train / self.batch_size))
        return max(self.epochs, math.ceil(self.min_steps / per_epoch))

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        return cls(**{"learning_rate": 1e-5, "batch_size": 2048, **kw})


class Trainer:
    """Adam on binary cross-entropy with random horizontal flips.

    All randomness (shuffling and flips) comes from one numpy generator seeded
    by ``cfg.seed``, so a run is reproducible given its inputs.
    """

    def __init__(self, params: ClassifierParams, cfg: TrainConfig, stream: int = 0):
        self.like = params
        self.cfg = cfg
        self.net = to_module(params)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate,
                                    betas=(0.9, 0.999), eps=1e-8)
        self.rng = np.random.default_rng([cfg.seed, stream, 0x5EED])

    def epoch(self, x: np.ndarray, y: np.ndarray, idx=None) -> float:
        idx = np.arange(len(x)) if idx is None else np.asarray(idx)
        order = idx[self.rng.permutation(len(idx))]
        flips = self.rng.random(len(order)) < self.cfg.flip_prob
        self.net.train()
        total = 0.0
        for i in range(0, len(order), self.cfg.batch_size):
            b = order[i:i + self.cfg.batch_size]
            xb = np.array(x[b], dtype=np.float32)
            fb = flips[i:i + self.cfg.batch_size]
            xb[fb] = xb[fb][:, :, ::-1]
            xt = torch.from_numpy(xb)
            yt = torch.from_numpy(np.asarray(y[b], dtype=np.float32))
            self.opt.zero_grad()
            batch_loss = F.binary_cross_entropy_with_logits(self.net(xt), yt)
            batch_loss.backward()
            self.opt.step()
            total += float(batch_loss.detach()) * len(b)
        return total / max(len(order), 1)

    def scores(self, x: np.ndarray) -> np.ndarray:
        self.net.eval()
        return _squash(_logits(self.net, x))

    def losses(self, x: np.ndarray, y) -> np.ndarray:
        return bce(self.scores(x), y)

    def snapshot(self) -> ClassifierParams:
        return from_module(self.net, self.like)


def split_validation(n: int, fraction: float, rng) -> tuple:
    perm = rng.permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(init: ClassifierParams, data, labels, cfg: TrainConfig) -> ClassifierParams:
    """Fit ``init`` to (data, labels); returns the lowest-validation-loss epoch."""
    x, _ = _as_array(data, init) if len(data) else (None, None)
    if x is None or len(x) == 0:
        raise ArgumentError("cannot train on an empty patch set")
    y = _check_labels(labels, len(x))
    trainer = Trainer(init, cfg)
    tr, va = split_validation(len(x), cfg.validation_fraction,
                              np.random.default_rng([cfg.seed, 0x5A11]))
    best, best_loss = trainer.snapshot(), np.inf
    for _ in range(cfg.epochs_for(len(tr))):
        trainer.epoch(x, y, tr)
        val_loss = float(trainer.losses(x[va], y[va]).mean()) if len(va) else 0.0
        if val_loss < best_loss:
            best, best_loss = trainer.snapshot(), val_loss
    return best


def loss_and_grad(params: ClassifierParams, x: np.ndarray, y) -> tuple:
    """Mean BCE and its gradient (flattened, declaration order) in float64."""
    net = to_module(params, torch.float64)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
    yt = torch.as_tensor(np.asarray(y, dtype=np.float64))
    value = F.binary_cross_entropy_with_logits(net(xt), yt)
    grads = torch.autograd.grad(value, list(net.parameters()))
    return float(value.detach()), np.concatenate([g.numpy().ravel() for g in grads])


def mean_loss64(params: ClassifierParams, x: np.ndarray, y) -> float:
    """Forward-only float64 mean BCE, used as the finite-difference reference."""
    net = to_module(params, torch.float64)
    with torch.no_grad():
        z = net(torch.as_tensor(np.asarray(x, dtype=np.float64))).numpy()
    y = np.asarray(y, dtype=float)
    # log(1 + e^z) - y z, written stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


# -- serialization ------------------------------------------------------------

_MAGIC = b"USCP"
_VERSION = 1


def save_params(params: ClassifierParams, path) -> None:
    desc = {
        "widths": list(params.widths), "kernel": list(params.kernel),
        "input_shape": list(params.input_shape), "seed": params.seed, "fs": params.fs,
        "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(blob)) + blob)
        for v in params.tensors.values():
            fh.write(np.asarray(v, dtype="<f4").tobytes())


def load_params(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a classifier file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported classifier version {version}")
    desc = json.loads(data[12:12 + n])
    off = 12 + n
    tensors = {}
    for name, shape in desc["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        if arr.size != count:
            raise FormatError(f"{path}: truncated tensor {name}")
        tensors[name] = arr.reshape(shape).astype(np.float32)
        off += arr.nbytes
    return ClassifierParams(tuple(desc["widths"]), tuple(desc["input_shape"]), tensors,
                            tuple(desc["kernel"]), int(desc["seed"]), float(desc["fs"]))
