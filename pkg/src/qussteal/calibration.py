"""Machine-to-machine transfer functions estimated from a calibration phantom.

Both machines scan the same reference phantom.  Within each depth bin the
ratio of their averaged magnitude spectra cancels the phantom and leaves the
ratio of system responses.  That ratio is regularized with an SNR parameter
and applied as a zero-phase, depth-dependent magnitude filter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.signal import get_window

from .errors import ArgumentError, FormatError
from .patches import Patch, PatchSet
from .rfsim import RFFrame, resample_rate

DEFAULT_BIN_LEN = 128
DEFAULT_OVERLAP = 0.5
DEFAULT_NFFT = 256
DEFAULT_SNR = 100.0


@dataclass(frozen=True)
class SpectrumSet:
    bins: tuple  # ((start, end), ...) in samples
    freqs: np.ndarray  # MHz
    mag: np.ndarray  # (n_bins, n_freqs)
    n_avg: int
    fs: float
    nfft: int

    @property
    def hop(self) -> int:
        return self.bins[1][0] - self.bins[0][0] if len(self.bins) > 1 else self.bin_len

    @property
    def bin_len(self) -> int:
        return self.bins[0][1] - self.bins[0][0]


@dataclass(frozen=True)
class TransferFunction:
    freqs: np.ndarray
    gamma_raw: np.ndarray  # (n_bins, n_freqs)
    band_mask: np.ndarray  # bool, same shape
    bins: tuple
    fs: float
    nfft: int
    gamma_wiener: Optional[np.ndarray] = None
    snr: Optional[float] = None
    grid_interpolated: bool = False

    @property
    def bin_len(self) -> int:
        return self.bins[0][1] - self.bins[0][0]

    @property
    def hop(self) -> int:
        return self.bins[1][0] - self.bins[0][0] if len(self.bins) > 1 else self.bin_len // 2

    @classmethod
    def identity(cls, fs: float, n_bins: int = 1, bin_len: int = DEFAULT_BIN_LEN,
                 overlap: float = DEFAULT_OVERLAP, nfft: int = DEFAULT_NFFT) -> "TransferFunction":
        """All-pass transfer function, used for the no-calibration arm."""
        hop = int(round(bin_len * (1 - overlap)))
        freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
        ones = np.ones((n_bins, len(freqs)))
        bins = tuple((j * hop, j * hop + bin_len) for j in range(n_bins))
        return cls(freqs, ones, np.ones_like(ones, dtype=bool), bins, fs, nfft, ones.copy(), np.inf)


def _hann(n: int) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def bin_layout(n_samples: int, bin_len: int, overlap: float) -> tuple:
    hop = int(round(bin_len * (1 - overlap)))
    if hop < 1:
        raise ArgumentError(f"overlap {overlap} leaves no hop for bin_len {bin_len}")
    return tuple((s, s + bin_len) for s in range(0, n_samples - bin_len + 1, hop))


def estimate_spectra(frames, bin_len: int = DEFAULT_BIN_LEN, overlap: float = DEFAULT_OVERLAP,
                     nfft: int = DEFAULT_NFFT) -> SpectrumSet:
    """Average Hann-windowed magnitude spectra per depth bin over lines and frames."""
    frames = list(frames)
    if not frames:
        raise ArgumentError("no frames to estimate spectra from")
    rates = {float(f.fs) for f in frames}
    if len(rates) != 1:
        raise ArgumentError(f"frames have mixed sampling rates {sorted(rates)}")
    shapes = {np.shape(f.samples) for f in frames}
    if len(shapes) != 1:
        raise ArgumentError(f"frames have mixed shapes {sorted(shapes)}")
    n_samples = frames[0].samples.shape[0]
    if bin_len > n_samples:
        raise ArgumentError(f"bin_len {bin_len} exceeds axial length {n_samples}")
    if nfft < bin_len:
        raise ArgumentError(f"nfft {nfft} shorter than bin_len {bin_len}")

    bins = bin_layout(n_samples, bin_len, overlap)
    window = _hann(bin_len)[:, None, None]
    stack = np.stack([np.asarray(f.samples, dtype=float) for f in frames], axis=-1)  # (N, L, F)
    mag = np.empty((len(bins), nfft // 2 + 1))
    for j, (s, e) in enumerate(bins):
        seg = stack[s:e] * window
        mag[j] = np.abs(np.fft.rfft(seg, n=nfft, axis=0)).mean(axis=(1, 2))
    n_avg = stack.shape[1] * stack.shape[2]
    fs = rates.pop()
    return SpectrumSet(bins, np.fft.rfftfreq(nfft, 1.0 / fs), mag, n_avg, fs, nfft)


def _regrid(fine: SpectrumSet, freqs: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(freqs, fine.freqs, row, left=0.0, right=0.0) for row in fine.mag])


def compute_gamma(victim: SpectrumSet, perp: SpectrumSet) -> TransferFunction:
    """Per-bin ratio of victim to perpetrator spectra plus the jointly valid band."""
    if tuple(victim.bins) != tuple(perp.bins):
        raise ArgumentError("victim and perpetrator spectra use different depth bins")
    v_mag, p_mag, freqs = victim.mag, perp.mag, victim.freqs
    interpolated = False
    if len(victim.freqs) != len(perp.freqs) or not np.allclose(victim.freqs, perp.freqs):
        dv = victim.freqs[1] - victim.freqs[0]
        dp = perp.freqs[1] - perp.freqs[0]
        if dv >= dp:
            p_mag = _regrid(perp, freqs)
        else:
            freqs = perp.freqs
            v_mag = _regrid(victim, freqs)
        interpolated = True

    p_peak = p_mag.max(axis=1, keepdims=True)
    v_peak = v_mag.max(axis=1, keepdims=True)
    floor = 1e-12 * p_peak
    gamma = v_mag / np.maximum(p_mag, floor)
    band = (v_mag >= 0.1 * v_peak) & (p_mag >= 0.1 * p_peak) & (v_peak > 0) & (p_peak > 0)
    return TransferFunction(np.array(freqs), gamma, band, tuple(victim.bins), victim.fs,
                            victim.nfft, grid_interpolated=interpolated)


def wiener_gain(gamma, snr: float) -> np.ndarray:
    """|G|^-1 / (|G|^-2 + 1/snr), with the 0 and infinity limits both equal to 0."""
    g = np.abs(np.asarray(gamma, dtype=float))
    # same expression multiplied through by |G|^2; no overflow for tiny |G|
    with np.errstate(over="ignore", invalid="ignore"):
        out = g / (1.0 + g * g / snr)
    return np.where(np.isfinite(g), out, 0.0)


def wiener(tf: TransferFunction, snr: float = DEFAULT_SNR) -> TransferFunction:
    if not snr > 0:
        raise ArgumentError(f"snr must be positive, got {snr}")
    gw = np.where(tf.band_mask, wiener_gain(tf.gamma_raw, snr), 0.0)
    return replace(tf, gamma_wiener=gw, snr=float(snr))


def _gain_table(tf: TransferFunction, fs: float, nfft: int) -> np.ndarray:
    if tf.gamma_wiener is None:
        raise ArgumentError("transfer function has no Wiener gain; call wiener() first")
    grid = np.fft.rfftfreq(nfft, 1.0 / fs)
    if len(grid) == len(tf.freqs) and np.allclose(grid, tf.freqs):
        return tf.gamma_wiener
    return np.stack([np.interp(grid, tf.freqs, row, left=0.0, right=0.0) for row in tf.gamma_wiener])


def _filter_columns(x: np.ndarray, row0: int, tf: TransferFunction, gains: np.ndarray) -> np.ndarray:
    """Depth-binned overlap-add filtering of columns ``x`` whose first row is ``row0``."""
    n = x.shape[0]
    L, hop, nfft = tf.bin_len, tf.hop, tf.nfft
    pad = (nfft - L) // 2
    window = _hann(L)
    centres = np.array([(s + e) / 2 for s, e in tf.bins])
    first = row0 // hop - 1
    last = (row0 + n - 1) // hop
    lo = first * hop - pad
    span = (last - first) * hop + nfft
    out = np.zeros((span,) + x.shape[1:])
    for j in range(first, last + 1):
        s = j * hop
        seg = np.zeros((nfft,) + x.shape[1:])
        a, b = max(s, row0), min(s + L, row0 + n)
        if a >= b:
            continue
        seg[pad + a - s:pad + b - s] = x[a - row0:b - row0] * window[a - s:b - s, None]
        k = int(np.argmin(np.abs(centres - (s + L / 2))))
        spec = np.fft.rfft(seg, axis=0) * gains[k][:, None]
        out[s - pad - lo:s - pad - lo + nfft] += np.fft.irfft(spec, n=nfft, axis=0)
    return out[row0 - lo:row0 - lo + n]


def apply(tf: TransferFunction, x):
    """Map perpetrator-domain data into the victim domain.

    Accepts an ``RFFrame``, a ``Patch`` or a ``PatchSet``; patches are filtered
    with the bin geometry of their depth in the source frame.  The output has
    the input's type and shape.
    """
    fs = x.fs
    if not np.isclose(fs, tf.fs):
        raise ArgumentError(f"input sampled at {fs} MHz but transfer function expects {tf.fs} MHz")
    gains = _gain_table(tf, tf.fs, tf.nfft)
    if isinstance(x, RFFrame):
        y = _filter_columns(np.asarray(x.samples, dtype=float), 0, tf, gains)
        return replace(x, samples=y)
    if isinstance(x, Patch):
        y = _filter_columns(np.asarray(x.samples, dtype=float), int(x.origin[0]), tf, gains)
        return replace(x, samples=y)
    if isinstance(x, PatchSet):
        out = np.empty(x.samples.shape, dtype=float)
        rows = x.origins[:, 0]
        for r in np.unique(rows):
            idx = np.flatnonzero(rows == r)
            block = np.asarray(x.samples[idx], dtype=float).transpose(1, 0, 2)  # (h, n, w)
            y = _filter_columns(block.reshape(block.shape[0], -1), int(r), tf, gains)
            out[idx] = y.reshape(block.shape).transpose(1, 0, 2)
        return x.with_samples(out)
    raise ArgumentError(f"cannot apply a transfer function to {type(x).__name__}")


def rate_ratio(src_fs: float, dst_fs: float) -> tuple:
    ratio = Fraction(dst_fs / src_fs).limit_denominator(64)
    return ratio.numerator, ratio.denominator


def match_rate(frame: RFFrame, fs: float) -> RFFrame:
    """Resample a frame to ``fs`` (e.g. 50 MHz -> 40 MHz is up 4 / down 5)."""
    if np.isclose(frame.fs, fs):
        return frame
    up, down = rate_ratio(frame.fs, fs)
    return resample_rate(frame, up, down)


def calibrate(victim_frames, perp_frames, snr: float = DEFAULT_SNR, bin_len: int = DEFAULT_BIN_LEN,
              overlap: float = DEFAULT_OVERLAP, nfft: int = DEFAULT_NFFT) -> TransferFunction:
    """Full calibration: resample the perpetrator frames, estimate spectra, form Γ and its Wiener gain."""
    victim_frames = list(victim_frames)
    if not victim_frames:
        raise ArgumentError("no victim calibration frames")
    perp = [match_rate(f, victim_frames[0].fs) for f in perp_frames]
    n = min(victim_frames[0].samples.shape[0], perp[0].samples.shape[0]) if perp else 0
    victim_frames = [replace(f, samples=f.samples[:n]) for f in victim_frames]
    perp = [replace(f, samples=f.samples[:n]) for f in perp]
    sv = estimate_spectra(victim_frames, bin_len, overlap, nfft)
    sp = estimate_spectra(perp, bin_len, overlap, nfft)
    return wiener(compute_gamma(sv, sp), snr)


# -- serialization ------------------------------------------------------------

_TF_MAGIC = b"USTF"
_TF_VERSION = 1


def save_transfer_function(tf: TransferFunction, path) -> None:
    if tf.gamma_wiener is None:
        raise ArgumentError("only Wiener-regularized transfer functions can be saved")
    n_bins, n_freqs = tf.gamma_raw.shape
    snr = float(tf.snr) if tf.snr is not None else float("nan")
    with open(path, "wb") as fh:
        fh.write(_TF_MAGIC)
        fh.write(struct.pack("<IIIIdd?", _TF_VERSION, n_bins, n_freqs, tf.nfft, snr, tf.fs,
                             tf.grid_interpolated))
        fh.write(np.asarray(tf.bins, dtype="<u4").tobytes())
        fh.write(np.asarray(tf.freqs, dtype="<f8").tobytes())
        fh.write(np.asarray(tf.band_mask, dtype="u1").tobytes())
        fh.write(np.asarray(tf.gamma_raw, dtype="<f8").tobytes())
        fh.write(np.asarray(tf.gamma_wiener, dtype="<f8").tobytes())


def load_transfer_function(path) -> TransferFunction:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _TF_MAGIC:
        raise FormatError(f"{path}: not a transfer-function file")
    head = struct.calcsize("<IIIIdd?")
    version, n_bins, n_freqs, nfft, snr, fs, interp = struct.unpack_from("<IIIIdd?", data, 4)
    if version != _TF_VERSION:
        raise FormatError(f"{path}: unsupported transfer-function version {version}")
    off = 4 + head

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    try:
        bins = take("<u4", 2 * n_bins).reshape(n_bins, 2)
        freqs = take("<f8", n_freqs).copy()
        mask = take("u1", n_bins * n_freqs).reshape(n_bins, n_freqs).astype(bool)
        raw = take("<f8", n_bins * n_freqs).reshape(n_bins, n_freqs).copy()
        gw = take("<f8", n_bins * n_freqs).reshape(n_bins, n_freqs).copy()
    except ValueError as exc:
        raise FormatError(f"{path}: truncated transfer-function file") from exc
    return TransferFunction(freqs, raw, mask, tuple((int(s), int(e)) for s, e in bins), fs, nfft,
                            gw, snr, bool(interp))
