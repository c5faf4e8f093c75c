"""Synthetic RF data for two mismatched ultrasound machines.

Every A-line is built block by block in the frequency domain.  Inside a block
centred at depth ``z`` the echo spectrum is the product of a machine term
(Gaussian pulse, round-trip attenuation, focal weighting) and a tissue term
(the spectrum of a random scatterer train shaped by ``f**backscatter_exponent``).
Blocks are Hann weighted with 50 % overlap and merged by overlap-add, so the
model is stationary inside one block and varies smoothly with depth.

Scatterer positions live in physical depth, not in samples.  Two machines that
image the same phantom with the same seed therefore see the same scatterers,
which is how a calibration phantom behaves when it is scanned at one spot.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.signal import resample_poly

from .errors import ArgumentError, ConfigurationError

NOMINAL_SOS = 1540.0  # m/s assumed by the scanners when converting time to depth

BLOCK_LEN = 128
BLOCK_HOP = 64
BLOCK_NFFT = 256
FOCAL_WIDTH_CM = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    name: str
    acs: float  # dB / (cm MHz)
    sos: float  # m/s
    scatterer_density: float  # scatterers per mm^2
    backscatter_exponent: float
    amplitude_sigma: float = 0.3
    seed_class: Union[int, str] = "calibration"

    def __post_init__(self):
        if self.acs < 0:
            raise ConfigurationError(f"phantom {self.name!r}: acs must be >= 0")
        if self.sos <= 0:
            raise ConfigurationError(f"phantom {self.name!r}: sos must be > 0")
        if self.scatterer_density <= 0:
            raise ConfigurationError(f"phantom {self.name!r}: scatterer_density must be > 0")

    @property
    def label(self) -> int:
        return self.seed_class if isinstance(self.seed_class, int) else -1


@dataclass(frozen=True)
class MachineSpec:
    name: str
    center_freq: float  # MHz
    frac_bandwidth: float  # -6 dB width of the pulse spectrum / center_freq
    fs: float  # MHz
    focal_depth: float = 2.0  # cm
    noise_floor: float = 0.02
    n_lines: int = 256
    axial_samples: int = 2080
    gain: float = 1.0
    line_pitch: float = 0.15  # mm, lateral spacing of A-lines

    def validate(self) -> None:
        if not 0 < self.center_freq < self.fs / 2:
            raise ConfigurationError(
                f"machine {self.name!r}: center_freq {self.center_freq} MHz violates "
                f"Nyquist for fs={self.fs} MHz")
        if self.frac_bandwidth <= 0:
            raise ConfigurationError(f"machine {self.name!r}: frac_bandwidth must be > 0")
        if self.n_lines < 1 or self.axial_samples < 1:
            raise ConfigurationError(f"machine {self.name!r}: empty frame geometry")
        if self.noise_floor < 0:
            raise ConfigurationError(f"machine {self.name!r}: noise_floor must be >= 0")

    @property
    def axial_depth(self) -> float:
        """Imaging depth in cm at the nominal speed of sound."""
        return self.axial_samples / (self.fs * 1e6) * NOMINAL_SOS / 2 * 100

    @property
    def sigma_f(self) -> float:
        """Standard deviation (MHz) of the Gaussian pulse magnitude spectrum."""
        return self.frac_bandwidth * self.center_freq / (2 * math.sqrt(2 * math.log(2)))


@dataclass
class RFFrame:
    samples: np.ndarray  # (axial, lateral)
    fs: float  # MHz
    axial_extent: float  # cm
    machine_name: str
    phantom_name: str
    seed: int
    label: int = -1

    @property
    def shape(self) -> tuple:
        return self.samples.shape


PHANTOM1 = PhantomSpec("phantom1", acs=0.4, sos=1540.0, scatterer_density=20.0,
                       backscatter_exponent=0.5, seed_class=0)
PHANTOM2 = PhantomSpec("phantom2", acs=0.1, sos=1539.0, scatterer_density=20.0,
                       backscatter_exponent=1.5, seed_class=1)
CALIBRATION = PhantomSpec("calibration", acs=0.74, sos=1545.0, scatterer_density=20.0,
                          backscatter_exponent=1.0, seed_class="calibration")

VICTIM = MachineSpec("victim", center_freq=9.0, frac_bandwidth=0.6, fs=40.0,
                     axial_samples=2080, n_lines=256)
PERPETRATOR = MachineSpec("perpetrator", center_freq=5.0, frac_bandwidth=1.0, fs=50.0,
                          axial_samples=2600, n_lines=256, gain=3.0)
PERPETRATOR_ALT = MachineSpec("perpetrator_alt", center_freq=6.0, frac_bandwidth=0.8,
                              fs=50.0, axial_samples=2600, n_lines=256, gain=3.0)

PHANTOMS = {p.name: p for p in (PHANTOM1, PHANTOM2, CALIBRATION)}
MACHINES = {m.name: m for m in (VICTIM, PERPETRATOR, PERPETRATOR_ALT)}


def desk_scale(machine: MachineSpec) -> MachineSpec:
    """Half depth and half the lines: 2080 x 256 becomes 1040 x 128."""
    return replace(machine, axial_samples=machine.axial_samples // 2,
                   n_lines=machine.n_lines // 2)


def get_machine(name: str, scale: str = "desk") -> MachineSpec:
    try:
        machine = MACHINES[name]
    except KeyError:
        raise ArgumentError(f"unknown machine {name!r}; choose from {sorted(MACHINES)}") from None
    if scale == "desk":
        return desk_scale(machine)
    if scale == "full":
        return machine
    raise ArgumentError(f"unknown scale {scale!r}")


def get_phantom(name: str) -> PhantomSpec:
    try:
        return PHANTOMS[name]
    except KeyError:
        raise ArgumentError(f"unknown phantom {name!r}; choose from {sorted(PHANTOMS)}") from None


# -- spectral model ---------------------------------------------------------

def pulse_spectrum(machine: MachineSpec, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return machine.gain * np.exp(-0.5 * ((f - machine.center_freq) / machine.sigma_f) ** 2)


def attenuation(phantom: PhantomSpec, f, z_cm) -> np.ndarray:
    """Round-trip amplitude attenuation at depth ``z_cm``."""
    f = np.asarray(f, dtype=float)
    z = np.maximum(np.asarray(z_cm, dtype=float), 0.0)
    return 10.0 ** (-phantom.acs * f * 2 * z / 20.0)


def focal_weight(machine: MachineSpec, z_cm) -> np.ndarray:
    z = np.asarray(z_cm, dtype=float)
    return np.exp(-0.5 * ((z - machine.focal_depth) / FOCAL_WIDTH_CM) ** 2)


def system_response(machine: MachineSpec, phantom: PhantomSpec, f, z_cm) -> np.ndarray:
    """Machine factor of the echo spectrum at depth ``z_cm`` (broadcasts)."""
    return pulse_spectrum(machine, f) * attenuation(phantom, f, z_cm) * focal_weight(machine, z_cm)


def tissue_shape(phantom: PhantomSpec, f) -> np.ndarray:
    return np.abs(np.asarray(f, dtype=float)) ** phantom.backscatter_exponent


def block_starts(n_samples: int, hop: int = BLOCK_HOP) -> np.ndarray:
    """Synthesis block starts; the first block begins one hop before sample 0."""
    return hop * np.arange(-1, (n_samples - 1) // hop + 1)


def block_depths(phantom: PhantomSpec, fs: float, starts, length: int = BLOCK_LEN) -> np.ndarray:
    centre = (np.asarray(starts, dtype=float) + length / 2) / (fs * 1e6)
    return np.maximum(centre * phantom.sos / 2 * 100, 0.0)


def _phantom_key(phantom: PhantomSpec) -> int:
    return zlib.crc32(phantom.name.encode())


def _scatterers(phantom: PhantomSpec, machine: MachineSpec, seed: int, line: int):
    """Scatterer delays (in samples) and amplitudes for one A-line."""
    rng = np.random.default_rng([seed, _phantom_key(phantom), line])
    duration = machine.axial_samples / (machine.fs * 1e6)
    depth_mm = duration * phantom.sos / 2 * 1e3
    count = rng.poisson(phantom.scatterer_density * depth_mm * machine.line_pitch)
    depth = rng.uniform(0.0, depth_mm, count)
    amp = rng.normal(1.0, phantom.amplitude_sigma, count) * rng.choice([-1.0, 1.0], count)
    delay = depth * 1e-3 * 2 / phantom.sos * machine.fs * 1e6
    return delay, amp


def _clean_frame(phantom: PhantomSpec, machine: MachineSpec, seed: int) -> np.ndarray:
    machine.validate()
    n, n_lines = machine.axial_samples, machine.n_lines
    L, hop, nfft = BLOCK_LEN, BLOCK_HOP, BLOCK_NFFT
    pad = (nfft - L) // 2
    starts = block_starts(n, hop)
    n_blocks = len(starts)

    freqs = np.fft.rfftfreq(nfft, 1.0 / machine.fs)
    z = block_depths(phantom, machine.fs, starts)
    # sampling a continuous echo at fs scales its discrete spectrum by fs
    H = (machine.fs * system_response(machine, phantom, freqs[None, :], z[:, None])
         * tissue_shape(phantom, freqs)[None, :])

    rows, taus, coefs = [], [], []
    for line in range(n_lines):
        delay, amp = _scatterers(phantom, machine, seed, line)
        delay_ok = delay < n
        delay, amp = delay[delay_ok], amp[delay_ok]
        b1 = np.floor(delay / hop).astype(int)  # block index (without the -1 offset)
        for b in (b1, b1 - 1):
            u = delay - b * hop
            w = 0.5 - 0.5 * np.cos(2 * np.pi * u / L)
            rows.append(line * n_blocks + b + 1)
            taus.append(u + pad)
            coefs.append(amp * w)
    rows = np.concatenate(rows)
    taus = np.concatenate(taus)
    coefs = np.concatenate(coefs)

    spec = np.zeros((n_lines * n_blocks, len(freqs)), dtype=complex)
    if rows.size:
        order = np.argsort(rows, kind="stable")
        rows, taus, coefs = rows[order], taus[order], coefs[order]
        k = np.arange(len(freqs))
        contrib = coefs[:, None] * np.exp(-2j * np.pi * np.outer(taus, k) / nfft)
        uniq, first = np.unique(rows, return_index=True)
        spec[uniq] = np.add.reduceat(contrib, first, axis=0)
    spec = spec.reshape(n_lines, n_blocks, -1) * H[None, :, :]
    seg = np.fft.irfft(spec, n=nfft, axis=-1)  # (lines, blocks, nfft)

    origin = hop + pad
    out = np.zeros((n_lines, n + 2 * origin + nfft))
    for j, s in enumerate(starts):
        i0 = s - pad + origin
        out[:, i0:i0 + nfft] += seg[:, j, :]
    return np.ascontiguousarray(out[:, origin:origin + n].T)


def _noise(shape, sigma: float, phantom: PhantomSpec, seed: int, noise_seed: int) -> np.ndarray:
    if sigma == 0:
        return np.zeros(shape)
    rng = np.random.default_rng([seed, _phantom_key(phantom), 0x7FFFFFFF, noise_seed])
    return rng.normal(0.0, sigma, shape)


def _noise_sigma(clean: np.ndarray, noise_floor: float) -> float:
    rms = float(np.sqrt(np.mean(clean ** 2))) if clean.size else 0.0
    return noise_floor * rms


def synthesize_frame(phantom: PhantomSpec, machine: MachineSpec, seed: int,
                     noise_seed: int = 0) -> RFFrame:
    """One beamformed RF frame of ``phantom`` seen by ``machine``.

    The scatterer realization depends on ``(seed, phantom, line)`` only and the
    additive noise on ``(seed, phantom, noise_seed)``; the result is a pure
    function of the arguments.
    """
    clean = _clean_frame(phantom, machine, seed)
    sigma = _noise_sigma(clean, machine.noise_floor)
    samples = clean + _noise(clean.shape, sigma, phantom, seed, noise_seed)
    return RFFrame(samples, machine.fs, machine.axial_depth, machine.name, phantom.name,
                   seed, phantom.label)


def synthesize_frames(phantom: PhantomSpec, machine: MachineSpec, seeds) -> list:
    return [synthesize_frame(phantom, machine, int(s)) for s in seeds]


def resample_rate(frame: RFFrame, up: int, down: int) -> RFFrame:
    """Polyphase FIR rate change by ``up/down`` along the axial axis.

    The low-pass is linear phase with cutoff ``min(pi/up, pi/down)`` and its
    group delay is removed, so tones stay aligned with the input.
    """
    if int(up) != up or int(down) != down or up < 1 or down < 1:
        raise ArgumentError(f"resampling factors must be positive integers, got {up}/{down}")
    up, down = int(up), int(down)
    if up == 1 and down == 1:
        samples = frame.samples.copy()
    else:
        samples = resample_poly(frame.samples, up, down, axis=0)
    return replace(frame, samples=samples, fs=frame.fs * up / down)


def acquire_calibration(machine: MachineSpec, phantom: PhantomSpec, mode: str = "stable",
                        n: int = 10, seed: int = 0) -> list:
    """Calibration frames acquired with a clamped probe or by sweeping free hand.

    ``stable`` frames share one scatterer realization and differ only in their
    noise draws; ``freehand`` frames each see an independent realization.
    """
    if n < 1:
        raise ArgumentError(f"need at least one calibration frame, got n={n}")
    if phantom.seed_class != "calibration":
        warnings.warn(f"calibration acquired on non-calibration phantom {phantom.name!r}",
                      stacklevel=2)
    if mode == "stable":
        clean = _clean_frame(phantom, machine, seed)
        sigma = _noise_sigma(clean, machine.noise_floor)
        return [RFFrame(clean + _noise(clean.shape, sigma, phantom, seed, k), machine.fs,
                        machine.axial_depth, machine.name, phantom.name, seed, phantom.label)
                for k in range(n)]
    if mode == "freehand":
        seeds = [int(np.random.SeedSequence([seed, k]).generate_state(1)[0]) for k in range(n)]
        return synthesize_frames(phantom, machine, seeds)
    raise ArgumentError(f"unknown calibration mode {mode!r}; use 'stable' or 'freehand'")
