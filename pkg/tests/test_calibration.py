from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import binary_erosion

from oracles import gaussian_pulse, wiener_eq3
from qussteal import calibration as cal
from qussteal import rfsim
from qussteal.errors import ArgumentError, FormatError
from qussteal.patches import DESK_GRID, extract_patches


def frame(samples, fs=40.0):
    return rfsim.RFFrame(np.asarray(samples, float), fs, 1.0, "m", "p", 0)


def bandlimited(n=1040, lines=4, fs=40.0, lo=3.0, hi=15.0, seed=0):
    rng = np.random.default_rng(seed)
    spec = np.zeros((n // 2 + 1, lines), complex)
    f = np.fft.rfftfreq(n, 1 / fs)
    band = (f > lo) & (f < hi)
    spec[band] = rng.normal(size=(band.sum(), lines)) + 1j * rng.normal(size=(band.sum(), lines))
    return np.fft.irfft(spec, n, axis=0)


def const_tf(value, n_bins=15, fs=40.0):
    tf = cal.TransferFunction.identity(fs, n_bins=n_bins)
    return replace(tf, gamma_raw=tf.gamma_raw * value, gamma_wiener=tf.gamma_wiener * value)


@pytest.fixture(scope="module")
def machine_pair():
    v = rfsim.get_machine("victim")
    p = rfsim.get_machine("perpetrator")
    cv = rfsim.acquire_calibration(v, rfsim.CALIBRATION, "stable", 10, seed=11)
    cp = rfsim.acquire_calibration(p, rfsim.CALIBRATION, "stable", 10, seed=11)
    return v, p, cal.calibrate(cv, cp)


class TestEstimateSpectra:
    def test_tone_peak(self):
        n, fs, f0 = 512, 40.0, 7.5
        x = np.sin(2 * np.pi * f0 * np.arange(n) / fs)[:, None]
        s = cal.estimate_spectra([frame(x)])
        assert np.all(s.freqs[np.argmax(s.mag, axis=1)] == pytest.approx(f0))

    def test_white_noise_flat(self):
        rng = np.random.default_rng(1)
        frames = [frame(rng.normal(size=(512, 64))) for _ in range(4)]
        s = cal.estimate_spectra(frames)
        assert s.n_avg * 1 >= 256 and s.n_avg * len(s.bins) >= 1000
        inner = s.mag[:, 3:-3]  # skip the DC and Nyquist edge bins
        row_mean = inner.mean(axis=1, keepdims=True)
        assert np.max(np.abs(inner / row_mean - 1)) < 0.05 * 3  # per-bin, per-frequency
        assert np.max(np.abs(inner.mean(axis=0) / inner.mean() - 1)) < 0.05

    def test_averaging_shrinks_standard_error(self):
        rng = np.random.default_rng(2)
        one, ten = [], []
        for _ in range(200):
            frames = [frame(rng.normal(size=(128, 2))) for _ in range(10)]
            one.append(cal.estimate_spectra(frames[:1]).mag)
            ten.append(cal.estimate_spectra(frames).mag)
        ratio = np.std(one, axis=0)[:, 5:-5].mean() / np.std(ten, axis=0)[:, 5:-5].mean()
        assert ratio == pytest.approx(np.sqrt(10), rel=0.1)

    def test_layout(self):
        s = cal.estimate_spectra([frame(np.zeros((1040, 2)))])
        assert s.bins[0] == (0, 128) and s.bins[1] == (64, 192)
        assert len(s.bins) == (1040 - 128) // 64 + 1
        assert np.all(np.diff(s.freqs) > 0) and np.all(s.mag >= 0)

    def test_mixed_rates(self):
        with pytest.raises(ArgumentError):
            cal.estimate_spectra([frame(np.zeros((256, 2)), 40.0), frame(np.zeros((256, 2)), 50.0)])

    def test_bin_longer_than_frame(self):
        with pytest.raises(ArgumentError):
            cal.estimate_spectra([frame(np.zeros((100, 2)))], bin_len=128)


class TestGamma:
    def spectra(self, mag, fs=40.0):
        mag = np.atleast_2d(mag)
        return cal.SpectrumSet(((0, 128),) * len(mag), np.fft.rfftfreq(256, 1 / fs), mag, 1, fs, 256)

    def test_identity(self):
        mag = gaussian_pulse(np.fft.rfftfreq(256, 1 / 40), 9, 0.6)
        tf = cal.compute_gamma(self.spectra(mag), self.spectra(mag))
        assert np.allclose(tf.gamma_raw[tf.band_mask], 1.0)

    def test_scaling(self):
        mag = gaussian_pulse(np.fft.rfftfreq(256, 1 / 40), 9, 0.6)
        tf = cal.compute_gamma(self.spectra(2 * mag), self.spectra(mag))
        assert np.allclose(tf.gamma_raw[tf.band_mask], 2.0)

    def test_band_mask_definition(self):
        f = np.fft.rfftfreq(256, 1 / 40)
        v, p = gaussian_pulse(f, 9, 0.6), gaussian_pulse(f, 5, 0.6)
        tf = cal.compute_gamma(self.spectra(v), self.spectra(p))
        expected = (v >= 0.1 * v.max()) & (p >= 0.1 * p.max())
        assert np.array_equal(tf.band_mask[0], expected)

    def test_floor(self):
        f = np.fft.rfftfreq(256, 1 / 40)
        p = np.zeros_like(f)
        p[10] = 1.0
        tf = cal.compute_gamma(self.spectra(np.ones_like(f)), self.spectra(p))
        assert np.isfinite(tf.gamma_raw).all()
        assert tf.gamma_raw[0, 0] == pytest.approx(1e12)

    def test_incompatible_bins(self):
        a = self.spectra(np.ones((2, 129)))
        b = replace(a, bins=((0, 128), (32, 160)))
        with pytest.raises(ArgumentError):
            cal.compute_gamma(a, b)

    def test_grid_interpolation_recorded(self):
        v = self.spectra(np.ones(129), fs=40.0)
        p = self.spectra(np.ones(129), fs=50.0)
        tf = cal.compute_gamma(v, p)
        assert tf.grid_interpolated
        assert len(tf.freqs) == 129

    def test_gaussian_ratio(self, machine_pair):
        v, p, tf = machine_pair
        analytic = gaussian_pulse(tf.freqs, v.center_freq, v.frac_bandwidth) * v.gain / (
            gaussian_pulse(tf.freqs, p.center_freq, p.frac_bandwidth) * p.gain)
        rel = np.abs(tf.gamma_raw / analytic[None, :] - 1)[tf.band_mask]
        assert rel.max() < 0.10


class TestWiener:
    def test_hand_value(self):
        assert abs(float(cal.wiener_gain(2.0, 1.0)) - 0.4) < 1e-12
        assert wiener_eq3(2.0, 1.0) == pytest.approx(0.4, abs=1e-12)

    def test_identity_limit(self):
        assert abs(float(cal.wiener_gain(1.0, 1e12)) - 1.0) < 1e-9

    @pytest.mark.parametrize("g", [0.0, np.inf])
    def test_limits_are_zero(self, g):
        assert float(cal.wiener_gain(g, 100.0)) == 0.0

    def test_zero_outside_band(self, machine_pair):
        _, _, tf = machine_pair
        assert np.all(tf.gamma_wiener[~tf.band_mask] == 0)
        assert np.all(np.isfinite(tf.gamma_wiener)) and np.all(tf.gamma_wiener >= 0)

    @pytest.mark.parametrize("snr", [0.0, -1.0])
    def test_bad_snr(self, machine_pair, snr):
        with pytest.raises(ArgumentError):
            cal.wiener(machine_pair[2], snr)

    @given(st.one_of(st.just(0.0), st.floats(1e-100, 1e6)), st.floats(1e-3, 1e6))
    def test_matches_literal_formula(self, g, snr):
        assert float(cal.wiener_gain(g, snr)) == pytest.approx(wiener_eq3(g, snr), rel=1e-9, abs=1e-300)

    @given(st.floats(1e-3, 1e4), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_below_sqrt_snr(self, snr, a, b):
        lo, hi = sorted((a * np.sqrt(snr), b * np.sqrt(snr)))
        assert cal.wiener_gain(lo, snr) <= cal.wiener_gain(hi, snr) * (1 + 1e-12)


class TestApply:
    def test_identity_filter(self):
        x = bandlimited()
        y = cal.apply(const_tf(1.0), frame(x)).samples
        assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-6

    def test_scaling_filter(self):
        x = bandlimited()
        y = cal.apply(const_tf(2.0), frame(x)).samples
        assert np.linalg.norm(y - 2 * x) / np.linalg.norm(x) < 1e-6

    def test_zero_band_gives_zero(self):
        tf = const_tf(1.0)
        tf = replace(tf, band_mask=np.zeros_like(tf.band_mask))
        tf = cal.wiener(tf, 100.0)
        assert not np.any(cal.apply(tf, frame(bandlimited())).samples)

    def test_linear(self, machine_pair):
        _, _, tf = machine_pair
        x, z = bandlimited(seed=1), bandlimited(seed=2)
        lhs = cal.apply(tf, frame(2.5 * x - z)).samples
        rhs = 2.5 * cal.apply(tf, frame(x)).samples - cal.apply(tf, frame(z)).samples
        assert np.allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())

    def test_shape_and_type(self, machine_pair):
        _, _, tf = machine_pair
        fr = frame(bandlimited(n=777, lines=3))
        out = cal.apply(tf, fr)
        assert isinstance(out, rfsim.RFFrame) and out.samples.shape == (777, 3)

    def test_deterministic(self, machine_pair):
        _, _, tf = machine_pair
        fr = frame(bandlimited())
        assert np.array_equal(cal.apply(tf, fr).samples, cal.apply(tf, fr).samples)

    def test_fs_mismatch(self, machine_pair):
        with pytest.raises(ArgumentError):
            cal.apply(machine_pair[2], frame(bandlimited(), fs=50.0))

    def test_patch_identity(self):
        x = bandlimited(n=1040, lines=128)
        ps = extract_patches(frame(x), DESK_GRID)
        out = cal.apply(const_tf(1.0), ps)
        assert np.allclose(out.samples, ps.samples, atol=1e-9 * np.abs(x).max())

    def test_patch_set_matches_single_patches(self, machine_pair):
        _, _, tf = machine_pair
        ps = extract_patches(frame(bandlimited(n=1040, lines=128)), DESK_GRID)
        batch = cal.apply(tf, ps)
        for i in (0, 17, 80):
            single = cal.apply(tf, ps[i])
            assert np.allclose(single.samples, batch.samples[i])

    @pytest.mark.parametrize("phantom", [rfsim.PHANTOM1, rfsim.PHANTOM2, rfsim.CALIBRATION])
    def test_cross_phantom_matching(self, machine_pair, phantom):
        v, p, tf = machine_pair
        fv = rfsim.synthesize_frame(phantom, v, 5)
        fp = cal.match_rate(rfsim.synthesize_frame(phantom, p, 5), v.fs)
        n = min(fv.samples.shape[0], fp.samples.shape[0])
        sv = cal.estimate_spectra([replace(fv, samples=fv.samples[:n])])
        sm = cal.estimate_spectra([replace(fp, samples=cal.apply(tf, fp).samples[:n])])
        interior = np.array([binary_erosion(m, iterations=2) for m in tf.band_mask])
        rel = np.abs(sm.mag / sv.mag - 1)[interior]
        assert rel.max() < 0.15


class TestCalibrate:
    def test_resamples_perpetrator(self, machine_pair):
        v, _, tf = machine_pair
        assert tf.fs == v.fs and tf.snr == cal.DEFAULT_SNR
        assert tf.band_mask.any(axis=1).all()

    def test_rate_ratio(self):
        assert cal.rate_ratio(50.0, 40.0) == (4, 5)

    def test_round_trip(self, machine_pair, tmp_path):
        tf = machine_pair[2]
        cal.save_transfer_function(tf, tmp_path / "a.tf")
        back = cal.load_transfer_function(tmp_path / "a.tf")
        assert np.array_equal(back.gamma_raw, tf.gamma_raw)
        assert np.array_equal(back.gamma_wiener, tf.gamma_wiener)
        assert np.array_equal(back.band_mask, tf.band_mask)
        assert back.bins == tuple(tuple(b) for b in tf.bins) and back.snr == tf.snr and back.fs == tf.fs

    def test_bad_file(self, tmp_path):
        (tmp_path / "x.tf").write_bytes(b"nope")
        with pytest.raises(FormatError):
            cal.load_transfer_function(tmp_path / "x.tf")
