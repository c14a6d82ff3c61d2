import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecapa2.features import (LOG_FLOOR, SAMPLE_RATE, AugmentBank, FeatureError, FeatureMap,
                             Waveform, add_noise, frame_count, magnitude_spectrogram,
                             mask_freq, mask_time, mel_center_frequencies, mel_filterbank,
                             mix_components, mix_waveforms, random_crop, reverberate, rms,
                             spec_augment, speed_perturb, stft_features)


def sine(freq, seconds=1.0, amp=0.5, rate=SAMPLE_RATE):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate, "s")


def noise(n, seed=0, amp=0.1):
    return Waveform(np.random.default_rng(seed).uniform(-amp, amp, n), SAMPLE_RATE, "n")


class TestWaveform:
    def test_rejects_clipping(self):
        with pytest.raises(FeatureError):
            Waveform(np.array([0.5, 1.5]))

    def test_rejects_empty_and_nan(self):
        with pytest.raises(FeatureError):
            Waveform(np.array([]))
        with pytest.raises(FeatureError):
            Waveform(np.array([0.0, np.nan]))

    def test_duration(self):
        assert Waveform(np.zeros(8000)).duration == 0.5


class TestSpectralFeatures:
    def test_frame_count_two_seconds(self):
        assert frame_count(32000) == 198
        f = stft_features(noise(32000), "fft256")
        assert f.bins.shape == (256, 198)
        assert stft_features(noise(32000), "mel80").bins.shape == (80, 198)

    def test_shorter_than_one_frame(self):
        with pytest.raises(FeatureError):
            stft_features(noise(399))

    def test_zero_waveform_is_exactly_zero(self):
        w = Waveform(np.zeros(16000))
        assert np.all(np.log(magnitude_spectrogram(w.samples) + LOG_FLOOR) == np.log(LOG_FLOOR))
        for kind in ("fft256", "mel80"):
            assert np.all(stft_features(w, kind).bins == 0.0)

    def test_mean_normalized_over_time(self):
        f = stft_features(noise(16000), "mel80")
        np.testing.assert_allclose(f.bins.mean(axis=1), 0.0, atol=1e-12)

    def test_magnitude_matches_direct_dft(self):
        x = noise(800, seed=3).samples
        mag = magnitude_spectrogram(x)
        frame = x[160:560] * np.hamming(400)
        k = np.arange(257)
        n = np.arange(400)
        dft = np.abs(np.exp(-2j * np.pi * np.outer(k, n) / 512) @ frame)
        np.testing.assert_allclose(mag[:, 1], dft, atol=1e-10)

    @pytest.mark.parametrize("index", [5, 20, 47, 70])
    def test_sine_at_mel_center_peaks_in_that_filter(self, index):
        fc = mel_center_frequencies(80)[index]
        mag = magnitude_spectrogram(sine(fc).samples)
        energy = mel_filterbank(80) @ mag
        assert np.argmax(energy.mean(axis=1)) == index

    def test_filterbank_shape_and_peaks(self):
        fb = mel_filterbank(80)
        assert fb.shape == (80, 257)
        assert fb.max() <= 1.0 and (fb.max(axis=1) > 0.25).all()
        assert not fb.flags.writeable

    def test_fft256_drops_dc(self):
        x = noise(8000, seed=2).samples
        x[4000:] += 0.3 * np.sin(2 * np.pi * 93.75 * np.arange(4000) / SAMPLE_RATE)
        f = stft_features(Waveform(x), "fft256")
        logmag = np.log(magnitude_spectrogram(x) + LOG_FLOOR)
        # row k holds FFT bin k+1; the 93.75 Hz onset lives in bin 3
        assert np.argmax(np.ptp(f.bins, axis=1)) == 2
        np.testing.assert_allclose(np.diff(f.bins, axis=1), np.diff(logmag[1:257], axis=1), atol=1e-9)

    def test_resampled_input(self):
        w = Waveform(np.random.default_rng(0).uniform(-0.1, 0.1, 8000), 8000)
        assert stft_features(w, "mel80").num_frames == frame_count(16000)

    def test_feature_map_validation(self):
        with pytest.raises(FeatureError):
            FeatureMap(np.zeros((79, 4)), "mel80")
        with pytest.raises(FeatureError):
            FeatureMap(np.zeros((80, 4)), "bogus")

    def test_duration_of_map(self):
        assert FeatureMap(np.zeros((80, 48)), "mel80").duration == pytest.approx(0.495)


class TestMasking:
    def fmap(self, seed=0, frames=50):
        return FeatureMap(np.random.default_rng(seed).standard_normal((80, frames)), "mel80")

    def test_count_zero_is_identity(self):
        f = self.fmap()
        np.testing.assert_array_equal(mask_time(f, 3, 0).bins, f.bins)
        np.testing.assert_array_equal(mask_freq(f, 3, 0).bins, f.bins)

    def test_full_time_mask(self):
        f = self.fmap()
        np.testing.assert_array_equal(mask_time(f, 0, f.num_frames).bins, f.bins.mean())

    def test_freq_mask_cellwise(self):
        f = self.fmap()
        out = mask_freq(f, 10, 4).bins
        assert np.all(out[10:14] == f.bins.mean())
        keep = np.ones(80, bool)
        keep[10:14] = False
        np.testing.assert_array_equal(out[keep], f.bins[keep])

    def test_out_of_range(self):
        with pytest.raises(FeatureError):
            mask_time(self.fmap(), 48, 5)

    def test_input_not_modified(self):
        f = self.fmap()
        before = f.bins.copy()
        mask_freq(f, 0, 10)
        np.testing.assert_array_equal(f.bins, before)

    def test_spec_augment_cell_count(self):
        f = self.fmap(frames=60)
        rng = np.random.default_rng(0)
        for _ in range(200):
            state = rng.bit_generator.state
            tw, fw = int(rng.integers(0, 6)), int(rng.integers(0, 33))
            rng.bit_generator.state = state
            out = spec_augment(f, rng)
            changed = (out.bins != f.bins).sum()
            assert changed == tw * 80 + fw * 60 - tw * fw

    def test_spec_augment_zero_widths_identity(self):
        class Zero:
            def integers(self, lo, hi):
                return 0
        f = self.fmap()
        np.testing.assert_array_equal(spec_augment(f, Zero()).bins, f.bins)

    def test_spec_augment_deterministic(self):
        f = self.fmap()
        a = spec_augment(f, np.random.default_rng(4)).bins
        b = spec_augment(f, np.random.default_rng(4)).bins
        assert a.tobytes() == b.tobytes()


class TestWaveformAugmentation:
    def test_speed_identity(self):
        w = noise(1000).replace(speaker_id="a")
        out = speed_perturb(w, 1.0)
        np.testing.assert_array_equal(out.samples, w.samples)
        assert out.speaker_id == "a"

    def test_speed_length_and_id(self):
        w = noise(9000).replace(speaker_id="a")
        out = speed_perturb(w, 0.9)
        assert abs(out.samples.size - 10000) <= 1
        assert out.speaker_id == "a_sp0.9"

    def test_speed_shifts_pitch(self):
        out = speed_perturb(sine(100.0, seconds=2.0), 1.1)
        spec = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(out.samples.size, 1 / SAMPLE_RATE)
        assert freqs[np.argmax(spec)] == pytest.approx(110.0, abs=1.0)

    def test_crop_exact_length(self):
        w = noise(40000)
        assert random_crop(w, 2.0, np.random.default_rng(0)).samples.size == 32000

    def test_crop_wraps_short_input(self):
        w = Waveform(np.linspace(-0.5, 0.5, 100))
        out = random_crop(w, 250 / SAMPLE_RATE, np.random.default_rng(0)).samples
        assert out.size == 250
        np.testing.assert_array_equal(out[100:200], w.samples)

    def test_crop_deterministic(self):
        w = noise(40000)
        a = random_crop(w, 1.0, np.random.default_rng(7)).samples
        b = random_crop(w, 1.0, np.random.default_rng(7)).samples
        np.testing.assert_array_equal(a, b)

    def test_mix_lambda_one(self):
        a, b = noise(4000, 1), noise(4000, 2)
        out = mix_waveforms(a, b, 1.0)
        np.testing.assert_allclose(out.samples, a.samples * 0.05 / rms(a.samples), atol=1e-15)

    @pytest.mark.parametrize("lam", [0.5, 0.25, 0.8])
    def test_mix_energy_ratio(self, lam):
        ca, cb = mix_components(noise(4000, 1), noise(3000, 2), lam)
        assert np.sum(ca ** 2) / np.sum(cb ** 2) == pytest.approx(lam / (1 - lam), rel=1e-9)

    def test_mix_rejects_bad_ratio(self):
        with pytest.raises(FeatureError):
            mix_waveforms(noise(10), noise(10), 1.5)

    def test_add_noise_snr(self):
        w = noise(16000, 1)
        n = np.random.default_rng(5).standard_normal(16000) * 0.01
        out = add_noise(w, n, 10.0)
        added = out.samples - w.samples
        snr = 10 * np.log10(np.mean(w.samples ** 2) / np.mean(added ** 2))
        assert snr == pytest.approx(10.0, abs=1e-9)

    def test_reverb_keeps_length_and_rms(self):
        w = noise(16000, 1)
        out = reverberate(w, np.exp(-np.arange(800) / 100.0))
        assert out.samples.size == w.samples.size
        assert rms(out.samples) == pytest.approx(rms(w.samples))

    def test_augment_bank(self):
        bank = AugmentBank(noises=[np.ones(10) * 0.01])
        assert bank
        assert not AugmentBank()
        out = bank.apply(noise(1000), np.random.default_rng(0))
        assert out.samples.size == 1000

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(500, 5000), factor=st.floats(0.8, 1.25))
    def test_speed_length_property(self, n, factor):
        out = speed_perturb(noise(n), factor)
        assert out.samples.size == int(round(n / factor))
        assert np.abs(out.samples).max() <= 1.0
