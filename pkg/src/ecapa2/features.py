"""Waveform handling, log-spectral features and the masking/augmentation frontend."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH_MS = 25.0
FRAME_SHIFT_MS = 10.0
N_FFT = 512
LOG_FLOOR = 1e-6
FEATURE_BINS = {"fft256": 256, "mel80": 80}


class FeatureError(ValueError):
    """Input audio cannot be turned into the requested features."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    speaker_id: str = ""
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FeatureError("waveform must be a non-empty 1-d array")
        if self.sample_rate <= 0:
            raise FeatureError(f"invalid sample rate {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise FeatureError("waveform contains non-finite samples")
        peak = np.abs(self.samples).max()
        if peak > 1.0 + 1e-9:
            raise FeatureError(f"samples exceed [-1, 1] (peak {peak:.3f})")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def replace(self, **changes) -> "Waveform":
        return dataclasses.replace(self, **changes)


@dataclass
class FeatureMap:
    bins: np.ndarray
    kind: str
    frame_shift_ms: float = FRAME_SHIFT_MS
    frame_length_ms: float = FRAME_LENGTH_MS

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.kind not in FEATURE_BINS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        if self.bins.ndim != 2 or self.bins.shape[0] != FEATURE_BINS[self.kind]:
            raise FeatureError(f"{self.kind} needs {FEATURE_BINS[self.kind]} bins, "
                               f"got shape {self.bins.shape}")
        if not np.isfinite(self.bins).all():
            raise FeatureError("feature map contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def duration(self) -> float:
        return ((self.num_frames - 1) * self.frame_shift_ms + self.frame_length_ms) / 1000.0

    def with_bins(self, bins: np.ndarray) -> "FeatureMap":
        return dataclasses.replace(self, bins=bins)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * dst_rate / src_rate))
    pos = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(pos, np.arange(len(samples)), samples)


def frame_count(num_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = int(round(sample_rate * FRAME_LENGTH_MS / 1000))
    hop = int(round(sample_rate * FRAME_SHIFT_MS / 1000))
    if num_samples < win:
        return 0
    return 1 + (num_samples - win) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = 80, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1), peak 1 at each center frequency."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_center_frequencies(n_mels: int = 80, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def magnitude_spectrogram(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """|STFT| with a Hamming window, (n_fft//2+1) x frames."""
    win = int(round(sample_rate * FRAME_LENGTH_MS / 1000))
    hop = int(round(sample_rate * FRAME_SHIFT_MS / 1000))
    n = frame_count(len(samples), sample_rate)
    if n < 1:
        raise FeatureError(f"utterance of {len(samples)} samples is shorter than one frame")
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * np.hamming(win), n=N_FFT, axis=1)
    return np.abs(spec).T


def _mean_normalize(x: np.ndarray) -> np.ndarray:
    # offset by the first frame so constant rows come out exactly zero
    ref = x[:, :1]
    centered = x - ref
    return centered - centered.mean(axis=1, keepdims=True)


def stft_features(w: Waveform, kind: str = "fft256") -> FeatureMap:
    """Log-magnitude features, per-utterance mean normalized over time."""
    if kind not in FEATURE_BINS:
        raise FeatureError(f"unknown feature kind {kind!r}")
    samples = resample_linear(w.samples, w.sample_rate, SAMPLE_RATE)
    mag = magnitude_spectrogram(samples)
    if kind == "fft256":
        spec = mag[1:257]
    else:
        spec = mel_filterbank(80) @ mag
    return FeatureMap(_mean_normalize(np.log(spec + LOG_FLOOR)), kind)


# -- masking --------------------------------------------------------------------

def _check_window(start: int, count: int, size: int, axis: str) -> None:
    if count < 0 or start < 0 or start + count > size:
        raise FeatureError(f"{axis} mask [{start}, {start + count}) outside 0..{size}")


def mask_time(f: FeatureMap, start: int, count: int, fill: float | None = None) -> FeatureMap:
    """Replace ``count`` consecutive frames with the map mean."""
    _check_window(start, count, f.num_frames, "time")
    out = f.bins.copy()
    out[:, start:start + count] = f.bins.mean() if fill is None else fill
    return f.with_bins(out)


def mask_freq(f: FeatureMap, start: int, count: int, fill: float | None = None) -> FeatureMap:
    """Replace ``count`` consecutive bins with the map mean."""
    _check_window(start, count, f.bins.shape[0], "frequency")
    out = f.bins.copy()
    out[start:start + count, :] = f.bins.mean() if fill is None else fill
    return f.with_bins(out)


def spec_augment(f: FeatureMap, rng: np.random.Generator, max_frames: int = 5,
                 max_bins: int = 32) -> FeatureMap:
    """One time mask of U{0..max_frames} frames and one frequency mask of U{0..max_bins} bins."""
    n_bins, n_frames = f.bins.shape
    tw = int(rng.integers(0, max_frames + 1))
    fw = int(rng.integers(0, max_bins + 1))
    tw, fw = min(tw, n_frames), min(fw, n_bins)
    t0 = int(rng.integers(0, n_frames - tw + 1))
    f0 = int(rng.integers(0, n_bins - fw + 1))
    fill = f.bins.mean()
    return mask_freq(mask_time(f, t0, tw, fill), f0, fw, fill)


# -- waveform augmentation -----------------------------------------------------

def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample by linear interpolation so the duration scales by 1/factor.

    The result is treated as a new speaker, tagged ``<id>_sp<factor>``.
    """
    if factor <= 0:
        raise FeatureError("speed factor must be positive")
    if factor == 1.0:
        return w.replace(samples=w.samples.copy())
    n_out = int(round(w.samples.size / factor))
    pos = np.arange(n_out) * factor
    out = np.interp(pos, np.arange(w.samples.size), w.samples)
    return w.replace(samples=out, speaker_id=speed_speaker_id(w.speaker_id, factor))


def speed_speaker_id(speaker_id: str, factor: float) -> str:
    return speaker_id if factor == 1.0 else f"{speaker_id}_sp{factor:g}"


def wrap_to_length(samples: np.ndarray, n: int) -> np.ndarray:
    return np.resize(samples, n) if samples.size < n else samples[:n]


def random_crop(w: Waveform, seconds: float, rng: np.random.Generator) -> Waveform:
    """Contiguous crop of exactly round(seconds * rate) samples; short input is wrap-padded."""
    if seconds <= 0:
        raise FeatureError("crop length must be positive")
    n = int(round(seconds * w.sample_rate))
    if w.samples.size <= n:
        return w.replace(samples=wrap_to_length(w.samples, n))
    start = int(rng.integers(0, w.samples.size - n + 1))
    return w.replace(samples=w.samples[start:start + n].copy())


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


MIX_LEVEL = 0.05


def mix_components(a: Waveform, b: Waveform, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """RMS-normalized, energy-weighted components ``sqrt(lam)*a`` and ``sqrt(1-lam)*b``.

    Both inputs are scaled to RMS ``MIX_LEVEL`` first; ``b`` is wrap-padded or
    truncated to the length of ``a``.
    """
    if not 0.0 <= lam <= 1.0:
        raise FeatureError(f"mixing ratio {lam} outside [0, 1]")
    ra, rb = rms(a.samples), rms(b.samples)
    if ra == 0.0 or rb == 0.0:
        raise FeatureError("cannot mix a silent waveform")
    an = a.samples * (MIX_LEVEL / ra)
    bs = wrap_to_length(b.samples, a.samples.size)
    rb = rms(bs)
    if rb == 0.0:
        raise FeatureError("cannot mix a silent waveform")
    bn = bs * (MIX_LEVEL / rb)
    return np.sqrt(lam) * an, np.sqrt(1.0 - lam) * bn


def mix_waveforms(a: Waveform, b: Waveform, lam: float) -> Waveform:
    """Energy mixture of two utterances with ratio lam : (1 - lam); keeps ``a``'s identity."""
    ca, cb = mix_components(a, b, lam)
    out = ca + cb
    peak = np.abs(out).max()
    if peak > 1.0:
        out = out / peak
    return a.replace(samples=out)


def add_noise(w: Waveform, noise: np.ndarray, snr_db: float) -> Waveform:
    """Additive noise at the given SNR; the noise is wrap-padded to the waveform length."""
    noise = wrap_to_length(np.asarray(noise, dtype=np.float64), w.samples.size)
    ps, pn = np.mean(w.samples ** 2), np.mean(noise ** 2)
    if pn == 0.0:
        return w
    out = w.samples + noise * np.sqrt(ps / (pn * 10 ** (snr_db / 10)))
    peak = np.abs(out).max()
    return w.replace(samples=out / peak if peak > 1.0 else out)


def reverberate(w: Waveform, rir: np.ndarray) -> Waveform:
    """Convolve with an impulse response, keeping the original length and energy."""
    rir = np.asarray(rir, dtype=np.float64)
    rir = rir / (np.sqrt(np.sum(rir ** 2)) or 1.0)
    out = np.convolve(w.samples, rir)[:w.samples.size]
    scale = rms(w.samples) / (rms(out) or 1.0)
    out = out * scale
    peak = np.abs(out).max()
    return w.replace(samples=out / peak if peak > 1.0 else out)


class AugmentBank:
    """Noise and impulse-response hooks fed from user-supplied WAV directories."""

    def __init__(self, noises=(), rirs=(), snr_range=(5.0, 20.0)):
        self.noises = [np.asarray(n, dtype=np.float64) for n in noises]
        self.rirs = [np.asarray(r, dtype=np.float64) for r in rirs]
        self.snr_range = snr_range

    @classmethod
    def from_dirs(cls, noise_dir=None, rir_dir=None, **kw) -> "AugmentBank":
        from .fileio import read_wav_dir
        noises = [w.samples for w in read_wav_dir(noise_dir)] if noise_dir else []
        rirs = [w.samples for w in read_wav_dir(rir_dir)] if rir_dir else []
        return cls(noises, rirs, **kw)

    def __bool__(self) -> bool:
        return bool(self.noises or self.rirs)

    def apply(self, w: Waveform, rng: np.random.Generator) -> Waveform:
        choices = (["noise"] if self.noises else []) + (["reverb"] if self.rirs else [])
        if not choices:
            return w
        kind = choices[int(rng.integers(len(choices)))]
        if kind == "noise":
            noise = self.noises[int(rng.integers(len(self.noises)))]
            return add_noise(w, noise, float(rng.uniform(*self.snr_range)))
        return reverberate(w, self.rirs[int(rng.integers(len(self.rirs)))])
