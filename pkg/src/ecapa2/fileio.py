"""WAV, CSV, PGM and trial-list readers and writers."""

from __future__ import annotations

import csv
import io
import wave
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, FeatureMap, Waveform, resample_linear


def read_wav(path, target_rate: int = SAMPLE_RATE, speaker_id: str | None = None) -> Waveform:
    """Read 16-bit PCM; stereo is averaged to mono, other rates are resampled."""
    path = Path(path)
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        channels = fh.getnchannels()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    pcm = resample_linear(pcm, rate, target_rate)
    sid = speaker_id if speaker_id is not None else path.parent.name
    return Waveform(np.clip(pcm, -1.0, 1.0), target_rate, sid, str(path))


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav_dir(directory) -> list:
    return [read_wav(p) for p in sorted(Path(directory).rglob("*.wav"))]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrix_csv(path, matrix: np.ndarray, meta: dict) -> None:
    """CSV matrix, one row per frequency bin, preceded by a ``# key=value`` header."""
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    for row in np.asarray(matrix):
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_matrix_csv(path) -> tuple[np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].split():
            key, _, value = item.partition("=")
            meta[key] = value
        lines = lines[1:]
    matrix = np.array([[float(v) for v in line.split(",")] for line in lines if line])
    return matrix, meta


def write_feature_csv(path, f: FeatureMap) -> None:
    write_matrix_csv(path, f.bins, {"kind": f.kind, "frame_shift_ms": f.frame_shift_ms,
                                    "frame_length_ms": f.frame_length_ms,
                                    "bins": f.bins.shape[0], "frames": f.bins.shape[1]})


def read_feature_csv(path) -> FeatureMap:
    bins, meta = read_matrix_csv(path)
    return FeatureMap(bins, meta["kind"], float(meta.get("frame_shift_ms", 10.0)),
                      float(meta.get("frame_length_ms", 25.0)))


def write_pgm(path, matrix: np.ndarray) -> None:
    """8-bit binary PGM heatmap, min -> 0 and max -> 255, first row at the top."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def read_trials(path) -> list:
    """Trial list lines ``<label 0|1> <enroll_path> <test_path>``."""
    from .scoring import Trial
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: malformed trial line {line!r}")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


def write_trials(path, trials) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials))


def write_rows_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def read_rows_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
