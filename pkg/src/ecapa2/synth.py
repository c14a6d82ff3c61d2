"""Synthetic multi-speaker corpus for desk-scale experiments.

Each speaker owns a formant-like spectral envelope, a pitch band, a spectral
tilt and a breathiness level.  Utterances are sequences of syllable-like
segments: a jittered glottal pulse train plus aspiration noise, shaped by the
speaker envelope after a phone-dependent formant shift that is shared by all
speakers.  A per-utterance channel tilt adds session variability.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, Waveform

NUM_PHONES = 10
FORMANT_RANGES = ((300.0, 900.0), (900.0, 2400.0), (2300.0, 3400.0), (3400.0, 5000.0))
GRID = np.linspace(0.0, SAMPLE_RATE / 2, 257)


@dataclass
class SynthCorpusSpec:
    num_speakers: int = 32
    utts_per_speaker: int = 20
    duration_s: tuple = (3.0, 5.0)
    seed: int = 0
    held_out_speakers: int = 8
    trials_per_class: int = 300
    phone_shift: float = 0.12
    session_tilt_db: float = 3.0

    def __post_init__(self):
        self.duration_s = tuple(float(v) for v in self.duration_s)
        if self.num_speakers < 2:
            raise ValueError("a corpus needs at least 2 speakers")
        if not 0 <= self.held_out_speakers < self.num_speakers:
            raise ValueError("held_out_speakers must leave at least one training speaker")
        if self.utts_per_speaker < 2:
            raise ValueError("need at least 2 utterances per speaker for target trials")
        lo, hi = self.duration_s
        if not 0 < lo <= hi:
            raise ValueError(f"invalid duration range {self.duration_s}")


@dataclass
class SpeakerParams:
    speaker_id: str
    formants: list
    bandwidths: list
    gains: list
    f0: float
    tilt_db_per_khz: float
    breathiness: float

    def log_envelope(self, freqs: np.ndarray = GRID, shift: np.ndarray | None = None,
                     tilt_extra: float = 0.0) -> np.ndarray:
        shift = np.ones(len(self.formants)) if shift is None else shift
        env = np.full_like(freqs, 1e-3, dtype=np.float64)
        for fc, bw, g, s in zip(self.formants, self.bandwidths, self.gains, shift):
            env = env + g / (1.0 + ((freqs - fc * s) / bw) ** 2)
        return np.log(env) + (self.tilt_db_per_khz + tilt_extra) * freqs / 1000.0 / 8.686


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    waveform: Waveform
    session_tilt: float = 0.0

    @property
    def relpath(self) -> str:
        return f"{self.speaker_id}/{self.utt_id}.wav"


@dataclass
class Corpus:
    spec: SynthCorpusSpec
    speakers: list
    utterances: list
    train_speakers: list
    test_speakers: list
    trials: list = field(default_factory=list)

    def by_speaker(self, speakers=None) -> dict:
        keep = None if speakers is None else set(speakers)
        out = {}
        for u in self.utterances:
            if keep is None or u.speaker_id in keep:
                out.setdefault(u.speaker_id, []).append(u)
        return out

    def utterance_map(self) -> dict:
        return {u.relpath: u for u in self.utterances}


def phone_table(seed: int = 12345) -> np.ndarray:
    """Formant scale factors per phone, shared by every speaker."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(NUM_PHONES, len(FORMANT_RANGES)))


def make_speaker(seed: int, index: int) -> SpeakerParams:
    rng = np.random.default_rng([seed, index, 0])
    formants = [float(rng.uniform(lo, hi)) for lo, hi in FORMANT_RANGES]
    return SpeakerParams(
        speaker_id=f"spk{index:03d}",
        formants=formants,
        bandwidths=[float(rng.uniform(60.0, 220.0)) for _ in formants],
        gains=[float(g) for g in rng.uniform(0.3, 1.0, size=len(formants)) * [1.0, 0.8, 0.5, 0.3]],
        f0=float(np.exp(rng.uniform(np.log(85.0), np.log(260.0)))),
        tilt_db_per_khz=float(rng.uniform(-4.0, -1.0)),
        breathiness=float(rng.uniform(0.05, 0.5)),
    )


def _pulse_train(n: int, f0: float, rng) -> np.ndarray:
    out = np.zeros(n)
    t = float(rng.uniform(0, SAMPLE_RATE / f0))
    drift = float(rng.uniform(0.9, 1.1))
    while t < n:
        out[int(t)] = 1.0
        period = SAMPLE_RATE / (f0 * drift * (1.0 + 0.03 * rng.standard_normal()))
        t += max(period, 20.0)
    return out


def _segment(sp: SpeakerParams, phone_shift: np.ndarray, n: int, tilt_extra: float, rng):
    source = _pulse_train(n, sp.f0, rng) * 4.0 + sp.breathiness * rng.standard_normal(n)
    nfft = int(2 ** np.ceil(np.log2(n)))
    freqs = np.fft.rfftfreq(nfft, 1.0 / SAMPLE_RATE)
    env = np.exp(sp.log_envelope(freqs, phone_shift, tilt_extra))
    y = np.fft.irfft(np.fft.rfft(source, nfft) * env, nfft)[:n]
    ramp = min(n // 4, 320)
    amp = np.ones(n)
    amp[:ramp] = np.linspace(0, 1, ramp)
    amp[n - ramp:] = np.linspace(1, 0, ramp)
    return y * amp


def synth_utterance(sp: SpeakerParams, duration: float, rng, phone_shift: float = 0.12,
                    tilt_db: float = 3.0, phones: np.ndarray | None = None):
    phones = phone_table() if phones is None else phones
    n_total = int(round(duration * SAMPLE_RATE))
    tilt_extra = float(rng.uniform(-tilt_db, tilt_db))
    pieces, filled = [], 0
    while filled < n_total:
        seg = int(rng.uniform(0.12, 0.30) * SAMPLE_RATE)
        gap = int(rng.uniform(0.02, 0.10) * SAMPLE_RATE)
        p = int(rng.integers(NUM_PHONES))
        pieces.append(_segment(sp, 1.0 + phone_shift * phones[p], seg, tilt_extra, rng)
                      * rng.uniform(0.6, 1.0))
        pieces.append(np.zeros(gap))
        filled += seg + gap
    x = np.concatenate(pieces)[:n_total]
    x = x / (np.sqrt(np.mean(x ** 2)) + 1e-12) * 0.05
    x = x + 1e-4 * rng.standard_normal(n_total)
    return np.clip(x, -1.0, 1.0), tilt_extra


def make_trials(utts_by_speaker: dict, per_class: int, rng) -> list:
    """Balanced target/non-target pairs among the given speakers' utterances."""
    from .scoring import Trial
    speakers = sorted(utts_by_speaker)
    if len(speakers) < 2:
        raise ValueError("trials need at least 2 speakers")
    targets, nontargets = set(), set()
    sizes = [len(utts_by_speaker[s]) for s in speakers]
    max_target = sum(n * (n - 1) // 2 for n in sizes)
    max_nontarget = (sum(sizes) ** 2 - sum(n * n for n in sizes)) // 2
    n_per_class = min(per_class, max_target, max_nontarget)
    while len(targets) < n_per_class:
        s = speakers[int(rng.integers(len(speakers)))]
        utts = utts_by_speaker[s]
        i, j = rng.choice(len(utts), size=2, replace=False)
        targets.add(tuple(sorted((utts[i].relpath, utts[j].relpath))))
    while len(nontargets) < n_per_class:
        a, b = rng.choice(len(speakers), size=2, replace=False)
        ua = utts_by_speaker[speakers[a]]
        ub = utts_by_speaker[speakers[b]]
        pair = (ua[int(rng.integers(len(ua)))].relpath, ub[int(rng.integers(len(ub)))].relpath)
        nontargets.add(tuple(sorted(pair)))
    trials = [Trial(1, e, t) for e, t in sorted(targets)] + \
             [Trial(0, e, t) for e, t in sorted(nontargets)]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def generate_corpus(spec: SynthCorpusSpec) -> Corpus:
    speakers = [make_speaker(spec.seed, i) for i in range(spec.num_speakers)]
    phones = phone_table()
    utterances = []
    for i, sp in enumerate(speakers):
        for u in range(spec.utts_per_speaker):
            rng = np.random.default_rng([spec.seed, i, u + 1])
            duration = float(rng.uniform(*spec.duration_s))
            x, tilt = synth_utterance(sp, duration, rng, spec.phone_shift, spec.session_tilt_db,
                                      phones)
            utt_id = f"{sp.speaker_id}_u{u:02d}"
            wav = Waveform(x, SAMPLE_RATE, sp.speaker_id, f"{sp.speaker_id}/{utt_id}.wav")
            utterances.append(Utterance(utt_id, sp.speaker_id, wav, tilt))
    ids = [sp.speaker_id for sp in speakers]
    n_test = spec.held_out_speakers
    train_ids, test_ids = ids[:len(ids) - n_test], ids[len(ids) - n_test:]
    corpus = Corpus(spec, speakers, utterances, train_ids, test_ids)
    if test_ids:
        rng = np.random.default_rng([spec.seed, 999_999])
        corpus.trials = make_trials(corpus.by_speaker(test_ids), spec.trials_per_class, rng)
    return corpus


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``<out>/<speaker>/<utt>.wav``, trial list, split and generator metadata."""
    from .fileio import write_trials, write_wav
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for u in corpus.utterances:
        write_wav(out / u.relpath, u.waveform)
    write_trials(out / "trials.txt", corpus.trials)
    meta = {
        "spec": asdict(corpus.spec),
        "train_speakers": corpus.train_speakers,
        "test_speakers": corpus.test_speakers,
        "speakers": [asdict(sp) for sp in corpus.speakers],
        "utterances": [{"path": u.relpath, "speaker": u.speaker_id,
                        "duration_s": u.waveform.duration, "session_tilt": u.session_tilt}
                       for u in corpus.utterances],
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def load_corpus(corpus_dir) -> Corpus:
    """Read a corpus written by ``write_corpus`` back from disk."""
    from .fileio import read_trials, read_wav
    root = Path(corpus_dir)
    meta = json.loads((root / "corpus.json").read_text())
    spec = SynthCorpusSpec(**meta["spec"])
    speakers = [SpeakerParams(**sp) for sp in meta["speakers"]]
    utterances = []
    for entry in meta["utterances"]:
        wav = read_wav(root / entry["path"], speaker_id=entry["speaker"])
        wav = wav.replace(source_path=entry["path"])
        utt_id = Path(entry["path"]).stem
        utterances.append(Utterance(utt_id, entry["speaker"], wav, entry["session_tilt"]))
    trials = read_trials(root / "trials.txt") if (root / "trials.txt").exists() else []
    return Corpus(spec, speakers, utterances, meta["train_speakers"], meta["test_speakers"],
                  trials)


def envelope_correlations(corpus: Corpus) -> tuple[float, float]:
    """Mean same-speaker and cross-speaker correlation of per-utterance log envelopes.

    Computed from generator parameters only, independent of any audio analysis.
    """
    params = {sp.speaker_id: sp for sp in corpus.speakers}
    envs = np.array([params[u.speaker_id].log_envelope(tilt_extra=u.session_tilt)
                     for u in corpus.utterances])
    labels = np.array([u.speaker_id for u in corpus.utterances])
    c = np.corrcoef(envs)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(c[same & off].mean()), float(c[~same].mean())
