"""Trial scoring, score normalization, calibration and verification metrics."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, Waveform, mix_waveforms


class ScoringError(ValueError):
    """Scores or trials cannot be evaluated."""


@dataclass(frozen=True)
class Trial:
    label: int
    enroll: str
    test: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ScoringError(f"trial label must be 0 or 1, got {self.label}")
        if self.enroll == self.test:
            raise ScoringError(f"trial compares {self.enroll} with itself")


@dataclass
class TrialSet:
    """Trials plus the audio they refer to, keyed by utterance path."""

    trials: list
    audio: dict
    normalize: bool = True

    def durations(self, key: str) -> float:
        return self.audio[key].duration


@dataclass
class ScoreReport:
    trials: list
    raw: np.ndarray
    snorm: np.ndarray
    calibrated: np.ndarray
    eer_percent: float
    min_dcf: float
    threshold_at_eer: float
    final: str = "raw"
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return {"eer": self.eer_percent, "min_dcf": self.min_dcf,
                "threshold_at_eer": self.threshold_at_eer, "num_trials": len(self.trials),
                "scores_used": self.final,
                "config_hash": hashlib.sha256(blob).hexdigest()[:16]}

    def write(self, csv_path, json_path=None) -> None:
        from .fileio import write_rows_csv
        rows = [(f"{t.label} {t.enroll} {t.test}", float(r), float(s), float(c))
                for t, r, s, c in zip(self.trials, self.raw, self.snorm, self.calibrated)]
        write_rows_csv(csv_path, ["trial", "raw", "snorm", "calibrated"], rows)
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True))


# -- scoring -----------------------------------------------------------------

def _vec(x) -> np.ndarray:
    return np.asarray(getattr(x, "vector", x), dtype=np.float64)


def length_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ScoringError("cannot length-normalize a zero vector")
    return x / norm


def cosine_score(a, b) -> float:
    a, b = _vec(a), _vec(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ScoringError("cosine score of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def build_cohort(embeddings_by_speaker: dict) -> np.ndarray:
    """One vector per speaker: the re-normalized mean of its length-normalized embeddings."""
    if not embeddings_by_speaker:
        raise ScoringError("empty cohort")
    rows = [length_normalize(np.asarray(v)).mean(axis=0)
            for _, v in sorted(embeddings_by_speaker.items())]
    return length_normalize(np.array(rows))


def _top_stats(vec: np.ndarray, cohort: np.ndarray, top_k: int) -> tuple[float, float]:
    scores = length_normalize(cohort) @ length_normalize(vec)
    top = np.sort(scores)[::-1][:top_k]
    mu, sd = float(top.mean()), float(top.std())
    if sd < 1e-12:
        raise ScoringError("degenerate cohort: top-k scores have zero spread")
    return mu, sd


def adaptive_snorm(raw: float, e, t, cohort: np.ndarray, top_k: int = 500) -> float:
    """Symmetric adaptive s-norm using each side's top-k cohort scores."""
    cohort = np.asarray(cohort, dtype=np.float64)
    if cohort.ndim != 2 or len(cohort) == 0:
        raise ScoringError("cohort must be a non-empty matrix")
    if top_k > len(cohort) or top_k < 1:
        raise ScoringError(f"top_k {top_k} not within 1..{len(cohort)}")
    mu_e, sd_e = _top_stats(_vec(e), cohort, top_k)
    mu_t, sd_t = _top_stats(_vec(t), cohort, top_k)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


# -- calibration -------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3, max_iter: int = 100,
                 tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Newton-Raphson maximum likelihood with an L2 penalty on the weights.

    Minimizes ``sum(log-loss) + l2/2 * |w|^2``; the bias is unpenalized.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0

    def objective(th):
        z = xa @ th
        return np.sum(_log1pexp(z) - y * z) + 0.5 * np.sum(reg * th * th)

    obj = objective(theta)
    for _ in range(max_iter):
        p = _sigmoid(xa @ theta)
        grad = xa.T @ (p - y) + reg * theta
        hess = (xa * (p * (1 - p))[:, None]).T @ xa + np.diag(reg) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            cobj = objective(cand)
            if cobj <= obj or t < 1e-8:
                break
            t *= 0.5
        converged = obj - cobj < tol * max(1.0, abs(obj))
        theta, obj = cand, min(cobj, obj)
        if converged:
            break
    return theta[:-1], float(theta[-1])


def quality_features(scores, durations) -> np.ndarray:
    """(score, log min duration, log max duration) per trial."""
    d = np.asarray(durations, dtype=np.float64).reshape(-1, 2)
    if np.any(d <= 0):
        raise ScoringError("durations must be positive")
    return np.column_stack([np.asarray(scores, dtype=np.float64),
                            np.log(d.min(axis=1)), np.log(d.max(axis=1))])


@dataclass
class Calibrator:
    """Logistic-regression calibration with duration quality measures."""

    weights: np.ndarray
    bias: float
    prior_logit: float = 0.0
    use_durations: bool = True

    @classmethod
    def fit(cls, scores, durations, labels, l2: float = 1e-3,
            use_durations: bool = True) -> "Calibrator":
        labels = np.asarray(labels)
        if labels.min() == labels.max():
            raise ScoringError("calibration needs both target and non-target trials")
        feats = quality_features(scores, durations)
        if not use_durations:
            feats = feats[:, :1]
        mu = feats.mean(axis=0)
        sd = feats.std(axis=0)
        live = sd > 1e-12
        z = np.zeros_like(feats)
        z[:, live] = (feats[:, live] - mu[live]) / sd[live]
        w_std, b_std = fit_logistic(z, labels, l2)
        w = np.where(live, w_std / np.where(live, sd, 1.0), 0.0)
        b = b_std - float(np.sum(w * mu))
        p = labels.mean()
        return cls(w, b, float(np.log(p / (1 - p))), use_durations)

    def logit(self, scores, durations) -> np.ndarray:
        feats = quality_features(scores, durations)
        if not self.use_durations:
            feats = feats[:, :1]
        return feats @ self.weights + self.bias

    def __call__(self, scores, durations) -> np.ndarray:
        """Calibrated log-likelihood ratios (fit-set prior log-odds removed)."""
        return self.logit(scores, durations) - self.prior_logit


def calibrate(scores, durations, labels, l2: float = 1e-3):
    """Fit on the given trials and return (calibrated LLRs, calibrator)."""
    cal = Calibrator.fit(scores, durations, labels, l2)
    return cal(scores, durations), cal


def logit_cross_entropy(logits, labels) -> float:
    """Mean log-loss (nats) of posterior logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(_log1pexp(z) - y * z))


# -- metrics -------------------------------------------------------------------

def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ScoringError("scores and labels must be 1-d arrays of equal length")
    if labels.min() == labels.max():
        raise ScoringError("metrics need both target and non-target trials")
    return scores, labels


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, P_fa, P_miss) for every distinct decision rule ``score >= threshold``.

    Thresholds run from +inf (reject all) down to the smallest score (accept all).
    """
    scores, labels = _check_labels(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    n_t, n_n = y.sum(), (1 - y).sum()
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[s[1:] != s[:-1], True]  # keep the final index of each tied score run
    thresholds = np.r_[np.inf, s[last]]
    p_fa = np.r_[0.0, fp[last] / n_n]
    p_miss = np.r_[1.0, 1.0 - tp[last] / n_t]
    return thresholds, p_fa, p_miss


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate (percent) and its threshold, interpolated between operating points."""
    thr, p_fa, p_miss = operating_points(scores, labels)
    diff = p_miss - p_fa  # starts at +1, ends <= 0
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return 100.0 * float(p_fa[i]), float(thr[i])
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    eer = p_fa[i - 1] + t * (p_fa[i] - p_fa[i - 1])
    hi = thr[i - 1] if np.isfinite(thr[i - 1]) else thr[i]
    return 100.0 * float(eer), float(hi + t * (thr[i] - hi))


def compute_mindcf(scores, labels, p_target: float = 0.01, c_fa: float = 1.0,
                   c_miss: float = 1.0) -> float:
    """Minimum detection cost, normalized by the best trivial (accept/reject-all) cost."""
    _, p_fa, p_miss = operating_points(scores, labels)
    dcf = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1 - p_target)))


# -- trial-set variants --------------------------------------------------------

def _uniform_crop(w: Waveform, seconds: float, rng) -> Waveform:
    n = int(round(seconds * w.sample_rate))
    if w.samples.size < n:
        raise ScoringError(f"{w.source_path}: {w.duration:.2f}s is shorter than {seconds:.2f}s")
    start = int(rng.integers(0, w.samples.size - n + 1))
    return w.replace(samples=w.samples[start:start + n].copy())


def build_overlapped_trials(ts: TrialSet, interferers: list, rng,
                            lam_range=(0.3, 0.7)) -> TrialSet:
    """Mix every test utterance with a random interfering speaker's audio.

    Enrollment audio is untouched.  The returned set is flagged to skip score
    normalization and calibration.
    """
    if not interferers:
        raise ScoringError("empty interferer pool")
    trial_speakers = {ts.audio[k].speaker_id for t in ts.trials for k in (t.enroll, t.test)}
    if any(w.speaker_id in trial_speakers for w in interferers):
        raise ScoringError("interferer pool overlaps the trial speakers")
    audio = {}
    trials = []
    for i, t in enumerate(ts.trials):
        audio.setdefault(t.enroll, ts.audio[t.enroll])
        noise = interferers[int(rng.integers(len(interferers)))]
        lam = float(rng.uniform(*lam_range))
        key = f"{t.test}#mix{i}"
        audio[key] = mix_waveforms(ts.audio[t.test], noise, lam).replace(source_path=key)
        trials.append(Trial(t.label, t.enroll, key))
    return TrialSet(trials, audio, normalize=False)


def build_short_trials(ts: TrialSet, rng, min_s: float = 0.5, max_s: float = 2.0,
                       both_sides: bool = True) -> TrialSet:
    """Crop trial utterances to uniform random lengths in [min_s, max_s] seconds."""
    audio = {}
    trials = []
    for i, t in enumerate(ts.trials):
        keys = []
        for side, key in (("e", t.enroll), ("t", t.test)):
            if side == "e" and not both_sides:
                audio.setdefault(key, ts.audio[key])
                keys.append(key)
                continue
            src = ts.audio[key]
            if src.duration < min_s:
                raise ScoringError(f"{key}: {src.duration:.2f}s is shorter than {min_s}s")
            length = float(rng.uniform(min_s, min(max_s, src.duration)))
            new_key = f"{key}#short{side}{i}"
            audio[new_key] = _uniform_crop(src, length, rng).replace(source_path=new_key)
            keys.append(new_key)
        trials.append(Trial(t.label, keys[0], keys[1]))
    return TrialSet(trials, audio, normalize=False)


# -- pipeline -------------------------------------------------------------------

def score_trials(trials: list, embeddings: dict, durations: dict | None = None,
                 cohort: np.ndarray | None = None, top_k: int = 500,
                 calibrator: Calibrator | None = None, normalize: bool = True,
                 config: dict | None = None) -> ScoreReport:
    """Cosine scoring, optional adaptive s-norm and calibration, plus EER/MinDCF."""
    if not trials:
        raise ScoringError("empty trial list")
    labels = np.array([t.label for t in trials])
    raw = np.array([cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials])
    snorm = raw.copy()
    final = "raw"
    if normalize and cohort is not None:
        k = min(top_k, len(cohort))
        stats = {}
        for key in {x for t in trials for x in (t.enroll, t.test)}:
            stats[key] = _top_stats(_vec(embeddings[key]), np.asarray(cohort), k)
        snorm = np.array([0.5 * ((r - stats[t.enroll][0]) / stats[t.enroll][1]
                                 + (r - stats[t.test][0]) / stats[t.test][1])
                          for r, t in zip(raw, trials)])
        final = "snorm"
    calibrated = snorm.copy()
    if normalize and calibrator is not None:
        if durations is None:
            raise ScoringError("calibration needs utterance durations")
        d = np.array([(durations[t.enroll], durations[t.test]) for t in trials])
        calibrated = calibrator(snorm, d)
        final = "calibrated"
    used = {"raw": raw, "snorm": snorm, "calibrated": calibrated}[final]
    eer, thr = compute_eer(used, labels)
    return ScoreReport(list(trials), raw, snorm, calibrated, eer, compute_mindcf(used, labels),
                       thr, final, config or {})


def durations_of(audio: dict) -> dict:
    return {k: w.samples.size / (w.sample_rate or SAMPLE_RATE) for k, w in audio.items()}
