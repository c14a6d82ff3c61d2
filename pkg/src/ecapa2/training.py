"""Losses, learning-rate schedule, optimizer and the two-stage training loop.

Stage ``initial`` trains on short fixed crops with SpecAugment; stage
``lm_ft`` (large-margin fine-tuning) raises the margin, lengthens crops with
optional variable-length cropping and disables augmentation.  A fraction of
batches are margin-mixup batches built from two-speaker energy mixtures.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .features import (AugmentBank, Waveform, mix_waveforms, random_crop, spec_augment,
                       speed_perturb, stft_features, wrap_to_length)
from .nn import l2_normalize
from .tensor import Tensor

STAGES = ("initial", "lm_ft")
SPEED_FACTORS = (0.9, 1.1)
NORM_TOL = 1e-6


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    """One training stage.  Defaults are the full-scale initial-stage values."""

    stage: str = "initial"
    margin: float = 0.2
    scale: float = 30.0
    subcenters: int = 2
    mixup_prob: float = 0.05
    mixup_beta: float = 0.05
    mixup_lambda: str = "uniform"
    mixup_lambda_range: tuple = (0.5, 1.0)
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycle_steps: int = 120_000
    weight_decay: float = 2e-4
    crop_s: float = 2.0
    vlt_alpha: float = 0.4
    vlt_min_s: float = 1.0
    vlt_max_s: float = 5.0
    batch_size: int = 256
    speed_aug: bool = True
    speed_aug_prob: float = 2.0 / 3.0
    speed_aug_prob_ft: float = 0.2
    spec_augment: bool = True
    augment: bool = True
    features: str = "fft256"
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.mixup_lambda_range = tuple(float(v) for v in self.mixup_lambda_range)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("mixup_prob", "vlt_alpha", "speed_aug_prob", "speed_aug_prob_ft"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.subcenters < 1:
            raise ValueError("subcenters must be >= 1")
        if self.cycle_steps < 2 or self.batch_size < 1:
            raise ValueError("cycle_steps must be >= 2 and batch_size >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 < self.vlt_min_s <= self.vlt_max_s or self.crop_s <= 0:
            raise ValueError("invalid crop lengths")
        lo, hi = self.mixup_lambda_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"invalid mixup_lambda_range {self.mixup_lambda_range}")
        if self.mixup_lambda not in ("uniform", "beta"):
            raise ValueError("mixup_lambda must be 'uniform' or 'beta'")
        if self.stage == "lm_ft" and (self.spec_augment or self.augment):
            raise ValueError("lm_ft disables SpecAugment and noise/reverb augmentation")

    @classmethod
    def preset(cls, stage: str, **overrides) -> "TrainConfig":
        """Full-scale defaults for a stage, with keyword overrides."""
        base = {}
        if stage == "lm_ft":
            base = dict(margin=0.4, lr_max=1e-5, cycle_steps=60_000, crop_s=5.0,
                        vlt_max_s=5.0, batch_size=512, spec_augment=False, augment=False)
        base.update(overrides)
        return cls(stage=stage, **base)

    @property
    def sample_speed_prob(self) -> float:
        return self.speed_aug_prob_ft if self.stage == "lm_ft" else self.speed_aug_prob

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mixup_lambda_range"] = list(self.mixup_lambda_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- losses ---------------------------------------------------------------------

def _check_normalized(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if np.abs(norms - 1.0).max() > NORM_TOL:
        raise TrainingError(f"{what} must be length-normalized (norm range "
                            f"{norms.min():.6f}..{norms.max():.6f})")


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1:
        raise TrainingError("labels must be 1-d")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise TrainingError(f"label out of range [0, {num_classes})")
    return labels


def subcenter_cosines(embeddings, W) -> Tensor:
    """Per-class cosine, the max over each class's subcenters: (B, K)."""
    e, W = T.as_tensor(embeddings), T.as_tensor(W)
    _check_normalized(e.data, "embeddings")
    _check_normalized(W.data, "subcenter weights")
    k, s, d = W.shape
    cos = T.matmul(e, T.transpose(T.reshape(W, (k * s, d))))
    return T.tmax(T.reshape(cos, (e.shape[0], k, s)), axis=2)


def margin_logits(cos: Tensor, labels: np.ndarray, margins, scale: float) -> Tensor:
    """``scale * cos`` with the target entry replaced by ``scale * cos(theta + m)``."""
    rows = np.arange(len(labels))
    margins = np.broadcast_to(np.asarray(margins, dtype=np.float64), (len(labels),))
    cos_y = cos[rows, labels]
    # cos(theta + m) expanded; the sine floor keeps the gradient finite at cos = +-1
    sin_y = T.sqrt(T.clip(1.0 - cos_y * cos_y, 1e-14, 1.0))
    target = cos_y * np.cos(margins) - sin_y * np.sin(margins)
    onehot = np.zeros(cos.shape)
    onehot[rows, labels] = 1.0
    delta = T.reshape(target - cos[rows, labels], (len(labels), 1))
    return (cos + delta * onehot) * scale


def subcenter_aam_loss(embeddings, labels, W, margin: float = 0.2, scale: float = 30.0) -> Tensor:
    """Subcenter additive angular margin softmax, mean over the batch.

    ``embeddings`` (B, D) and each row of ``W`` (K, S, D) must be unit length.
    """
    if not 0.0 <= margin < math.pi / 2:
        raise TrainingError(f"margin must lie in [0, pi/2), got {margin}")
    cos = subcenter_cosines(embeddings, W)
    labels = _check_labels(labels, cos.shape[1])
    return T.cross_entropy(margin_logits(cos, labels, margin, scale), labels)


def margin_mixup_loss(embeddings, label_a, label_b, lam, W, margin: float = 0.2,
                      scale: float = 30.0) -> Tensor:
    """AAM loss on mixtures with the margin split between both targets by ``lam``.

    ``lam`` may be a scalar or one ratio per row.  The loss is
    ``lam * CE(a, margin lam*m) + (1 - lam) * CE(b, margin (1-lam)*m)``.
    """
    cos = subcenter_cosines(embeddings, W)
    a = _check_labels(label_a, cos.shape[1])
    b = _check_labels(label_b, cos.shape[1])
    if a.shape != b.shape:
        raise TrainingError("label_a and label_b differ in length")
    if (a == b).any():
        raise TrainingError("degenerate mixup pair: both sources share a label")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), a.shape)
    if (lam < 0).any() or (lam > 1).any():
        raise TrainingError("mixing ratio outside [0, 1]")
    rows = np.arange(len(a))
    nll_a = -T.log_softmax(margin_logits(cos, a, lam * margin, scale), axis=-1)[rows, a]
    nll_b = -T.log_softmax(margin_logits(cos, b, (1.0 - lam) * margin, scale), axis=-1)[rows, b]
    return T.mean(nll_a * lam + nll_b * (1.0 - lam))


# -- schedule and optimizer ----------------------------------------------------------

def clr_triangular2(step: int, lr_min: float = 1e-8, lr_max: float = 1e-3,
                    cycle_steps: int = 120_000) -> float:
    """Triangular cyclical learning rate whose amplitude halves every cycle."""
    if step < 0:
        raise ValueError("step must be non-negative")
    half = cycle_steps / 2.0
    cycle = step // cycle_steps
    x = abs(step / half - 2 * cycle - 1)
    return lr_min + (lr_max - lr_min) * max(0.0, 1.0 - x) / 2.0 ** cycle


def vlt_crop_length(rng: np.random.Generator, alpha: float, max_s: float = 5.0,
                    min_s: float = 1.0) -> float:
    """With probability ``alpha`` a uniform length in [min_s, max_s], else ``max_s``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if rng.random() < alpha:
        return float(rng.uniform(min_s, max_s))
    return float(max_s)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list, grads: list, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 2e-4) -> None:
    """One Adam update with bias correction and decoupled weight decay, in place.

    ``params`` holds Tensors; a ``None`` gradient counts as zero.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- data ---------------------------------------------------------------------------

class TrainingData:
    """Utterances grouped by speaker; speed-perturbed copies are separate classes."""

    def __init__(self, by_speaker: dict, speed_aug: bool = True):
        self.speakers = sorted(by_speaker)
        if len(self.speakers) < 2:
            raise TrainingError("training needs at least 2 speakers")
        self.utterances = [list(by_speaker[s]) for s in self.speakers]
        if any(not u for u in self.utterances):
            raise TrainingError("every speaker needs at least one utterance")
        self.factors = (1.0,) + (SPEED_FACTORS if speed_aug else ())

    @classmethod
    def from_corpus(cls, corpus, speakers=None, speed_aug: bool = True) -> "TrainingData":
        groups = corpus.by_speaker(corpus.train_speakers if speakers is None else speakers)
        return cls({s: [u.waveform for u in us] for s, us in groups.items()}, speed_aug)

    @property
    def num_classes(self) -> int:
        return len(self.speakers) * len(self.factors)

    def class_ids(self) -> list:
        return [s if f == 1.0 else f"{s}_sp{f:g}" for f in self.factors for s in self.speakers]

    def class_of(self, speaker: int, variant: int) -> int:
        return variant * len(self.speakers) + speaker

    def draw(self, rng, speed_prob: float, exclude: int | None = None) -> tuple:
        """Random (speaker index, variant index, waveform)."""
        while True:
            s = int(rng.integers(len(self.speakers)))
            if s != exclude:
                break
        utts = self.utterances[s]
        w = utts[int(rng.integers(len(utts)))]
        variant = 0
        if len(self.factors) > 1 and rng.random() < speed_prob:
            variant = 1 + int(rng.integers(len(self.factors) - 1))
        return s, variant, w


def _segment(w: Waveform, factor: float, seconds: float, rng) -> Waveform:
    """Random crop of ``seconds`` from ``w`` played at ``factor`` speed."""
    n = int(round(seconds * w.sample_rate))
    if factor == 1.0:
        return random_crop(w, seconds, rng)
    src = int(math.ceil(n * factor)) + 2
    piece = random_crop(w, src / w.sample_rate, rng)
    out = speed_perturb(piece, factor)
    return out.replace(samples=wrap_to_length(out.samples, n))


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    labels_b: np.ndarray | None = None
    lam: np.ndarray | None = None
    crop_s: float = 0.0

    @property
    def is_mixup(self) -> bool:
        return self.labels_b is not None


class BatchSampler:
    """Builds feature batches; counts SpecAugment invocations."""

    def __init__(self, data: TrainingData, config: TrainConfig, rng,
                 augment_bank: AugmentBank | None = None):
        self.data = data
        self.config = config
        self.rng = rng
        self.bank = augment_bank if config.augment else None
        self.spec_augment_calls = 0
        self.mixup_batches = 0

    def crop_length(self) -> float:
        cfg = self.config
        if cfg.stage == "lm_ft":
            return vlt_crop_length(self.rng, cfg.vlt_alpha, cfg.vlt_max_s, cfg.vlt_min_s)
        return cfg.crop_s

    def mix_ratio(self) -> float:
        cfg = self.config
        if cfg.mixup_lambda == "beta":
            u = float(self.rng.beta(cfg.mixup_beta, cfg.mixup_beta))
            return max(u, 1.0 - u)
        return float(self.rng.uniform(*cfg.mixup_lambda_range))

    def _example(self, seconds: float, exclude=None):
        s, variant, w = self.data.draw(self.rng, self.config.sample_speed_prob, exclude)
        seg = _segment(w, self.data.factors[variant], seconds, self.rng)
        if self.bank:
            seg = self.bank.apply(seg, self.rng)
        return s, self.data.class_of(s, variant), seg

    def next_batch(self) -> Batch:
        cfg, rng = self.config, self.rng
        seconds = self.crop_length()
        mixup = rng.random() < cfg.mixup_prob
        self.mixup_batches += int(mixup)
        feats, labels, labels_b, lams = [], [], [], []
        for _ in range(cfg.batch_size):
            s, cls, seg = self._example(seconds)
            if mixup:
                _, cls_b, seg_b = self._example(seconds, exclude=s)
                lam = self.mix_ratio()
                seg = mix_waveforms(seg, seg_b, lam)
                labels_b.append(cls_b)
                lams.append(lam)
            fmap = stft_features(seg, cfg.features)
            if cfg.spec_augment and cfg.stage == "initial":
                fmap = spec_augment(fmap, rng)
                self.spec_augment_calls += 1
            feats.append(fmap.bins)
            labels.append(cls)
        return Batch(np.stack(feats), np.array(labels, dtype=np.intp),
                     np.array(labels_b, dtype=np.intp) if mixup else None,
                     np.array(lams) if mixup else None, seconds)


# -- loop ---------------------------------------------------------------------------

def init_classifier(num_classes: int, subcenters: int, dim: int, seed: int = 0) -> Tensor:
    rng = np.random.default_rng([seed, 7])
    return T.parameter(rng.standard_normal((num_classes, subcenters, dim)) / np.sqrt(dim))


def batch_loss(model, W: Tensor, batch: Batch, config: TrainConfig) -> Tensor:
    e = l2_normalize(model(batch.features), axis=-1)
    Wn = l2_normalize(W, axis=-1)
    if batch.is_mixup:
        return margin_mixup_loss(e, batch.labels, batch.labels_b, batch.lam, Wn,
                                 config.margin, config.scale)
    return subcenter_aam_loss(e, batch.labels, Wn, config.margin, config.scale)


@dataclass
class TrainResult:
    model: object
    classifier: Tensor
    metrics: list
    evals: list
    spec_augment_calls: int
    mixup_batches: int
    class_ids: list

    def write_metrics(self, path) -> None:
        from .fileio import write_rows_csv
        write_rows_csv(path, ["step", "lr", "loss", "mixup_flag"],
                       [(m["step"], m["lr"], m["loss"], m["mixup_flag"]) for m in self.metrics])

    def write_evals(self, path) -> None:
        from .fileio import write_rows_csv
        write_rows_csv(path, ["step", "eer"], [(e["step"], e["eer"]) for e in self.evals])

    def save(self, path, config: TrainConfig) -> None:
        from .model import save_checkpoint
        save_checkpoint(path, self.model,
                        extra={"train_config": config.to_dict(), "class_ids": self.class_ids},
                        tensors={"classifier.W": self.classifier})


def train_loop(data: TrainingData, model, config: TrainConfig, classifier: Tensor | None = None,
               augment_bank: AugmentBank | None = None, eval_fn=None, steps: int | None = None,
               log=None) -> TrainResult:
    """Run one learning-rate cycle (or ``steps`` steps) and return the trained state.

    ``eval_fn(model, step) -> eer`` is called every ``config.eval_every`` steps
    and after the last step.  ``classifier`` continues a previous stage.
    """
    from .features import FEATURE_BINS
    if FEATURE_BINS[config.features] != model.config.input_bins:
        raise TrainingError(f"{config.features} features do not fit a model with "
                            f"{model.config.input_bins} input bins")
    if classifier is None:
        classifier = init_classifier(data.num_classes, config.subcenters,
                                     model.config.embedding_dim, config.seed)
    if classifier.shape != (data.num_classes, config.subcenters, model.config.embedding_dim):
        raise T.ShapeError(f"classifier {classifier.shape} does not fit {data.num_classes} "
                           f"classes x {config.subcenters} subcenters")
    rng = np.random.default_rng([config.seed, STAGES.index(config.stage)])
    sampler = BatchSampler(data, config, rng, augment_bank)
    params = model.parameters() + [classifier]
    state = AdamState()
    metrics, evals = [], []
    total = config.cycle_steps if steps is None else steps
    model.train()
    for step in range(total):
        lr = clr_triangular2(step, config.lr_min, config.lr_max, config.cycle_steps)
        batch = sampler.next_batch()
        for p in params:
            p.grad = None
        loss = batch_loss(model, classifier, batch, config)
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr, weight_decay=config.weight_decay)
        metrics.append({"step": step, "lr": lr, "loss": loss.item(),
                        "mixup_flag": int(batch.is_mixup)})
        if log is not None:
            log(metrics[-1])
        last = step == total - 1
        if eval_fn is not None and ((config.eval_every and (step + 1) % config.eval_every == 0)
                                    or last):
            evals.append({"step": step + 1, "eer": float(eval_fn(model, step + 1))})
            model.train()
    model.eval()
    return TrainResult(model, classifier, metrics, evals, sampler.spec_augment_calls,
                       sampler.mixup_batches, data.class_ids())
