"""Effective receptive fields, neuron conductance and input-masking ablations.

The analyses run on any model exposing ``prepool(x)`` (frame-level features
before pooling) and ``forward(x)``; two small analysis stand-ins are provided,
a 1-D stack whose first kernel spans the whole frequency axis and a 2-D stack
of 3x3 convolutions.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FEATURE_BINS, FeatureMap, mask_freq, mask_time, stft_features
from .model import embed
from .nn import BatchNorm, Conv1d, Conv2d, Linear, Module
from .scoring import ScoringError, TrialSet, compute_eer, cosine_score
from .tensor import GeometryError, Tensor

ACTIVATIONS = ("relu", "linear")
INITS = ("he", "ones")


# -- analysis stand-ins ----------------------------------------------------------

@dataclass
class StandinConfig:
    input_bins: int = 80
    channels_2d: int = 16
    layers_2d: int = 4
    freq_strides_2d: list = field(default_factory=lambda: [1, 2, 2, 2])
    layers_1d: int = 4
    channels_1d: int = 0
    kernel: int = 3
    embedding_dim: int = 64
    activation: str = "relu"
    batchnorm: bool = True
    init: str = "he"
    padding_mode: str = "zeros"
    head_1d: bool = False
    head_channels: int = 0

    def __post_init__(self):
        self.freq_strides_2d = [int(s) for s in self.freq_strides_2d]
        if self.freq_strides_2d and len(self.freq_strides_2d) != self.layers_2d:
            raise ValueError("freq_strides_2d needs one entry per 2-D layer")
        if any(s not in (1, 2) for s in self.freq_strides_2d):
            raise ValueError("freq strides must be 1 or 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if min(self.layers_1d, self.layers_2d) < 1:
            raise ValueError("stacks need at least one layer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StandinConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stand-in config keys {sorted(unknown)}")
        return cls(**d)


def _activate(x: Tensor, kind: str) -> Tensor:
    return T.relu(x) if kind == "relu" else x


def _stats_pool(h: Tensor) -> Tensor:
    return T.concat([T.mean(h, axis=-1), T.std(h, axis=-1, eps=1e-9)], axis=1)


def _set_ones(module: Module) -> None:
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            p.data = np.ones_like(p.data)
        elif leaf in ("bias", "beta"):
            p.data = np.zeros_like(p.data)


class _Stack(Module):
    config: StandinConfig

    def _as_input(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.config.input_bins:
            raise T.ShapeError(f"expected (N, {self.config.input_bins}, T) input, got {x.shape}")
        return x

    def forward(self, x) -> Tensor:
        return self.head(_stats_pool(self.prepool(x)))

    def fingerprint(self) -> str:
        return state_hash(self)


class Tdnn1dStack(_Stack):
    """1-D convolutions over time; the first kernel sees every frequency bin."""

    def __init__(self, config: StandinConfig, channels: int, seed: int = 0):
        self.config = config
        self.channels = channels
        rng = np.random.default_rng([seed, 1])
        cin = config.input_bins
        self.convs, self.norms = [], []
        for _ in range(config.layers_1d):
            self.convs.append(Conv1d(cin, channels, config.kernel, rng=rng))
            if config.batchnorm:
                self.norms.append(BatchNorm(channels))
            cin = channels
        self.head = Linear(2 * channels, config.embedding_dim, rng=rng)
        if config.init == "ones":
            _set_ones(self)

    def prepool(self, x) -> Tensor:
        h = self._as_input(x)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.norms:
                h = self.norms[i](h)
            h = _activate(h, self.config.activation)
        return h

    def receptive_field(self, target: tuple, input_shape: tuple) -> np.ndarray:
        """Boolean (F, T) mask of input cells that can influence ``(channel, t)``."""
        _, t = target
        f_in, t_in = input_shape
        r = self.config.layers_1d * (self.config.kernel // 2)
        mask = np.zeros(input_shape, dtype=bool)
        mask[:, max(0, t - r):min(t_in, t + r + 1)] = True
        return mask


class Resnet2dStack(_Stack):
    """3x3 convolutions over the (frequency, time) map, optionally ending in a 1-D head.

    Frames are pooled from the channel x frequency flattening of the last map.
    """

    def __init__(self, config: StandinConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 2])
        strides = config.freq_strides_2d or [1] * config.layers_2d
        c, f = config.channels_2d, config.input_bins
        cin = 1
        self.convs, self.norms = [], []
        for s in strides:
            self.convs.append(Conv2d(cin, c, config.kernel, stride=(s, 1), rng=rng,
                                     padding_mode=config.padding_mode))
            if config.batchnorm:
                self.norms.append(BatchNorm(c))
            cin = c
            f = (f - 1) // s + 1
        self.out_bins = f
        d = c * f
        if config.head_1d:
            d_head = config.head_channels or c
            self.head_conv = Conv1d(d, d_head, 1, rng=rng)
            d = d_head
        self.head = Linear(2 * d, config.embedding_dim, rng=rng)
        if config.init == "ones":
            _set_ones(self)

    def feature_map(self, x) -> Tensor:
        h = self._as_input(x)
        h = T.reshape(h, (h.shape[0], 1) + h.shape[1:])
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.norms:
                h = self.norms[i](h)
            h = _activate(h, self.config.activation)
        return h

    def prepool(self, x) -> Tensor:
        """(N, C, F, T) maps, or (N, C', T) after the optional 1-D head."""
        h = self.feature_map(x)
        if not self.config.head_1d:
            return h
        n, c, f, t = h.shape
        return self.head_conv(T.reshape(h, (n, c * f, t)))

    def forward(self, x) -> Tensor:
        h = self.prepool(x)
        if h.ndim == 4:
            n, c, f, t = h.shape
            h = T.reshape(h, (n, c * f, t))
        return self.head(_stats_pool(h))

    def receptive_field(self, target: tuple, input_shape: tuple) -> np.ndarray:
        """Boolean (F, T) mask of input cells that can influence the target neuron."""
        f_in, t_in = input_shape
        r = self.config.kernel // 2
        strides = self.config.freq_strides_2d or [1] * self.config.layers_2d
        t_lo = t_hi = target[-1]
        if self.config.head_1d:
            f_lo, f_hi = 0, f_in - 1
        else:
            f_lo = f_hi = target[1]
            for s in reversed(strides):
                f_lo, f_hi = f_lo * s - r, f_hi * s + r
        t_lo, t_hi = t_lo - r * len(strides), t_hi + r * len(strides)
        mask = np.zeros(input_shape, dtype=bool)
        if self.config.padding_mode == "wrap":
            mask[:] = True
            return mask
        mask[max(0, f_lo):min(f_in, f_hi + 1), max(0, t_lo):min(t_in, t_hi + 1)] = True
        return mask


def build_analysis_standins(config: StandinConfig | None = None, seed: int = 0,
                            tolerance: float = 0.1) -> tuple:
    """A 1-D and a 2-D stand-in with parameter counts within ``tolerance``.

    The 1-D width is ``config.channels_1d`` when set, otherwise the width that
    best matches the 2-D stack's parameter count.
    """
    config = config or StandinConfig()
    resnet = Resnet2dStack(config, seed)
    target = resnet.num_parameters()
    if config.channels_1d:
        width = config.channels_1d
    else:
        def count(c):
            k, f, layers = config.kernel, config.input_bins, config.layers_1d
            bn = 2 * c if config.batchnorm else 0
            return f * c * k + (layers - 1) * c * c * k + layers * bn \
                + 2 * c * config.embedding_dim + config.embedding_dim
        width = min(range(1, 1025), key=lambda c: abs(count(c) - target))
    tdnn = Tdnn1dStack(config, width, seed)
    ratio = tdnn.num_parameters() / target
    if abs(ratio - 1.0) > tolerance:
        raise ValueError(f"stand-in sizes differ by {abs(ratio - 1):.1%} "
                         f"({tdnn.num_parameters()} vs {target} parameters)")
    return tdnn, resnet


def load_standin(header: dict, arrays: dict) -> Module:
    """Rebuild a stand-in from a checkpoint header and arrays."""
    config = StandinConfig.from_dict(header["config"])
    kind = header.get("model_class")
    if kind == "Tdnn1dStack":
        model = Tdnn1dStack(config, int(header["extra"]["channels"]))
    elif kind == "Resnet2dStack":
        model = Resnet2dStack(config)
    else:
        raise ValueError(f"not a stand-in checkpoint: {kind}")
    own = set(model.state_dict())
    model.load_state_dict({k: v for k, v in arrays.items() if k in own})
    return model.eval()


def state_hash(model: Module) -> str:
    digest = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


# -- attribution maps -------------------------------------------------------------

@dataclass
class AttributionMap:
    values: np.ndarray
    kind: str
    target: tuple
    model_hash: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("erf_gradient", "conductance"):
            raise ValueError(f"unknown attribution kind {self.kind!r}")
        if self.values.ndim != 2:
            raise ValueError("attribution maps are (F, T) matrices")
        if not np.isfinite(self.values).all():
            raise T.NonFiniteError("attribution map contains non-finite values")

    def write(self, csv_path, pgm_path=None) -> None:
        from .fileio import write_matrix_csv, write_pgm
        meta = {"kind": self.kind, "target": ":".join(str(v) for v in self.target),
                "model_hash": self.model_hash}
        write_matrix_csv(csv_path, self.values, meta)
        if pgm_path is not None:
            write_pgm(pgm_path, self.values)


def _layer_output(model, layer: str, x: Tensor) -> Tensor:
    try:
        fn = getattr(model, layer)
    except AttributeError:
        raise GeometryError(f"{type(model).__name__} has no layer {layer!r}") from None
    return fn(x)


def _resolve_target(shape: tuple, target) -> tuple:
    """Validate (channel, [f,] t) against an output shaped (N, C, [F,] T)."""
    spatial = shape[2:]
    if target is None:
        target = (0,) + tuple(s // 2 for s in spatial)
    target = tuple(int(v) for v in target)
    if len(target) != len(shape) - 1:
        raise GeometryError(f"target {target} does not index a {shape[1:]} layer")
    for v, size in zip(target, shape[1:]):
        if not 0 <= v < size:
            raise GeometryError(f"target {target} outside layer bounds {shape[1:]}")
    return target


def compute_erf(factory, input_shape: tuple, seeds: int = 32, target=None,
                layer: str = "prepool", input_kind: str = "noise") -> AttributionMap:
    """Mean absolute input gradient of one pre-pooling neuron over random inits.

    ``factory(seed)`` returns a freshly initialized model.  ``target`` is
    (channel, [f,] t) in the layer output; the default is channel 0 at the
    spatial center.  The input is standard normal noise or all zeros.
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    if input_kind not in ("noise", "zeros"):
        raise ValueError("input_kind must be 'noise' or 'zeros'")
    acc = np.zeros(input_shape)
    resolved, first_hash = None, ""
    for s in range(seeds):
        model = factory(s).eval()
        if s == 0:
            first_hash = model.fingerprint() if hasattr(model, "fingerprint") else state_hash(model)
        data = (np.random.default_rng([s, 1]).standard_normal(input_shape)
                if input_kind == "noise" else np.zeros(input_shape))
        x = T.Tensor(data[None], requires_grad=True)
        out = _layer_output(model, layer, x)
        resolved = _resolve_target(out.shape, target)
        seed = np.zeros(out.shape)
        seed[(0,) + resolved] = 1.0
        out.backward(seed)
        acc += np.abs(x.grad[0])
    acc /= seeds
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return AttributionMap(acc, "erf_gradient", (layer,) + resolved, first_hash)


def erf_frequency_profile(m: AttributionMap) -> tuple[np.ndarray, float]:
    """Column at the temporally centered frame, normalized to max 1, and min/max."""
    values = m.values if isinstance(m, AttributionMap) else np.asarray(m, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty map")
    col = values[:, values.shape[1] // 2]
    peak = col.max()
    if peak <= 0:
        return np.zeros_like(col), 0.0
    col = col / peak
    return col, float(col.min())


def box_erf_oracle(size: int, layers: int, center: int, kernel: int = 3,
                   padding: str = "zeros") -> np.ndarray:
    """Gradient profile of ``layers`` all-ones convolutions along one axis.

    Built from explicit powers of the banded adjoint matrix, independent of the
    tensor engine.  Not normalized.
    """
    r = kernel // 2
    A = np.zeros((size, size))
    for i in range(size):
        for d in range(-r, r + 1):
            j = i + d
            if padding == "edge":
                j = min(max(j, 0), size - 1)
            elif not 0 <= j < size:
                continue
            A[i, j] += 1.0
    g = np.zeros(size)
    g[center] = 1.0
    for _ in range(layers):
        g = A.T @ g
    return g


# -- conductance ------------------------------------------------------------------

def _path_integral(model, x: np.ndarray, baseline: np.ndarray, target, steps: int,
                   layer: str, output, chunk: int):
    """Right Riemann sum of the target-neuron path gradients.

    Returns (summed input gradients, resolved target, reference) where the
    reference is the quantity the attributions must sum to.
    """
    delta = x - baseline
    grad_sum = np.zeros_like(x)
    resolved = None
    reference = 0.0
    prev_y = None
    with T.no_grad():
        y0 = _layer_output(model, layer, T.Tensor(baseline[None])).data
    for start in range(1, steps + 1, chunk):
        ks = np.arange(start, min(start + chunk, steps + 1))
        alphas = ks / steps
        batch = baseline[None] + alphas[:, None, None] * delta[None]
        xin = T.Tensor(batch, requires_grad=True)
        h = _layer_output(model, layer, xin)
        resolved = _resolve_target(h.shape, target)
        idx = (slice(None),) + resolved
        weights = np.ones(len(ks))
        if output is not None:
            h_leaf = T.Tensor(h.data, requires_grad=True)
            T.tsum(output(model, h_leaf)).backward()
            weights = h_leaf.grad[idx]
            ys = np.concatenate([[y0[(0,) + resolved] if prev_y is None else prev_y], h.data[idx]])
            reference += float(np.sum(weights * np.diff(ys)))
            prev_y = h.data[idx][-1]
        seed = np.zeros(h.shape)
        seed[idx] = weights
        h.backward(seed)
        grad_sum += xin.grad.sum(axis=0)
    if output is None:
        with T.no_grad():
            y1 = _layer_output(model, layer, T.Tensor(x[None])).data
        reference = float(y1[(0,) + resolved] - y0[(0,) + resolved])
    return grad_sum, resolved, reference


def _as_bins(x) -> np.ndarray:
    return np.asarray(x.bins if isinstance(x, FeatureMap) else x, dtype=np.float64)


def neuron_conductance(model, x, baseline=None, target=None, steps: int = 300,
                       layer: str = "prepool", output=None, chunk: int = 25,
                       return_reference: bool = False):
    """Conductance of one hidden neuron, attributed to every input cell.

    Without ``output`` the neuron itself is the attributed quantity
    (integrated gradients of the neuron), so the map sums to
    ``y(x) - y(baseline)`` as ``steps`` grows.  With ``output(model, h)`` (a
    per-sample scalar of the layer output ``h``) the path gradient of the
    output through the neuron is attributed instead.  The baseline defaults to
    the all-zero map.  With ``return_reference`` the pair ``(map, reference)``
    is returned, where ``reference`` is the value the map should sum to.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xb = _as_bins(x)
    bb = np.zeros_like(xb) if baseline is None else _as_bins(baseline)
    if bb.shape != xb.shape:
        raise T.ShapeError(f"baseline {bb.shape} does not match input {xb.shape}")
    was_training = getattr(model, "training", False)
    model.eval()
    try:
        grads, resolved, reference = _path_integral(model, xb, bb, target, steps, layer, output,
                                                    chunk)
    finally:
        model.train(was_training)
    values = (xb - bb) * grads / steps
    h = model.fingerprint() if hasattr(model, "fingerprint") else state_hash(model)
    amap = AttributionMap(values, "conductance", (layer,) + resolved, h)
    return (amap, reference) if return_reference else amap


# -- masking ablation -----------------------------------------------------------------

@dataclass
class AblationCurve:
    axis: str
    points: list
    model_hash: str = ""

    def __post_init__(self):
        if self.axis not in ("time_frames", "freq_bins"):
            raise ValueError(f"unknown ablation axis {self.axis!r}")
        sizes = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("mask sizes must be strictly increasing")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def eers(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def write(self, path) -> None:
        from .fileio import write_rows_csv
        write_rows_csv(path, ["mask_size", "eer", "stderr"],
                       [(int(s), float(e), float(se)) for s, e, se in self.points])


def _feature_kind(model) -> str:
    bins = model.config.input_bins
    for kind, n in FEATURE_BINS.items():
        if n == bins:
            return kind
    raise ValueError(f"no feature kind with {bins} bins")


def _embed_map(model, fmap: FeatureMap) -> np.ndarray:
    return embed(fmap, model).vector


def _eer(trials, embeddings) -> float:
    scores = np.array([cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials])
    return compute_eer(scores, np.array([t.label for t in trials]))[0]


def ablation_sweep(model, trials: TrialSet, axis: str, sizes, rng=0, repeats: int = 1,
                   both_sides: bool = False) -> AblationCurve:
    """EER as a function of the width of a random contiguous mask.

    For each size and repeat, every test-side utterance (both sides with
    ``both_sides``) gets one window of that many frames or bins replaced by
    the map mean; embeddings are re-extracted and scored by cosine.
    """
    if not trials.trials:
        raise ScoringError("empty trial set")
    if axis not in ("time_frames", "freq_bins"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    sizes = [int(s) for s in sizes]
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(rng)
    kind = _feature_kind(model)
    keys = sorted({k for t in trials.trials for k in (t.enroll, t.test)})
    feats = {k: stft_features(trials.audio[k], kind) for k in keys}
    masked_keys = sorted({t.test for t in trials.trials}
                         | ({t.enroll for t in trials.trials} if both_sides else set()))
    extent = min(f.bins.shape[0] if axis == "freq_bins" else f.num_frames
                 for f in (feats[k] for k in masked_keys))
    if any(s < 0 or s > extent for s in sizes):
        raise GeometryError(f"mask sizes must lie in [0, {extent}]")
    model.eval()
    clean = {k: _embed_map(model, f) for k, f in feats.items()}
    mask = mask_freq if axis == "freq_bins" else mask_time
    points = []
    for size in sizes:
        eers = []
        for _ in range(repeats):
            embs = dict(clean)
            if size:
                for k in masked_keys:
                    f = feats[k]
                    span = f.bins.shape[0] if axis == "freq_bins" else f.num_frames
                    start = int(rng.integers(0, span - size + 1))
                    embs[k] = _embed_map(model, mask(f, start, size))
            eers.append(_eer(trials.trials, embs))
        eers = np.array(eers)
        stderr = float(eers.std(ddof=1) / np.sqrt(len(eers))) if len(eers) > 1 else 0.0
        points.append((size, float(eers.mean()), stderr))
    h = model.fingerprint() if hasattr(model, "fingerprint") else state_hash(model)
    return AblationCurve(axis, points, h)
