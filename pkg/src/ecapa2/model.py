"""The ECAPA2 speaker embedding network and its checkpoint format.

Topology: a cascade of local feature extractor (LFE) blocks operating on the
2-D frequency x time map, a global feature extractor (GFE) of 1-D
convolutions over the frequency-flattened features, channel-dependent
attentive statistics (CAS) pooling, and a linear embedding layer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv1d, Conv2d, Linear, Module
from .tensor import Tensor

CHECKPOINT_VERSION = 1
GFE_VARIANTS = ("default", "none", "small", "big")


@dataclass
class Ecapa2Config:
    lfe_stages: list = field(default_factory=lambda: [(2, 32, 1), (2, 48, 2), (2, 64, 2)])
    gfe_channels: int = 256
    res2net_scale: int = 4
    res2net_kernel: int = 3
    cas_attention_dim: int = 64
    embedding_dim: int = 192
    input_bins: int = 256
    striding_enabled: bool = True
    fwse_hidden: int = 32
    gfe_variant: str = "default"

    def __post_init__(self):
        self.lfe_stages = [tuple(int(v) for v in s) for s in self.lfe_stages]
        if not self.lfe_stages:
            raise ValueError("at least one LFE stage is required")
        for blocks, channels, stride in self.lfe_stages:
            if blocks < 1 or channels < 1:
                raise ValueError(f"invalid LFE stage {(blocks, channels, stride)}")
            if stride not in (1, 2):
                raise ValueError(f"freq_stride must be 1 or 2, got {stride}")
        if self.gfe_variant not in GFE_VARIANTS:
            raise ValueError(f"gfe_variant must be one of {GFE_VARIANTS}")
        if self.gfe_channels % self.res2net_scale:
            raise ValueError(f"gfe_channels {self.gfe_channels} not divisible by "
                             f"res2net_scale {self.res2net_scale}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lfe_stages"] = [list(s) for s in self.lfe_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Ecapa2Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def geometry(config: Ecapa2Config, frames: int) -> dict:
    """Closed-form tensor shapes (per utterance) through the network."""
    f = config.input_bins
    shapes = {"input": (1, f, frames)}
    cin = 1
    for si, (blocks, channels, stride) in enumerate(config.lfe_stages):
        for b in range(blocks):
            s = stride if (b == 0 and config.striding_enabled) else 1
            f = (f - 1) // s + 1
            cin = channels
            shapes[f"lfe.{si}.{b}"] = (channels, f, frames)
    flat = cin * f
    shapes["flatten"] = (flat, frames)
    d = flat if config.gfe_variant == "none" else config.gfe_channels
    shapes["gfe"] = (d, frames)
    shapes["pooled"] = (2 * d,)
    shapes["embedding"] = (config.embedding_dim,)
    return shapes


class FwSE(Module):
    """Frequency-wise squeeze-excitation with a learnable frequency encoding."""

    def __init__(self, freq_bins: int, hidden: int, rng):
        self.pos_encoding = T.parameter(np.zeros(freq_bins))
        self.w1 = T.parameter(rng.standard_normal((hidden, freq_bins)) * np.sqrt(2.0 / freq_bins))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(rng.standard_normal((freq_bins, hidden)) * np.sqrt(1.0 / hidden))
        self.b2 = T.parameter(np.zeros(freq_bins))

    def gates(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.pos_encoding.shape[0]:
            raise T.ShapeError(f"fwSE built for {self.pos_encoding.shape[0]} bins, "
                               f"input has {x.shape[2]}")
        squeeze = T.mean(x, axis=(1, 3)) + self.pos_encoding
        hidden = T.relu(T.linear(squeeze, self.w1, self.b1))
        return T.sigmoid(T.linear(hidden, self.w2, self.b2))

    def forward(self, x: Tensor) -> Tensor:
        w = self.gates(x)
        return x * T.reshape(w, (w.shape[0], 1, w.shape[1], 1))


class LFEBlock(Module):
    """Three 3x3 convolutions (BN + ReLU each), fwSE, and a residual path."""

    def __init__(self, cin, cout, freq_stride, freq_bins_in, fwse_hidden, rng):
        s = (freq_stride, 1)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, stride=s, rng=rng)
        self.bn2 = BatchNorm(cout)
        self.conv3 = Conv2d(cout, cout, 3, rng=rng)
        self.bn3 = BatchNorm(cout)
        self.freq_bins_out = (freq_bins_in - 1) // freq_stride + 1
        self.fwse = FwSE(self.freq_bins_out, fwse_hidden, rng)
        if cin != cout or freq_stride != 1:
            self.shortcut = Conv2d(cin, cout, 1, stride=s, padding=(0, 0), rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        h = T.relu(self.bn3(self.conv3(h)))
        h = self.fwse(h)
        skip = self.shortcut(x) if hasattr(self, "shortcut") else x
        return h + skip


class Res2NetConv1d(Module):
    """Hierarchical multi-scale 1-D convolution.

    Channels are split into ``scale`` groups; group i is convolved after adding
    the previous group's output, and the results are concatenated.
    """

    def __init__(self, channels: int, scale: int, kernel: int = 3, dilation: int = 1, rng=None):
        if channels % scale:
            raise ValueError(f"channels {channels} not divisible by scale {scale}")
        self.scale = scale
        width = channels // scale
        self.convs = [Conv1d(width, width, kernel, dilation=dilation, rng=rng)
                      for _ in range(scale)]

    def forward(self, x: Tensor) -> Tensor:
        width = x.shape[1] // self.scale
        outs = []
        prev = None
        for i, conv in enumerate(self.convs):
            part = x[:, i * width:(i + 1) * width, :]
            prev = conv(part if prev is None else part + prev)
            outs.append(prev)
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)


class GFE(Module):
    """1-D convolutional global feature extractor over frequency-stacked channels."""

    def __init__(self, cin: int, config: Ecapa2Config, rng):
        d = config.gfe_channels
        self.variant = config.gfe_variant
        self.layers = []
        self.norms = []
        if self.variant == "none":
            return
        self.layers.append(Conv1d(cin, d, 1, rng=rng))
        self.norms.append(BatchNorm(d))
        if self.variant == "small":
            return
        blocks = 2 if self.variant == "big" else 1
        for _ in range(blocks):
            self.layers.append(Res2NetConv1d(d, config.res2net_scale, config.res2net_kernel,
                                             rng=rng))
            self.norms.append(BatchNorm(d))
        self.layers.append(Conv1d(d, d, 1, rng=rng))
        self.norms.append(BatchNorm(d))

    def forward(self, x: Tensor) -> Tensor:
        for layer, norm in zip(self.layers, self.norms):
            x = T.relu(norm(layer(x)))
        return x


class CASPooling(Module):
    """Channel-dependent attentive statistics pooling."""

    eps = 1e-9

    def __init__(self, channels: int, attention_dim: int, rng):
        self.attn1 = Conv1d(3 * channels, attention_dim, 1, bias=True, rng=rng)
        self.attn2 = Conv1d(attention_dim, channels, 1, bias=True, rng=rng)

    def attention(self, h: Tensor) -> Tensor:
        if h.shape[-1] < 2:
            raise T.ShapeError("CAS pooling needs at least 2 frames")
        frames = np.ones((1, 1, h.shape[-1]))
        mu = T.mean(h, axis=-1, keepdims=True)
        sd = T.sqrt(T.relu(T.var(h, axis=-1, keepdims=True)) + self.eps)
        ctx = T.concat([h, mu * frames, sd * frames], axis=1)
        return T.softmax(self.attn2(T.tanh(self.attn1(ctx))), axis=-1)

    def forward(self, h: Tensor) -> Tensor:
        alpha = self.attention(h)
        mu = T.tsum(alpha * h, axis=-1)
        second = T.tsum(alpha * h * h, axis=-1)
        sigma = T.sqrt(T.relu(second - mu * mu) + self.eps)
        return T.concat([mu, sigma], axis=1)


class Ecapa2Model(Module):
    """LFE stages -> GFE -> CAS pooling -> linear embedding."""

    def __init__(self, config: Ecapa2Config | None = None, seed: int = 0):
        self.config = config or Ecapa2Config()
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.blocks = []
        cin, f = 1, cfg.input_bins
        for blocks, channels, stride in cfg.lfe_stages:
            for b in range(blocks):
                s = stride if (b == 0 and cfg.striding_enabled) else 1
                block = LFEBlock(cin, channels, s, f, cfg.fwse_hidden, rng)
                self.blocks.append(block)
                cin, f = channels, block.freq_bins_out
        self.flat_channels = cin * f
        self.gfe = GFE(self.flat_channels, cfg, rng)
        d = self.flat_channels if cfg.gfe_variant == "none" else cfg.gfe_channels
        self.pool = CASPooling(d, cfg.cas_attention_dim, rng)
        self.head = Linear(2 * d, cfg.embedding_dim, rng=rng)

    def _as_input(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[2] != self.config.input_bins:
            raise T.ShapeError(f"model expects {self.config.input_bins} bins, got {x.shape[2]}")
        return x

    def local_features(self, x) -> Tensor:
        h = self._as_input(x)
        for block in self.blocks:
            h = block(h)
        return h

    def prepool(self, x) -> Tensor:
        """Frame-level features right before pooling, (N, D, T)."""
        h = self.local_features(x)
        n, c, f, t = h.shape
        return self.gfe(T.reshape(h, (n, c * f, t)))

    def embed_prepooled(self, h: Tensor) -> Tensor:
        return self.head(self.pool(h))

    def forward(self, x) -> Tensor:
        return self.embed_prepooled(self.prepool(x))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: Module, extra: dict | None = None,
                    tensors: dict | None = None) -> None:
    """Write a JSON header followed by little-endian float32 arrays.

    Layout: 8-byte little-endian header length, UTF-8 JSON header, raw data.
    ``tensors`` adds named arrays beyond the model state (e.g. classifier weights).
    """
    state = dict(model.state_dict())
    for name, arr in (tensors or {}).items():
        state[name] = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": model.config.to_dict() if hasattr(model.config, "to_dict")
        else dataclasses.asdict(model.config),
        "model_class": type(model).__name__,
        "tensors": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, arrays)`` with arrays widened back to float64."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 8 + hlen
    arrays = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(
            entry["shape"])
    return header, arrays


def load_model(path) -> tuple[Ecapa2Model, dict, dict]:
    """Rebuild an Ecapa2Model from a checkpoint; returns (model, header, extra arrays)."""
    header, arrays = read_checkpoint(path)
    if header.get("model_class", "Ecapa2Model") != "Ecapa2Model":
        raise ValueError(f"{path} holds a {header['model_class']}, not an Ecapa2Model")
    model = Ecapa2Model(Ecapa2Config.from_dict(header["config"]))
    own = set(model.state_dict())
    model.load_state_dict({k: v for k, v in arrays.items() if k in own})
    model.eval()
    return model, header, {k: v for k, v in arrays.items() if k not in own}


# -- embedding extraction ---------------------------------------------------------

MIN_EMBED_SECONDS = 0.5


@dataclass
class Embedding:
    vector: np.ndarray
    duration_s: float = 0.0
    utterance_id: str = ""

    def normalized(self) -> np.ndarray:
        return self.vector / np.linalg.norm(self.vector)


def embed(x, model: Ecapa2Model, kind: str | None = None, utterance_id: str = "") -> Embedding:
    """Embedding of a Waveform or FeatureMap with the model in eval mode."""
    from .features import (FEATURE_BINS, SAMPLE_RATE, FeatureError, FeatureMap, Waveform,
                           frame_count, stft_features)
    if isinstance(x, Waveform):
        if x.duration < MIN_EMBED_SECONDS:
            raise FeatureError(f"input of {x.duration:.3f}s is shorter than {MIN_EMBED_SECONDS}s")
        if kind is None:
            kind = next(k for k, v in FEATURE_BINS.items() if v == model.config.input_bins)
        fmap = stft_features(x, kind)
        utterance_id = utterance_id or x.source_path
    elif isinstance(x, FeatureMap):
        fmap = x
    else:
        raise TypeError(f"cannot embed {type(x).__name__}")
    min_frames = frame_count(int(round(MIN_EMBED_SECONDS * SAMPLE_RATE)))
    if fmap.num_frames < min_frames:
        raise FeatureError(f"{fmap.num_frames} frames is shorter than {MIN_EMBED_SECONDS}s "
                           f"({min_frames} frames)")
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            vec = model(fmap.bins[None]).data[0].copy()
    finally:
        model.train(was_training)
    return Embedding(vec, fmap.duration, utterance_id)


def embed_many(model, audio: dict) -> dict:
    """Embedding vectors for a ``{key: Waveform}`` mapping, keys in sorted order."""
    return {k: embed(audio[k], model, utterance_id=k).vector for k in sorted(audio)}
