"""Encoder and regression head.

The encoder is a deliberately small 3-D CNN; anything exposing
``forward(clips, training, rng)`` and ``parameters()`` can stand in for it.
The head follows ``y = W2 [gelu(BN2(W1 [BN1(E); 1])); 1]`` with dropout in
front of both linear maps.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RunningStats, Tensor


@dataclass
class EncoderConfig:
    frames: int = 36
    height: int = 32
    width: int = 32
    channels: int = 3
    widths: tuple[int, ...] = (8, 16, 32)
    temporal_strides: tuple[int, ...] = (1, 2, 2)
    embed_dim: int = 512

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.temporal_strides = tuple(int(s) for s in self.temporal_strides)
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("encoder widths must be positive")
        if len(self.temporal_strides) != len(self.widths):
            raise ValueError("temporal_strides must match widths")
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValueError("clip shape must be positive")

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: named parameters plus batch-norm buffers."""

    def parameters(self) -> dict[str, Parameter]:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        pass

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.trainable = flag

    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class TinyEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        dtype = ad.get_default_dtype()
        self.convs: list[Parameter] = []
        self.bn_w: list[Parameter] = []
        self.bn_b: list[Parameter] = []
        self.stats: list[RunningStats] = []
        cin = config.channels
        for i, cout in enumerate(config.widths):
            w = uniform_fan_in(rng, (3, 3, 3, cin, cout), 27 * cin)
            self.convs.append(Parameter(f"encoder.block{i}.conv", w, dtype=dtype))
            self.bn_w.append(Parameter(f"encoder.block{i}.bn.weight", np.ones(cout), dtype=dtype))
            self.bn_b.append(Parameter(f"encoder.block{i}.bn.bias", np.zeros(cout), dtype=dtype))
            self.stats.append(RunningStats(cout, dtype=dtype))
            cin = cout
        self.proj_w = Parameter("encoder.proj.weight", uniform_fan_in(rng, (cin, config.embed_dim), cin), dtype=dtype)
        self.proj_b = Parameter("encoder.proj.bias", uniform_fan_in(rng, (config.embed_dim,), cin), dtype=dtype)

    def parameters(self) -> dict[str, Parameter]:
        ps = [*self.convs, *self.bn_w, *self.bn_b, self.proj_w, self.proj_b]
        return {p.name: p for p in ps}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.stats):
            out[f"encoder.block{i}.bn.running_mean"] = st.mean
            out[f"encoder.block{i}.bn.running_var"] = st.var
        return out

    def load_buffers(self, bufs):
        for i, st in enumerate(self.stats):
            st.mean = np.array(bufs[f"encoder.block{i}.bn.running_mean"], dtype=st.mean.dtype)
            st.var = np.array(bufs[f"encoder.block{i}.bn.running_var"], dtype=st.var.dtype)

    def forward(self, clips, training: bool = False, rng=None) -> Tensor:
        x = ad.as_tensor(clips)
        if x.shape[1:] != self.config.clip_shape:
            raise ad.ShapeError("encode", x.shape, (None, *self.config.clip_shape))
        for conv, w, b, st, ts in zip(self.convs, self.bn_w, self.bn_b, self.stats,
                                      self.config.temporal_strides):
            x = ad.conv3d(x, conv, stride=(ts, 2, 2), padding=(1, 1, 1))
            x = ad.batch_norm(x, w, b, st, training=training and not self.frozen)
            x = ad.gelu(x)
        pooled = ad.mean(x, axis=(1, 2, 3))
        return ad.add(ad.matmul(pooled, self.proj_w), self.proj_b)

    __call__ = forward


class RegressionHead(Module):
    """Two-layer head with augmented-bias linears.

    ``W1`` has shape ``(C_E, C_E + 1)`` and ``W2`` ``(1, C_E + 1)``; the last
    column of each is the bias.  ``task="classification"`` appends a sigmoid.
    """

    def __init__(self, embed_dim: int, rng: np.random.Generator, dropout: float = 0.4,
                 task: str = "regression"):
        if task not in ("regression", "classification"):
            raise ValueError(f"unknown task {task!r}")
        if not 0 <= dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        dtype = ad.get_default_dtype()
        c = embed_dim
        self.embed_dim = c
        self.dropout = dropout
        self.task = task
        self.bn1_w = Parameter("head.bn1.weight", np.ones(c), dtype=dtype)
        self.bn1_b = Parameter("head.bn1.bias", np.zeros(c), dtype=dtype)
        self.w1 = Parameter("head.w1", uniform_fan_in(rng, (c, c + 1), c + 1), dtype=dtype)
        self.bn2_w = Parameter("head.bn2.weight", np.ones(c), dtype=dtype)
        self.bn2_b = Parameter("head.bn2.bias", np.zeros(c), dtype=dtype)
        self.w2 = Parameter("head.w2", uniform_fan_in(rng, (1, c + 1), c + 1), dtype=dtype)
        self.stats1 = RunningStats(c, dtype=dtype)
        self.stats2 = RunningStats(c, dtype=dtype)

    def parameters(self) -> dict[str, Parameter]:
        ps = [self.bn1_w, self.bn1_b, self.w1, self.bn2_w, self.bn2_b, self.w2]
        return {p.name: p for p in ps}

    def buffers(self):
        return {"head.bn1.running_mean": self.stats1.mean, "head.bn1.running_var": self.stats1.var,
                "head.bn2.running_mean": self.stats2.mean, "head.bn2.running_var": self.stats2.var}

    def load_buffers(self, bufs):
        for key, st in (("bn1", self.stats1), ("bn2", self.stats2)):
            st.mean = np.array(bufs[f"head.{key}.running_mean"], dtype=st.mean.dtype)
            st.var = np.array(bufs[f"head.{key}.running_var"], dtype=st.var.dtype)

    def logits(self, e, training: bool = False, rng=None) -> Tensor:
        e = ad.as_tensor(e)
        if e.ndim != 2 or e.shape[1] != self.embed_dim:
            raise ad.ShapeError("head", e.shape, (None, self.embed_dim))
        if training and e.shape[0] < 2:
            raise ValueError("head: train mode needs a batch of at least 2")
        x = ad.batch_norm(e, self.bn1_w, self.bn1_b, self.stats1, training=training)
        x = ad.dropout(x, self.dropout, rng, training)
        x = ad.matmul(ad.append_ones(x), ad.transpose(self.w1))
        x = ad.gelu(ad.batch_norm(x, self.bn2_w, self.bn2_b, self.stats2, training=training))
        x = ad.dropout(x, self.dropout, rng, training)
        x = ad.matmul(ad.append_ones(x), ad.transpose(self.w2))
        return ad.reshape(x, (e.shape[0],))

    def forward(self, e, training: bool = False, rng=None) -> Tensor:
        out = self.logits(e, training, rng)
        return ad.sigmoid(out) if self.task == "classification" else out

    __call__ = forward


@dataclass
class TargetScaler:
    """Fixed affine map from head units to label units."""

    offset: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, labels) -> TargetScaler:
        y = np.asarray(labels, dtype=np.float64)
        sd = float(y.std())
        return cls(float(y.mean()), sd if sd > 0 else 1.0)


@dataclass
class CoReEchoModel:
    encoder: TinyEncoder
    head: RegressionHead
    scaler: TargetScaler = field(default_factory=TargetScaler)

    @property
    def task(self) -> str:
        return self.head.task

    def parameters(self) -> dict[str, Parameter]:
        return {**self.encoder.parameters(), **self.head.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {**self.encoder.buffers(), **self.head.buffers()}

    def encode(self, clips, training: bool = False, rng=None) -> Tensor:
        return self.encoder(clips, training=training, rng=rng)

    def predict_from_embeddings(self, e, training: bool = False, rng=None) -> Tensor:
        out = self.head(e, training=training, rng=rng)
        if self.task == "classification":
            return out
        return ad.add(ad.scale(out, self.scaler.scale), self.scaler.offset)

    def predict(self, clips, training: bool = False, rng=None) -> Tensor:
        e = self.encode(clips, training=training, rng=rng)
        return self.predict_from_embeddings(ad.stop_gradient(e), training=training, rng=rng)


def init_params(config: EncoderConfig, seed: int, dropout: float = 0.4,
                task: str = "regression") -> CoReEchoModel:
    """Build a freshly initialised encoder + head, deterministic per seed."""
    enc_rng, head_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    encoder = TinyEncoder(config, enc_rng)
    head = RegressionHead(config.embed_dim, head_rng, dropout=dropout, task=task)
    return CoReEchoModel(encoder, head)
