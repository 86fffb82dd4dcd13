"""Shared pieces of the experiment scripts: dataset, model and run helpers."""
from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from coreecho import autodiff as ad
from coreecho import evaluation as ev
from coreecho.data import AugmentPolicy, SamplerConfig, SynthSpec, synth_generate
from coreecho.model import EncoderConfig, init_params
from coreecho.training import TrainConfig, Trainer


@dataclass
class Scale:
    """Everything that sets the cost of one run."""

    splits: tuple[int, int, int] = (512, 128, 128)
    embed_dim: int = 64
    widths: tuple[int, ...] = (8, 16, 32)
    temporal_strides: tuple[int, ...] = (2, 2, 2)
    stage1_epochs: int = 25
    stage2_epochs: int = 5
    transfer_epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    clip_frames: int = 36
    stride: int = 4
    test_clips: int = 3
    augment: str = "pad-crop"


def sampler(scale: Scale) -> SamplerConfig:
    return SamplerConfig(scale.clip_frames, scale.stride)


def policy(scale: Scale) -> AugmentPolicy:
    return AugmentPolicy(scale.augment)


def train_config(scale: Scale, seed: int, **kw) -> TrainConfig:
    return TrainConfig(batch_size=scale.batch_size, stage1_epochs=scale.stage1_epochs,
                       stage2_epochs=scale.stage2_epochs, transfer_epochs=scale.transfer_epochs, lr=scale.lr,
                       seed=seed, **kw)


def make_dataset(scale: Scale, seed: int, **spec):
    ad.set_default_dtype("float64")
    return synth_generate(SynthSpec(split_counts=scale.splits, **spec), seed)


def new_model(scale: Scale, ds, seed: int, task: str = "regression"):
    r0 = ds[0]
    enc = EncoderConfig(frames=scale.clip_frames, height=r0.height, width=r0.width, channels=r0.channels,
                        widths=scale.widths, temporal_strides=scale.temporal_strides, embed_dim=scale.embed_dim)
    return init_params(enc, seed, task=task)


def train(scale: Scale, ds, seed: int, plan: str = "coreecho", verbose: bool = False):
    model = new_model(scale, ds, seed)
    log = (lambda r: print(json.dumps(r), file=sys.stderr, flush=True)) if verbose else None
    Trainer(model, ds, train_config(scale, seed), sampler(scale), policy(scale), plan, log).run()
    return model


def heldout_report(scale: Scale, model, ds, seed: int = 0):
    return ev.evaluate(model, ds.split("test"), sampler(scale), scale.test_clips, seed)


def violation_rate(scale: Scale, model, subset, seed: int = 0, n_triplets: int = 100_000) -> float:
    emb = ev.dataset_embeddings(model, subset, sampler(scale), seed)
    return ev.triplet_violation_rate(emb, subset.labels, n_triplets, np.random.default_rng(seed))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def scale_from_args(args, base: Scale) -> Scale:
    """Overlay any ``--field value`` given on the command line onto ``base``."""
    over = {f.name: getattr(args, f.name) for f in dataclasses.fields(Scale) if getattr(args, f.name, None) is not None}
    return dataclasses.replace(base, **over)


def add_scale_flags(parser) -> None:
    for f in dataclasses.fields(Scale):
        kind = type(f.default)
        if kind is tuple:
            parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                                type=lambda s: tuple(int(v) for v in s.split(",")))
        else:
            parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, type=kind)
