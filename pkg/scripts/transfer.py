"""Probe and fine-tune a pretrained encoder on a shifted synthetic task.

The target task changes ellipse eccentricity and the label range.  Each
seed compares fine-tuning, probing the pretrained encoder and probing a
randomly initialised encoder, all scored by validation MAE.

    python3 scripts/transfer.py --seeds 0,1,2
"""
from __future__ import annotations

import argparse
import dataclasses
import json

from coreecho.training import finetune, probe

import ablation
import common as C

TARGET = dict(aspect=(0.45, 0.55), label_range=(30.0, 70.0))
TARGET_SPLITS = (64, 64, 0)
# probing trains a fresh head at a higher rate; fine-tuning moves the encoder too, so it steps more gently
PROBE = dict(lr=2e-4, batch_size=16, scheduler="none")
FINETUNE = dict(lr=1e-4, batch_size=8, scheduler="none")


def pretrain(scale: C.Scale, seed: int, data_seed: int = 1):
    return C.train(scale, C.make_dataset(scale, data_seed), seed)


def run_seed(scale: C.Scale, seed: int, pretrained=None, target_seed: int = 7) -> dict:
    if pretrained is None:
        pretrained = pretrain(scale, seed)
    target = C.make_dataset(C.Scale(splits=TARGET_SPLITS), target_seed + seed, **TARGET)
    probe_cfg = dataclasses.replace(C.train_config(scale, seed), **PROBE)
    ft_cfg = dataclasses.replace(C.train_config(scale, seed), **FINETUNE)
    samp, pol = C.sampler(scale), C.policy(scale)

    def val_mae(trainer):
        return min(r["val_MAE"] for r in trainer.history)

    random_init = C.new_model(scale, target, seed + 1000)
    return {
        "seed": seed,
        "finetune_MAE": val_mae(finetune(target, pretrained, ft_cfg, samp, pol)),
        "probe_MAE": val_mae(probe(target, pretrained, probe_cfg, samp, pol)),
        "random_probe_MAE": val_mae(probe(target, random_init, probe_cfg, samp, pol)),
    }


def run(scale: C.Scale = ablation.SCALE, seeds=(0, 1, 2), pretrained: dict | None = None) -> list[dict]:
    pretrained = pretrained or {}
    return [run_seed(scale, s, pretrained.get(s)) for s in seeds]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    C.add_scale_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    args = p.parse_args(argv)
    for row in run(C.scale_from_args(args, ablation.SCALE), [int(s) for s in args.seeds.split(",")]):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
