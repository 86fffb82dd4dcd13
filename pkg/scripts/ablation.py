"""RnC + L1 first stage against a plain end-to-end L1 baseline, paired over seeds.

Both plans see the same data, batches, epochs and second-stage refinement;
only the first-stage objective differs.

    python3 scripts/ablation.py --seeds 0,1,2
"""
from __future__ import annotations

import argparse
import json

import common as C

# smaller than the end-to-end run so three paired seeds fit in a few minutes
SCALE = C.Scale(splits=(128, 32, 128), stage1_epochs=12, stage2_epochs=3, lr=3e-4)


def run_seed(scale: C.Scale, seed: int, data_seed: int = 1) -> dict:
    ds = C.make_dataset(scale, data_seed)
    row = {"seed": seed}
    for plan in ("coreecho", "l1"):
        model = C.train(scale, ds, seed, plan)
        row[f"{plan}_R2"] = C.heldout_report(scale, model, ds)["R2"]
        row[f"{plan}_violation"] = C.violation_rate(scale, model, ds.split("test"), seed)
        if plan == "coreecho":
            row["model"] = model
    return row


def run(scale: C.Scale = SCALE, seeds=(0, 1, 2), data_seed: int = 1) -> list[dict]:
    return [run_seed(scale, s, data_seed) for s in seeds]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    C.add_scale_flags(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data-seed", type=int, default=1)
    args = p.parse_args(argv)
    seeds = [int(s) for s in args.seeds.split(",")]
    for row in run(C.scale_from_args(args, SCALE), seeds, args.data_seed):
        row.pop("model")
        print(json.dumps(row))


if __name__ == "__main__":
    main()
