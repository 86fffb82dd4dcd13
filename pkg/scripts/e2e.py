"""Full two-stage run on the synthetic task, evaluated with 3-clip averaging.

    python3 scripts/e2e.py [--stage1-epochs 25 ...]
"""
from __future__ import annotations

import argparse
import json

import common as C


def run(scale: C.Scale = C.Scale(), data_seed: int = 1, model_seed: int = 0, verbose: bool = False) -> dict:
    with C.Timer() as t:
        ds = C.make_dataset(scale, data_seed)
        model = C.train(scale, ds, model_seed, verbose=verbose)
        rep = C.heldout_report(scale, model, ds)
    return {"MAE": rep["MAE"], "RMSE": rep["RMSE"], "R2": rep["R2"], "seconds": t.seconds, "model": model,
            "dataset": ds}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    C.add_scale_flags(p)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    out = run(C.scale_from_args(args, C.Scale()), args.data_seed, args.model_seed, args.verbose)
    print(json.dumps({k: v for k, v in out.items() if k not in ("model", "dataset")}, indent=1))


if __name__ == "__main__":
    main()
