"""``coreecho`` command line.

Exit codes: 0 success, 2 usage error, 3 data error, 4 check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as C
from . import evaluation as ev
from .data import DataError, SynthSpec, VideoDataset, synth_generate
from .losses import stage1_loss
from .model import init_params
from .training import (CheckpointError, ConfigError, Trainer, fresh_head, load_checkpoint, load_model,
                       save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    grp = p.add_argument_group("config overrides")
    for key, (_, default, help_) in C.SCHEMA.items():
        grp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                         help=f"{help_} (default: {C.format_value(default)})")


def _values(args) -> dict:
    file_values = C.read_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k: C.parse_value(k, getattr(args, k)) for k in C.SCHEMA if getattr(args, k, None) is not None}
    values = C.resolve(file_values, overrides)
    ad.set_default_dtype(values["dtype"])
    return values


def _out_dir(args, values) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.write_config(out / "config.effective", values)
    return out


def _load_data(path, task: str = "regression") -> VideoDataset:
    if path is None or not Path(path).exists():
        raise DataError(f"dataset directory not found: {path}")
    return VideoDataset.load(path, task=task)


class JsonLog:
    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _report(rep, out: Path | None, name: str) -> None:
    print(rep.to_text())
    if out is not None:
        (out / f"{name}.json").write_text(rep.to_json() + "\n", encoding="utf-8")


def _select(ds: VideoDataset, split: str) -> VideoDataset:
    sub = ds if split == "all" else ds.split(split)
    if len(sub) == 0:
        raise DataError(f"split {split!r} is empty")
    return sub


def _run_trainer(trainer: Trainer, out: Path, values: dict, every: int) -> None:
    last = out / "last.crck"
    while not trainer.done:
        trainer.run(max_epochs=every if every > 0 else None)
        if every > 0:
            save_checkpoint(last, trainer.checkpoint())
    save_checkpoint(out / "checkpoint.crck", trainer.checkpoint())


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.count is not None and args.count < 1:
        raise UsageError("--count must be >= 1")
    counts = None
    if args.splits:
        counts = tuple(int(v) for v in args.splits.split(","))
        if len(counts) != 3 or min(counts) < 0 or sum(counts) < 1:
            raise UsageError("--splits needs three non-negative counts train,val,test")
    seed = args.seed if args.seed is not None else int(os.environ.get("COREECHO_SEED", 0))
    spec = SynthSpec(count=args.count or 64, frames=(args.frames_min, args.frames_max), size=args.size,
                     label_range=(args.label_min, args.label_max), aspect=(args.aspect_min, args.aspect_max),
                     split_counts=counts)
    out = Path(args.out)
    ds = synth_generate(spec, seed, out)
    (out / "synth.json").write_text(json.dumps({"seed": seed, **dataclasses.asdict(spec)}, sort_keys=True) + "\n")
    print(f"manifest={out / 'FileList.csv'}")
    print(f"videos={len(ds)}")
    counts_, edges = np.histogram(ds.labels, bins=10, range=(0, 100))
    for lo, n in zip(edges[:-1], counts_):
        print(f"label[{lo:g},{lo + 10:g})={n}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _values(args)
    ds = _load_data(args.data)
    out = _out_dir(args, values)
    r0 = ds[0]
    enc = C.encoder_config(values, r0.height, r0.width, r0.channels)
    model = init_params(enc, values["seed"], dropout=values["dropout"])
    plan = values["plan"]
    if plan not in ("coreecho", "l1"):
        raise UsageError("train --plan must be coreecho or l1")
    log = JsonLog(out / "log.jsonl")
    try:
        trainer = Trainer(model, ds, C.train_config(values), C.sampler_config(values), C.augment_policy(values),
                          plan=plan, log=log)
        if args.resume:
            trainer.restore(load_checkpoint(args.resume))
        _run_trainer(trainer, out, values, args.checkpoint_every)
    finally:
        log.close()
    print(f"checkpoint={out / 'checkpoint.crck'}")
    if len(ds.split("val")):
        _report(ev.evaluate(model, ds.split("val"), C.sampler_config(values), values["val_clips"],
                            values["seed"]), out, "val_metrics")
    return EXIT_OK


def _transfer(args, plan: str) -> int:
    values = _values(args)
    ds = _load_data(args.data, args.task)
    out = _out_dir(args, values)
    if args.init == "checkpoint":
        if not args.from_:
            raise UsageError("--from is required unless --init random")
        pretrained = load_model(args.from_)
    else:
        r0 = ds[0]
        pretrained = init_params(C.encoder_config(values, r0.height, r0.width, r0.channels), values["seed"],
                                 dropout=values["dropout"], task=ds.task)
    sampler = C.sampler_config(values)
    before = pretrained.encoder.checksum()
    model = fresh_head(pretrained, ds.task, values["seed"])
    log = JsonLog(out / "log.jsonl")
    try:
        trainer = Trainer(model, ds, C.train_config(values), sampler, C.augment_policy(values), plan=plan, log=log)
        if args.resume:
            trainer.restore(load_checkpoint(args.resume))
        _run_trainer(trainer, out, values, args.checkpoint_every)
    finally:
        log.close()
    after = model.encoder.checksum()
    print(f"encoder_checksum_before={before}")
    print(f"encoder_checksum_after={after}")
    print(f"encoder_unchanged={before == after}")
    print(f"checkpoint={out / 'checkpoint.crck'}")
    split = "val" if len(ds.split("val")) else "train"
    _report(ev.evaluate(model, ds.split(split), sampler, values["val_clips"], values["seed"]), out,
            f"{split}_metrics")
    if plan == "probe" and before != after:
        raise CheckFailure("probe modified the frozen encoder")
    return EXIT_OK


def cmd_probe(args) -> int:
    return _transfer(args, "probe")


def cmd_finetune(args) -> int:
    return _transfer(args, "finetune")


def _model_and_data(args):
    values = _values(args)
    try:
        model = load_model(args.ckpt)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.ckpt}") from exc
    ds = _load_data(args.data, model.task)
    if args.clip_frames is None and args.config is None:
        values["clip_frames"] = model.encoder.config.frames
    return values, model, ds


def cmd_eval(args) -> int:
    values, model, ds = _model_and_data(args)
    sub = _select(ds, args.split)
    if args.clips < 1:
        raise UsageError("--clips must be >= 1")
    rep = ev.evaluate(model, sub, C.sampler_config(values), args.clips, values["seed"], values["workers"])
    out = _out_dir(args, values) if args.out else None
    _report(rep, out, f"{args.split}_metrics")
    return EXIT_OK


def cmd_embed(args) -> int:
    values, model, ds = _model_and_data(args)
    sub = _select(ds, args.split)
    Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
    emb = ev.export_embeddings(model, sub, C.sampler_config(values), args.csv, values["seed"])
    print(f"embeddings={args.csv}")
    print(f"rows={emb.shape[0]} dim={emb.shape[1]}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    values, model, ds = _model_and_data(args)
    sub = _select(ds, args.split)
    emb = ev.dataset_embeddings(model, sub, C.sampler_config(values), values["seed"])
    rep = ev.continuity_report(emb, sub.labels, args.k, args.triplets, values["seed"])
    print(rep.to_text())
    if args.out:
        out = _out_dir(args, values)
        (out / "continuity.json").write_text(rep.to_json() + "\n")
    return EXIT_OK


def gradcheck_suite(model, clips, labels, tau: float = 1.0, entries: int = 6, seed: int = 0,
                    tolerance: float = 1e-6) -> dict:
    """Central-difference check of every parameter under the first-stage loss.

    Analytic gradients come from the full loss.  Because the head sees a
    stop-gradient copy of the embeddings, encoder entries are differenced
    against the RnC term alone and head entries against the full loss.
    """
    for p in model.parameters().values():
        p.trainable = True
    bufs = {k: np.array(v, copy=True) for k, v in model.buffers().items()}

    def build(term):
        def fn():
            # train-mode batch norm moves its running stats; reset per call
            model.encoder.load_buffers(bufs)
            model.head.load_buffers(bufs)
            rng = np.random.default_rng(seed)
            e = model.encode(clips, training=True)
            total, rnc, _, _ = stage1_loss(e, labels, lambda z: model.predict_from_embeddings(z, True, rng), tau)
            return rnc if term == "rnc" else total
        return fn

    reports = []
    for group, term in ((model.encoder, "rnc"), (model.head, "total")):
        reports.append(ad.grad_check(build("total"), list(group.parameters().values()), h=1e-5,
                                     tolerance=tolerance, max_entries=entries,
                                     rng=np.random.default_rng(seed), fd_fn=build(term)))
    model.encoder.load_buffers(bufs)
    model.head.load_buffers(bufs)
    per = {k: v for r in reports for k, v in r["per_param"].items()}
    flagged = [f for r in reports for f in r["flagged"]]
    return {"max_rel_error": max(per.values()), "per_param": per, "flagged": flagged, "passed": not flagged}


def cmd_gradcheck(args) -> int:
    values = _values(args)
    if values["dtype"] != "float64":
        raise UsageError("gradcheck needs --dtype float64")
    if args.ckpt:
        model = load_model(args.ckpt)
        enc = model.encoder.config
    else:
        enc = dataclasses.replace(C.encoder_config(values, args.size, args.size, 3), frames=args.frames,
                                  embed_dim=min(values["embed_dim"], args.max_embed))
        model = init_params(enc, values["seed"], dropout=values["dropout"])
    rng = np.random.default_rng(values["seed"])
    clips = rng.random((args.batch, *enc.clip_shape))
    labels = np.repeat(rng.uniform(10, 80, size=args.batch // 2), 2)
    rep = gradcheck_suite(model, clips, labels, values["tau"], args.entries, values["seed"], args.tolerance)
    for name, err in rep["per_param"].items():
        print(f"{name}: max_rel_error={err:.3e}")
    print(f"max_rel_error={rep['max_rel_error']:.3e}")
    print(f"passed={rep['passed']}")
    if not rep["passed"]:
        raise CheckFailure(f"{len(rep['flagged'])} gradient entries above tolerance {args.tolerance:g}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    values, model, ds = _model_and_data(args)
    sub = _select(ds, args.split)
    wanted = args.ids.split(",") if args.ids else [r.id for r in list(sub)[:args.count]]
    by_id = {r.id: r for r in sub}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise DataError(f"unknown sample ids: {', '.join(missing)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = C.sampler_config(values)
    for i, vid in enumerate(wanted):
        clip, _ = ev._clips_for([by_id[vid]], sampler, values["seed"], 0, 1)
        sal = ev.input_saliency(model, clip[0])
        np.save(out / f"saliency_{vid}.npy", sal)
        print(f"saliency={out / f'saliency_{vid}.npy'} max={sal.max():.3g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coreecho", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pulsating-ellipse dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--splits", help="explicit train,val,test counts (overrides --count)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames-min", type=int, default=40)
    p.add_argument("--frames-max", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--label-min", type=float, default=10.0)
    p.add_argument("--label-max", type=float, default=80.0)
    p.add_argument("--aspect-min", type=float, default=0.7)
    p.add_argument("--aspect-max", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="first stage + second stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--checkpoint-every", type=int, default=1, help="epochs between last.crck saves (0: off)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, fn in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a pretrained encoder on a target dataset")
        p.add_argument("--from", dest="from_")
        p.add_argument("--init", choices=("checkpoint", "random"), default="checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--task", choices=("regression", "classification"), default="regression")
        p.add_argument("--out", required=True)
        p.add_argument("--resume")
        p.add_argument("--checkpoint-every", type=int, default=1)
        _add_config_flags(p)
        p.set_defaults(func=fn)

    def model_cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
        _add_config_flags(p)
        p.set_defaults(func=fn)
        return p

    p = model_cmd("eval", cmd_eval, "multi-clip averaged metrics")
    p.add_argument("--clips", type=int, default=3)
    p.add_argument("--out")
    p = model_cmd("embed", cmd_embed, "export embeddings as CSV")
    p.add_argument("--csv", required=True)
    p = model_cmd("diagnose", cmd_diagnose, "embedding continuity diagnostics")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--triplets", type=int, default=100000)
    p.add_argument("--out")
    p = model_cmd("saliency", cmd_saliency, "input-gradient saliency maps")
    p.add_argument("--out", required=True)
    p.add_argument("--ids")
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--ckpt")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--max-embed", type=int, default=16)
    p.add_argument("--entries", type=int, default=6, help="sampled entries per parameter")
    p.add_argument("--tolerance", type=float, default=1e-6)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, C.ConfigKeyError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
