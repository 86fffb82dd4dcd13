"""Optimisers, LR schedule, checkpoints and the staged training loop."""
from __future__ import annotations

import copy
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import evaluation
from .data import AugmentPolicy, SamplerConfig, VideoDataset, build_single_batch, build_stage1_batch, sample_rng
from .losses import l1_loss, stage1_loss, task_loss
from .model import CoReEchoModel, EncoderConfig, Module, RegressionHead, TargetScaler, TinyEncoder

# stream ids keep the rng draws of different phases independent
_STREAMS = {"stage1": 1, "l1": 2, "stage2": 3, "probe": 4, "finetune": 5, "shuffle": 6}


@dataclass
class TrainConfig:
    batch_size: int = 16
    stage1_epochs: int = 25
    stage2_epochs: int = 5
    transfer_epochs: int = 100
    tau: float = 1.0
    lr: float = 1e-4
    stage2_lr: float | None = None
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    scheduler: str = "step"
    step_size: int = 15
    gamma: float = 0.1
    dropout: float = 0.4
    loss: str = "l1"
    seed: int = 0
    workers: int = 1
    val_clips: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.stage1_epochs, self.stage2_epochs, self.transfer_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("step", "none"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.step_size < 1 or not 0 < self.gamma <= 1:
            raise ValueError("invalid step schedule")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimisers


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One in-place AdamW update; ``step`` counts from 1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    param -= lr * weight_decay * param
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Optimizer:
    def __init__(self, params: dict[str, ad.Parameter], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def zero_grad(self):
        ad.zero_grad(self.params.values())

    def _active(self):
        for name, p in self.params.items():
            if p.trainable and p.grad is not None:
                yield name, p

    def state_tensors(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_tensors(self, tensors: dict[str, np.ndarray], steps: int) -> None:
        raise NotImplementedError


class AdamW(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.betas = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.steps += 1
        for name, p in self._active():
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.steps, self.lr,
                       *self.betas, self.eps, self.weight_decay)

    def state_tensors(self):
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out

    def load_state_tensors(self, tensors, steps):
        for n in self.m:
            self.m[n] = np.array(tensors[f"m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(tensors[f"v.{n}"], dtype=self.v[n].dtype)
        self.steps = steps


class SGDMomentum(Optimizer):
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.steps += 1
        for name, p in self._active():
            g = p.grad + self.weight_decay * p.data
            vel = self.velocity[name]
            vel *= self.momentum
            vel += g
            p.data -= self.lr * vel

    def state_tensors(self):
        return {f"velocity.{n}": a for n, a in self.velocity.items()}

    def load_state_tensors(self, tensors, steps):
        for n in self.velocity:
            self.velocity[n] = np.array(tensors[f"velocity.{n}"], dtype=self.velocity[n].dtype)
        self.steps = steps


def make_optimizer(params, cfg: TrainConfig, lr: float | None = None) -> Optimizer:
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == "adamw":
        return AdamW(params, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return SGDMomentum(params, lr, cfg.momentum, cfg.weight_decay)


def step_lr(base_lr: float, epoch: int, step_size: int = 15, gamma: float = 0.1) -> float:
    if step_size < 1 or not 0 < gamma <= 1:
        raise ValueError("invalid step schedule")
    return base_lr * gamma ** (epoch // step_size)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CRCK"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sHI")


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    directory = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, ckpt.version, len(header)))
        fh.write(header)
        for name in sorted(ckpt.tensors):
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than its prefix")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = _CKPT_PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    body = raw[start + hlen:]
    tensors = {}
    expected = 0
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo, hi = entry["offset"], entry["offset"] + 8 * n
        if hi > len(body):
            raise CheckpointTruncatedError(f"{path}: payload for {entry['name']} is truncated")
        tensors[entry["name"]] = np.frombuffer(body[lo:hi], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        expected = max(expected, hi)
    if len(body) != expected:
        raise CheckpointError(f"{path}: {len(body) - expected} trailing bytes")
    return Checkpoint(header["config"], tensors, header["meta"], version)


# ---------------------------------------------------------------------------
# model (de)serialisation


def model_tensors(model: CoReEchoModel) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.parameters().items()}
    out.update(model.buffers())
    return out


def model_meta(model: CoReEchoModel) -> dict:
    return {"encoder": dataclasses.asdict(model.encoder.config), "task": model.task,
            "dropout": model.head.dropout, "scaler": dataclasses.asdict(model.scaler)}


def load_into(module: Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, p in module.parameters().items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != p.shape:
            raise CheckpointError(f"{key}: shape {tensors[key].shape} != {p.shape}")
        p.data = np.array(tensors[key], dtype=p.data.dtype)
    module.load_buffers({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> CoReEchoModel:
    meta = ckpt.meta["model"]
    cfg = EncoderConfig(**meta["encoder"])
    rng = np.random.default_rng(seed)
    enc = TinyEncoder(cfg, rng)
    head = RegressionHead(cfg.embed_dim, rng, dropout=meta["dropout"], task=meta["task"])
    load_into(enc, ckpt.tensors)
    load_into(head, ckpt.tensors)
    return CoReEchoModel(enc, head, TargetScaler(**meta["scaler"]))


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _restore_rng(data: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {"bit_generator": data["bit_generator"],
                               "state": {k: int(v) for k, v in data["state"].items()},
                               "has_uint32": data["has_uint32"], "uinteger": data["uinteger"]}
    return rng


# ---------------------------------------------------------------------------
# training

PLANS = {
    "coreecho": ("stage1", "stage2"),
    "l1": ("l1", "stage2"),
    "probe": ("probe",),
    "finetune": ("finetune",),
}


def _chunks(order: np.ndarray, size: int, min_size: int):
    for i in range(0, len(order), size):
        chunk = order[i:i + size]
        if len(chunk) >= min_size:
            yield chunk


class Trainer:
    """Runs one training plan phase by phase and can be checkpointed between epochs.

    Plans: ``coreecho`` (first stage then frozen-encoder head refinement),
    ``l1`` (plain end-to-end L1 baseline, then the same refinement),
    ``probe`` and ``finetune`` (transfer to a new dataset).
    """

    def __init__(self, model: CoReEchoModel, dataset: VideoDataset, cfg: TrainConfig,
                 sampler: SamplerConfig | None = None, policy: AugmentPolicy | None = None,
                 plan: str = "coreecho", log: Callable[[dict], None] | None = None):
        if plan not in PLANS:
            raise ConfigError(f"unknown plan {plan!r}")
        self.model = model
        self.cfg = cfg
        self.sampler = sampler or SamplerConfig()
        self.policy = policy or AugmentPolicy("none")
        self.plan = plan
        self.train_set = dataset.split("train")
        self.val_set = dataset.split("val")
        if len(self.train_set) == 0:
            raise ConfigError("dataset has no training videos")
        self.task = dataset.task
        self._check_task()
        self.log = log
        self.phase_idx = 0
        self.epoch = 0
        self.rng = sample_rng(cfg.seed, 99)
        self.history: list[dict] = []
        self.best: dict | None = None
        if plan in ("probe", "finetune") or model.scaler == TargetScaler():
            if self.task == "regression":
                model.scaler = TargetScaler.fit(self.train_set.labels)
        self.enc_opt = make_optimizer(model.encoder.parameters(), cfg)
        self.head_opt = make_optimizer(model.head.parameters(), cfg)
        self._enter_phase()

    # -- configuration -------------------------------------------------
    def _check_task(self):
        if self.model.task != self.task:
            raise ConfigError(f"head task {self.model.task!r} does not match dataset task {self.task!r}")
        if self.plan in ("probe", "finetune"):
            allowed = {"classification": {"bce"}, "regression": {"l1", "mse"}}[self.task]
            if self.cfg.loss not in allowed:
                raise ConfigError(f"loss {self.cfg.loss!r} does not fit a {self.task} dataset")
        elif self.task != "regression":
            raise ConfigError(f"plan {self.plan!r} needs a regression dataset")

    @property
    def phases(self) -> tuple[str, ...]:
        return PLANS[self.plan]

    @property
    def phase(self) -> str | None:
        return self.phases[self.phase_idx] if self.phase_idx < len(self.phases) else None

    @property
    def done(self) -> bool:
        return self.phase is None

    def phase_epochs(self, phase: str) -> int:
        if phase in ("stage1", "l1"):
            return self.cfg.stage1_epochs
        if phase == "stage2":
            return self.cfg.stage2_epochs
        return self.cfg.transfer_epochs

    def _enter_phase(self):
        phase = self.phase
        if phase is None:
            return
        frozen = phase in ("stage2", "probe")
        self.model.encoder.set_trainable(not frozen)
        self.model.head.set_trainable(True)

    def _lr(self, phase: str) -> float:
        if phase in ("stage1", "l1"):
            if self.cfg.scheduler == "step":
                return step_lr(self.cfg.lr, self.epoch, self.cfg.step_size, self.cfg.gamma)
            return self.cfg.lr
        if phase == "stage2" and self.cfg.stage2_lr is not None:
            return self.cfg.stage2_lr
        return self.cfg.lr

    # -- loop ------------------------------------------------------------
    def run(self, max_epochs: int | None = None) -> list[dict]:
        """Train until the plan finishes or ``max_epochs`` more epochs ran."""
        ran = 0
        while not self.done and (max_epochs is None or ran < max_epochs):
            phase = self.phase
            if self.epoch >= self.phase_epochs(phase):
                self._finish_phase()
                continue
            record = self._epoch(phase)
            self.history.append(record)
            if self.log:
                self.log(record)
            self.epoch += 1
            ran += 1
            if self.epoch >= self.phase_epochs(phase):
                self._finish_phase()
        return self.history

    def _finish_phase(self):
        if self.best is not None:
            load_into(self.model.encoder, self.best["tensors"])
            load_into(self.model.head, self.best["tensors"])
        self.best = None
        self.phase_idx += 1
        self.epoch = 0
        self._enter_phase()

    def _epoch(self, phase: str) -> dict:
        cfg = self.cfg
        lr = self._lr(phase)
        self.enc_opt.lr = lr
        self.head_opt.lr = lr
        stream = _STREAMS[phase]
        order = sample_rng(cfg.seed, _STREAMS["shuffle"], stream, self.epoch).permutation(len(self.train_set))
        dual = phase in ("stage1", "l1")
        totals: dict[str, float] = {}
        batches = 0
        for chunk in _chunks(order, cfg.batch_size, 1 if dual else 2):
            recs = [self.train_set[i] for i in chunk]
            rngs = [sample_rng(cfg.seed, stream, self.epoch, int(i)) for i in chunk]
            build = build_stage1_batch if dual else build_single_batch
            clips, labels = build(recs, self.sampler, self.policy, rngs, cfg.workers)
            parts = self._step(phase, clips, labels)
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v
            batches += 1
        record = {"stage": phase, "epoch": self.epoch, "lr": lr}
        record.update({k: v / max(batches, 1) for k, v in totals.items()})
        record.update(self._validate())
        self._track_best(record)
        return record

    def _step(self, phase: str, clips, labels) -> dict[str, float]:
        model = self.model
        self.enc_opt.zero_grad()
        self.head_opt.zero_grad()

        def head(z):
            return model.predict_from_embeddings(z, training=True, rng=self.rng)

        if phase == "stage1":
            e = model.encode(clips, training=True)
            loss, rnc, l1, _ = stage1_loss(e, labels, head, self.cfg.tau)
            parts = {"loss": loss.item(), "rnc": rnc.item(), "l1": l1.item()}
        elif phase == "l1":
            loss = l1_loss(head(model.encode(clips, training=True)), labels)
            parts = {"loss": loss.item()}
        elif phase in ("stage2", "probe"):
            if not model.encoder.frozen:
                raise ConfigError("encoder must be frozen in this phase")
            e = model.encode(clips, training=False)
            loss = task_loss(self.cfg.loss if phase == "probe" else "l1")(head(ad.stop_gradient(e)), labels)
            parts = {"loss": loss.item()}
        else:
            loss = task_loss(self.cfg.loss)(head(model.encode(clips, training=True)), labels)
            parts = {"loss": loss.item()}
        ad.backward(loss)
        if not model.encoder.frozen:
            self.enc_opt.step()
        self.head_opt.step()
        return parts

    def _validate(self) -> dict:
        if len(self.val_set) == 0:
            return {}
        rep = evaluation.evaluate(self.model, self.val_set, self.sampler, self.cfg.val_clips,
                                  seed=self.cfg.seed, workers=self.cfg.workers)
        if self.task == "classification":
            return {"val_F1": rep["F1"], "val_accuracy": rep["accuracy"]}
        return {"val_MAE": rep["MAE"], "val_R2": rep["R2"]}

    def _track_best(self, record: dict):
        if "val_MAE" in record:
            score = -record["val_MAE"]
        elif "val_F1" in record:
            score = record["val_F1"]
        else:
            return
        if self.best is None or score > self.best["score"]:
            self.best = {"score": score, "epoch": record["epoch"],
                         "tensors": {k: np.array(v, copy=True) for k, v in model_tensors(self.model).items()}}

    # -- persistence -------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{k}": v for k, v in model_tensors(self.model).items()}
        tensors.update({f"opt.encoder.{k}": v for k, v in self.enc_opt.state_tensors().items()})
        tensors.update({f"opt.head.{k}": v for k, v in self.head_opt.state_tensors().items()})
        best_meta = None
        if self.best is not None:
            tensors.update({f"best.{k}": v for k, v in self.best["tensors"].items()})
            best_meta = {"score": self.best["score"], "epoch": self.best["epoch"]}
        meta = {
            "model": model_meta(self.model),
            "plan": self.plan,
            "phase_idx": self.phase_idx,
            "epoch": self.epoch,
            "rng": _rng_state(self.rng),
            "opt_steps": {"encoder": self.enc_opt.steps, "head": self.head_opt.steps},
            "best": best_meta,
            "history": self.history,
            "dtype": np.dtype(ad.get_default_dtype()).name,
        }
        return Checkpoint(dataclasses.asdict(self.cfg), tensors, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        meta = ckpt.meta
        if meta.get("plan") != self.plan:
            raise CheckpointError(f"checkpoint plan {meta.get('plan')!r} != {self.plan!r}")
        sub = _strip(ckpt.tensors, "model.")
        load_into(self.model.encoder, sub)
        load_into(self.model.head, sub)
        self.model.scaler = TargetScaler(**meta["model"]["scaler"])
        self.enc_opt.load_state_tensors(_strip(ckpt.tensors, "opt.encoder."), meta["opt_steps"]["encoder"])
        self.head_opt.load_state_tensors(_strip(ckpt.tensors, "opt.head."), meta["opt_steps"]["head"])
        self.phase_idx = meta["phase_idx"]
        self.epoch = meta["epoch"]
        self.rng = _restore_rng(meta["rng"])
        self.history = list(meta["history"])
        if meta["best"] is not None:
            self.best = dict(meta["best"], tensors={k: np.array(v, dtype=ad.get_default_dtype())
                                                    for k, v in _strip(ckpt.tensors, "best.").items()})
        else:
            self.best = None
        self._enter_phase()


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def model_checkpoint(model: CoReEchoModel, cfg: TrainConfig | None = None, **meta) -> Checkpoint:
    """Checkpoint holding only the model (no optimiser or loop state)."""
    tensors = {f"model.{k}": v for k, v in model_tensors(model).items()}
    return Checkpoint(dataclasses.asdict(cfg or TrainConfig()), tensors,
                      {"model": model_meta(model), **meta})


def load_model(path_or_ckpt, seed: int = 0) -> CoReEchoModel:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    return model_from_checkpoint(Checkpoint(ckpt.config, _strip(ckpt.tensors, "model."), ckpt.meta), seed)


# ---------------------------------------------------------------------------
# convenience entry points


def run_stage1(model, dataset, cfg, sampler=None, policy=None, log=None) -> Trainer:
    tr = Trainer(model, dataset, dataclasses.replace(cfg, stage2_epochs=0), sampler, policy, "coreecho", log)
    tr.run()
    return tr


def run_stage2(model, dataset, cfg, sampler=None, policy=None, log=None) -> Trainer:
    tr = Trainer(model, dataset, cfg, sampler, policy, "coreecho", log)
    tr.phase_idx = 1
    tr._enter_phase()
    tr.run()
    return tr


def fresh_head(model: CoReEchoModel, task: str, seed: int) -> CoReEchoModel:
    head = RegressionHead(model.encoder.config.embed_dim, np.random.default_rng(seed),
                          dropout=model.head.dropout, task=task)
    # a private encoder copy keeps fine-tuning from mutating the caller's model
    return CoReEchoModel(copy.deepcopy(model.encoder), head)


def probe(dataset, pretrained: CoReEchoModel, cfg, sampler=None, policy=None, log=None) -> Trainer:
    model = fresh_head(pretrained, dataset.task, cfg.seed)
    tr = Trainer(model, dataset, cfg, sampler, policy, "probe", log)
    tr.run()
    return tr


def finetune(dataset, pretrained: CoReEchoModel, cfg, sampler=None, policy=None, log=None) -> Trainer:
    model = fresh_head(pretrained, dataset.task, cfg.seed)
    tr = Trainer(model, dataset, cfg, sampler, policy, "finetune", log)
    tr.run()
    return tr
