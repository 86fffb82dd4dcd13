"""Metrics, multi-clip inference and embedding-continuity diagnostics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import AugmentPolicy, SamplerConfig, VideoDataset, VideoRecord, build_single_batch, sample_rng

EVAL_STREAM = 7


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    count: int

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"task={self.task}", f"n={self.count}"]
        lines += [f"{k}={v:.6g}" for k, v in self.values.items()]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "n": self.count, **self.values}, sort_keys=True)


@dataclass
class ContinuityReport:
    violation_rate: float
    knn_mae: float
    k: int
    n_triplets: int
    values: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        return "\n".join([f"triplet_violation_rate={self.violation_rate:.6g}",
                          f"knn_label_mae={self.knn_mae:.6g}", f"k={self.k}",
                          f"n_triplets={self.n_triplets}"])

    def to_json(self) -> str:
        return json.dumps({"triplet_violation_rate": self.violation_rate, "knn_label_mae": self.knn_mae,
                           "k": self.k, "n_triplets": self.n_triplets}, sort_keys=True)


class MetricError(ValueError):
    pass


def regression_metrics(pred, target) -> MetricReport:
    """MAE, RMSE, R2 (in percent) and Pearson r."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise MetricError("pred and target must be equal, non-empty vectors")
    err = p - t
    sst = float(((t - t.mean()) ** 2).sum())
    if sst == 0:
        raise MetricError("R2 undefined for constant targets")
    sse = float((err ** 2).sum())
    sp = p.std()
    r = float(((p - p.mean()) * (t - t.mean())).mean() / (sp * t.std())) if sp > 0 else 0.0
    return MetricReport("regression", {
        "MAE": float(np.abs(err).mean()),
        "RMSE": math.sqrt(sse / p.size),
        "R2": 100.0 * (1.0 - sse / sst),
        "pearson_r": r,
    }, p.size)


def classification_metrics(prob, target, threshold: float = 0.5) -> MetricReport:
    p = np.asarray(prob, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if not np.isin(t, (0.0, 1.0)).all():
        raise MetricError("classification targets must be 0 or 1")
    yhat = p >= threshold
    pos = t == 1
    tp = int((yhat & pos).sum())
    fp = int((yhat & ~pos).sum())
    fn = int((~yhat & pos).sum())
    tn = int((~yhat & ~pos).sum())

    def ratio(a, b):
        return a / b if b else 0.0

    prec = ratio(tp, tp + fp)
    sens = ratio(tp, tp + fn)
    return MetricReport("classification", {
        "sensitivity": sens,
        "specificity": ratio(tn, tn + fp),
        "precision": prec,
        "F1": ratio(2 * prec * sens, prec + sens),
        "accuracy": ratio(tp + tn, t.size),
        "TP": tp, "FP": fp, "FN": fn, "TN": tn,
    }, t.size)


def metrics_for(task: str, pred, target) -> MetricReport:
    if task == "classification":
        return classification_metrics(pred, target)
    return regression_metrics(pred, target)


# ---------------------------------------------------------------------------
# inference


def predict_clips(model, clips, batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(clips), batch_size):
        out.append(model.predict(clips[i:i + batch_size], training=False).data)
    return np.concatenate(out).astype(np.float64)


def embed_clips(model, clips, batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(clips), batch_size):
        out.append(model.encode(clips[i:i + batch_size], training=False).data)
    return np.concatenate(out).astype(np.float64)


def _clips_for(records, sampler, seed, draw, workers):
    rngs = [sample_rng(seed, EVAL_STREAM, draw, i) for i in range(len(records))]
    return build_single_batch(records, sampler, AugmentPolicy("none"), rngs, workers)


def predict_dataset(model, dataset: VideoDataset, sampler: SamplerConfig, n_clips: int = 1,
                    seed: int = 0, batch_size: int = 32, workers: int = 1) -> np.ndarray:
    """Eval-mode predictions averaged over ``n_clips`` clip draws per video."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    records = list(dataset)
    total = np.zeros(len(records))
    for draw in range(n_clips):
        clips, _ = _clips_for(records, sampler, seed, draw, workers)
        total += predict_clips(model, clips, batch_size)
    return total / n_clips


def multiclip_predict(model, video: VideoRecord, sampler: SamplerConfig, n_clips: int = 3,
                      rng: np.random.Generator | None = None) -> float:
    """Average of ``n_clips`` independently sampled, unaugmented clip predictions."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    rng = rng or np.random.default_rng()
    clips, _ = build_single_batch([video] * n_clips, sampler, AugmentPolicy("none"), rng)
    return float(predict_clips(model, clips).mean())


def evaluate(model, dataset: VideoDataset, sampler: SamplerConfig, n_clips: int = 3,
             seed: int = 0, workers: int = 1) -> MetricReport:
    pred = predict_dataset(model, dataset, sampler, n_clips, seed, workers=workers)
    return metrics_for(dataset.task, pred, dataset.labels)


def dataset_embeddings(model, dataset: VideoDataset, sampler: SamplerConfig, seed: int = 0,
                       workers: int = 1) -> np.ndarray:
    clips, _ = _clips_for(list(dataset), sampler, seed, 0, workers)
    return embed_clips(model, clips)


# ---------------------------------------------------------------------------
# continuity diagnostics


def triplet_violation_rate(embeddings, labels, n_triplets: int = 10000,
                           rng: np.random.Generator | None = None) -> float:
    """Share of triplets whose embedding-distance order disagrees with label order.

    Triplets ``(a, b, c)`` with ``|y_a - y_b| == |y_a - y_c|`` are redrawn;
    equal embedding distances count as violations.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if len(y) < 3 or len(e) != len(y):
        raise ValueError("need at least 3 labelled embeddings")
    rng = rng or np.random.default_rng(0)
    a_idx, b_idx, c_idx = [], [], []
    need = n_triplets
    for _ in range(1000):
        a, b, c = rng.integers(0, len(y), size=(3, 2 * need))
        ok = (a != b) & (a != c) & (b != c) & (np.abs(y[a] - y[b]) != np.abs(y[a] - y[c]))
        a_idx.append(a[ok][:need]), b_idx.append(b[ok][:need]), c_idx.append(c[ok][:need])
        need -= int(min(ok.sum(), need))
        if need == 0:
            break
    else:
        raise ValueError("could not draw triplets with distinct label gaps")
    a, b, c = (np.concatenate(v) for v in (a_idx, b_idx, c_idx))
    lab_closer = np.abs(y[a] - y[b]) < np.abs(y[a] - y[c])
    d_ab = np.linalg.norm(e[a] - e[b], axis=1)
    d_ac = np.linalg.norm(e[a] - e[c], axis=1)
    agree = np.where(lab_closer, d_ab < d_ac, d_ac < d_ab)
    return float(1.0 - agree.mean())


def knn_label_mae(embeddings, labels, k: int = 5) -> float:
    """Mean |y_i - mean label of its k nearest neighbours| (self excluded)."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if not 1 <= k < len(y):
        raise ValueError(f"k must lie in [1, {len(y) - 1}]")
    d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.abs(y - y[nn].mean(axis=1)).mean())


def continuity_report(embeddings, labels, k: int = 5, n_triplets: int = 10000, seed: int = 0) -> ContinuityReport:
    rate = triplet_violation_rate(embeddings, labels, n_triplets, np.random.default_rng(seed))
    return ContinuityReport(rate, knn_label_mae(embeddings, labels, k), k, n_triplets)


# ---------------------------------------------------------------------------
# exports


def export_embeddings(model, dataset: VideoDataset, sampler: SamplerConfig, path, seed: int = 0) -> np.ndarray:
    """Write ``id,label,e_0..`` CSV (one eval-mode clip per video)."""
    emb = dataset_embeddings(model, dataset, sampler, seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "label", *[f"e_{j}" for j in range(emb.shape[1])]])
        for rec, row in zip(dataset, emb):
            wr.writerow([rec.id, repr(float(rec.label)), *[repr(float(v)) for v in row]])
    return emb


def load_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: not an embedding CSV")
        ids, labels, rows = [], [], []
        for row in rd:
            ids.append(row[0])
            labels.append(float(row[1]))
            rows.append([float(v) for v in row[2:]])
    return ids, np.array(labels), np.array(rows)


def input_saliency(model, clip) -> np.ndarray:
    """|d prediction / d pixel| for one clip, scaled to [0, 1] by its maximum."""
    x = ad.Tensor(np.asarray(clip)[None], requires_grad=True)
    saved = {name: p.requires_grad for name, p in model.parameters().items()}
    for p in model.parameters().values():
        p.requires_grad = False
    try:
        e = model.encode(x, training=False)
        out = model.head.logits(e, training=False)
        ad.backward(ad.sum_(out))
    finally:
        for name, p in model.parameters().items():
            p.requires_grad = saved[name]
    sal = np.abs(x.grad[0]).astype(np.float64)
    peak = sal.max()
    return sal / peak if peak > 0 else sal
