"""Rank-N-Contrast and the two-stage training objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7


@dataclass
class NegativeSet:
    anchor: int
    positive: int
    members: frozenset[int]


def negative_set(labels, n: int, m: int) -> NegativeSet:
    """Indices ``l != n`` at least as label-far from ``n`` as ``m`` is (0-based)."""
    y = np.asarray(labels, dtype=np.float64)
    if n == m:
        raise ValueError("anchor and positive must differ")
    if not (0 <= n < len(y) and 0 <= m < len(y)):
        raise IndexError("index out of range")
    gap = np.abs(y[n] - y)
    members = {int(l) for l in np.flatnonzero(gap >= gap[m]) if l != n}
    return NegativeSet(n, m, frozenset(members))


def negative_mask(labels) -> np.ndarray:
    """Boolean ``M[n, m, l]``: is ``l`` in the negative set of pair ``(n, m)``."""
    y = np.asarray(labels, dtype=np.float64)
    gap = np.abs(y[:, None] - y[None, :])
    mask = gap[:, None, :] >= gap[:, :, None]
    k = len(y)
    mask[np.arange(k), :, np.arange(k)] = False
    return mask


def _check_batch(e: Tensor, labels: np.ndarray, tau: float):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError(f"need at least 2 embeddings, got shape {e.shape}")
    if labels.shape != (e.shape[0],):
        raise ad.ShapeError("rnc_loss", e.shape, labels.shape)
    if not np.isfinite(labels).all():
        raise ValueError("labels must be finite")


def rnc_loss(embeddings, labels, tau: float = 1.0) -> Tensor:
    """Rank-N-Contrast loss with similarity ``exp(-||a - b|| / tau)``.

    Averaged over all ordered anchor/positive pairs; the denominator runs
    over the negative set and is evaluated with a masked log-sum-exp.
    """
    e = ad.as_tensor(embeddings)
    y = np.asarray(labels, dtype=np.float64)
    _check_batch(e, y, tau)
    k = e.shape[0]
    logits = ad.scale(ad.pairwise_l2(e), -1.0 / tau)
    mask = negative_mask(y)
    # (n, m, l) -> log sum_{l in S(n,m)} exp(logit[n, l]); diagonal m == n
    # is masked with l == m so the slice is never empty and then dropped
    mask_safe = mask.copy()
    mask_safe[np.arange(k), np.arange(k), :] = False
    mask_safe[np.arange(k), np.arange(k), (np.arange(k) + 1) % k] = True
    tiled = ad.reshape(logits, (k, 1, k))
    lse = ad.logsumexp(ad.add(tiled, np.zeros((1, k, 1))), axis=2, mask=mask_safe)
    off = ~np.eye(k, dtype=bool)
    terms = ad.mul(ad.sub(lse, logits), off.astype(e.data.dtype))
    return ad.scale(ad.sum_(terms), 1.0 / (k * (k - 1)))


def l1_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ad.ShapeError("l1_loss", pred.shape, t.shape)
    return ad.mean(ad.abs_(ad.sub(pred, t)))


def mse_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ad.ShapeError("mse_loss", pred.shape, t.shape)
    d = ad.sub(pred, t)
    return ad.mean(ad.mul(d, d))


def bce_loss(prob, target) -> Tensor:
    prob = ad.as_tensor(prob)
    t = np.asarray(target, dtype=prob.data.dtype)
    if prob.shape != t.shape:
        raise ad.ShapeError("bce_loss", prob.shape, t.shape)
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce targets must be 0 or 1")
    # clamp is piecewise: gradient passes only where prob is inside the band
    p = prob.data
    inside = ((p > BCE_EPS) & (p < 1 - BCE_EPS)).astype(p.dtype)
    clamped = ad.add(ad.mul(prob, inside), np.clip(p, BCE_EPS, 1 - BCE_EPS) * (1 - inside))
    pos = ad.mul(ad.log(clamped), t)
    neg = ad.mul(ad.log(ad.sub(1.0, clamped)), 1.0 - t)
    return ad.scale(ad.mean(ad.add(pos, neg)), -1.0)


TASK_LOSSES = {"l1": l1_loss, "mse": mse_loss, "bce": bce_loss}


def task_loss(name: str):
    try:
        return TASK_LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}") from None


def stage1_loss(embeddings, labels, head_fn, tau: float = 1.0):
    """RnC on the embeddings plus L1 on predictions from their stop-gradient copy.

    ``head_fn`` maps a (2N, C_E) tensor to (2N,) predictions in label
    units.  Returns ``(loss, rnc_term, l1_term, predictions)``.
    """
    e = ad.as_tensor(embeddings)
    y = np.asarray(labels, dtype=np.float64)
    rnc = rnc_loss(e, y, tau)
    pred = head_fn(ad.stop_gradient(e))
    l1 = l1_loss(pred, y)
    return ad.add(rnc, l1), rnc, l1, pred


def stage2_loss(clips, labels, encoder, head_fn) -> tuple[Tensor, Tensor]:
    """L1 of the head on embeddings from a frozen encoder (eval mode).

    Returns ``(loss, predictions)``.
    """
    if not encoder.frozen:
        raise RuntimeError("second stage requires a frozen encoder")
    e = encoder(clips, training=False)
    pred = head_fn(ad.stop_gradient(e))
    return l1_loss(pred, labels), pred
