"""Slow, literal reference implementations used as test oracles.

Nothing here shares code with the package: loops, plain math and mpmath.
"""
import math

import mpmath
import numpy as np


def rnc_bruteforce(emb, labels, tau):
    """Triple loop over (anchor, positive, negative) with no log-space tricks."""
    e = np.asarray(emb, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    k = len(y)

    def sim(i, j):
        return math.exp(-math.sqrt(sum((e[i, c] - e[j, c]) ** 2 for c in range(e.shape[1]))) / tau)

    total = 0.0
    for n in range(k):
        for m in range(k):
            if m == n:
                continue
            denom = 0.0
            for l in range(k):
                if l != n and abs(y[n] - y[l]) >= abs(y[n] - y[m]):
                    denom += sim(n, l)
            total += -math.log(sim(n, m) / denom)
    return total / (k * (k - 1))


def pairwise_naive(x):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = math.sqrt(sum((x[i, c] - x[j, c]) ** 2 for c in range(x.shape[1])))
    return d


def logsumexp_mp(values, dps=50):
    with mpmath.workdps(dps):
        return float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in values)))


def phi_mp(x, dps=50):
    with mpmath.workdps(dps):
        return mpmath.ncdf(mpmath.mpf(x))


def gelu_mp(x, dps=50):
    with mpmath.workdps(dps):
        return float(mpmath.mpf(x) * phi_mp(x, dps))


def bilinear_point(img, y, x):
    """Sample ``img`` at continuous (y, x) with edge clamping."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
            + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centre (align_corners=False) bilinear resize, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = (i + 0.5) * h / out_h - 0.5
            sx = (j + 0.5) * w / out_w - 0.5
            out[i, j] = bilinear_point(img, sy, sx)
    return out


def head_formula(e, w1, w2, bn1, bn2, eps=1e-5):
    """Eval-mode y = W2 [g(BN2(W1 [BN1(E); 1])); 1], sample by sample."""
    out = []
    for row in np.asarray(e, dtype=np.float64):
        h = [(row[j] - bn1["mean"][j]) / math.sqrt(bn1["var"][j] + eps) * bn1["weight"][j] + bn1["bias"][j]
             for j in range(len(row))] + [1.0]
        z = [sum(w1[i, j] * h[j] for j in range(len(h))) for i in range(w1.shape[0])]
        z = [(z[i] - bn2["mean"][i]) / math.sqrt(bn2["var"][i] + eps) * bn2["weight"][i] + bn2["bias"][i]
             for i in range(len(z))]
        g = [float(v * phi_mp(v, 30)) for v in z] + [1.0]
        out.append(sum(w2[0, j] * g[j] for j in range(len(g))))
    return np.array(out)
