"""Naive reference implementations used to check the fast paths.

Everything here is deliberately loop-based and imports nothing from the
modules it checks, apart from plain data. Keep it that way.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

# Per-op tolerance budget referenced by the test-suite and acceptance module.
TOLERANCES = {
    "grad_rel": 1e-4,
    "fd_step": 1e-5,
    # absolute scale below which gradient entries count as zero
    "grad_floor": 1e-5,
    "matmul": 1e-12,
    "softmax": 1e-12,
    "softmax_sum": 1e-12,
    "layer_norm": 1e-10,
    "weighted_average": 1e-12,
    "asp": 1e-10,
    "asp_invariance": 1e-10,
    "distill": 1e-10,
    "expected_l0": 1e-12,
    "lora_merge": 1e-9,
    "lora_explicit": 1e-12,
    "extraction": 1e-9,
    "head_mask": 1e-12,
    "cosine": 1e-12,
    "arcface": 1e-10,
    "adamw": 1e-12,
}


# -- linear algebra / normalisations ------------------------------------------

def matmul_loops(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def softmax_direct(x):
    e = [math.exp(v) for v in x]
    tot = sum(e)
    return np.array([v / tot for v in e])


def layer_norm_direct(x, gain, bias, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return np.array([(x[i] - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i in range(n)])


def weighted_average_direct(layers, w):
    """layers: list of (T, D) arrays; w: raw layer weights."""
    den = sum(math.exp(v) for v in w)
    out = np.zeros_like(np.asarray(layers[0], dtype=float))
    for i, h in enumerate(layers):
        out += (math.exp(w[i]) / den) * np.asarray(h, dtype=float)
    return out


def asp_direct(x, W, b, v, eps=1e-6):
    """Attentive statistics pooling over one (T, C) utterance, loop form."""
    x = np.asarray(x, dtype=float)
    T, C = x.shape
    logits = []
    for t in range(T):
        hidden = np.tanh(x[t] @ W + b)
        logits.append(float(np.dot(v, hidden)))
    m = max(logits)
    e = [math.exp(l - m) for l in logits]
    z = sum(e)
    alpha = [ei / z for ei in e]
    mu = np.zeros(C)
    m2 = np.zeros(C)
    for t in range(T):
        mu += alpha[t] * x[t]
        m2 += alpha[t] * x[t] ** 2
    sigma = np.array([math.sqrt(max(m2[c] - mu[c] ** 2, eps)) for c in range(C)])
    return np.concatenate([mu, sigma])


def distill_direct(teacher, student, l1="mean", eps=1e-8):
    """Double loop over layers and frames for one utterance; stacks are lists of (T, D)."""
    total = 0.0
    for h, hs in zip(teacher, student):
        h = np.asarray(h, dtype=float)
        hs = np.asarray(hs, dtype=float)
        for t in range(h.shape[0]):
            a, b = h[t], hs[t]
            d = sum(abs(a[i] - b[i]) for i in range(len(a)))
            if l1 == "mean":
                d /= len(a)
            na = math.sqrt(sum(v * v for v in a))
            nb = math.sqrt(sum(v * v for v in b))
            cos = sum(a[i] * b[i] for i in range(len(a))) / max(na * nb, eps)
            total += d - cos
    return total


def arcface_direct(emb, label, weight, margin, scale):
    """ArcFace cross-entropy for one sample via explicit angles."""
    e = np.asarray(emb, dtype=float)
    e = e / math.sqrt(sum(v * v for v in e))
    logits = []
    for j, row in enumerate(np.asarray(weight, dtype=float)):
        r = row / math.sqrt(sum(v * v for v in row))
        c = max(-1.0, min(1.0, float(np.dot(e, r))))
        if j == label:
            theta = math.acos(c)
            if theta + margin <= math.pi:
                c = math.cos(theta + margin)
            else:
                c = c - margin * math.sin(math.pi - margin)
        logits.append(scale * c)
    m = max(logits)
    lse = m + math.log(sum(math.exp(l - m) for l in logits))
    return lse - logits[label]


# -- pruning --------------------------------------------------------------------

def gate_open_prob_direct(log_alpha, beta=2 / 3, low=-0.1, high=1.1):
    return 1.0 / (1.0 + math.exp(-(log_alpha - beta * math.log(-low / high))))


def expected_l0_loop(counts, log_alphas, beta=2 / 3, low=-0.1, high=1.1):
    total = 0.0
    for c, la in zip(counts, log_alphas):
        total += c * gate_open_prob_direct(la, beta, low, high)
    return total


def hard_concrete_mc(log_alpha, n, rng, beta=2 / 3, low=-0.1, high=1.1):
    """Draw ``n`` gate samples; returns (z, stretched pre-clamp values)."""
    u = rng.uniform(1e-12, 1 - 1e-12, size=n)
    s = 1.0 / (1.0 + np.exp(-((np.log(u) - np.log(1 - u) + log_alpha) / beta)))
    raw = s * (high - low) + low
    return np.minimum(1.0, np.maximum(0.0, raw)), raw


# -- detection metrics ----------------------------------------------------------

def _operating_points(scores, labels):
    """(n_miss, n_false_accept) for every candidate threshold.

    Candidates are -inf, midpoints between consecutive distinct scores, +inf;
    a trial is accepted when its score exceeds the threshold. Each threshold
    is counted independently against the full trial list.
    """
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    uniq = np.unique(s)
    cands = [-math.inf] + [(uniq[i] + uniq[i + 1]) / 2 for i in range(len(uniq) - 1)] + [math.inf]
    miss = np.empty(len(cands), dtype=np.int64)
    fa = np.empty(len(cands), dtype=np.int64)
    for k, thr in enumerate(cands):
        acc = s > thr
        miss[k] = np.count_nonzero(lab & ~acc)
        fa[k] = np.count_nonzero(~lab & acc)
    return miss, fa


def oracle_metric(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Ground-truth (EER, minDCF) by exhaustive enumeration.

    EER is the equal-error point of the ROC convex hull: the smallest t such
    that (t, t) is a convex combination of two operating points. Every pair of
    operating points on opposite sides of the diagonal is examined in exact
    integer arithmetic.
    """
    labels = [bool(l) for l in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    if n_t == 0 or n_n == 0:
        raise ValueError("need both target and nontarget trials")
    if len(labels) > 5000:
        raise ValueError("oracle limited to 5000 trials")
    miss, fa = _operating_points(scores, labels)

    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    best = math.inf
    for m, f in zip(miss.tolist(), fa.tolist()):
        cost = c_miss * p_target * (m / n_t) + c_fa * (1 - p_target) * (f / n_n)
        best = min(best, cost / norm)

    # rates scaled by n_t * n_n become integers
    frr = miss * n_n
    far = fa * n_t
    d = frr - far
    lo = np.flatnonzero(d <= 0)
    hi = np.flatnonzero(d >= 0)
    di = d[lo][:, None]
    dj = d[hi][None, :]
    fi = frr[lo][:, None]
    fj = frr[hi][None, :]
    den = dj - di  # >= 0
    num = dj * fi - di * fj
    on_diag = den == 0
    num = np.where(on_diag, fi, num)
    den = np.where(on_diag, 1, den)
    vals = num / den
    vmin = vals.min()
    cand = np.argwhere(vals <= vmin * (1 + 1e-9) + 1e-300)
    exact = min(Fraction(int(num[i, j]), int(den[i, j])) for i, j in cand)
    return float(exact / (n_t * n_n)), best


# -- finite differences ----------------------------------------------------------

def finite_diff_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0
