"""Trial scoring, EER / minDCF, AS-norm and QMF calibration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SIGMA_EPS = 1e-8
DEFAULT_P_TARGET = 0.01


class MetricError(ValueError):
    pass


# -- trials and scores ---------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    label: int  # 1 target, 0 nontarget
    enroll: str
    test: str


@dataclass
class TrialList:
    entries: list[Trial]

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.entries], dtype=np.int64)

    def check_both_classes(self):
        lab = self.labels
        if lab.size == 0 or lab.min() == lab.max():
            raise MetricError("trial list needs both target and nontarget trials")

    @classmethod
    def from_tuples(cls, rows) -> "TrialList":
        return cls([Trial(int(l), str(e), str(t)) for l, e, t in rows])


@dataclass
class ScoreSet:
    trials: TrialList
    raw: np.ndarray
    normalized: np.ndarray | None = None
    calibrated: np.ndarray | None = None

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (len(self.trials),):
            raise MetricError(f"{self.raw.size} scores for {len(self.trials)} trials")
        if not np.all(np.isfinite(self.raw)):
            raise MetricError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return self.trials.labels

    def scores(self, which: str = "raw") -> np.ndarray:
        s = getattr(self, which)
        if s is None:
            raise MetricError(f"score set has no {which} scores")
        return s


# -- embeddings ---------------------------------------------------------------------

def _unit(v: np.ndarray, what: str = "embedding") -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise MetricError(f"zero-norm {what}")
    return v / n


def enroll_average(embs) -> np.ndarray:
    """Mean of a speaker's enrollment embeddings, length-normalised."""
    e = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    if e.shape[0] == 0:
        raise MetricError("no enrollment embeddings")
    m = e.mean(axis=0)
    if np.linalg.norm(m) <= 1e-12 * max(1.0, np.abs(e).max()):
        raise MetricError("enrollment embeddings average to zero")
    return m / np.linalg.norm(m)


def cosine_score(e1, e2) -> float:
    a = _unit(np.asarray(e1, dtype=np.float64))
    b = _unit(np.asarray(e2, dtype=np.float64))
    # symmetric by construction: the elementwise products commute
    return float(np.clip(np.sum(a * b), -1.0, 1.0))


def score_trials(trials: TrialList, embeddings: dict[str, np.ndarray]) -> ScoreSet:
    missing = sorted({u for t in trials.entries for u in (t.enroll, t.test)} - set(embeddings))
    if missing:
        raise MetricError(f"no embedding for {len(missing)} utterances, e.g. {missing[:3]}")
    raw = [cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials.entries]
    return ScoreSet(trials, np.array(raw))


# -- metrics ------------------------------------------------------------------------------

def _split(scores, labels=None):
    if isinstance(scores, ScoreSet):
        labels = scores.labels if labels is None else labels
        scores = scores.scores("calibrated" if scores.calibrated is not None else
                               "normalized" if scores.normalized is not None else "raw")
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels).astype(bool)
    if s.shape != lab.shape:
        raise MetricError("scores and labels differ in length")
    n_t = int(lab.sum())
    if n_t == 0 or n_t == lab.size:
        raise MetricError("need both target and nontarget trials")
    return s, lab


def operating_points(scores, labels=None):
    """Sweep thresholds (-inf, midpoints of distinct scores, +inf).

    Returns (thresholds, n_miss, n_false_accept, n_target, n_nontarget);
    a trial is accepted when its score is strictly above the threshold.
    """
    s, lab = _split(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ss, ll = s[order], lab[order]
    uniq, first = np.unique(ss, return_index=True)
    # number of targets / nontargets with score <= uniq[k]
    tgt_le = np.cumsum(ll)[np.r_[first[1:] - 1, ss.size - 1]]
    non_le = np.cumsum(~ll)[np.r_[first[1:] - 1, ss.size - 1]]
    n_t, n_n = int(ll.sum()), int((~ll).sum())
    miss = np.concatenate([[0], tgt_le]).astype(np.int64)
    fa = np.concatenate([[n_n], n_n - non_le]).astype(np.int64)
    thr = np.concatenate([[-math.inf], (uniq[:-1] + uniq[1:]) / 2, [math.inf]])
    return thr, miss, fa, n_t, n_n


def compute_eer(scores, labels=None) -> tuple[float, float]:
    """Equal error rate of the ROC convex hull and the matching threshold.

    Operating points are interpolated linearly along the hull; for a step ROC
    this returns the smallest t with (FAR, FRR) = (t, t) reachable by mixing
    two thresholds.
    """
    thr, miss, fa, n_t, n_n = operating_points(scores, labels)
    frr = [int(m) * n_n for m in miss]
    far = [int(f) * n_t for f in fa]
    # lower hull in the (FAR, FRR) plane, monotone chain over FAR ascending
    pts = sorted(range(len(thr)), key=lambda k: (far[k], frr[k]))
    hull: list[int] = []
    for k in pts:
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            cross = (far[j] - far[i]) * (frr[k] - frr[i]) - (frr[j] - frr[i]) * (far[k] - far[i])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    for a, b in zip(hull[:-1], hull[1:]):
        di, dj = frr[a] - far[a], frr[b] - far[b]
        if (di <= 0 <= dj) or (dj <= 0 <= di):
            if dj == di:
                val = Fraction(frr[a])
                w = 0.0
            else:
                val = Fraction(dj * frr[a] - di * frr[b], dj - di)
                w = -di / (dj - di)
            eer = float(val / (n_t * n_n))
            ta, tb = thr[a], thr[b]
            if math.isinf(ta):
                t = tb
            elif math.isinf(tb):
                t = ta
            else:
                t = (1 - w) * ta + w * tb
            return eer, float(t)
    raise MetricError("hull never crosses the diagonal")  # unreachable for valid input


def compute_mindcf(scores, labels=None, p_target: float = DEFAULT_P_TARGET, c_miss: float = 1.0,
                   c_fa: float = 1.0) -> float:
    """Minimum normalised detection cost over all thresholds."""
    if not 0.0 < p_target < 1.0:
        raise MetricError("p_target must lie in (0, 1)")
    _, miss, fa, n_t, n_n = operating_points(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    cost = c_miss * p_target * (miss / n_t) + c_fa * (1 - p_target) * (fa / n_n)
    return float(np.min(cost / norm))


def metrics(scores, labels=None, p_target: float = DEFAULT_P_TARGET) -> dict:
    eer, thr = compute_eer(scores, labels)
    return {"eer": eer, "threshold": thr, "mindcf": compute_mindcf(scores, labels, p_target)}


# -- AS-norm -----------------------------------------------------------------------------

@dataclass
class Cohort:
    """Averaged, length-normalised embeddings of impostor speakers."""

    embeddings: np.ndarray
    top_k: int | None = None

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if e.shape[0] == 0:
            raise MetricError("empty cohort")
        self.embeddings = _unit(e, "cohort embedding")
        if self.top_k is None:
            self.top_k = min(300, self.size)
        if not 1 <= self.top_k <= self.size:
            raise MetricError(f"top_k={self.top_k} outside [1, {self.size}]")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def from_speakers(cls, embs_by_speaker: dict[str, list], top_k: int | None = None) -> "Cohort":
        rows = [enroll_average(embs_by_speaker[s]) for s in sorted(embs_by_speaker)]
        return cls(np.stack(rows), top_k)

    def stats(self, e: np.ndarray) -> tuple[float, float]:
        """Mean and std of the top-K cohort scores of one embedding."""
        sc = self.embeddings @ _unit(np.asarray(e, dtype=np.float64))
        top = np.sort(sc)[::-1][: self.top_k]
        return float(top.mean()), float(top.std())


def as_norm(s: ScoreSet, embeddings: dict[str, np.ndarray], cohort: Cohort, eps: float = SIGMA_EPS) -> ScoreSet:
    """Symmetric adaptive s-norm; fills ``s.normalized`` and returns ``s``."""
    cache: dict[str, tuple[float, float]] = {}

    def stat(u):
        if u not in cache:
            cache[u] = cohort.stats(embeddings[u])
        return cache[u]

    out = np.empty_like(s.raw)
    for i, t in enumerate(s.trials.entries):
        mu_e, sd_e = stat(t.enroll)
        mu_t, sd_t = stat(t.test)
        x = s.raw[i]
        out[i] = 0.5 * ((x - mu_e) / max(sd_e, eps) + (x - mu_t) / max(sd_t, eps))
    s.normalized = out
    return s


def cohort_means(s: ScoreSet, embeddings: dict[str, np.ndarray], cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    mu_e = np.array([cohort.stats(embeddings[t.enroll])[0] for t in s.trials.entries])
    mu_t = np.array([cohort.stats(embeddings[t.test])[0] for t in s.trials.entries])
    return mu_e, mu_t


# -- QMF ------------------------------------------------------------------------------------

QMF_FEATURES = ("score", "log_enroll_dur", "log_test_dur", "mu_enroll", "mu_test")


@dataclass
class QMFModel:
    weights: np.ndarray
    bias: float
    kept: list[int] = field(default_factory=list)
    feature_names: tuple = QMF_FEATURES
    grad_norm: float = 0.0
    iterations: int = 0

    def __call__(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))[:, self.kept]
        return x @ self.weights + self.bias


def _logistic_objective(w, X, y, l2):
    z = X @ w
    # mean negative log-likelihood, stable form
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    p = 1.0 / (1.0 + np.exp(-z))
    reg = np.r_[np.full(w.size - 1, l2), 0.0]
    f = nll + 0.5 * np.sum(reg * w * w)
    g = X.T @ (p - y) / y.size + reg * w
    H = (X * (p * (1 - p))[:, None]).T @ X / y.size + np.diag(reg)
    return f, g, H


def fit_logistic(X, y, l2: float = 1e-6, tol: float = 1e-6, max_iter: int = 200) -> tuple[np.ndarray, float, float, int]:
    """Newton's method with backtracking; last coefficient is the bias."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    w = np.zeros(Xb.shape[1])
    f, g, H = _logistic_objective(w, Xb, y, l2)
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return w[:-1], float(w[-1]), gn, it
        step = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), g)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new, g_new, H_new = _logistic_objective(w_new, Xb, y, l2)
            if f_new <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        w, f, g, H = w_new, f_new, g_new, H_new
    gn = float(np.linalg.norm(g))
    if gn >= tol:
        raise MetricError(f"logistic regression did not converge (|grad|={gn:.2e})")
    return w[:-1], float(w[-1]), gn, max_iter


def qmf_features(s: ScoreSet, durations: dict[str, float], embeddings: dict[str, np.ndarray],
                 cohort: Cohort, which: str = "normalized") -> np.ndarray:
    """[score, log enroll duration, log test duration, mu_e, mu_t] per trial."""
    sc = s.scores(which)
    mu_e, mu_t = cohort_means(s, embeddings, cohort)
    de = np.log([durations[t.enroll] for t in s.trials.entries])
    dt = np.log([durations[t.test] for t in s.trials.entries])
    return np.column_stack([sc, de, dt, mu_e, mu_t])


def qmf_calibrate(features, labels, l2: float = 1e-6, names=QMF_FEATURES) -> QMFModel:
    """Fit a QMF logistic calibrator on labelled development trials."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[0] != y.size:
        raise MetricError("features and labels differ in length")
    if y.size == 0 or y.min() == y.max():
        raise MetricError("QMF fitting needs both target and nontarget trials")
    names = tuple(names)[: X.shape[1]] if len(names) >= X.shape[1] else tuple(f"f{i}" for i in range(X.shape[1]))
    kept = []
    for j in range(X.shape[1]):
        if np.ptp(X[:, j]) <= 1e-12 * max(1.0, np.abs(X[:, j]).max()):
            log.warning("QMF: dropping constant feature %s", names[j])
        else:
            kept.append(j)
    if not kept:
        raise MetricError("every QMF feature is constant")
    w, b, gn, it = fit_logistic(X[:, kept], y, l2=l2)
    return QMFModel(w, b, kept, names, gn, it)


def apply_qmf(s: ScoreSet, model: QMFModel, features) -> ScoreSet:
    s.calibrated = model(features)
    return s


# -- files ---------------------------------------------------------------------------------------

def write_trials(path: str, trials: TrialList):
    with open(path, "w") as f:
        for t in trials.entries:
            f.write(f"{t.label} {t.enroll} {t.test}\n")


def read_trials(path: str) -> TrialList:
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise MetricError(f"{path}:{n}: expected 'label enroll test' with label 0/1")
            rows.append(Trial(int(parts[0]), parts[1], parts[2]))
    return TrialList(rows)


def write_scores(path: str, s: ScoreSet, which: str = "raw"):
    vals = s.scores(which)
    with open(path, "w") as f:
        for t, v in zip(s.trials.entries, vals):
            f.write(f"{t.enroll} {t.test} {float(v)!r}\n")


def read_scores(path: str, trials: TrialList) -> ScoreSet:
    got = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise MetricError(f"{path}:{n}: expected 'enroll test score'")
            got[(parts[0], parts[1])] = float(parts[2])
    try:
        raw = [got[(t.enroll, t.test)] for t in trials.entries]
    except KeyError as e:
        raise MetricError(f"score file lacks trial {e.args[0]}") from None
    return ScoreSet(trials, np.array(raw))


def save_embeddings(path: str, embeddings: dict[str, np.ndarray]):
    save_checkpoint(path, {k: np.asarray(v, dtype=np.float64) for k, v in embeddings.items()})


def load_embeddings(path: str) -> dict[str, np.ndarray]:
    return load_checkpoint(path)
