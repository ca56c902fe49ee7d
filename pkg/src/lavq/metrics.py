"""Fidelity, utility and privacy metrics. Pure functions of their inputs."""
from __future__ import annotations

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist
from sklearn.metrics import f1_score

from .errors import DataError, ValidationError

COV_SHRINK = 1e-6


def _features(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValidationError(f"{name}: expected an N x d matrix")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name}: non-finite features")
    return a


def gaussian_moments(x):
    x = _features(x, "features")
    if x.shape[0] < 2:
        raise ValidationError("need at least 2 samples to fit a Gaussian")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return x.mean(axis=0), cov + COV_SHRINK * np.eye(cov.shape[0])


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the root is taken through the symmetric product
    S_a^(1/2) S_b S_a^(1/2), which has the same eigenvalues as S_a S_b.
    """
    ra = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh((ra @ cov_b @ ra + (ra @ cov_b @ ra).T) / 2)
    tr_root = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_root, 0.0))


def frechet_distance(a, b) -> float:
    return frechet_from_moments(*gaussian_moments(a), *gaussian_moments(b))


def score_metric(probabilities) -> float:
    """exp(mean_x KL(p(y|x) || p(y))); 1 for uninformative rows, at most the class count."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValidationError("probabilities must be a non-empty N x classes matrix")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValidationError("every row must be a probability distribution")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def knn_radii(x, k):
    d = cdist(x, x)
    return np.sort(d, axis=1)[:, k]  # column 0 is the point itself


def knn_precision_recall(real, gen, k: int = 3):
    """Improved precision/recall: manifolds are unions of k-NN balls."""
    real, gen = _features(real, "real"), _features(gen, "gen")
    if not 1 <= k < min(len(real), len(gen)):
        raise ValidationError(f"k must be in [1, {min(len(real), len(gen)) - 1}]")
    d = cdist(real, gen)
    precision = float((d <= knn_radii(real, k)[:, None]).any(axis=0).mean())
    recall = float((d <= knn_radii(gen, k)[None, :]).any(axis=1).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@njit(cache=True)
def _dtw_core(x, y):
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.empty(m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        xi = x[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(xi - y[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def derivative(x):
    """Derivative estimate used by derivative DTW; endpoints copy their neighbours."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        return np.zeros_like(x)
    d = np.empty_like(x)
    d[1:-1] = ((x[1:-1] - x[:-2]) + (x[2:] - x[:-2]) / 2) / 2
    d[0], d[-1] = d[1], d[-2]
    return d


def dtw(x, y, derivative_dtw: bool = False) -> float:
    """Classic DTW with |a - b| local cost. 2-D inputs are (leads, samples);
    the result is then the mean over leads."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValidationError("dtw needs non-empty sequences")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("dtw needs finite sequences")
    if x.ndim == 2 or y.ndim == 2:
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        if x.shape[0] != y.shape[0]:
            raise ValidationError("multi-lead inputs need the same lead count")
        return float(np.mean([dtw(a, b, derivative_dtw) for a, b in zip(x, y)]))
    if derivative_dtw:
        x, y = derivative(x), derivative(y)
    return float(_dtw_core(np.ascontiguousarray(x), np.ascontiguousarray(y)))


def ate(acc_treated, acc_control) -> float:
    t, c = np.asarray(acc_treated, dtype=float), np.asarray(acc_control, dtype=float)
    if t.size == 0 or c.size == 0:
        raise ValidationError("both groups need at least one patient")
    return float(t.mean() - c.mean())


def per_patient_scores(preds, labels, patient_ids, known_patients=None) -> dict:
    """patient id -> (accuracy, macro F1) over that patient's records."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    pids = np.asarray(patient_ids)
    if not (len(preds) == len(labels) == len(pids)):
        raise ValidationError("preds, labels and patient_ids must be aligned")
    if known_patients is not None:
        unknown = set(pids.tolist()) - set(known_patients)
        if unknown:
            raise DataError(f"unknown patient ids: {sorted(unknown)}")
    out = {}
    for pid in dict.fromkeys(pids.tolist()):
        sel = pids == pid
        acc = float((preds[sel] == labels[sel]).mean())
        f1 = float(f1_score(labels[sel], preds[sel], average="macro", zero_division=0))
        out[pid] = (acc, f1)
    return out


def patient_wise_metrics(preds, labels, patient_ids, known_patients=None):
    """Unweighted mean over patients of per-patient accuracy and macro F1."""
    scores = per_patient_scores(preds, labels, patient_ids, known_patients)
    if not scores:
        raise ValidationError("no records")
    acc = np.mean([a for a, _ in scores.values()])
    f1 = np.mean([f for _, f in scores.values()])
    return float(acc), float(f1)


def membership_distances(train_feats, synth_feats, holdout_feats):
    """(min distance to synth per target, membership truth, mean target-synth distance)."""
    train = _features(train_feats, "train")
    synth = _features(synth_feats, "synth")
    hold = _features(holdout_feats, "holdout")
    if len(synth) == 0:
        raise ValidationError("synthetic set is empty")
    if len(train) == 0 or len(hold) == 0:
        raise ValidationError("train and holdout sets must be non-empty")
    targets = np.vstack([train, hold])
    d = cdist(targets, synth)
    truth = np.r_[np.ones(len(train), bool), np.zeros(len(hold), bool)]
    return d.min(axis=1), truth, float(d.mean())


def _f1(pred, truth):
    tp = np.sum(pred & truth)
    if tp == 0:
        return 0.0
    p, r = tp / pred.sum(), tp / truth.sum()
    return float(2 * p * r / (p + r))


def membership_inference_risk(train_feats, synth_feats, holdout_feats, tau_values) -> dict:
    """F1 of the nearest-synthetic-neighbour membership attack for each tau.

    A target is claimed to be a training member when some synthetic sample
    lies closer than ``tau * mean``, ``mean`` being the average
    target-to-synthetic distance.
    """
    dmin, truth, mean = membership_distances(train_feats, synth_feats, holdout_feats)
    return {float(t): _f1(dmin < float(t) * mean, truth) for t in tau_values}
