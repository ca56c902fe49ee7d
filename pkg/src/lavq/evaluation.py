"""Feature extractor, detection protocol and metric reports built on :mod:`lavq.metrics`."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score, roc_auc_score
from torch import nn

from . import LABELS
from .errors import DataError, ValidationError
from .metrics import (ate, dtw, frechet_distance, knn_precision_recall,
                      membership_inference_risk, patient_wise_metrics, per_patient_scores,
                      score_metric)
from .model import generate_twins, to_tensor
from .separator import ResBlock1d

logger = logging.getLogger(__name__)

FEATURE_DIM = 64
DISEASES = tuple(lab for lab in LABELS if lab != "NORM")
DEFAULT_TAUS = tuple(round(0.1 * i, 1) for i in range(0, 31))


class ResidualClassifier(nn.Module):
    """Small strided residual net; the pooled 64-d activations are the features."""

    def __init__(self, n_classes=len(LABELS), feature_dim=FEATURE_DIM):
        super().__init__()
        self.stem = nn.Conv1d(12, 16, 7, stride=4, padding=3)
        self.blocks = nn.Sequential(ResBlock1d(16, 32, 4), ResBlock1d(32, feature_dim, 4),
                                    ResBlock1d(feature_dim, feature_dim, 4))
        self.fc = nn.Linear(feature_dim, n_classes)

    def features(self, x):
        return self.blocks(F.relu(self.stem(x))).mean(-1)

    def forward(self, x):
        return self.fc(self.features(x))


def _label_ids(records):
    try:
        return torch.tensor([LABELS.index(r.label) for r in records])
    except ValueError as exc:
        raise DataError(f"unknown label: {exc}") from None


class FeatureExtractor:
    """Trained classifier plus batched feature / probability functions."""

    def __init__(self, net: ResidualClassifier):
        self.net = net.eval()

    @torch.no_grad()
    def _run(self, records, fn, batch_size=32):
        if not records:
            return np.zeros((0, FEATURE_DIM))
        out = [fn(to_tensor(records[i:i + batch_size]))
               for i in range(0, len(records), batch_size)]
        return torch.cat(out).double().numpy()

    def features(self, records) -> np.ndarray:
        return self._run(records, self.net.features)

    def predict_proba(self, records) -> np.ndarray:
        return self._run(records, lambda x: torch.softmax(self.net(x).double(), -1))

    def predict(self, records) -> np.ndarray:
        return self.predict_proba(records).argmax(1)

    def accuracy(self, records) -> float:
        return float((self.predict(records) == _label_ids(records).numpy()).mean())


def train_feature_extractor(records, seed: int = 0, epochs: int = 25, batch_size: int = 16,
                            lr: float = 3e-3) -> FeatureExtractor:
    """Fit a 5-class classifier on labelled records; deterministic given ``seed``."""
    records = list(records)
    if len({r.label for r in records}) < 2:
        raise DataError("feature extractor needs at least two distinct labels")
    y = _label_ids(records)
    x = to_tensor(records)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ResidualClassifier()
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        rng = np.random.default_rng([seed, 99])
        net.train()
        for _ in range(epochs):
            order = torch.from_numpy(rng.permutation(len(records)))
            for i in range(0, len(records), batch_size):
                sel = order[i:i + batch_size]
                opt.zero_grad()
                F.cross_entropy(net(x[sel]), y[sel]).backward()
                opt.step()
    return FeatureExtractor(net)


@dataclass
class MetricReport:
    frd: float = float("nan")
    rs: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    dtw_mean: float = float("nan")
    ate: float = float("nan")
    membership_f1_by_tau: dict = field(default_factory=dict)
    patient_acc: float = float("nan")
    patient_f1: float = float("nan")
    ecg_acc: float = float("nan")
    ecg_f1: float = float("nan")
    auroc: float = float("nan")

    def to_json(self) -> str:
        d = asdict(self)
        d["membership_f1_by_tau"] = {repr(float(k)): v
                                     for k, v in sorted(self.membership_f1_by_tau.items())}
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["membership_f1_by_tau"] = {float(k): v for k, v in d["membership_f1_by_tau"].items()}
        return cls(**d)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def soft_iou(a, b) -> float:
    """Weighted Jaccard sum(min) / sum(max) of two non-negative arrays."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.maximum(a, b).sum()
    return float(np.minimum(a, b).sum() / den) if den > 0 else 0.0


def mask_profile(mask, n_samples: int) -> np.ndarray:
    """Fraction of active channels per feature position, upsampled by
    nearest neighbour to ``n_samples``."""
    mask = np.asarray(mask, dtype=float)
    if n_samples % mask.shape[-1]:
        raise ValidationError(f"{n_samples} samples do not split into {mask.shape[-1]} positions")
    return np.repeat(mask.mean(-2), n_samples // mask.shape[-1], axis=-1)


def localization_iou(model, records, n_random: int = 100, seed: int = 0):
    """Mean IoU of the separator mask against ground-truth disease segments,
    and the same for random masks with the per-record density.

    Returns (mean_iou, mean_baseline_iou, mean_density).
    """
    records = [r for r in records if r.label != "NORM"]
    if not records:
        raise DataError("no diseased records to localize")
    model.eval()
    with torch.no_grad():
        masks = model.separate(to_tensor(records), [r.report for r in records]).mask.numpy()
    rng = np.random.default_rng([seed, 11])
    ious, base = [], []
    for a, r in zip(masks, records):
        truth = r.segment_mask().any(0)
        n = r.leads.shape[-1]
        ious.append(soft_iou(mask_profile(a, n), truth))
        k = int(round(a.sum()))
        rand = []
        for _ in range(n_random):
            z = np.zeros(a.size)
            z[rng.choice(a.size, k, replace=False)] = 1
            rand.append(soft_iou(mask_profile(z.reshape(a.shape), n), truth))
        base.append(np.mean(rand))
    return float(np.mean(ious)), float(np.mean(base)), float(masks.mean())


def split_groups(test_records, seed: int = 0):
    """Randomly divide test patients into two even groups: (experimental, control)."""
    pids = sorted({r.patient_id for r in test_records})
    if len(pids) < 2:
        raise DataError("need at least two test patients to form two groups")
    order = np.random.default_rng([seed, 3]).permutation(len(pids))
    half = len(pids) // 2
    return sorted(pids[i] for i in order[:half]), sorted(pids[i] for i in order[half:])


def rotating_references(train_records, n_pres: int, per_pre: int):
    """References for ``per_pre`` twins of each of ``n_pres`` patients, cycling
    through the disease labels and through the train records of each label."""
    pools = {lab: [r for r in train_records if r.label == lab] for lab in DISEASES}
    pools = {k: v for k, v in pools.items() if v}
    if not pools:
        raise DataError("train split has no diseased reference records")
    labels = sorted(pools, key=DISEASES.index)
    refs, used = [], {k: 0 for k in labels}
    for i in range(n_pres):
        row = []
        for j in range(per_pre):
            lab = labels[(i + j) % len(labels)]
            row.append(pools[lab][used[lab] % len(pools[lab])])
            used[lab] += 1
        refs.append(row)
    return refs


def permutation_band(values, n_treated: int, n_perm: int = 2000, seed: int = 0,
                     level: float = 0.95) -> float:
    """``level`` quantile of |mean difference| under random group relabelling."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng([seed, 5])
    diffs = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(values))
        diffs[i] = values[p[:n_treated]].mean() - values[p[n_treated:]].mean()
    return float(np.quantile(np.abs(diffs), level))


@dataclass
class DetectionResult:
    ate: float
    band: float
    treated_acc: list
    control_acc: list
    patient_acc: float
    patient_f1: float
    ecg_acc: float
    ecg_f1: float
    auroc: float
    twins: list
    experimental: list
    control: list


def protocol_twins(model, corpus: dict, twins_per_patient: int = 10, seed: int = 0) -> list:
    """Twins of the experimental group's NORM test records, references
    rotating over the diseased train records."""
    train, test = list(corpus["train"]), list(corpus["test"])
    if not test:
        raise DataError("test split is empty")
    if twins_per_patient <= 0:
        return []
    if model is None:
        raise ValidationError("twins requested but no model given")
    exp, _ = split_groups(test, seed)
    pres = [r for r in test if r.patient_id in exp and r.label == "NORM"]
    refs = rotating_references(train, len(pres), twins_per_patient)
    flat_pre = [p for p, row in zip(pres, refs) for _ in row]
    flat_ref = [r for row in refs for r in row]
    return generate_twins(model, flat_pre, flat_ref)


def membership_curve(extractor: FeatureExtractor, corpus: dict, twins, taus=DEFAULT_TAUS) -> dict:
    """Membership F1 per tau: train split members, val split as holdout."""
    return membership_inference_risk(extractor.features(corpus["train"]),
                                     extractor.features(twins),
                                     extractor.features(corpus["val"]), taus)


def detection_experiment(corpus: dict, model=None, twins_per_patient: int = 10, seed: int = 0,
                         detector_epochs: int = 25) -> DetectionResult:
    """Twin-augmented disease detection on a patient split of the test set.

    The experimental group's normal records spawn ``twins_per_patient``
    twins each; a fresh detector is trained on the real train split plus
    all twins and scored on every test record. ATE is the difference of
    mean per-patient accuracy between the two groups.
    """
    train, test = list(corpus["train"]), list(corpus["test"])
    exp, ctl = split_groups(test, seed)
    twins = protocol_twins(model, corpus, twins_per_patient, seed)
    detector = train_feature_extractor(train + twins, seed=seed, epochs=detector_epochs)
    probs = detector.predict_proba(test)
    preds = probs.argmax(1)
    labels = _label_ids(test).numpy()
    pids = [r.patient_id for r in test]
    scores = per_patient_scores(preds, labels, pids, known_patients=exp + ctl)
    treated = [scores[p][0] for p in exp]
    control = [scores[p][0] for p in ctl]
    sel = np.array([p in exp for p in pids])
    p_acc, p_f1 = patient_wise_metrics(preds[sel], labels[sel], np.asarray(pids)[sel])
    present = np.unique(labels)
    try:
        auroc = float(roc_auc_score(labels, probs[:, present] / probs[:, present].sum(1,
                                    keepdims=True), multi_class="ovr", average="macro",
                                    labels=present))
    except ValueError:
        auroc = float("nan")
    return DetectionResult(
        ate=ate(treated, control),
        band=permutation_band(treated + control, len(treated), seed=seed),
        treated_acc=treated, control_acc=control, patient_acc=p_acc, patient_f1=p_f1,
        ecg_acc=float((preds == labels).mean()),
        ecg_f1=float(f1_score(labels, preds, average="macro", zero_division=0)),
        auroc=auroc, twins=twins, experimental=exp, control=ctl)


def matched_twins(model, corpus: dict):
    """For each diseased test patient: twin of their NORM record made with a
    same-label train reference, paired with their real diseased record."""
    test, train = corpus["test"], corpus["train"]
    refs = {lab: [r for r in train if r.label == lab] for lab in DISEASES}
    by_pid: dict[str, dict] = {}
    for r in test:
        by_pid.setdefault(r.patient_id, {})[r.label == "NORM"] = r
    pres, ref_list, reals = [], [], []
    for i, pid in enumerate(sorted(by_pid)):
        pair = by_pid[pid]
        if True not in pair or False not in pair or not refs.get(pair[False].label):
            continue
        pool = refs[pair[False].label]
        pres.append(pair[True])
        ref_list.append(pool[i % len(pool)])
        reals.append(pair[False])
    if not pres:
        raise DataError("no test patient with both a NORM and a diseased record")
    return generate_twins(model, pres, ref_list), reals


def twin_dtw(model, corpus: dict, derivative_dtw: bool = False) -> float:
    twins, reals = matched_twins(model, corpus)
    return float(np.mean([dtw(t.leads, r.leads, derivative_dtw) for t, r in zip(twins, reals)]))


def evaluate(model, corpus: dict, extractor: FeatureExtractor | None = None,
             twins_per_patient: int = 10, seed: int = 0, k: int = 3,
             taus=DEFAULT_TAUS) -> MetricReport:
    """Full metric report for a trained model on a corpus {split: records}."""
    if extractor is None:
        extractor = train_feature_extractor(corpus["train"], seed=seed)
    det = detection_experiment(corpus, model, twins_per_patient, seed)
    real = [r for r in corpus["test"] if r.label != "NORM"]
    real_f, twin_f = extractor.features(real), extractor.features(det.twins)
    kk = min(k, len(real_f) - 1, len(twin_f) - 1)
    prec, rec, f1 = knn_precision_recall(real_f, twin_f, kk)
    mem = membership_curve(extractor, corpus, det.twins, taus)
    return MetricReport(
        frd=frechet_distance(real_f, twin_f),
        rs=score_metric(extractor.predict_proba(det.twins)),
        precision=prec, recall=rec, f1=f1,
        dtw_mean=twin_dtw(model, corpus),
        ate=det.ate, membership_f1_by_tau=mem,
        patient_acc=det.patient_acc, patient_f1=det.patient_f1,
        ecg_acc=det.ecg_acc, ecg_f1=det.ecg_f1, auroc=det.auroc)
