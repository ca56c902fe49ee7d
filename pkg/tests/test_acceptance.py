"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk models (full, no L_rec, no VQ) are trained once per session on the
60-patient synthetic corpus with seed 0.
"""
import math
import time

import numpy as np
import pytest
import torch

from lavq.checkpoint import checkpoint_bytes
from lavq.config import TrainConfig
from lavq.data import CorpusConfig, DiseaseSpec, records_by_split, synth_corpus, synth_record
from lavq.discriminator import gaussian_blur2
from lavq.errors import BadMagicError
from lavq.evaluation import (DEFAULT_TAUS, detection_experiment, evaluate, localization_iou,
                             membership_curve, protocol_twins, train_feature_extractor,
                             twin_dtw)
from lavq.generator import adain, instance_stats
from lavq.metrics import (dtw, frechet_distance, frechet_from_moments, knn_precision_recall,
                          membership_inference_risk, score_metric)
from lavq.recordio import decode_record, encode_record, read_record, write_record
from lavq.separator import Separator, quantize
from lavq.trainer import ABLATIONS, train

from oracles import dtw_oracle, frechet_oracle, knn_oracle, membership_oracle, score_oracle
from probes import generator_loss_probes, logit_probes, probe_records, within

SEED = 0


@pytest.fixture(scope="session")
def corpus():
    return records_by_split(synth_corpus(CorpusConfig(), SEED))


def _desk(corpus, name):
    cfg = TrainConfig.desk(seed=SEED).with_overrides(ABLATIONS[name])
    t0 = time.perf_counter()
    trainer = train(cfg, corpus["train"], corpus["val"], check_isolation=True)
    return trainer, time.perf_counter() - t0


@pytest.fixture(scope="session")
def full(corpus):
    return _desk(corpus, "full")


@pytest.fixture(scope="session")
def no_rec(corpus):
    return _desk(corpus, "no_rec")[0]


@pytest.fixture(scope="session")
def no_vq(corpus):
    return _desk(corpus, "no_vq")[0]


@pytest.fixture(scope="session")
def extractor(corpus):
    return train_feature_extractor(corpus["train"], seed=SEED)


# -- 1: oracle equivalence ---------------------------------------------------------------

def test_c01_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad = []
    for trial in range(10):
        a = rng.normal(size=(30, 3)) @ rng.normal(size=(3, 3))
        b = rng.normal(0.5, 1.5, size=(25, 3))
        if abs(frechet_distance(a, b) - frechet_oracle(a, b)) > 1e-6:
            bad.append(f"frechet#{trial}")
        real, gen = rng.normal(size=(15, 2)), rng.normal(0.3, 1.1, size=(12, 2))
        if knn_precision_recall(real, gen, 3) != pytest.approx(knn_oracle(real, gen, 3), abs=0):
            bad.append(f"knn#{trial}")
        x = rng.integers(-5, 6, size=int(rng.integers(1, 7))).tolist()
        y = rng.integers(-5, 6, size=int(rng.integers(1, 7))).tolist()
        if dtw(x, y) != dtw_oracle(x, y):
            bad.append(f"dtw#{trial}")
        train_f, hold_f = rng.normal(size=(12, 2)), rng.normal(size=(10, 2))
        synth_f = np.vstack([train_f[:4] + 0.1 * rng.normal(size=(4, 2)), rng.normal(size=(4, 2))])
        taus = [0.0, 0.1, 0.3, 0.5, 1.0, 2.0]
        got = membership_inference_risk(train_f, synth_f, hold_f, taus)
        want = membership_oracle(train_f.tolist(), synth_f.tolist(), hold_f.tolist(), taus)
        if any(abs(got[t] - want[t]) > 1e-12 for t in taus):
            bad.append(f"membership#{trial}")
        p = rng.dirichlet(np.full(5, 0.7), size=20)
        if abs(score_metric(p) - score_oracle(p)) > 1e-8:
            bad.append(f"score#{trial}")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 60
    criterion(1, ok, f"mismatches={bad or 'none'} time={elapsed:.1f}s (< 60 s)")
    assert ok


# -- 2: analytic fixtures ------------------------------------------------------------------

def test_c02_analytic_fixtures(criterion):
    fd = frechet_from_moments(np.zeros(1), np.eye(1), np.ones(1), np.eye(1))
    rs_uniform = score_metric(np.full((10, 5), 0.2))
    rs_onehot = score_metric(np.eye(5)[np.arange(25) % 5])
    x = np.sin(np.linspace(0, 5, 40))
    y = torch.randn(2, 4, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    mu, sd = instance_stats(y)
    adain_err = (adain(y, mu, sd) - y).abs().max().item()
    blur = gaussian_blur2(torch.tensor([1.0, 3.0, 5.0, 7.0])).tolist()
    checks = {"FD": abs(fd - 1) <= 1e-6, "RS uniform": abs(rs_uniform - 1) <= 1e-6,
              "RS one-hot": abs(rs_onehot - 5) <= 1e-6, "dtw(x,x)": dtw(x, x) == 0.0,
              "AdaIN identity": adain_err <= 1e-5, "blur": blur == [2.0, 6.0]}
    ok = all(checks.values())
    criterion(2, ok, f"FD={fd:.9f} RS={rs_uniform:.9f}/{rs_onehot:.9f} "
                     f"adain_err={adain_err:.1e} blur={blur} failed={[k for k, v in checks.items() if not v]}")
    assert ok


# -- 3: separator algebra ------------------------------------------------------------------

def test_c03_separator_algebra(criterion):
    torch.manual_seed(3)
    sep = Separator(TrainConfig()).double()
    texts = ["anterior infarction", "st depression", "complete block", "normal ecg", "hypertrophy"]
    g = torch.Generator().manual_seed(33)
    disjoint = zeros_ok = True
    with torch.no_grad():
        for start in range(0, 100, 20):
            x = torch.randn(20, 12, 4096, generator=g, dtype=torch.float64)
            t = [texts[(start + i) % len(texts)] for i in range(20)]
            out = sep(x, t)
            disjoint &= torch.count_nonzero(out.f_d * out.f_p).item() == 0
            z = sep(x, t, mask=torch.zeros(64, 8))
            zeros_ok &= (torch.count_nonzero(z.f_d).item() == 0 and torch.equal(z.f_p, z.e)
                         and z.vq_loss.item() == 0.0)
    e = torch.randn(50, 8, generator=g, dtype=torch.float64)
    cb = torch.randn(16, 8, generator=g, dtype=torch.float64)
    _, q, _ = quantize(e, cb)
    idempotent = torch.equal(quantize(q, cb)[1], q)
    tie_cb = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    tie = quantize(torch.tensor([[0.0, 0.0], [1.0, 0.0]]), tie_cb)[2].tolist() == [0, 0]
    e.requires_grad_(True)
    w = torch.randn(50, 8, generator=g, dtype=torch.float64)
    (quantize(e, cb)[0] * w).sum().backward()
    st = torch.equal(e.grad, w)
    checks = {"f_d*f_p=0": disjoint, "A=0": zeros_ok, "idempotent": idempotent, "tie": tie,
              "straight-through": st}
    ok = all(checks.values())
    criterion(3, ok, "100 random inputs; " + " ".join(f"{k}={'ok' if v else 'NO'}"
                                                      for k, v in checks.items()))
    assert ok


# -- 4: differentiability -----------------------------------------------------------------

def test_c04_finite_differences(criterion):
    gen = generator_loss_probes(probe_records(), use_vq=True)
    logit = logit_probes()
    rel = lambda pairs: max(abs(fd - g) / abs(g) for fd, g in pairs)
    ok = within(gen, 2e-3) and within(logit, 2e-3) and len(gen) == len(logit) == 5
    criterion(4, ok, f"generator loss max rel err={rel(gen):.1e}, "
                     f"discriminator logit max rel err={rel(logit):.1e} (tol 2e-3, 5 probes each)")
    assert ok


# -- 5: training smoke ----------------------------------------------------------------------

def test_c05_training_smoke(criterion, full):
    trainer, seconds = full
    h = trainer.history
    first, last = h[0]["val_l_rec"], h[-1]["val_l_rec"]
    finite = all(math.isfinite(v) for row in trainer.loss_log for k, v in row.items()
                 if k.startswith(("l_", "d_", "g_")))
    isolated = all(r["d_step_isolated"] and r["g_step_isolated"] for r in h)
    ok = (len(h) == 30 and last <= 0.5 * first and finite and isolated and seconds < 900)
    criterion(5, ok, f"val L_rec epoch1={first:.1f} final={last:.1f} ratio={last / first:.3f} "
                     f"(<= 0.5) finite={finite} isolation={isolated} time={seconds:.0f}s")
    assert ok


# -- 6: localization ---------------------------------------------------------------------------

def test_c06_localization(criterion, full, corpus):
    iou, base, density = localization_iou(full[0].model, corpus["val"], n_random=100, seed=SEED)
    ok = iou >= 2 * base
    criterion(6, ok, f"mean IoU={iou:.4f} random baseline={base:.4f} "
                     f"ratio={iou / base:.2f} (>= 2) mask density={density:.3f}")
    assert ok


# -- 7: utility direction ------------------------------------------------------------------------

def test_c07_utility_direction(criterion, full, corpus):
    det = detection_experiment(corpus, full[0].model, twins_per_patient=10, seed=SEED)
    null = detection_experiment(corpus, None, twins_per_patient=0, seed=SEED)
    ok = det.ate > 0 and abs(null.ate) < null.band
    criterion(7, ok, f"ATE={det.ate:+.4f} (> 0) with {len(det.twins)} twins; "
                     f"null |ATE|={abs(null.ate):.4f} band={null.band:.4f}")
    assert ok


# -- 8: ablation direction -------------------------------------------------------------------------

def test_c08_ablation_direction(criterion, full, no_rec, corpus):
    d_full = twin_dtw(full[0].model, corpus)
    d_norec = twin_dtw(no_rec.model, corpus)
    ok = d_full < d_norec
    criterion(8, ok, f"DTW full={d_full:.2f} < no L_rec={d_norec:.2f}")
    assert ok


# -- 9: privacy shape ---------------------------------------------------------------------------------

def test_c09_privacy_shape(criterion, full, no_vq, corpus, extractor):
    taus = list(DEFAULT_TAUS) + [1e6]
    curve = membership_curve(extractor, corpus, protocol_twins(full[0].model, corpus, 10, SEED),
                             taus)
    f1 = [curve[t] for t in taus]
    drops = [(taus[i], taus[i + 1]) for i in range(len(f1) - 1) if f1[i + 1] < f1[i]]
    p = len(corpus["train"]) / (len(corpus["train"]) + len(corpus["val"]))
    limit = 2 * p / (p + 1)
    saturates = abs(f1[-1] - limit) <= 1e-12
    novq = membership_curve(extractor, corpus, protocol_twins(no_vq.model, corpus, 10, SEED),
                            [1.0])[1.0]
    ok = not drops and saturates and curve[1.0] <= novq
    criterion(9, ok, f"decreasing steps={drops or 'none'}; F1(max tau)={f1[-1]:.4f} "
                     f"limit 2p/(p+1)={limit:.4f}; F1(tau=1) full={curve[1.0]:.4f} "
                     f"no-VQ={novq:.4f}")
    assert ok


# -- 10: determinism and formats -----------------------------------------------------------------------

def test_c10_determinism_and_formats(criterion, corpus, tmp_path):
    cfg = TrainConfig.desk(seed=SEED, epochs=2)
    a = train(cfg, corpus["train"], corpus["val"])
    b = train(cfg, corpus["train"], corpus["val"])
    same_ckpt = checkpoint_bytes(a) == checkpoint_bytes(b)
    ext_a = train_feature_extractor(corpus["train"], seed=SEED)
    ext_b = train_feature_extractor(corpus["train"], seed=SEED)
    rep_a = evaluate(a.model, corpus, ext_a, seed=SEED).to_json()
    rep_b = evaluate(b.model, corpus, ext_b, seed=SEED).to_json()
    same_report = rep_a == rep_b
    rec = synth_record(DiseaseSpec.default("HYP"), 9)
    write_record(rec, tmp_path / "r.ecgt")
    back = read_record(tmp_path / "r.ecgt")
    roundtrip = (back.leads.tobytes() == rec.leads.astype("<f4").tobytes()
                 and encode_record(back) == (tmp_path / "r.ecgt").read_bytes())
    buf = encode_record(rec)
    try:
        decode_record(b"JUNK" + buf[4:])
        magic = False
    except BadMagicError:
        magic = True
    checks = {"checkpoint": same_ckpt, "report": same_report, "record roundtrip": roundtrip,
              "bad magic": magic}
    ok = all(checks.values())
    criterion(10, ok, " ".join(f"{k}={'ok' if v else 'NO'}" for k, v in checks.items()))
    assert ok
