"""Alternating discriminator / generator optimisation over (pre, reference) pairs."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .data import EcgRecord
from .discriminator import disc_losses
from .errors import DataError, TrainingError
from .model import LavqEditor, to_tensor

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step", "l_adv_d", "l_sim_d", "l_rec", "l_vq", "l_adv_g", "l_sim_g",
                "g_total", "d_total")


@dataclass
class PairBatch:
    pre: list
    ref: list

    @property
    def x(self):
        return to_tensor(self.pre)

    @property
    def x_ref(self):
        return to_tensor(self.ref)

    @property
    def ids(self):
        return [(a.patient_id, b.patient_id) for a, b in zip(self.pre, self.ref)]


def pair_batches(records: list[EcgRecord], batch_size: int, seed: int, epoch: int = 0):
    """Yield batches of (pre-diagnosis, reference) pairs.

    Every record serves once as ``pre`` in a (seed, epoch)-shuffled order;
    its reference is a diseased record of another patient. Records with no
    such partner are skipped.
    """
    diseased = [i for i, r in enumerate(records) if r.label != "NORM"]
    if not diseased:
        raise DataError("no diseased records to use as references")
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(len(records))
    pre, ref = [], []
    for i in order:
        cands = [j for j in diseased if records[j].patient_id != records[i].patient_id]
        if not cands:
            logger.debug("no reference for %s; skipped", records[i].patient_id)
            continue
        pre.append(records[i])
        ref.append(records[cands[int(rng.integers(len(cands)))]])
        if len(pre) == batch_size:
            yield PairBatch(pre, ref)
            pre, ref = [], []
    if pre:
        yield PairBatch(pre, ref)


def _snapshot(params):
    return [p.detach().clone() for p in params]


def _unchanged(params, snap):
    return all(torch.equal(p.detach(), s) for p, s in zip(params, snap))


class Trainer:
    def __init__(self, cfg: TrainConfig, backend=None):
        self.cfg = cfg.validate()
        torch.manual_seed(cfg.seed)
        self.model = LavqEditor(cfg, backend)
        kw = dict(lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                  weight_decay=cfg.weight_decay)
        self.opt_g = torch.optim.AdamW(self.model.g_parameters(), **kw)
        self.opt_d = torch.optim.AdamW(self.model.d_parameters(), **kw)
        self.epoch = 0
        self.step = 0
        self.loss_log: list[dict] = []
        self.history: list[dict] = []

    def _check(self, values: dict, batch: PairBatch, out_dir=None):
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if bad:
            msg = f"non-finite loss {bad} at epoch {self.epoch} step {self.step}; batch {batch.ids}"
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "nan_dump.json").write_text(
                    json.dumps({"losses": values, "batch": batch.ids, "epoch": self.epoch,
                                "step": self.step}, indent=2, default=str))
            raise TrainingError(msg)

    def d_step(self, batch: PairBatch, out_dir=None) -> dict:
        """One discriminator update. Separator/generator run without grad."""
        m, cfg = self.model, self.cfg
        m.train()
        x = batch.x
        with torch.no_grad():
            sep = m.separate(x, [r.report for r in batch.pre])
            x_rec = m.decode(sep.f_p, sep.f_d)
        self.opt_d.zero_grad(set_to_none=True)
        losses = disc_losses(m.discriminator, x, x_rec, sep.f_d, cfg.adv_loss_form,
                             use_sim=cfg.use_sim_d)
        total = losses.total
        out = {"l_adv_d": losses.l_adv_d.item(), "l_sim_d": losses.l_sim_d.item(),
               "d_total": total.item()}
        self._check(out, batch, out_dir)
        total.backward()
        self.opt_d.step()
        return out

    def g_step(self, batch: PairBatch, out_dir=None) -> dict:
        """One update of separator, codebook, text compression and generator."""
        m = self.model
        m.train()
        d_params = m.d_parameters()
        for p in d_params:
            p.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            gp = m.gen_pass(batch.x, [r.report for r in batch.pre], batch.x_ref,
                            [r.report for r in batch.ref])
            bundle = gp.losses
            total = bundle.total
            out = {"l_adv_g": bundle.l_adv_g.item(), "l_rec": bundle.l_rec.item(),
                   "l_sim_g": bundle.l_sim_g.item(), "l_vq": bundle.l_vq.item(),
                   "g_total": total.item()}
            self._check(out, batch, out_dir)
            total.backward()
            self.opt_g.step()
        finally:
            for p in d_params:
                p.requires_grad_(True)
        return out

    @torch.no_grad()
    def val_rec_loss(self, records: list[EcgRecord], batch_size: int = 16) -> float:
        if not records:
            return float("nan")
        self.model.eval()
        total = 0.0
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            x = to_tensor(chunk)
            x_rec = self.model.reconstruct(x, [r.report for r in chunk])
            total += ((x_rec - x) ** 2).sum(dim=(1, 2)).sum().item()
        return total / len(records)

    def train_epoch(self, train_records, out_dir=None, check_isolation=False) -> dict:
        cfg = self.cfg
        iso = {"d_step_isolated": True, "g_step_isolated": True}
        sums: dict[str, float] = {}
        n = 0
        for bi, batch in enumerate(pair_batches(train_records, cfg.batch_size, cfg.seed,
                                                self.epoch)):
            probe = check_isolation and bi == 0
            if probe:
                g_snap = _snapshot(self.model.g_parameters())
            d = self.d_step(batch, out_dir)
            if probe:
                iso["d_step_isolated"] = _unchanged(self.model.g_parameters(), g_snap)
                d_snap = _snapshot(self.model.d_parameters())
            g = self.g_step(batch, out_dir)
            if probe:
                iso["g_step_isolated"] = _unchanged(self.model.d_parameters(), d_snap)
            self.step += 1
            row = {"epoch": self.epoch + 1, "step": self.step, **d, **g}
            self.loss_log.append(row)
            for k, v in {**d, **g}.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        self.epoch += 1
        return {**{k: v / max(n, 1) for k, v in sums.items()}, **iso}

    def fit(self, train_records, val_records=(), out_dir=None, check_isolation=False,
            epochs: int | None = None) -> list[dict]:
        """Run ``epochs`` (default: config) epochs; log CSVs and checkpoints
        under ``out_dir`` when given."""
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        for _ in range(epochs):
            stats = self.train_epoch(train_records, out, check_isolation)
            stats["val_l_rec"] = self.val_rec_loss(list(val_records))
            stats["epoch"] = self.epoch
            self.history.append(stats)
            logger.info("epoch %d: g_total=%.4f d_total=%.4f val_l_rec=%.4f", self.epoch,
                        stats.get("g_total", float("nan")), stats.get("d_total", float("nan")),
                        stats["val_l_rec"])
            if out is not None:
                self.write_logs(out)
                if cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                    from .checkpoint import save_checkpoint
                    save_checkpoint(self, out / f"checkpoint_{self.epoch:04d}.bin")
        return self.history

    def write_logs(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "losses.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.loss_log:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        with open(out_dir / "validation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_l_rec"])
            for h in self.history:
                w.writerow([h["epoch"], repr(h["val_l_rec"])])


def train(cfg: TrainConfig, train_records, val_records=(), out_dir=None, backend=None,
          check_isolation=False) -> Trainer:
    trainer = Trainer(cfg, backend)
    trainer.fit(train_records, val_records, out_dir, check_isolation)
    if out_dir is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(trainer, Path(out_dir) / "checkpoint.bin")
    return trainer


ABLATIONS = {
    "full": dict(use_vq=True, use_sim_g=True, use_sim_d=True, use_rec=True),
    "no_vq": dict(use_vq=False, use_sim_g=True, use_sim_d=True, use_rec=True),
    "no_sim_g": dict(use_vq=True, use_sim_g=False, use_sim_d=True, use_rec=True),
    "no_sim_d": dict(use_vq=True, use_sim_g=True, use_sim_d=False, use_rec=True),
    "no_rec": dict(use_vq=True, use_sim_g=True, use_sim_d=True, use_rec=False),
    "vq_only": dict(use_vq=True, use_sim_g=False, use_sim_d=False, use_rec=False),
}
ABLATION_COLUMNS = ("name", "use_vq", "use_sim_g", "use_sim_d", "use_rec", "dtw", "ate")
SWEEP_COLUMNS = ("l", "dtw", "ate", "ecg_acc")


def _write_rows(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def utility_report(model, corpus: dict, twins_per_patient: int = 10, seed: int = 0):
    """MetricReport with the twin DTW and the detection-protocol fields filled."""
    from .evaluation import MetricReport, detection_experiment, twin_dtw

    det = detection_experiment(corpus, model, twins_per_patient, seed)
    return MetricReport(dtw_mean=twin_dtw(model, corpus), ate=det.ate,
                        patient_acc=det.patient_acc, patient_f1=det.patient_f1,
                        ecg_acc=det.ecg_acc, ecg_f1=det.ecg_f1, auroc=det.auroc)


def ablation_run(cfg: TrainConfig, names, corpus: dict, out_dir=None,
                 twins_per_patient: int = 10) -> list[dict]:
    """Train one model per named flag set (see ``ABLATIONS``) and report DTW and ATE."""
    rows = []
    for name in names:
        if name not in ABLATIONS:
            raise DataError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
        run_cfg = cfg.with_overrides(ABLATIONS[name])
        sub = Path(out_dir) / name if out_dir is not None else None
        trainer = train(run_cfg, corpus["train"], corpus["val"], sub)
        rep = utility_report(trainer.model, corpus, twins_per_patient, cfg.seed)
        rows.append({"name": name, **ABLATIONS[name], "dtw": rep.dtw_mean, "ate": rep.ate})
    if out_dir is not None:
        _write_rows(Path(out_dir) / "ablation.csv", ABLATION_COLUMNS, rows)
    return rows


def threshold_sweep(cfg: TrainConfig, l_values, corpus: dict, out_dir=None,
                    twins_per_patient: int = 10) -> dict:
    """Train per threshold ``l``; returns {l: MetricReport} and writes sweep.csv."""
    from .errors import ConfigError

    reports = {}
    for l in l_values:
        if not 0 < float(l) < 1:
            raise ConfigError(f"threshold l={l} outside (0, 1)")
        run_cfg = cfg.with_overrides({"l": float(l)})
        sub = Path(out_dir) / f"l_{float(l):g}" if out_dir is not None else None
        trainer = train(run_cfg, corpus["train"], corpus["val"], sub)
        reports[float(l)] = utility_report(trainer.model, corpus, twins_per_patient, cfg.seed)
    if out_dir is not None:
        _write_rows(Path(out_dir) / "sweep.csv", SWEEP_COLUMNS,
                    [{"l": l, "dtw": r.dtw_mean, "ate": r.ate, "ecg_acc": r.ecg_acc}
                     for l, r in reports.items()])
    return reports
