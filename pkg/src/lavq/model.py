"""The full editor: separator + generator + discriminator, and the inference paths."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .data import EcgRecord
from .discriminator import Discriminator
from .errors import ValidationError
from .generator import (GenLossBundle, Generator, adv_g_loss, reconstruction_loss,
                        similarity_loss)
from .separator import SeparatedFeatures, Separator


def to_tensor(records, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.leads for r in records])).to(dtype)


@dataclass
class GenPass:
    """Everything one generator pass produces (losses + intermediates)."""

    losses: GenLossBundle
    sep_pre: SeparatedFeatures
    sep_ref: SeparatedFeatures
    x_rec: torch.Tensor
    x_twin: torch.Tensor
    l_rec_raw: torch.Tensor


class LavqEditor(nn.Module):
    def __init__(self, cfg: TrainConfig, backend=None):
        super().__init__()
        self.cfg = cfg.validate()
        self.separator = Separator(cfg, backend)
        self.generator = Generator(cfg)
        self.discriminator = Discriminator(cfg)

    def g_parameters(self):
        return list(self.separator.parameters()) + list(self.generator.parameters())

    def d_parameters(self):
        return list(self.discriminator.parameters())

    def separate(self, x, texts, mask=None) -> SeparatedFeatures:
        return self.separator(x, texts, mask=mask)

    def decode(self, f_p, f_d):
        return self.generator(f_p, f_d)

    def reconstruct(self, x, texts):
        sep = self.separate(x, texts)
        return self.decode(sep.f_p, sep.f_d)

    def twin(self, x_pre, texts_pre, x_ref, texts_ref):
        f_p = self.separate(x_pre, texts_pre).f_p
        f_d_t = self.separate(x_ref, texts_ref).f_d
        return self.decode(f_p, f_d_t)

    def gen_pass(self, x, texts, x_ref, texts_ref, masks=None) -> GenPass:
        """Generator objective for a batch of (pre-diagnosis, reference) pairs.

        ``masks`` optionally fixes the three separator masks
        (pre, reference, twin) so finite-difference probes see a smooth
        function.
        """
        cfg = self.cfg
        m_pre, m_ref, m_twin = masks if masks is not None else (None, None, None)
        sep_pre = self.separate(x, texts, m_pre)
        sep_ref = self.separate(x_ref, texts_ref, m_ref)
        x_rec = self.decode(sep_pre.f_p, sep_pre.f_d)
        x_twin = self.decode(sep_pre.f_p, sep_ref.f_d)
        zero = x.new_zeros(())
        l_rec_raw = reconstruction_loss(x_rec, x)
        l_rec = l_rec_raw if cfg.use_rec else zero
        if cfg.use_sim_g:
            sep_g = self.separate(x_twin, texts_ref, m_twin)
            l_sim = similarity_loss(sep_g.f_d, sep_ref.f_d)
        else:
            l_sim = zero
        l_adv = adv_g_loss(self.discriminator.score(x_rec), cfg.adv_loss_form)
        l_vq = sep_pre.vq_loss if cfg.use_vq else zero
        return GenPass(GenLossBundle(l_adv, l_rec, l_sim, l_vq), sep_pre, sep_ref, x_rec,
                       x_twin, l_rec_raw)

    def gen_losses(self, x, texts, x_ref, texts_ref, masks=None) -> GenLossBundle:
        return self.gen_pass(x, texts, x_ref, texts_ref, masks).losses


@torch.no_grad()
def reconstruct_record(model: LavqEditor, record: EcgRecord) -> np.ndarray:
    model.eval()
    return model.reconstruct(to_tensor([record]), [record.report])[0].numpy()


@torch.no_grad()
def generate_twin(model: LavqEditor, pre: EcgRecord, reference: EcgRecord) -> EcgRecord:
    """Digital twin of ``pre`` carrying the disease of ``reference``."""
    if reference.label == "NORM":
        raise ValidationError("reference record is NORM: there is no disease to transfer")
    model.eval()
    out = model.twin(to_tensor([pre]), [pre.report], to_tensor([reference]), [reference.report])
    return EcgRecord(pre.patient_id, out[0].numpy(), reference.label, reference.report,
                     pre.sampling_rate, [])


@torch.no_grad()
def generate_twins(model: LavqEditor, pres, references, batch_size: int = 16) -> list[EcgRecord]:
    """Batched :func:`generate_twin` over aligned ``pres``/``references``."""
    model.eval()
    out = []
    for i in range(0, len(pres), batch_size):
        p, r = pres[i:i + batch_size], references[i:i + batch_size]
        if any(ref.label == "NORM" for ref in r):
            raise ValidationError("reference record is NORM: there is no disease to transfer")
        x = model.twin(to_tensor(p), [a.report for a in p], to_tensor(r), [b.report for b in r])
        out.extend(EcgRecord(a.patient_id, xi.numpy(), b.label, b.report, a.sampling_rate, [])
                   for a, b, xi in zip(p, r, x))
    return out
