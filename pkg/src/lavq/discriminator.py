"""Ten-block blur-downsampling discriminator with an authenticity head and a
disease-feature head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .errors import ConfigError, ValidationError
from .generator import cosine_or_zero

N_BLOCKS = 10


def gaussian_blur2(x: torch.Tensor) -> torch.Tensor:
    """Kernel (0.5, 0.5), stride 2: out[i] = (x[2i] + x[2i+1]) / 2."""
    n = x.shape[-1]
    if n < 2 or n % 2:
        raise ValidationError(f"blur needs an even length >= 2, got {n}")
    return 0.5 * (x[..., 0::2] + x[..., 1::2])


def minibatch_stddev(x: torch.Tensor) -> torch.Tensor:
    """Append the mean across-batch population std as one extra channel."""
    var = x.var(dim=0, unbiased=False)
    pos = var > 0
    # masked sqrt: exact zero for identical samples, finite gradient there
    sd = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))),
                     torch.zeros_like(var))
    stat = sd.mean().reshape(1, 1, 1).expand(x.shape[0], 1, x.shape[-1])
    return torch.cat([x, stat], dim=1)


def channel_schedule(in_ch=12, first=16, cap=256, blocks=N_BLOCKS):
    """Output widths: 16, 16, 32, 32, ... doubling every other block, capped."""
    return [min(first * 2 ** (b // 2), cap) for b in range(blocks)]


class DiscBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        # He init: with the default init the 20-conv ReLU trunk washes out
        # all per-sample variation and the logit is constant
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        self.c_in = c_in

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValidationError(f"block expects {self.c_in} channels, got {x.shape[1]}")
        return gaussian_blur2(F.relu(self.conv2(F.relu(self.conv1(x)))))


class Head(nn.Module):
    """Minibatch-stddev -> conv -> two linear layers."""

    def __init__(self, channels, length, out_dim, hidden=128):
        super().__init__()
        self.conv = nn.Conv1d(channels + 1, hidden, 3, padding=1)
        self.fc1 = nn.Linear(hidden * length, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, h):
        y = F.leaky_relu(self.conv(minibatch_stddev(h)), 0.2)
        return self.fc2(F.leaky_relu(self.fc1(y.flatten(1)), 0.2))


@dataclass
class DiscOutput:
    score: torch.Tensor     # (B,)
    f_d_hat: torch.Tensor   # (B, C * L_e)


class Discriminator(nn.Module):
    def __init__(self, cfg: TrainConfig | None = None, feature_dim: int | None = None,
                 in_length: int = 4096):
        super().__init__()
        if feature_dim is None:
            cfg = (cfg or TrainConfig()).validate()
            feature_dim = cfg.C * cfg.L_e
        if in_length % 2 ** N_BLOCKS:
            raise ConfigError(f"input length must be divisible by 2^{N_BLOCKS}")
        widths = channel_schedule()
        ins = [12] + widths[:-1]
        self.blocks = nn.ModuleList(DiscBlock(a, b) for a, b in zip(ins, widths))
        out_len = in_length // 2 ** N_BLOCKS
        self.output_head = Head(widths[-1], out_len, 1)
        self.disease_head = Head(widths[-1], out_len, feature_dim)
        self.in_length = in_length

    def trunk(self, x, return_trace=False):
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != (12, self.in_length):
            raise ValidationError(f"expected (B, 12, {self.in_length}), got {tuple(x.shape)}")
        trace = [x.shape[-1]]
        for block in self.blocks:
            x = block(x)
            trace.append(x.shape[-1])
        return (x, trace) if return_trace else x

    def score(self, x):
        return self.output_head(self.trunk(x)).squeeze(-1)

    def forward(self, x, with_features=True) -> DiscOutput:
        h = self.trunk(x)
        score = self.output_head(h).squeeze(-1)
        f = self.disease_head(h) if with_features else None
        return DiscOutput(score, f)


@dataclass
class DiscLossBundle:
    l_adv_d: torch.Tensor
    l_sim_d: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_adv_d + self.l_sim_d


def adv_d_loss(d_real, d_fake, form="equations"):
    """``equations``: softplus(-D(real)) + softplus(D(fake)).

    ``algorithm1``: the literal ``log(D_real) + log(1 - D_fake)`` line with
    D = sigmoid(logit), i.e. -softplus(-D(real)) - softplus(D(fake)).
    """
    if form == "equations":
        return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    if form == "algorithm1":
        return -F.softplus(-d_real).mean() - F.softplus(d_fake).mean()
    raise ConfigError(f"unknown adversarial loss form {form!r}")


def disc_losses(disc: Discriminator, real_batch, recon_batch, f_d_targets,
                form="equations", use_sim=True) -> DiscLossBundle:
    """Adversarial + disease-feature similarity losses for the D step.

    ``recon_batch`` and ``f_d_targets`` are detached here so only the
    discriminator receives gradient.
    """
    recon_batch = recon_batch.detach()
    d_real = disc.score(real_batch)
    fake = disc(recon_batch, with_features=use_sim)
    l_adv = adv_d_loss(d_real, fake.score, form)
    if use_sim:
        l_sim = (1.0 - cosine_or_zero(fake.f_d_hat, f_d_targets.detach())).mean()
    else:
        l_sim = l_adv.new_zeros(())
    return DiscLossBundle(l_adv, l_sim)
