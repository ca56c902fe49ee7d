"""Style-based decoder that fuses personal-normal and disease-indicative features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .errors import ConfigError, ValidationError
from .separator import he_init

ADAIN_EPS = 1e-8
SIGMA_FLOOR = 1e-4
N_BLOCKS = 9
DECODER_WIDTHS = (64, 64, 48, 48, 32, 32, 24, 16, 16)


def instance_stats(x: torch.Tensor):
    """Per-channel mean and population std over the last axis."""
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return mu, torch.sqrt(var + 1e-12)


def adain(x: torch.Tensor, mu_s: torch.Tensor, sigma_s: torch.Tensor) -> torch.Tensor:
    """Renormalise each channel of ``x`` to mean ``mu_s`` and std ``sigma_s``.

    ``mu_s``/``sigma_s`` broadcast against ``x[..., :1]``; a constant
    channel maps to ``mu_s``.
    """
    mu, sd = instance_stats(x)
    return sigma_s * (x - mu) / (sd + ADAIN_EPS) + mu_s


def style_scale(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + SIGMA_FLOOR


def cosine_or_zero(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of flattened samples; 0 if either norm is 0."""
    a, b = a.flatten(1), b.flatten(1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(1) / denom, torch.zeros_like(na))


class Mapper(nn.Module):
    def __init__(self, in_dim=512, width=256, layers=8):
        super().__init__()
        dims = [in_dim] + [width] * layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        he_init(self, "leaky_relu")
        self.in_dim = in_dim

    def forward(self, f_d):
        x = f_d.flatten(1)
        if x.shape[1] != self.in_dim:
            raise ValidationError(f"mapper expects {self.in_dim} features, got {x.shape[1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


class StyleAffine(nn.Module):
    """Style vector -> (mu_s, sigma_s) for one AdaIN site."""

    def __init__(self, w_dim, channels):
        super().__init__()
        self.lin = nn.Linear(w_dim, 2 * channels)
        with torch.no_grad():
            self.lin.bias[:channels] = 0.0
            self.lin.bias[channels:] = 0.5413  # softplus^-1(1)

    def forward(self, w):
        mu, raw = self.lin(w).unsqueeze(-1).chunk(2, dim=1)
        return mu, style_scale(raw)


class NoiseInjection(nn.Module):
    """f_p + eta * B with a fixed seeded standard-normal field B."""

    def __init__(self, channels, length, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        self.register_buffer("field", torch.randn(channels, length, generator=g))
        self.eta = nn.Parameter(torch.zeros(channels))

    def forward(self, f_p):
        return f_p + self.eta[:, None] * self.field


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class DecoderBlock(nn.Module):
    def __init__(self, c_in, c_out, w_dim):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.style1 = StyleAffine(w_dim, c_out)
        self.style2 = StyleAffine(w_dim, c_out)

    def forward(self, x, w):
        x = upsample2(x)
        x = adain(F.leaky_relu(self.conv1(x), 0.2), *self.style1(w))
        return adain(F.leaky_relu(self.conv2(x), 0.2), *self.style2(w))


class Generator(nn.Module):
    def __init__(self, cfg: TrainConfig, noise_seed: int | None = None):
        super().__init__()
        cfg.validate()
        if cfg.L_e * 2 ** N_BLOCKS != 4096:
            raise ConfigError("L_e * 2^9 must equal 4096")
        self.mapper = Mapper(cfg.C * cfg.L_e, cfg.W_style, cfg.mapper_layers)
        self.noise = NoiseInjection(cfg.C, cfg.L_e, cfg.seed if noise_seed is None else noise_seed)
        self.stem_style = StyleAffine(cfg.W_style, cfg.C)
        widths = (cfg.C,) + DECODER_WIDTHS
        self.blocks = nn.ModuleList(DecoderBlock(a, b, cfg.W_style)
                                    for a, b in zip(widths[:-1], widths[1:]))
        self.to_ecg = nn.Conv1d(widths[-1], 12, 1)
        self.shape = (cfg.C, cfg.L_e)

    def map_disease(self, f_d):
        return self.mapper(f_d)

    def decode(self, f_p, style, return_trace=False):
        if tuple(f_p.shape[-2:]) != self.shape:
            raise ValidationError(f"f_p must be (..., {self.shape}), got {tuple(f_p.shape)}")
        x = adain(self.noise(f_p), *self.stem_style(style))
        trace = [x.shape[-1]]
        for block in self.blocks:
            x = block(x, style)
            trace.append(x.shape[-1])
        out = self.to_ecg(x)
        return (out, trace) if return_trace else out

    def forward(self, f_p, f_d):
        return self.decode(f_p, self.map_disease(f_d))


@dataclass
class GenLossBundle:
    l_adv_g: torch.Tensor
    l_rec: torch.Tensor
    l_sim_g: torch.Tensor
    l_vq: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_adv_g + self.l_rec + self.l_sim_g + self.l_vq


def similarity_loss(f_a, f_b):
    return (1.0 - cosine_or_zero(f_a, f_b)).mean()


def adv_g_loss(d_fake: torch.Tensor, form: str = "equations") -> torch.Tensor:
    """Generator adversarial loss.

    ``equations``: mean softplus(-D(fake)). ``algorithm1``: the literal
    ``log(1 - sigmoid(D(fake)))`` line, i.e. mean -softplus(D(fake)).
    """
    if form == "equations":
        return F.softplus(-d_fake).mean()
    if form == "algorithm1":
        return (-F.softplus(d_fake)).mean()
    raise ConfigError(f"unknown adversarial loss form {form!r}")


def reconstruction_loss(x_hat, x):
    """Squared norm of the error per sample, averaged over the batch."""
    err = (x_hat - x) ** 2
    return err.sum() if err.ndim < 3 else err.flatten(1).sum(1).mean()
