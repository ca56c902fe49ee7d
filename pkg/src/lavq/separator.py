"""Text-guided feature separator with a disease embedding codebook.

The encoder maps a 12 x 4096 ECG to a C x L_e feature map ``e``. Each of
the C channel rows queries the report embedding (reshaped into T tokens)
through multi-head cross-attention; the squashed scores are thresholded
into a binary mask ``A``. Rows of ``e`` are snapped to their nearest
codebook entry, and

    f_d = Q(e) * A        (disease-indicative)
    f_p = e * (1 - A)     (personal-normal)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .errors import ConfigError, ValidationError
from .text import TextEncoder, make_backend


RES_SCALE = 2 ** -0.5  # keeps the residual sum at unit variance


def he_init(module: nn.Module, nonlinearity="relu"):
    """Kaiming-normal weights and zero biases for every conv/linear layer.

    PyTorch's default init shrinks activations layer by layer; through a
    deep ReLU stack the per-sample variation all but disappears.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2 if nonlinearity == "leaky_relu" else 0,
                                    nonlinearity=nonlinearity)
            nn.init.zeros_(m.bias)


class ResBlock1d(nn.Module):
    def __init__(self, c_in, c_out, stride=2):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = (nn.Conv1d(c_in, c_out, 1, stride=stride)
                     if stride != 1 or c_in != c_out else nn.Identity())
        he_init(self)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu((y + self.skip(x)) * RES_SCALE)


class EcgEncoder(nn.Module):
    """Strided 1-D residual encoder, 12 x 4096 -> C x L_e."""

    widths = (16, 16, 32, 32, 48, 48, 64, 64)

    def __init__(self, channels=64, length=8, in_leads=12, in_length=4096):
        super().__init__()
        n_down = int(round(math.log2(in_length // 2 // length)))
        if 2 * length * 2 ** n_down != in_length or n_down != len(self.widths):
            raise ConfigError(f"encoder cannot reduce {in_length} samples to L_e={length}")
        self.stem = nn.Conv1d(in_leads, self.widths[0], 7, stride=2, padding=3)
        blocks, c = [], self.widths[0]
        for w in self.widths:
            blocks.append(ResBlock1d(c, w))
            c = w
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv1d(c, channels, 1)
        he_init(self.stem)
        he_init(self.head, "linear")
        self.in_shape = (in_leads, in_length)

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.in_shape:
            raise ValidationError(f"expected (..., {self.in_shape}) input, got {tuple(x.shape)}")
        e = self.head(self.blocks(F.relu(self.stem(x))))
        # the decoder is scale-invariant in f_p, so without this the feature
        # scale drifts freely under Adam and the codebook cannot follow
        return F.layer_norm(e, e.shape[-2:])


class CrossAttention(nn.Module):
    """Channel rows of the ECG features attend over T text tokens.

    Returns squashed scores in (0, 1) and the per-head attention weights
    (batch, heads, C, T).
    """

    def __init__(self, length=8, text_dim=128, tokens=8, heads=4):
        super().__init__()
        if text_dim % tokens:
            raise ConfigError(f"L_t={text_dim} is not divisible by T={tokens}")
        if length % heads:
            raise ConfigError(f"L_e={length} is not divisible by heads={heads}")
        self.tokens, self.heads = tokens, heads
        token_dim = text_dim // tokens
        self.q = nn.Linear(length, length)
        self.k = nn.Linear(token_dim, length)
        self.v = nn.Linear(token_dim, length)
        self.out = nn.Linear(length, length)

    def forward(self, f_ecg, f_text):
        b, c, le = f_ecg.shape
        h, dh = self.heads, le // self.heads
        tok = f_text.reshape(b, self.tokens, -1)
        q = self.q(f_ecg).reshape(b, c, h, dh).transpose(1, 2)          # b h c dh
        k = self.k(tok).reshape(b, self.tokens, h, dh).transpose(1, 2)  # b h t dh
        v = self.v(tok).reshape(b, self.tokens, h, dh).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, c, le)
        return torch.sigmoid(self.out(mixed)), weights


def binarize_mask(scores: torch.Tensor, l: float = 0.5) -> torch.Tensor:
    """Hard ``scores >= l`` in the forward pass, identity gradient backward."""
    hard = (scores >= l).to(scores.dtype)
    # grouped so the forward value is exactly 0/1
    return hard + (scores - scores.detach())


def quantize(e: torch.Tensor, codebook: torch.Tensor):
    """Nearest codebook entry for every channel row of ``e``.

    Works on (C, L_e) or (B, C, L_e). Ties go to the lowest index. The
    returned features carry a straight-through gradient to ``e``.
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ConfigError("codebook must be a non-empty K x L_e matrix")
    if codebook.shape[1] != e.shape[-1]:
        raise ConfigError(f"codebook entry length {codebook.shape[1]} != L_e {e.shape[-1]}")
    d = ((e.unsqueeze(-2) - codebook) ** 2).sum(-1)   # (..., C, K)
    idx = torch.argmin(d, dim=-1)
    q = codebook[idx]
    return q.detach() + (e - e.detach()), q, idx


def vq_loss(e: torch.Tensor, q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked codebook + commitment loss: squared norms per sample, batch mean.

    ``q`` must be the raw codebook lookup (gradient into the codebook), not
    the straight-through copy.
    """
    codebook_term = ((e.detach() - q) * mask) ** 2
    commit_term = ((q.detach() - e) * mask) ** 2
    per_elem = codebook_term + commit_term
    if per_elem.ndim == 3:
        return per_elem.sum(dim=(1, 2)).mean()
    return per_elem.sum()


@dataclass
class SeparatedFeatures:
    e: torch.Tensor
    q: torch.Tensor
    scores: torch.Tensor
    mask: torch.Tensor
    f_d: torch.Tensor
    f_p: torch.Tensor
    vq_loss: torch.Tensor
    indices: torch.Tensor


class Separator(nn.Module):
    def __init__(self, cfg: TrainConfig, backend=None):
        super().__init__()
        cfg.validate()
        self.l = cfg.l
        self.use_vq = cfg.use_vq
        backend = backend or make_backend(cfg.text_backend, cfg.raw_dim, cfg.text_seed,
                                          cfg.text_path)
        self.text = TextEncoder(backend, cfg.L_t)
        self.encoder = EcgEncoder(cfg.C, cfg.L_e)
        self.attention = CrossAttention(cfg.L_e, cfg.L_t, cfg.T, cfg.heads)
        self.codebook = nn.Parameter(torch.empty(cfg.K, cfg.L_e).uniform_(-1 / cfg.K, 1 / cfg.K))

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x, texts, mask=None, use_vq=None) -> SeparatedFeatures:
        """Separate a batch (B, 12, 4096) guided by ``texts`` (B strings).

        ``mask`` overrides the thresholded attention (used by probes and
        the mask-algebra checks).
        """
        use_vq = self.use_vq if use_vq is None else use_vq
        e = self.encode(x)
        scores, _ = self.attention(e, self.text(list(texts)))
        if mask is None:
            mask = binarize_mask(scores, self.l)
        else:
            mask = torch.as_tensor(mask, dtype=e.dtype).expand_as(e)
        if use_vq:
            q_st, q, idx = quantize(e, self.codebook)
            loss = vq_loss(e, q, mask)
            f_d = q_st * mask
        else:
            q_st, idx = e, torch.full(e.shape[:-1], -1, dtype=torch.long)
            loss = e.new_zeros(())
            f_d = e * mask
        f_p = e * (1 - mask)
        return SeparatedFeatures(e, q_st, scores, mask, f_d, f_p, loss, idx)
