"""Report text -> conditioning vector.

A frozen backend maps text to a raw vector; a learnable linear layer
compresses it to ``L_t``. The default backend is a hashing stub (FNV-1a
token hash seeding a splitmix64 stream), so any clinical language model
can be dropped in later through the ``external`` backend, which reads
precomputed embeddings from a JSON-lines file.
"""
from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, EncoderError, ValidationError

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(state: int):
    """Infinite generator of splitmix64 outputs starting from ``state``."""
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


@lru_cache(maxsize=4096)
def _token_vector(token: str, raw_dim: int, seed: int) -> tuple:
    state = fnv1a64(token.encode("utf-8")) ^ next(splitmix64(seed & _MASK64))
    stream = splitmix64(state)
    v = np.array([(next(stream) >> 11) * 2.0 ** -53 * 2.0 - 1.0 for _ in range(raw_dim)])
    return tuple(v / np.linalg.norm(v))


def stub_embed(text: str, raw_dim: int = 256, seed: int = 0) -> np.ndarray:
    if raw_dim < 8:
        raise ValidationError("raw_dim must be >= 8")
    out = np.zeros(raw_dim)
    for tok in tokenize(text):
        out += np.asarray(_token_vector(tok, raw_dim, seed))
    norm = np.linalg.norm(out)
    return out / norm if norm > 0 else out


class StubBackend:
    name = "stub"

    def __init__(self, raw_dim: int = 256, seed: int = 0):
        self.raw_dim = raw_dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        return stub_embed(text, self.raw_dim, self.seed)


class ExternalBackend:
    """Precomputed embeddings, one ``{"text": ..., "embedding": [...]}`` per line."""

    name = "external"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._table: dict[str, np.ndarray] = {}
        try:
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        self._table[d["text"]] = np.asarray(d["embedding"], dtype=np.float64)
        except (OSError, ValueError, KeyError) as exc:
            raise EncoderError(f"external: cannot load {self.path}: {exc}") from exc
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) != 1:
            raise EncoderError(f"external: inconsistent embedding sizes {sorted(dims)}")
        self.raw_dim = dims.pop()

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._table[text]
        except KeyError:
            raise EncoderError(f"external: no precomputed embedding for {text!r}") from None


def make_backend(kind: str = "stub", raw_dim: int = 256, seed: int = 0, path=None):
    if kind == "stub":
        return StubBackend(raw_dim, seed)
    if kind == "external":
        if not path:
            raise ConfigError("text_encoder.backend=external needs text_encoder.path")
        return ExternalBackend(path)
    raise ConfigError(f"unknown text encoder backend {kind!r}")


class TextEncoder(nn.Module):
    """Frozen backend followed by a trainable linear compression to ``L_t``."""

    def __init__(self, backend, text_dim: int = 128):
        super().__init__()
        self.backend = backend
        self.compress = nn.Linear(backend.raw_dim, text_dim)
        self._cache: dict[str, torch.Tensor] = {}

    def raw(self, texts: list[str]) -> torch.Tensor:
        rows = []
        for t in texts:
            if t not in self._cache:
                try:
                    v = self.backend.embed(t)
                except EncoderError:
                    raise
                except Exception as exc:
                    raise EncoderError(f"{self.backend.name}: {exc}") from exc
                self._cache[t] = torch.as_tensor(np.asarray(v), dtype=torch.float64)
            rows.append(self._cache[t])
        return torch.stack(rows).to(self.compress.weight.dtype)

    def forward(self, texts: list[str] | str) -> torch.Tensor:
        single = isinstance(texts, str)
        out = self.compress(self.raw([texts] if single else list(texts)))
        return out[0] if single else out
