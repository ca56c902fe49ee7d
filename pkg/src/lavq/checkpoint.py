"""Deterministic binary checkpoints.

Layout::

    b"LAVQCKPT" | u16 version | u32 header length | JSON header | tensor bytes

The header is sorted-key JSON listing every tensor (section, key, dtype,
shape, offset, byte count) together with the config echo, counters,
optimizer hyperparameters and training history. Tensor payloads follow in
header order as raw little-endian bytes, so equal state gives equal files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .errors import BadMagicError, FormatError, TruncatedFileError, VersionMismatchError

MAGIC = b"LAVQCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def _array(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _optimizer_tensors(opt) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx in sorted(sd["state"]):
        for name, val in sorted(sd["state"][idx].items()):
            tensors[f"{idx}.{name}"] = torch.as_tensor(val)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in sd["param_groups"]]
    return tensors, groups


def trainer_sections(trainer) -> dict[str, dict[str, torch.Tensor]]:
    m = trainer.model
    return {
        "separator": dict(m.separator.state_dict()),
        "generator": dict(m.generator.state_dict()),
        "discriminator": dict(m.discriminator.state_dict()),
        "optimizer_g": _optimizer_tensors(trainer.opt_g)[0],
        "optimizer_d": _optimizer_tensors(trainer.opt_d)[0],
        "rng": {"torch": torch.get_rng_state()},
    }


def checkpoint_bytes(trainer) -> bytes:
    cfg = trainer.cfg
    sections = trainer_sections(trainer)
    listing, blobs, offset = [], [], 0
    for sec in sections:
        for key in sorted(sections[sec]):
            a = _array(sections[sec][key])
            raw = a.tobytes()
            listing.append({"section": sec, "key": key, "dtype": a.dtype.str,
                            "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "config": cfg.to_dict(),
        "separator_echo": {"C": cfg.C, "L_e": cfg.L_e, "K": cfg.K, "T": cfg.T, "l": cfg.l},
        "generator_echo": {"noise_seed": cfg.seed},
        "optimizer": {"kind": "AdamW", "betas": [cfg.beta1, cfg.beta2], "eps": cfg.eps,
                      "decoupled_weight_decay": True,
                      "param_groups_g": _optimizer_tensors(trainer.opt_g)[1],
                      "param_groups_d": _optimizer_tensors(trainer.opt_d)[1]},
        "epoch": trainer.epoch,
        "step": trainer.step,
        "history": trainer.history,
        "tensors": listing,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(blobs)


def save_checkpoint(trainer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(trainer))
    return path


def parse_checkpoint(buf: bytes):
    """Return (header, {section: {key: tensor}}) without building a trainer."""
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError("checkpoint shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise TruncatedFileError("checkpoint header truncated")
    try:
        header = json.loads(buf[_PREFIX.size:start])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    body = memoryview(buf)[start:]
    sections: dict[str, dict[str, torch.Tensor]] = {}
    end = 0
    for ent in header["tensors"]:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(body):
            raise TruncatedFileError(f"tensor {ent['section']}/{ent['key']} truncated")
        a = np.frombuffer(body[lo:hi], dtype=np.dtype(ent["dtype"])).reshape(ent["shape"])
        sections.setdefault(ent["section"], {})[ent["key"]] = torch.from_numpy(a.copy())
        end = max(end, hi)
    if end != len(body):
        raise FormatError(f"{len(body) - end} trailing bytes after checkpoint payload")
    return header, sections


def _optimizer_state(tensors: dict, groups: list) -> dict:
    state: dict[int, dict] = {}
    for key, val in tensors.items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = val
    return {"state": state, "param_groups": groups}


def load_checkpoint(path, backend=None):
    """Rebuild a :class:`~lavq.trainer.Trainer` from a checkpoint file."""
    from .trainer import Trainer

    header, sections = parse_checkpoint(Path(path).read_bytes())
    cfg = TrainConfig(**header["config"])
    trainer = Trainer(cfg, backend)
    m = trainer.model
    m.separator.load_state_dict(sections.get("separator", {}))
    m.generator.load_state_dict(sections.get("generator", {}))
    m.discriminator.load_state_dict(sections.get("discriminator", {}))
    opt = header["optimizer"]
    trainer.opt_g.load_state_dict(_optimizer_state(sections.get("optimizer_g", {}),
                                                   opt["param_groups_g"]))
    trainer.opt_d.load_state_dict(_optimizer_state(sections.get("optimizer_d", {}),
                                                   opt["param_groups_d"]))
    if "rng" in sections:
        torch.set_rng_state(sections["rng"]["torch"])
    trainer.epoch, trainer.step = header["epoch"], header["step"]
    trainer.history = header["history"]
    return trainer
