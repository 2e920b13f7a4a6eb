"""``TKGN`` checkpoint container.

Layout (little-endian)::

    b"TKGN" | u32 version | u64 header length | UTF-8 JSON header | payload

The JSON header lists every array with its dtype, shape, offset and byte
length inside the payload, so readers can detect truncation before decoding.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .models import ParamStore
from .training import AdamState

MAGIC = b"TKGN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found, self.expected = found, expected


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    theta: ParamStore
    phi: ParamStore
    theta0: ParamStore
    phi0: ParamStore
    opt_g: AdamState
    opt_d: AdamState
    rng_state: torch.Tensor
    aug_rng_state: torch.Tensor
    config_hash: str
    mask_g: Optional[Dict[str, torch.Tensor]] = None
    mask_d: Optional[Dict[str, torch.Tensor]] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def _groups(ckpt: Checkpoint) -> Dict[str, Dict[str, torch.Tensor]]:
    groups = OrderedDict([
        ("theta", ckpt.theta), ("phi", ckpt.phi), ("theta0", ckpt.theta0), ("phi0", ckpt.phi0),
        ("opt_g.m", ckpt.opt_g.m), ("opt_g.v", ckpt.opt_g.v), ("opt_d.m", ckpt.opt_d.m), ("opt_d.v", ckpt.opt_d.v),
        ("rng", {"state": ckpt.rng_state, "aug_state": ckpt.aug_rng_state}),
    ])
    if ckpt.mask_g is not None:
        groups["mask_g"] = ckpt.mask_g
    if ckpt.mask_d is not None:
        groups["mask_d"] = ckpt.mask_d
    return groups


def _check_masked_zero(store: ParamStore, mask, what: str) -> None:
    if mask is None:
        return
    for k, m in mask.items():
        if torch.any(store[k].detach()[~m] != 0):
            raise CheckpointError(f"{what}[{k!r}] has non-zero entries under its mask")


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"checkpoint directory {path.parent} does not exist")
    _check_masked_zero(ckpt.theta, ckpt.mask_g, "theta")
    _check_masked_zero(ckpt.phi, ckpt.mask_d, "phi")
    arrays, chunks, offset = [], [], 0
    for group, store in _groups(ckpt).items():
        for name, t in store.items():
            a = t.detach().cpu().numpy()
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(a).tobytes()
            arrays.append({"group": group, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                           "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "iteration": ckpt.iteration, "config_hash": ckpt.config_hash,
        "opt_steps": [ckpt.opt_g.step, ckpt.opt_d.step], "extra": ckpt.extra,
        "arrays": arrays, "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path, expected_hash: Optional[str] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise BadMagicError(f"{path}: not a TKGN checkpoint")
        raise TruncatedCheckpointError(f"{path}: file shorter than the checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(version, VERSION)
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    payload = memoryview(data)[start + header_len:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint config hash {header['config_hash']} does not match run config {expected_hash}"
        )
    groups: Dict[str, Dict[str, torch.Tensor]] = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        a = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        groups.setdefault(entry["group"], OrderedDict())[entry["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("=")))
    g_steps, d_steps = header["opt_steps"]
    return Checkpoint(
        iteration=header["iteration"],
        theta=groups["theta"], phi=groups["phi"], theta0=groups["theta0"], phi0=groups["phi0"],
        opt_g=AdamState(groups["opt_g.m"], groups["opt_g.v"], g_steps),
        opt_d=AdamState(groups["opt_d.m"], groups["opt_d.v"], d_steps),
        rng_state=groups["rng"]["state"], aug_rng_state=groups["rng"]["aug_state"],
        config_hash=header["config_hash"],
        mask_g=groups.get("mask_g"), mask_d=groups.get("mask_d"),
        extra=header["extra"], version=version,
    )
