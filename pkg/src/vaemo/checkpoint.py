"""Checkpoint envelope: metadata header plus an array container.

Layout: magic b"VAEMCKPT", version u16, metadata length u32, canonical
JSON metadata (sorted keys, no whitespace), then the array container
holding parameters and, for resumable checkpoints, optimizer moments
under "opt.m." / "opt.v." prefixes.  Canonical JSON plus sorted array
order makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arrayio import pack_arrays, unpack_arrays
from .backbone import BackboneConfig
from .errors import ConfigError, FormatError
from .optim import AdamWState

MAGIC = b"VAEMCKPT"
VERSION = 1

OPT_M_PREFIX = "opt.m."
OPT_V_PREFIX = "opt.v."


def config_hash(cfg: BackboneConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    meta: dict,
    opt_state: AdamWState | None = None,
) -> None:
    payload = dict(arrays)
    meta = dict(meta)
    if opt_state is not None:
        meta["opt_step"] = opt_state.step
        for name, m in opt_state.m.items():
            payload[OPT_M_PREFIX + name] = m
        for name, v in opt_state.v.items():
            payload[OPT_V_PREFIX + name] = v
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(pack_arrays(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, AdamWState | None]:
    """Returns (parameter arrays, metadata, optimizer state or None)."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: checkpoint does not exist")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 6:
        raise FormatError(f"{path}: too short to be a checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version, meta_len = struct.unpack("<HI", data[len(MAGIC) : len(MAGIC) + 6])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta_start = len(MAGIC) + 6
    if meta_start + meta_len > len(data):
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[meta_start : meta_start + meta_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint metadata: {exc}") from None
    payload = unpack_arrays(data[meta_start + meta_len :], context=str(path))

    arrays: dict[str, np.ndarray] = {}
    moments_m: dict[str, np.ndarray] = {}
    moments_v: dict[str, np.ndarray] = {}
    for name, arr in payload.items():
        if name.startswith(OPT_M_PREFIX):
            moments_m[name[len(OPT_M_PREFIX) :]] = arr
        elif name.startswith(OPT_V_PREFIX):
            moments_v[name[len(OPT_V_PREFIX) :]] = arr
        else:
            arrays[name] = arr
    opt_state = None
    if moments_m or moments_v or "opt_step" in meta:
        opt_state = AdamWState(step=int(meta.get("opt_step", 0)), m=moments_m, v=moments_v)
    return arrays, meta, opt_state


def require_config_match(meta: dict, cfg: BackboneConfig, path: str | Path) -> None:
    expected = config_hash(cfg)
    found = meta.get("config_hash")
    if found != expected:
        raise ConfigError(
            f"{path}: checkpoint config hash {found!r} does not match the requested architecture {expected!r}"
        )
