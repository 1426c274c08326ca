"""Checkpoint directory format.

A checkpoint is a directory::

    manifest.json    # stage, step, config digest, rng derivation record,
                     # per-entry name/shape/dtype/offset/section, optimizer
                     # entry offsets
    params.bin       # little-endian raw float32 blob, entries at offsets
    optimizer.bin    # first/second moment blobs (present when state exists)

Blobs are written in manifest order, so save -> load -> save is
byte-identical and a reloaded run continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ParamTree

FORMAT_VERSION = 1


def digest_config(config: dict) -> str:
    """Canonical content hash of a configuration mapping."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    """Model state plus everything needed to continue training bit-exactly."""

    params: ParamTree
    opt_state: dict | None
    rng_info: dict
    step: int
    stage: str
    config_digest: str

    def digest(self) -> str:
        return self.params.digest()


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, tensor in ckpt.params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": "<f4",
            "offset": offset,
            "section": ckpt.params.section(name),
        })
        blobs.append(blob)
        offset += len(blob)

    opt_meta = None
    if ckpt.opt_state is not None:
        opt_entries = []
        opt_offset = 0
        opt_blobs = []
        for name, _ in ckpt.params.items():
            m_blob = np.ascontiguousarray(ckpt.opt_state["m"][name], dtype="<f4").tobytes()
            v_blob = np.ascontiguousarray(ckpt.opt_state["v"][name], dtype="<f4").tobytes()
            opt_entries.append({"name": name, "m_offset": opt_offset,
                                "v_offset": opt_offset + len(m_blob)})
            opt_blobs.extend((m_blob, v_blob))
            opt_offset += len(m_blob) + len(v_blob)
        opt_meta = {"step": ckpt.opt_state["t"], "entries": opt_entries}
        (out_dir / "optimizer.bin").write_bytes(b"".join(opt_blobs))

    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_digest": ckpt.config_digest,
        "rng": ckpt.rng_info,
        "params": entries,
        "optimizer": opt_meta,
    }
    (out_dir / "params.bin").write_bytes(b"".join(blobs))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest['format_version']}")
    raw = (ckpt_dir / "params.bin").read_bytes()
    params = ParamTree()
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=e["dtype"], count=count,
                            offset=e["offset"]).reshape(shape).copy()
        params.add(e["name"], arr, e["section"])

    opt_state = None
    if manifest["optimizer"] is not None:
        opt_raw = (ckpt_dir / "optimizer.bin").read_bytes()
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for e in manifest["optimizer"]["entries"]:
            shape = params.shape(e["name"])
            count = int(np.prod(shape)) if shape else 1
            m[e["name"]] = np.frombuffer(opt_raw, dtype="<f4", count=count,
                                         offset=e["m_offset"]).reshape(shape).copy()
            v[e["name"]] = np.frombuffer(opt_raw, dtype="<f4", count=count,
                                         offset=e["v_offset"]).reshape(shape).copy()
        opt_state = {"m": m, "v": v, "t": manifest["optimizer"]["step"]}

    return Checkpoint(params=params, opt_state=opt_state, rng_info=manifest["rng"],
                      step=manifest["step"], stage=manifest["stage"],
                      config_digest=manifest["config_digest"])
