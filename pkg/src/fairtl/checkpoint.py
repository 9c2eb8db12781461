"""Versioned binary checkpoints for :class:`~fairtl.gan.GanState`.

Layout (all integers little-endian)::

    magic     8 bytes   b"FAIRTLCK"
    version   uint32    currently 1
    mlen      uint64    manifest length in bytes
    manifest  mlen      UTF-8 JSON: stage, config_hash, seed, metadata and a
                        layout entry per stored array
    payload   8*N       float64 little-endian, arrays back to back
    digest    32 bytes  sha256 of everything above

Each layout entry is ``{"name", "offset", "count"}`` plus, for networks,
``layer_dims``, ``activations`` and ``slope``; for optimizer states,
``steps``. Offsets count float64 values from the start of the payload.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .gan import AdamState, GanState, Stage
from .numerics import MlpParams

MAGIC = b"FAIRTLCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _net_arrays(state: GanState):
    yield "generator", state.generator
    yield "discriminator", state.discriminator
    if state.frozen_source is not None:
        yield "frozen_source", state.frozen_source


def encode_checkpoint(state: GanState, config_hash: str = "", seed: int | None = None, metadata=None) -> bytes:
    layout, chunks, offset = [], [], 0

    def add(entry: dict, values: np.ndarray):
        nonlocal offset
        entry.update(offset=offset, count=int(values.size))
        layout.append(entry)
        chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
        offset += values.size

    for name, net in _net_arrays(state):
        add(
            {"name": name, "layer_dims": list(net.layer_dims), "activations": [a.value for a in net.activations],
             "slope": net.slope},
            net.flat,
        )
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        add({"name": name + ".m", "steps": list(opt.steps)}, opt.m)
        add({"name": name + ".v"}, opt.v)
    if metadata is None:
        metadata = {"created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    manifest = json.dumps(
        {"stage": state.stage.value, "config_hash": config_hash, "seed": seed, "metadata": metadata,
         "layout": layout, "payload_count": offset},
        sort_keys=True,
    ).encode()
    body = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> tuple[GanState, dict]:
    """Parse checkpoint bytes into a state and its manifest; raises CheckpointError."""
    if len(blob) < _HEADER.size + 32:
        raise CheckpointError("checkpoint truncated: shorter than header + digest")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a fairtl checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    body, digest = blob[:-32], blob[-32:]
    try:
        manifest = json.loads(body[_HEADER.size : _HEADER.size + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint manifest unreadable ({exc}); file truncated or corrupt") from exc
    expected = _HEADER.size + mlen + 8 * manifest.get("payload_count", -1)
    if len(body) != expected:
        raise CheckpointError(f"checkpoint truncated or padded: {len(body)} body bytes, expected {expected}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch; file is corrupt")
    payload = np.frombuffer(body, dtype="<f8", offset=_HEADER.size + mlen).astype(np.float64)
    entries = {e["name"]: e for e in manifest["layout"]}

    def values(name):
        e = entries[name]
        return payload[e["offset"] : e["offset"] + e["count"]].copy()

    def net(name):
        if name not in entries:
            return None
        e = entries[name]
        dims = e["layer_dims"]
        flat, ws, bs, off = values(name), [], [], 0
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            ws.append(flat[off : off + n_in * n_out].reshape(n_out, n_in))
            off += n_in * n_out
            bs.append(flat[off : off + n_out])
            off += n_out
        return MlpParams(tuple(dims), ws, bs, tuple(e["activations"]), e["slope"])

    try:
        gen, disc = net("generator"), net("discriminator")
        if gen is None or disc is None:
            raise CheckpointError("checkpoint lacks a generator or discriminator")
        opts = {
            k: AdamState(values(k + ".m"), values(k + ".v"), list(entries[k + ".m"]["steps"]))
            for k in ("opt_g", "opt_d")
        }
        state = GanState(gen, disc, net("frozen_source"), Stage(manifest["stage"]), opts["opt_g"], opts["opt_d"])
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint layout invalid: {exc}") from exc
    return state, manifest


def save_checkpoint(state: GanState, path: str | Path, config_hash: str = "", seed: int | None = None,
                    metadata=None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, config_hash, seed, metadata))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> GanState:
    return read_checkpoint(path)[0]


def read_checkpoint(path: str | Path) -> tuple[GanState, dict]:
    return decode_checkpoint(Path(path).read_bytes())
