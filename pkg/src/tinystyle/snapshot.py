"""SGFW1 snapshot container: versioned binary file holding named fp32 tensors.

Layout (all little-endian):

    bytes 0..4   magic "SGFW1"
    u16          container version (1)
    u32          header length in bytes
    header       UTF-8 JSON: architecture, step, rng_state, parameter manifest
    payload      raw float32 data, concatenated in manifest order

The same bytes always deserialize to the same parameters, and saving the
same parameters always produces the same bytes (the header JSON is emitted
with sorted keys and no whitespace). Wall-clock time deliberately stays out
of the container so retraining with a fixed seed reproduces snapshot files
bit-for-bit; timestamps belong to the run manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import SnapshotFormatError
from .models import Discriminator, Generator, ModelConfig

MAGIC = b"SGFW1"
VERSION = 1
_PREFIX = struct.Struct("<5sHI")


def save_tensors(path, arch: dict, step: int, rng_state, params: dict[str, np.ndarray]):
    manifest = []
    blobs = []
    for name, arr in params.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
    header = json.dumps(
        {"arch": arch, "step": int(step), "rng_state": rng_state, "params": manifest},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


@dataclass
class SnapshotData:
    arch: dict
    step: int
    rng_state: object
    params: dict[str, np.ndarray]


def load_tensors(path) -> SnapshotData:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise SnapshotFormatError(f"{path}: too short for a snapshot header")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SnapshotFormatError(f"{path}: unsupported version {version}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise SnapshotFormatError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    params = {}
    offset = header_end
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        end = offset + nbytes
        if end > len(raw):
            raise SnapshotFormatError(
                f"{path}: payload truncated at parameter {entry['name']!r} "
                f"(need {end} bytes, file has {len(raw)})")
        params[entry["name"]] = np.frombuffer(
            raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise SnapshotFormatError(
            f"{path}: {len(raw) - offset} trailing bytes after payload")
    return SnapshotData(arch=header["arch"], step=int(header["step"]),
                        rng_state=header.get("rng_state"), params=params)


def save_models(path, cfg: ModelConfig, step: int, gen: Generator,
                ema_arrays: dict[str, np.ndarray], disc: Discriminator,
                rng_state=None) -> None:
    """Persist generator (raw + EMA) and discriminator weights."""
    params: dict[str, np.ndarray] = {}
    for k, v in gen.params().items():
        params[f"g/{k}"] = v.data
    for k, v in ema_arrays.items():
        params[f"g_ema/{k}"] = v
    for k, v in disc.params().items():
        params[f"d/{k}"] = v.data
    save_tensors(path, cfg.to_dict(), step, rng_state, params)


@dataclass
class ModelSnapshot:
    cfg: ModelConfig
    step: int
    rng_state: object
    gen: Generator
    gen_ema: Generator
    disc: Discriminator


def load_models(path) -> ModelSnapshot:
    data = load_tensors(path)
    cfg = ModelConfig.from_dict(data.arch)

    def split(prefix):
        plen = len(prefix)
        return {k[plen:]: v for k, v in data.params.items() if k.startswith(prefix)}

    gen = Generator(cfg, seed=0)
    gen.set_arrays(split("g/"))
    gen_ema = Generator(cfg, seed=0)
    gen_ema.set_arrays(split("g_ema/"))
    disc = Discriminator(cfg, seed=0)
    disc.set_arrays(split("d/"))
    return ModelSnapshot(cfg=cfg, step=data.step, rng_state=data.rng_state,
                         gen=gen, gen_ema=gen_ema, disc=disc)
