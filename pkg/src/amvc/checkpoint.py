"""Binary checkpoint format for model bundles.

Layout: magic ``AMVC``, format version (u16 LE), then a series of named array
records — u16 name length, UTF-8 name, u8 dtype tag, u8 rank, u32 extents,
raw little-endian payload — and a trailing CRC32 (u32 LE) over the whole
record region. Everything needed to rebuild the bundle (configs, parameters,
optimizer moments, step counters) lives in the records.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DataFormatError, MagicError, TruncatedError, VersionError
from .models import EncoderConfig, ModelBundle, OptimizerSettings, UNetConfig, build_bundle

MAGIC = b"AMVC"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2, "u1": 3}


def _tag_for(arr: np.ndarray) -> int:
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _TAG_FOR_KIND:
        raise DataFormatError(f"unsupported checkpoint dtype {arr.dtype}")
    return _TAG_FOR_KIND[key]


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    tag = _tag_for(arr)
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    return head + payload


def write_records(path: str | Path, records: list[tuple[str, np.ndarray]]) -> None:
    body = b"".join(_encode_record(name, arr) for name, arr in records)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 2 + 4:
        raise TruncatedError(f"checkpoint {path} is too short ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise MagicError(f"checkpoint {path} has bad magic {blob[:len(MAGIC)]!r}")
    (version,) = struct.unpack_from("<H", blob, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"checkpoint {path} has version {version}, expected {VERSION}")
    body = blob[len(MAGIC) + 2 : -4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)

    records: dict[str, np.ndarray] = {}
    off = 0
    try:
        while off < len(body):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise TruncatedError(f"checkpoint {path} record name cut short")
            off += name_len
            tag, rank = struct.unpack_from("<BB", body, off)
            off += 2
            if tag not in _DTYPE_TAGS:
                raise DataFormatError(f"checkpoint {path} has unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            if off + nbytes > len(body):
                raise TruncatedError(f"checkpoint {path} payload for {name!r} is truncated")
            arr = np.frombuffer(body[off : off + nbytes], dtype=dtype).reshape(shape)
            off += nbytes
            records[name] = arr
    except struct.error as exc:
        raise TruncatedError(f"checkpoint {path} ended mid-record: {exc}") from exc
    if zlib.crc32(body) != crc_stored:
        raise ChecksumError(f"checkpoint {path} failed its CRC32 check")
    return records


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Write the bundle (configs, parameters, optimizer state) to ``path``."""
    meta = {
        "kind": "amvc-bundle",
        "encoder": asdict(bundle.encoder_cfg),
        "unet": asdict(bundle.unet_cfg),
        "k_classes": bundle.k_classes,
        "d_hidden": bundle.d_hidden,
        "opt": asdict(bundle.opt_settings),
    }
    records: list[tuple[str, np.ndarray]] = [
        ("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8))
    ]
    for tag, model in bundle.models().items():
        for name, p in model.named_params():
            records.append((f"param.{tag}.{name}", p.data))
    for tag, opt in bundle.optimizers.items():
        records.append((f"step.{tag}", np.asarray(opt.step_count, dtype=np.int64)))
        for name, m in opt.exp_avg.items():
            records.append((f"m1.{tag}.{name}", m))
        for name, v in opt.exp_avg_sq.items():
            records.append((f"m2.{tag}.{name}", v))
    write_records(path, records)


def load_checkpoint(path: str | Path) -> ModelBundle:
    """Rebuild a bundle bit-exactly from ``path``."""
    records = read_records(path)
    if "meta" not in records:
        raise DataFormatError(f"checkpoint {path} is missing its meta record")
    meta = json.loads(records["meta"].tobytes().decode("utf-8"))
    if meta.get("kind") != "amvc-bundle":
        raise DataFormatError(f"checkpoint {path} is not a model bundle")
    bundle = build_bundle(
        EncoderConfig(**meta["encoder"]),
        UNetConfig(**meta["unet"]),
        meta["k_classes"],
        meta["d_hidden"],
        OptimizerSettings(**meta["opt"]),
        seed=0,
    )
    for tag, model in bundle.models().items():
        for name, p in model.named_params():
            key = f"param.{tag}.{name}"
            if key not in records:
                raise DataFormatError(f"checkpoint {path} is missing record {key!r}")
            arr = records[key]
            if arr.shape != p.data.shape:
                raise DataFormatError(f"checkpoint {path} record {key!r} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
    for tag, opt in bundle.optimizers.items():
        opt.step_count = int(records[f"step.{tag}"])
        for name in opt.exp_avg:
            opt.exp_avg[name] = records[f"m1.{tag}.{name}"].astype(np.float32, copy=True)
            opt.exp_avg_sq[name] = records[f"m2.{tag}.{name}"].astype(np.float32, copy=True)
    return bundle
