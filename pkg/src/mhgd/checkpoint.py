"""Binary checkpoint files.

Layout (little-endian): ``b"MHGD"``, u32 format version, u32 record count,
then records of ``u32 name length | UTF-8 name | u32 rank | u32 dims... |
payload``. Payloads are 32-bit words: IEEE floats for parameter, buffer and
optimizer records, raw unsigned words for ``meta/`` and ``rng/`` records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"MHGD"
VERSION = 1
_WORD_PREFIXES = ("meta/", "rng/")


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    @property
    def epoch(self) -> int:
        e = self.arrays.get("meta/epoch")
        return 0 if e is None else int(e[0])


def _is_word(name: str) -> bool:
    return name.startswith(_WORD_PREFIXES)


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        dtype = "<u4" if _is_word(name) else "<f4"
        arr = np.asarray(arr)
        if not _is_word(name) and arr.dtype != np.float32:
            raise CheckpointError(f"record {name} must be float32, got {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes())
    return b"".join(out)


def decode(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version mismatch: expected {VERSION}, found {version}")
    pos = 12
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"record {name} runs past end of file")
            dtype = "<u4" if _is_word(name) else "<f4"
            arr = np.frombuffer(raw, dtype=dtype, count=size // 4, offset=pos).reshape(dims)
            arrays[name] = arr.astype(np.uint32 if _is_word(name) else np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record")
    return Checkpoint(arrays, version)


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def checkpoint_load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# -- rng state as u32 words -------------------------------------------------------

def _u128_words(x: int):
    return [(x >> (32 * i)) & 0xFFFFFFFF for i in range(4)]


def _words_u128(words) -> int:
    return sum(int(w) << (32 * i) for i, w in enumerate(words))


def rng_to_words(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {st['bit_generator']}")
    words = _u128_words(st["state"]["state"]) + _u128_words(st["state"]["inc"])
    words += [int(st["has_uint32"]), int(st["uinteger"])]
    return np.array(words, dtype=np.uint32)


def rng_from_words(words) -> np.random.Generator:
    words = [int(w) for w in words]
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": _words_u128(words[0:4]), "inc": _words_u128(words[4:8])},
                "has_uint32": words[8], "uinteger": words[9]}
    return np.random.Generator(bg)


def make_checkpoint(params: Dict[str, np.ndarray], buffers: Optional[Dict[str, np.ndarray]] = None,
                    velocity: Optional[Dict[str, np.ndarray]] = None, epoch: int = 0,
                    rng: Optional[np.random.Generator] = None,
                    extra_meta: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    arrays: Dict[str, np.ndarray] = {}
    for k, v in params.items():
        arrays[f"param/{k}"] = np.array(v, dtype=np.float32)
    for k, v in (buffers or {}).items():
        arrays[f"buffer/{k}"] = np.array(v, dtype=np.float32)
    for k, v in (velocity or {}).items():
        arrays[f"opt/velocity/{k}"] = np.array(v, dtype=np.float32)
    arrays["meta/epoch"] = np.array([epoch], dtype=np.uint32)
    for k, v in (extra_meta or {}).items():
        arrays[f"meta/{k}"] = np.asarray(v, dtype=np.uint32)
    if rng is not None:
        arrays["rng/pcg64"] = rng_to_words(rng)
    return Checkpoint(arrays)
