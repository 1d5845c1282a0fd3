"""Binary supernet checkpoints and append-only JSONL results.

Checkpoint layout (little-endian throughout)::

    b"IMBN"
    u32 format version
    str spec hash           (str = u32 byte length + UTF-8 bytes)
    str spec JSON
    str provenance JSON
    u32 tensor count, then per tensor:
        u32 name length, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
        u32 dims[rank], payload
    u32 BN block count, then per site two tensor records named
        ``<site>.running_mean`` and ``<site>.running_var``
"""

from __future__ import annotations

import fcntl
import json
import os
import struct
from pathlib import Path

import numpy as np

from .core.ops import BNStats
from .core.params import BACKBONE, CLASSIFIER, ParamSet
from .space import SearchSpaceSpec
from .supernet import Supernet

MAGIC = b"IMBN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class SpecHashError(CheckpointError):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _tensor(name: str, arr: np.ndarray) -> bytes:
    code = _CODES[np.dtype(arr.dtype)]
    head = _str(name) + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def dumps(net: Supernet) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _str(net.spec.spec_hash()),
        _str(json.dumps(net.spec.to_dict(), sort_keys=True)),
        _str(json.dumps(net.provenance, sort_keys=True)),
        struct.pack("<I", len(net.params)),
    ]
    parts += [_tensor(k, net.params[k].data) for k in net.params]
    parts.append(struct.pack("<I", len(net.bn_state)))
    for site, st in net.bn_state.items():
        parts.append(_tensor(f"{site}.running_mean", st.mean))
        parts.append(_tensor(f"{site}.running_var", st.var))
    return b"".join(parts)


def save_checkpoint(net: Supernet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(net))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.str()
        code, rank = struct.unpack("<BB", self.take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{self.source}: unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="), copy=True)


def loads(buf: bytes, spec: SearchSpaceSpec | None = None, source: str = "<bytes>") -> Supernet:
    r = _Reader(buf, source)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (magic {buf[:4]!r})")
    r.take(4)
    version = r.u32()
    if version < 1 or version > VERSION:
        raise VersionError(f"{source}: format version {version}, this reader supports 1..{VERSION}")
    stored_hash = r.str()
    file_spec = SearchSpaceSpec.from_dict(json.loads(r.str()))
    provenance = json.loads(r.str())
    if file_spec.spec_hash() != stored_hash:
        raise SpecHashError(f"{source}: header hash {stored_hash} does not match embedded spec {file_spec.spec_hash()}")
    if spec is not None and spec.spec_hash() != stored_hash:
        raise SpecHashError(f"{source}: checkpoint spec hash {stored_hash} != expected {spec.spec_hash()}")

    params = ParamSet()
    for _ in range(r.u32()):
        name, arr = r.tensor()
        params.add(name, arr, CLASSIFIER if name.startswith("classifier.") else BACKBONE)
    bn: dict[str, BNStats] = {}
    for _ in range(r.u32()):
        mname, mean = r.tensor()
        vname, var = r.tensor()
        site = mname[: -len(".running_mean")]
        if not mname.endswith(".running_mean") or vname != f"{site}.running_var":
            raise CheckpointError(f"{source}: malformed BN block {mname!r}/{vname!r}")
        st = BNStats.__new__(BNStats)
        st.mean, st.var = mean, var
        bn[site] = st
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes")
    return Supernet(file_spec, params.seal(), bn, provenance)


def load_checkpoint(path, spec: SearchSpaceSpec | None = None) -> Supernet:
    path = Path(path)
    return loads(path.read_bytes(), spec, str(path))


# ------------------------------------------------------------------- results

RESULT_FIELDS = (
    "run_id",
    "procedure",
    "source",
    "target",
    "imbalance",
    "seed",
    "steps",
    "param_updates",
    "wall_ms",
    "checkpoint_path",
)


class RecordError(ValueError):
    pass


def append_result(record: dict, results_path) -> None:
    """Append one JSON object as a single line; concurrent writers never interleave."""
    if not isinstance(record, dict) or not record:
        raise RecordError("result record must be a nonempty mapping")
    missing = [k for k in RESULT_FIELDS if k not in record]
    if missing:
        raise RecordError(f"result record lacks fields {missing}")
    line = (json.dumps(record, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")
    path = Path(results_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        try:
            view = memoryview(line)
            while view:
                n = os.write(fd, view)
                view = view[n:]
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
    finally:
        os.close(fd)


def read_results(results_path) -> list[dict]:
    with open(results_path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
