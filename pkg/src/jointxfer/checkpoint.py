"""Binary checkpoint / tensor-table container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"JXFRCKPT" (checkpoints) or b"JXFRSEGS" (segment cache)
    version      u32       FORMAT_VERSION
    header_len   u32
    header       header_len bytes of UTF-8 JSON, keys sorted
                 ({"arch": {...}, "meta": {...}} for checkpoints)
    n_tensors    u32
    n_tensors times:
        name_len u16, name (UTF-8)
        dtype    u8        1 = float64
        ndim     u8
        dims     ndim x u64
        payload  prod(dims) x f64, row-major
    checksum     32 bytes  SHA-256 of every preceding byte

Writes go to a temporary sibling and are renamed into place.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ArchMismatchError, CorruptCheckpointError, VersionMismatchError
from .network import ArchConfig, ModelParams, param_shapes

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"JXFRCKPT"
SEGMENT_MAGIC = b"JXFRSEGS"
_DTYPE_F64 = 1


def encode_tensor_file(header, tensors, magic=CHECKPOINT_MAGIC):
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_tensor_file(blob, magic=CHECKPOINT_MAGIC):
    if len(blob) < len(magic) + 4 + 32:
        raise CorruptCheckpointError("file too short")
    body, digest = blob[:-32], blob[-32:]
    if blob[:len(magic)] != magic:
        raise CorruptCheckpointError("bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, len(magic))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
    try:
        pos = len(magic) + 4
        (hlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != _DTYPE_F64:
                raise CorruptCheckpointError(f"unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CorruptCheckpointError(f"payload of {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, "<f8", int(nbytes // 8), pos).reshape(shape).astype(np.float64)
            pos += nbytes
        if pos != len(body):
            raise CorruptCheckpointError("trailing bytes after tensor table")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed tensor table: {exc}") from exc
    return header, tensors


def atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params, meta, path):
    header = {"arch": params.arch.to_dict(), "meta": meta or {}}
    atomic_write(path, encode_tensor_file(header, params.tensors))


def load_checkpoint(path, expected_arch=None):
    """Read ``(ModelParams, meta)``.

    Raises ``ArchMismatchError`` when ``expected_arch`` is given and differs
    from the stored one (or the tensor table disagrees with the stored arch).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    header, tensors = decode_tensor_file(blob)
    try:
        arch = ArchConfig.from_dict(header["arch"])
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"missing or malformed arch block: {exc}") from exc
    if expected_arch is not None and arch != expected_arch:
        diff = sorted(k for k, v in arch.to_dict().items() if expected_arch.to_dict()[k] != v)
        raise ArchMismatchError(f"checkpoint arch differs in {diff}")
    expect = param_shapes(arch)
    got = {n: t.shape for n, t in tensors.items()}
    if got != {n: tuple(s) for n, s in expect.items()} or list(tensors) != list(expect):
        raise ArchMismatchError("tensor table does not match the stored arch config")
    return ModelParams(arch, tensors), header.get("meta", {})
