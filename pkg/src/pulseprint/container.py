"""Binary tensor container: plain-text header, then little-endian payloads.

Header lines are `name dtype shape offset`, one per tensor, terminated by a
single `end` line; offsets are byte positions relative to the payload start.
The same container carries checkpoints, beat files and fingerprint files.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import InputError

_DTYPE_TAGS = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
_TAG_FOR = {np.dtype(np.float64): "f64", np.dtype(np.float32): "f32"}


def write_container(path, tensors):
    """Write named arrays atomically (temp file + rename).

    tensors: mapping name -> real ndarray (float32/float64). Names must not
    contain whitespace.
    """
    header_lines = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = _TAG_FOR.get(np.dtype(arr.dtype))
        if tag is None:
            raise InputError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        if any(ch.isspace() for ch in name):
            raise InputError(f"tensor name {name!r} contains whitespace")
        shape = "x".join(str(s) for s in arr.shape) or "1"
        header_lines.append(f"{name} {tag} {shape} {len(payload)}")
        payload += arr.astype(f"<{arr.dtype.str[1:]}", copy=False).tobytes()
    header_lines.append("end")
    blob = ("\n".join(header_lines) + "\n").encode("ascii") + bytes(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_container(path):
    """Read a container back into an ordered dict name -> ndarray.

    Unknown dtype tags are rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    entries = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise InputError(f"{path}: truncated container header")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        parts = line.split()
        if len(parts) != 4:
            raise InputError(f"{path}: malformed header line {line!r}")
        name, tag, shape_s, off_s = parts
        if tag not in _DTYPE_TAGS:
            raise InputError(f"{path}: unknown dtype tag {tag!r}")
        shape = tuple(int(s) for s in shape_s.split("x"))
        entries.append((name, tag, shape, int(off_s)))
    out = {}
    for name, tag, shape, off in entries:
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if shape else 1
        start = pos + off
        end = start + count * dt.itemsize
        if end > len(blob):
            raise InputError(f"{path}: payload truncated for tensor {name!r}")
        arr = np.frombuffer(blob[start:end], dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    return out
