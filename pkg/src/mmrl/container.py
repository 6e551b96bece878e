"""Text-header + MMT1-payload container used by every file this package writes.

Layout::

    MMRL-CONTAINER <version> <kind>\\n
    key=value\\n            (header, insertion order preserved)
    record <text>\\n        (free-form per-item lines, e.g. manifest items)
    tensor <name> <offset> <nbytes>\\n
    payload_bytes=<n>\\n
    payload_sha256=<hex>\\n
    \\n
    <payload: concatenated MMT1 tensor dumps>

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError
from .tensor import dump_tensor, load_tensor

FORMAT_VERSION = 1
MAGIC = b"MMRL-CONTAINER"


@dataclass
class Container:
    kind: str
    header: dict[str, str] = field(default_factory=dict)
    records: list[str] = field(default_factory=list)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    offsets: dict[str, int] = field(default_factory=dict)


def encode(c: Container) -> bytes:
    blobs, lines, offset = [], [], 0
    for name, arr in c.tensors.items():
        if any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name may not contain whitespace: {name!r}")
        blob = dump_tensor(arr)
        lines.append(f"tensor {name} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    head = [f"{MAGIC.decode()} {FORMAT_VERSION} {c.kind}"]
    for k, v in c.header.items():
        v = str(v)
        if "\n" in v or "=" in k:
            raise FormatError(f"header entry {k!r} is not a single key=value line")
        head.append(f"{k}={v}")
    head += [f"record {r}" for r in c.records]
    head += lines
    head.append(f"payload_bytes={len(payload)}")
    head.append(f"payload_sha256={hashlib.sha256(payload).hexdigest()}")
    return ("\n".join(head) + "\n\n").encode() + payload


def decode(buf: bytes, expect_kind: str | None = None) -> Container:
    if not buf.startswith(MAGIC + b" "):
        raise IntegrityError("not an MMRL container (bad magic bytes)")
    end = buf.find(b"\n\n")
    if end < 0:
        raise IntegrityError("truncated container header")
    lines = buf[:end].decode(errors="replace").split("\n")
    first = lines[0].split()
    if len(first) != 3:
        raise IntegrityError(f"malformed container signature: {lines[0]!r}")
    try:
        version = int(first[1])
    except ValueError:
        raise IntegrityError(f"malformed container version: {first[1]!r}") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"container format version {version} is not supported (expected {FORMAT_VERSION})")
    kind = first[2]
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} file, found {kind}")

    c = Container(kind=kind)
    entries: list[tuple[str, int, int]] = []
    meta: dict[str, str] = {}
    for line in lines[1:]:
        if line.startswith("record "):
            c.records.append(line[7:])
        elif line.startswith("tensor "):
            _, name, off, nb = line.split()
            entries.append((name, int(off), int(nb)))
        elif line.startswith("payload_"):
            k, _, v = line.partition("=")
            meta[k] = v
        else:
            k, sep, v = line.partition("=")
            if not sep:
                raise IntegrityError(f"malformed header line: {line!r}")
            c.header[k] = v
    payload = buf[end + 2 :]
    if "payload_bytes" not in meta or len(payload) != int(meta["payload_bytes"]):
        raise IntegrityError(f"payload is {len(payload)} bytes, header says {meta.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != meta.get("payload_sha256"):
        raise IntegrityError("payload checksum mismatch")
    for name, off, nb in entries:
        arr, nxt = load_tensor(payload, off)
        if nxt - off != nb:
            raise IntegrityError(f"tensor {name} length mismatch")
        c.tensors[name] = arr
        c.offsets[name] = off
    return c


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, c: Container) -> None:
    write_atomic(path, encode(c))


def load(path, expect_kind: str | None = None) -> Container:
    return decode(Path(path).read_bytes(), expect_kind)
