"""Binary checkpoint container.

Layout::

    b"CLCAP-CKPT\\n"
    uint64 little-endian header length
    header: UTF-8 JSON, sorted keys
    payload: concatenated little-endian float64 sections

The header lists the sections (name, length) in payload order and
carries a SHA-256 over the header (without the digest field) plus the
payload, so truncation or corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"CLCAP-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _digest(header: dict, payload: bytes) -> str:
    body = json.dumps({k: v for k, v in header.items() if k != "sha256"}, sort_keys=True).encode()
    return hashlib.sha256(body + payload).hexdigest()


def write_sections(path, header: dict, sections: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["version"] = FORMAT_VERSION
    header["sections"] = [{"length": int(np.asarray(a).size), "name": name} for name, a in sections.items()]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").ravel().tobytes() for a in sections.values())
    header["sha256"] = _digest(header, payload)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(payload)


def read_sections(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    n = int.from_bytes(data[pos:pos + 8], "little")
    pos += 8
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = data[pos + n:]
    if header.get("sha256") != _digest(header, payload):
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    sections = {}
    offset = 0
    for sec in header["sections"]:
        size = sec["length"] * 8
        sections[sec["name"]] = np.frombuffer(payload[offset:offset + size], dtype="<f8").astype(np.float64)
        offset += size
    return header, sections
