"""Deterministic array archives.

An archive is an uncompressed zip holding ``meta.json`` plus one ``.npy``
member per named array (members sorted by name, fixed timestamps), so equal
content always produces equal bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH), member.getvalue())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                key = name[len("arrays/"):-len(".npy")]
                arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(meta, arrays))
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def content_hash(meta: dict, arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(meta, arrays)).hexdigest()
