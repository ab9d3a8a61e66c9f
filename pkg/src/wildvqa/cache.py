"""On-disk feature cache: ``<root>/<backbone_tag>/<source_id>.bin`` + ``.json`` header."""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import CacheCorruptionError, CacheNotFoundError, ValidationError
from .features import FeatureCacheRecord

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._+-]*$")
DTYPE_TAG = "f32le"


def check_id(name: str, what: str = "source_id") -> str:
    if not isinstance(name, str) or not _SAFE_ID.match(name):
        raise ValidationError(f"invalid {what} {name!r}: use letters, digits and ._+-", offenders=[name])
    return name


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    def __init__(self, root):
        self.root = Path(root)

    def paths(self, source_id: str, backbone_tag: str) -> tuple[Path, Path]:
        base = self.root / check_id(backbone_tag, "backbone_tag") / check_id(source_id)
        return base.with_name(base.name + ".bin"), base.with_name(base.name + ".json")

    def exists(self, source_id: str, backbone_tag: str) -> bool:
        return self.paths(source_id, backbone_tag)[1].is_file()

    def store(self, record: FeatureCacheRecord) -> Path:
        bin_path, json_path = self.paths(record.source_id, record.backbone_tag)
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "source_id": record.source_id,
            "T": record.T,
            "dim": record.dim,
            "backbone_tag": record.backbone_tag,
            "extraction_version": record.extraction_version,
            "dtype": DTYPE_TAG,
        }
        if record.frame_rate is not None:
            header["frame_rate"] = record.frame_rate
        if record.extra:
            header["extra"] = record.extra
        _atomic_write(bin_path, record.payload.astype("<f4", copy=False).tobytes(order="C"))
        # the header lands last and marks the record complete
        _atomic_write(json_path, json.dumps(header, indent=2).encode("utf-8"))
        return json_path

    def load(self, source_id: str, backbone_tag: str, expected_dim: int | None = None) -> FeatureCacheRecord:
        bin_path, json_path = self.paths(source_id, backbone_tag)
        if not json_path.is_file():
            raise CacheNotFoundError(f"no cached features for {source_id!r} under backbone {backbone_tag!r}")
        try:
            with open(json_path, encoding="utf-8") as fh:
                header = json.load(fh)
            T, dim = int(header["T"]), int(header["dim"])
            tag, sid, dtype = header["backbone_tag"], header["source_id"], header["dtype"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorruptionError(f"unreadable header {json_path}: {exc}") from exc
        if tag != backbone_tag:
            raise CacheCorruptionError(f"{json_path}: header backbone {tag!r} does not match {backbone_tag!r}")
        if sid != source_id:
            raise CacheCorruptionError(f"{json_path}: header source_id {sid!r} does not match {source_id!r}")
        if dtype != DTYPE_TAG:
            raise CacheCorruptionError(f"{json_path}: unsupported dtype {dtype!r}")
        if expected_dim is not None and dim != expected_dim:
            raise CacheCorruptionError(f"{json_path}: dim {dim} but backbone declares {expected_dim}")
        if not bin_path.is_file():
            raise CacheCorruptionError(f"{bin_path} missing for existing header")
        raw = bin_path.read_bytes()
        if len(raw) != T * dim * 4:
            raise CacheCorruptionError(f"{bin_path}: {len(raw)} bytes, header implies {T * dim * 4}")
        payload = np.frombuffer(raw, dtype="<f4").reshape(T, dim).astype(np.float32)
        return FeatureCacheRecord(source_id=sid, payload=payload, backbone_tag=tag,
                                  extraction_version=header.get("extraction_version", ""),
                                  frame_rate=header.get("frame_rate"), extra=header.get("extra", {}))
