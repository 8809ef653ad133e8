"""Image memory: stored raw visual features plus a dense retrieval index.

The index holds one unit-norm embedding column per image; a sentence embedding
retrieves by exact max inner product (argmax over columns, ties resolved to the
lowest column). Raw per-object and global features are kept alongside and are
what the fusion stage consumes; embeddings are only for retrieval.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoders import ImageEncoderParams, encode_image

INDEX_MAGIC = b"VIB1"
INDEX_VERSION = 1
RECORDS_MAGIC = b"VRC1"


@dataclass
class ImageRecord:
    """One stored image: raw features and an optional aligned caption."""

    id: int
    raw_global: np.ndarray            # (feat_dim,)
    raw_objects: np.ndarray           # (k_objects, feat_dim), zero rows pad
    caption_ids: "list[int] | None" = None


@dataclass
class VisualFeatureSet:
    """Raw features handed to fusion after a retrieval."""

    objects: np.ndarray               # (k_objects, feat_dim)
    global_feat: np.ndarray           # (feat_dim,)
    source_id: int
    retrieval_score: float


class ImagebaseIndex:
    """Records plus a (joint_dim, M) matrix of unit embedding columns."""

    def __init__(self, records: Sequence[ImageRecord], embeddings: np.ndarray):
        if len(records) == 0:
            raise ValueError("empty imagebase")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != len(records):
            raise ValueError(
                f"embedding matrix {embeddings.shape} does not match {len(records)} records"
            )
        self.records = list(records)
        self.embeddings = embeddings
        self._pos = {r.id: i for i, r in enumerate(self.records)}
        if len(self._pos) != len(self.records):
            raise ValueError("duplicate record ids in imagebase")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def joint_dim(self) -> int:
        return self.embeddings.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.records[0].raw_global.shape[0]

    @property
    def k_objects(self) -> int:
        return self.records[0].raw_objects.shape[0]

    def record_by_id(self, record_id: int) -> ImageRecord:
        pos = self._pos.get(int(record_id))
        if pos is None:
            raise KeyError(f"unknown image id {record_id}")
        return self.records[pos]


def build_index(records: Sequence[ImageRecord], image_params: ImageEncoderParams) -> ImagebaseIndex:
    """Embed every record's global feature; column i is encode_image(records[i])."""
    if len(records) == 0:
        raise ValueError("cannot build an index over zero records")
    cols = np.empty((image_params.joint_dim, len(records)))
    for i, rec in enumerate(records):
        cols[:, i] = encode_image(image_params, rec.raw_global).data
    return ImagebaseIndex(records, cols)


def _query_vector(index: ImagebaseIndex, t) -> np.ndarray:
    t = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if t.shape != (index.joint_dim,):
        raise ValueError(
            f"query shape {t.shape} does not match joint dimension ({index.joint_dim},)"
        )
    if not np.any(t):
        raise ValueError("zero query vector")
    return t


def retrieve(index: ImagebaseIndex, t) -> tuple[int, float]:
    """Best record id and its dot-product score; ties go to the lowest column."""
    t = _query_vector(index, t)
    scores = t @ index.embeddings
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return index.records[best].id, float(scores[best])


def retrieve_topk(index: ImagebaseIndex, t, k: int) -> list[tuple[int, float]]:
    """Top-k (id, score) in descending score; equal scores keep column order."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    t = _query_vector(index, t)
    scores = t @ index.embeddings
    order = np.argsort(-scores, kind="stable")[: min(k, len(index))]
    return [(index.records[i].id, float(scores[i])) for i in order]


def extract_features(index: ImagebaseIndex, record_id: int,
                     retrieval_score: float) -> VisualFeatureSet:
    """Hand back the stored raw features for a retrieved record."""
    rec = index.record_by_id(record_id)
    return VisualFeatureSet(
        objects=rec.raw_objects,
        global_feat=rec.raw_global,
        source_id=rec.id,
        retrieval_score=float(retrieval_score),
    )


# ---------------------------------------------------------------------------
# on-disk format: little-endian u64/f64 throughout


def _write_records(fh, records: Sequence[ImageRecord], k: int, feat: int) -> None:
    for rec in records:
        if rec.raw_global.shape != (feat,) or rec.raw_objects.shape != (k, feat):
            raise ValueError(f"record {rec.id} has inconsistent feature shapes")
        fh.write(struct.pack("<Q", rec.id))
        fh.write(np.ascontiguousarray(rec.raw_global, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(rec.raw_objects, dtype="<f8").tobytes())
        cap = rec.caption_ids or []
        fh.write(struct.pack("<Q", len(cap)))
        if cap:
            fh.write(np.asarray(cap, dtype="<u8").tobytes())


def _read_records(blob: bytes, ofs: int, m: int, k: int,
                  feat: int) -> tuple[list[ImageRecord], int]:
    records = []
    for _ in range(m):
        (rid,) = struct.unpack_from("<Q", blob, ofs)
        ofs += 8
        need = 8 * feat
        chunk = blob[ofs:ofs + need]
        if len(chunk) != need:
            raise struct.error("short global payload")
        raw_global = np.frombuffer(chunk, dtype="<f8")
        ofs += need
        need = 8 * k * feat
        chunk = blob[ofs:ofs + need]
        if len(chunk) != need:
            raise struct.error("short object payload")
        raw_objects = np.frombuffer(chunk, dtype="<f8")
        ofs += need
        (cap_len,) = struct.unpack_from("<Q", blob, ofs)
        ofs += 8
        caption = None
        if cap_len:
            chunk = blob[ofs:ofs + 8 * cap_len]
            if len(chunk) != 8 * cap_len:
                raise struct.error("short caption payload")
            caption = [int(i) for i in np.frombuffer(chunk, dtype="<u8")]
            ofs += 8 * cap_len
        records.append(ImageRecord(
            id=int(rid),
            raw_global=raw_global.astype(np.float64),
            raw_objects=raw_objects.astype(np.float64).reshape(k, feat),
            caption_ids=caption,
        ))
    return records, ofs


def save_index(path, index: ImagebaseIndex) -> None:
    """Header (magic, u32 version, u64 M/K/feat/joint), records, then the
    row-major embedding payload."""
    k = index.k_objects
    feat = index.feat_dim
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        fh.write(struct.pack("<QQQQ", len(index), k, feat, index.joint_dim))
        _write_records(fh, index.records, k, feat)
        fh.write(np.ascontiguousarray(index.embeddings, dtype="<f8").tobytes())


def load_index(path) -> ImagebaseIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != INDEX_MAGIC:
        raise ValueError(f"not a VIB1 imagebase: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported imagebase version {version}")
    try:
        m, k, feat, joint = struct.unpack_from("<QQQQ", blob, 8)
        ofs = 40
        records, ofs = _read_records(blob, ofs, m, k, feat)
        need = 8 * joint * m
        chunk = blob[ofs:ofs + need]
        if len(chunk) != need:
            raise struct.error("short embedding payload")
        emb = np.frombuffer(chunk, dtype="<f8")
        ofs += need
    except struct.error as exc:
        raise ValueError(f"truncated imagebase at byte {ofs}: {exc}") from exc
    if ofs != len(blob):
        raise ValueError(f"trailing bytes after imagebase payload ({len(blob) - ofs})")
    return ImagebaseIndex(records, emb.astype(np.float64).reshape(joint, m))


def save_records(path, records: Sequence[ImageRecord]) -> None:
    """Records alone (no embeddings), for datasets saved before indexing."""
    if len(records) == 0:
        raise ValueError("cannot save zero records")
    k = records[0].raw_objects.shape[0]
    feat = records[0].raw_global.shape[0]
    with open(path, "wb") as fh:
        fh.write(RECORDS_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        fh.write(struct.pack("<QQQ", len(records), k, feat))
        _write_records(fh, records, k, feat)


def load_records(path) -> list[ImageRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RECORDS_MAGIC:
        raise ValueError(f"not a VRC1 record file: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported record file version {version}")
    try:
        m, k, feat = struct.unpack_from("<QQQ", blob, 8)
        records, ofs = _read_records(blob, 32, m, k, feat)
    except struct.error as exc:
        raise ValueError(f"truncated record file: {exc}") from exc
    if ofs != len(blob):
        raise ValueError(f"trailing bytes after record payload ({len(blob) - ofs})")
    return records
