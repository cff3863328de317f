"""Embedding matrices on disk (EMB1 binary or TSV) and a hashing text embedder.

EMB1 layout, little-endian::

    b"EMB1" | u32 N | u32 D | N x (u16 len, utf-8 id) | N*D float32 row-major
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmbeddingError, SchemaError
from .hashing import fnv1a32
from .ingest import Dataset

MAGIC = b"EMB1"

_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    row_ids: tuple[str, ...]
    values: np.ndarray  # float32, (N, D)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.row_ids):
            raise EmbeddingError(
                f"values shape {self.values.shape} does not match {len(self.row_ids)} row ids"
            )

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return len(self.row_ids)


def write_emb1(matrix: EmbeddingMatrix, path: str | Path) -> None:
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    n, d = values.shape
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + struct.pack("<II", n, d))
        for rid in matrix.row_ids:
            raw = rid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise EmbeddingError(f"row id too long: {rid[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(values.tobytes())


def read_emb1(path: str | Path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise SchemaError(f"{path}: not an EMB1 file")
    try:
        n, d = struct.unpack_from("<II", data, 4)
        pos = 12
        ids = []
        for _ in range(n):
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
            ids.append(data[pos:pos + length].decode("utf-8"))
            pos += length
    except (struct.error, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: corrupt EMB1 header ({exc})") from None
    expected = n * d * 4
    if len(data) - pos != expected:
        raise SchemaError(f"{path}: expected {expected} value bytes, found {len(data) - pos}")
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return EmbeddingMatrix(tuple(ids), values.astype(np.float32))


def read_tsv(path: str | Path) -> EmbeddingMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("id\t"):
        raise SchemaError(f"{path}: TSV embeddings need a header starting with 'id'")
    d = len(lines[0].split("\t")) - 1
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != d + 1:
            raise EmbeddingError(f"{path}:{lineno}: row {parts[0]!r} has {len(parts) - 1} values, expected {d}")
        ids.append(parts[0])
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise EmbeddingError(f"{path}:{lineno}: non-numeric value in row {parts[0]!r}") from None
    values = np.asarray(rows, dtype=np.float32).reshape(len(ids), d)
    return EmbeddingMatrix(tuple(ids), values)


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read an EMB1 file, or a TSV when the magic bytes are absent."""
    with Path(path).open("rb") as fh:
        head = fh.read(4)
    return read_emb1(path) if head == MAGIC else read_tsv(path)


def load_embeddings(path: str | Path, dataset: Dataset,
                    expected_dim: int | None = None) -> EmbeddingMatrix:
    """Read embeddings and reorder them to match ``dataset``.

    Rows are matched on the record key ``molecule_id|target_id``. A file
    keyed by bare molecule ids (one vector per molecule) is also accepted
    and fanned out to every record of that molecule.
    """
    raw = read_embeddings(path)
    if expected_dim is not None and raw.dim != expected_dim:
        raise EmbeddingError(f"{path}: dimension {raw.dim}, expected {expected_dim}")
    index: dict[str, int] = {}
    for row, rid in enumerate(raw.row_ids):
        if rid in index:
            raise EmbeddingError(f"{path}: duplicate row id {rid!r}")
        index[rid] = row
    finite = np.isfinite(raw.values).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise EmbeddingError(f"{path}: non-finite value in row {bad} (id {raw.row_ids[bad]!r})")

    record_keys = dataset.keys
    if any(k in index for k in record_keys):
        wanted = record_keys
    else:
        wanted = [r.molecule_id for r in dataset]
    known = set(wanted)
    for rid in raw.row_ids:
        if rid not in known:
            raise EmbeddingError(f"{path}: unknown row id {rid!r} not in dataset")
    for w in wanted:
        if w not in index:
            raise EmbeddingError(f"{path}: missing row id {w!r}")
    order = np.fromiter((index[w] for w in wanted), dtype=np.int64, count=len(wanted))
    return EmbeddingMatrix(tuple(record_keys), raw.values[order])


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def hash_embed(text: str, dim: int = 512) -> np.ndarray:
    """Signed feature-hashing bag of words, L2-normalised.

    Token ``t`` with hash ``h = fnv1a32(t)`` adds ``+1`` (odd ``h``) or ``-1``
    (even ``h``) at index ``h % dim`` once per occurrence.
    """
    if dim < 64 or dim & (dim - 1):
        raise ValueError(f"dim must be a power of two >= 64, got {dim}")
    tokens = tokenize(text)
    if not tokens:
        raise EmbeddingError(f"no tokens in text {text[:40]!r}")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = fnv1a32(tok.encode("utf-8"))
        vec[h % dim] += 1.0 if h & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token cancelled against another
        raise EmbeddingError(f"hashed embedding of {text[:40]!r} is zero")
    return vec / norm


def hash_embed_matrix(texts: Sequence[str], row_ids: Sequence[str], dim: int = 512) -> EmbeddingMatrix:
    values = np.stack([hash_embed(t, dim) for t in texts]).astype(np.float32)
    return EmbeddingMatrix(tuple(row_ids), values)
