"""Shared data types, errors and on-disk formats.

Embeddings live on disk as 32-bit floats; everything downstream promotes them
to float64 before any arithmetic.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

MAGIC = b"OKPI"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIIB")

# Norms at or below this are rejected by l2_normalize.
MIN_NORM = 1e-30


class OkapiError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(OkapiError):
    pass


class ValidationError(OkapiError, ValueError):
    pass


class DegenerateVector(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FileFormat(enum.Enum):
    BINARY = "binary"
    CSV = "csv"

    @classmethod
    def from_path(cls, path: str | Path) -> "FileFormat":
        return cls.CSV if str(path).lower().endswith(".csv") else cls.BINARY


class Filtered(enum.Enum):
    """Why a query received no neighbours."""

    NONE = "none"
    QUERY_CALIPER = "query_caliper"
    NO_VALID_KEYS = "no_valid_keys"


@dataclass(frozen=True)
class Sample:
    id: int
    domain: int
    target: Optional[float]
    embedding: np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Column-oriented container of ids, domains, optional targets and encodings.

    ``targets`` is ``None`` when the set carries no target column at all; inside
    a target column, NaN marks a sample whose target is withheld (unlabelled).
    """

    ids: np.ndarray  # (N,) uint64
    domains: np.ndarray  # (N,) int64
    embeddings: np.ndarray  # (N, d) float32
    domain_count: int
    targets: Optional[np.ndarray] = None  # (N,) float64

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        domains = np.asarray(self.domains, dtype=np.int64)
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise DimensionMismatch(f"embeddings must be 2-D, got shape {emb.shape}")
        n, d = emb.shape
        if d < 1:
            raise DimensionMismatch("embedding dimension must be positive")
        if ids.shape != (n,) or domains.shape != (n,):
            raise DimensionMismatch("ids/domains must have one entry per embedding row")
        targets = self.targets
        if targets is not None:
            targets = np.asarray(targets, dtype=np.float64)
            if targets.shape != (n,):
                raise DimensionMismatch("targets must have one entry per embedding row")
            if np.isinf(targets).any():
                raise ValidationError("targets must be finite or NaN (missing)")
        if not np.isfinite(emb).all():
            raise ValidationError("embeddings contain NaN or Inf")
        if len(np.unique(ids)) != n:
            raise ValidationError("duplicate sample ids")
        if self.domain_count < 1:
            raise ValidationError("domain_count must be positive")
        if n and (domains.min() < 0 or domains.max() >= self.domain_count):
            raise ValidationError(f"domain label outside [0, {self.domain_count})")
        for arr in (ids, domains, emb):
            arr.setflags(write=False)
        if targets is not None:
            targets.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "targets", targets)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_targets(self) -> bool:
        return self.targets is not None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            t = None
            if self.targets is not None and not math.isnan(self.targets[i]):
                t = float(self.targets[i])
            yield Sample(int(self.ids[i]), int(self.domains[i]), t, self.embeddings[i])

    def labelled_mask(self) -> np.ndarray:
        """True where a target is present (the labelled split)."""
        if self.targets is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.targets)

    def split_labels(self) -> np.ndarray:
        """Binary reduction of the domain labels: labelled -> 1, unlabelled -> 0."""
        return self.labelled_mask().astype(np.int64)

    def index_of(self) -> dict[int, int]:
        return {int(i): n for n, i in enumerate(self.ids)}

    def subset(self, mask: np.ndarray) -> "EmbeddingSet":
        mask = np.asarray(mask)
        return EmbeddingSet(
            ids=self.ids[mask],
            domains=self.domains[mask],
            embeddings=self.embeddings[mask],
            domain_count=self.domain_count,
            targets=None if self.targets is None else self.targets[mask],
        )

    def equals(self, other: "EmbeddingSet") -> bool:
        """Bitwise equality of every column."""
        if self.domain_count != other.domain_count or self.has_targets != other.has_targets:
            return False
        same = (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.domains, other.domains)
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )
        if same and self.targets is not None:
            same = np.array_equal(self.targets, other.targets, equal_nan=True)
        return same


@dataclass(frozen=True)
class MatchRecord:
    query_id: int
    neighbor_ids: tuple[int, ...] = ()
    distances: tuple[float, ...] = ()
    filtered: Filtered = Filtered.NONE

    def __post_init__(self):
        if len(self.neighbor_ids) != len(self.distances):
            raise ValidationError("neighbor_ids and distances must align")
        if (len(self.neighbor_ids) == 0) != (self.filtered is not Filtered.NONE):
            raise ValidationError("a record is empty iff it is filtered")
        if any(b < a for a, b in zip(self.distances, self.distances[1:])):
            raise ValidationError("distances must be nondecreasing")

    @property
    def matched(self) -> bool:
        return self.filtered is Filtered.NONE

    def to_json(self) -> str:
        return json.dumps(
            {
                "query_id": int(self.query_id),
                "neighbor_ids": [int(i) for i in self.neighbor_ids],
                "distances": [float(x) for x in self.distances],
                "filtered": self.filtered.value,
            },
            separators=(",", ":"),
            allow_nan=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "MatchRecord":
        try:
            obj = json.loads(line)
            return cls(
                query_id=int(obj["query_id"]),
                neighbor_ids=tuple(int(i) for i in obj["neighbor_ids"]),
                distances=tuple(float(x) for x in obj["distances"]),
                filtered=Filtered(obj["filtered"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise FormatError(f"bad match record: {exc}") from exc


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    The norm is accumulated after dividing by the largest magnitude, so tiny
    inputs such as ``(1e-20, 0)`` normalise without underflow. Vectors with
    norm <= 1e-30 raise :class:`DegenerateVector`.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch("l2_normalize expects a non-empty 1-D vector")
    if not np.isfinite(v).all():
        raise ValidationError("vector has non-finite components")
    m = float(np.max(np.abs(v)))
    if m == 0.0:
        raise DegenerateVector("zero vector cannot be normalised")
    u = v / m
    acc = 0.0
    for x in u:
        acc += x * x
    norm = math.sqrt(acc)
    if m * norm <= MIN_NORM:
        raise DegenerateVector(f"vector norm {m * norm:.3g} <= {MIN_NORM}")
    return u / norm


def normalize_rows(z) -> np.ndarray:
    """Row-wise :func:`l2_normalize`, bit-identical to applying it per row."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionMismatch("normalize_rows expects a 2-D array")
    if z.shape[0] == 0:
        return z.copy()
    m = np.max(np.abs(z), axis=1)
    if (m == 0.0).any():
        raise DegenerateVector("zero row cannot be normalised")
    u = z / m[:, None]
    acc = np.zeros(len(z))
    for j in range(z.shape[1]):
        acc += u[:, j] * u[:, j]
    norm = np.sqrt(acc)
    if (m * norm <= MIN_NORM).any():
        raise DegenerateVector(f"row norm <= {MIN_NORM}")
    return u / norm[:, None]


# --------------------------------------------------------------------------
# Embedding files


def load_embeddings(
    path: str | Path,
    format: FileFormat | str | None = None,
    domain_count: Optional[int] = None,
) -> EmbeddingSet:
    """Read an :class:`EmbeddingSet` from a binary ``.okpi`` or CSV file.

    CSV files do not record the size of the domain universe; it defaults to
    ``max(domain) + 1`` unless ``domain_count`` is given. Raises ``OSError``
    when the file cannot be read, :class:`FormatError` for structural problems
    and :class:`ValidationError` for bad values.
    """
    path = Path(path)
    fmt = FileFormat(format) if format is not None else FileFormat.from_path(path)
    if fmt is FileFormat.BINARY:
        return _load_binary(path.read_bytes())
    with open(path, newline="") as fh:
        return _load_csv(fh, domain_count)


def save_embeddings(data: EmbeddingSet, path: str | Path, format: FileFormat | str | None = None) -> None:
    path = Path(path)
    fmt = FileFormat(format) if format is not None else FileFormat.from_path(path)
    if fmt is FileFormat.BINARY:
        path.write_bytes(_dump_binary(data))
    else:
        with open(path, "w", newline="") as fh:
            _dump_csv(data, fh)


def _row_dtype(d: int, has_target: bool) -> np.dtype:
    fields = [("id", "<u8"), ("domain", "<u4")]
    if has_target:
        fields.append(("target", "<f8"))
    fields.append(("emb", "<f4", (d,)))
    return np.dtype(fields)  # packed: no alignment padding


def _dump_binary(data: EmbeddingSet) -> bytes:
    has_target = data.has_targets
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(data), data.dim, data.domain_count, int(has_target))
    rows = np.empty(len(data), dtype=_row_dtype(data.dim, has_target))
    rows["id"] = data.ids
    rows["domain"] = data.domains
    if has_target:
        rows["target"] = data.targets
    rows["emb"] = data.embeddings
    return header + rows.tobytes()


def _load_binary(buf: bytes) -> EmbeddingSet:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, n, d, domain_count, flags = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if d == 0:
        raise FormatError("zero embedding dimension")
    has_target = bool(flags & 1)
    dtype = _row_dtype(d, has_target)
    body = buf[_HEADER.size:]
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"expected {n * dtype.itemsize} payload bytes, found {len(body)}")
    rows = np.frombuffer(body, dtype=dtype, count=n)
    return EmbeddingSet(
        ids=rows["id"].astype(np.uint64),
        domains=rows["domain"].astype(np.int64),
        embeddings=rows["emb"].astype(np.float32).reshape(n, d),
        domain_count=domain_count,
        targets=rows["target"].astype(np.float64) if has_target else None,
    )


def _fmt_f32(x) -> str:
    # repr of the widened float32 round-trips back to the same float32
    return repr(float(np.float32(x)))


def _dump_csv(data: EmbeddingSet, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    head = ["id", "domain"] + (["target"] if data.has_targets else [])
    w.writerow(head + [f"e{j}" for j in range(data.dim)])
    for i in range(len(data)):
        row = [str(int(data.ids[i])), str(int(data.domains[i]))]
        if data.has_targets:
            t = data.targets[i]
            row.append("" if math.isnan(t) else repr(float(t)))
        row.extend(_fmt_f32(x) for x in data.embeddings[i])
        w.writerow(row)


def _load_csv(fh, domain_count: Optional[int] = None) -> EmbeddingSet:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV file") from None
    header = [h.strip() for h in header]
    if header[:2] != ["id", "domain"]:
        raise FormatError("CSV header must start with id,domain")
    has_target = len(header) > 2 and header[2] == "target"
    emb_cols = header[3:] if has_target else header[2:]
    if not emb_cols or emb_cols != [f"e{j}" for j in range(len(emb_cols))]:
        raise FormatError("embedding columns must be named e0..e{d-1}")
    d = len(emb_cols)
    width = len(header)
    ids, domains, targets, emb = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            domains.append(int(row[1]))
            off = 2
            if has_target:
                targets.append(float(row[2]) if row[2].strip() else math.nan)
                off = 3
            emb.append([float(x) for x in row[off:]])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    if any(i < 0 or i >= 2**64 for i in ids):
        raise ValidationError("ids must fit in an unsigned 64-bit integer")
    if any(s < 0 for s in domains):
        raise ValidationError("negative domain label")
    emb_arr = np.array(emb, dtype=np.float64).reshape(len(emb), d)
    if not np.isfinite(emb_arr).all():
        raise ValidationError("embeddings contain NaN or Inf")
    return EmbeddingSet(
        ids=np.array(ids, dtype=np.uint64),
        domains=np.array(domains, dtype=np.int64),
        embeddings=emb_arr.astype(np.float32),
        domain_count=domain_count or ((max(domains) + 1) if domains else 1),
        targets=np.array(targets, dtype=np.float64) if has_target else None,
    )


# --------------------------------------------------------------------------
# Match records


def save_matches(records: Iterable[MatchRecord], path: str | Path) -> None:
    with open(path, "w", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def load_matches(path: str | Path) -> list[MatchRecord]:
    with open(path) as fh:
        return [MatchRecord.from_json(line) for line in fh if line.strip()]


def match_summary(records: Sequence[MatchRecord]) -> dict:
    matched = [r for r in records if r.matched]
    dists = [x for r in matched for x in r.distances]
    return {
        "records": len(records),
        "matched": len(matched),
        "retention": len(matched) / len(records) if records else 0.0,
        "mean_distance": float(np.mean(dists)) if dists else None,
    }
