"""Write-once columnar segment files.

Layout (all integers little-endian)::

    b"OBSL1" | column chunk bytes ... | footer JSON | u32 footer length
             | u64 checksum | b"OBSL1"

The checksum is BLAKE2b-64 over everything before it. Each column chunk is
``plain``, ``rle`` or ``dict`` encoded; see docs/FORMAT.md for the chunk
grammar. Scalar columns carry min/max/null-count statistics, which
:func:`read_segment` uses to skip a file without opening it.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import struct
import threading
import uuid
from dataclasses import dataclass
from itertools import compress
from operator import ne
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ChecksumMismatch, CorruptEncoding, IoFailure, SchemaMismatch, SegmentExists
from .model import canonical_text
from .schema import Field, FieldType, TableSchema

MAGIC = b"OBSL1"
_TAIL = struct.Struct("<IQ")
_TAIL_SIZE = _TAIL.size + len(MAGIC)


class Encoding(str, enum.Enum):
    PLAIN = "plain"
    RLE = "rle"
    DICT = "dict"


@dataclass(frozen=True)
class EncodingPolicy:
    rle_adjacent_equal: float = 0.9
    dict_distinct_ratio: float = 0.5

    def choose(self, ftype: FieldType, n: int, equal_pairs: int, distinct: int) -> Encoding:
        if n > 1 and equal_pairs / (n - 1) >= self.rle_adjacent_equal:
            return Encoding.RLE
        if ftype.is_textual and n > 1 and distinct / n <= self.dict_distinct_ratio:
            return Encoding.DICT
        return Encoding.PLAIN


DEFAULT_POLICY = EncodingPolicy()


@dataclass
class ColumnChunk:
    field_id: int
    type: FieldType
    encoding: Encoding
    offset: int
    length: int
    null_count: int = 0
    min_value: Any = None
    max_value: Any = None

    def to_dict(self) -> dict:
        d = {
            "field_id": self.field_id,
            "type": self.type.value,
            "encoding": self.encoding.value,
            "offset": self.offset,
            "length": self.length,
            "null_count": self.null_count,
        }
        if self.min_value is not None:
            d["min"] = self.min_value
            d["max"] = self.max_value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnChunk":
        return cls(
            int(d["field_id"]),
            FieldType(d["type"]),
            Encoding(d["encoding"]),
            int(d["offset"]),
            int(d["length"]),
            int(d.get("null_count", 0)),
            d.get("min"),
            d.get("max"),
        )


@dataclass
class Segment:
    path: str
    row_count: int
    schema_version: int
    columns: list[ColumnChunk]
    checksum: int
    byte_size: int
    added_snapshot: Optional[int] = None

    def chunk(self, field_id: int) -> Optional[ColumnChunk]:
        for c in self.columns:
            if c.field_id == field_id:
                return c
        return None

    @property
    def field_ids(self) -> set[int]:
        return {c.field_id for c in self.columns}

    def to_dict(self, path: Optional[str] = None) -> dict:
        d = {
            "path": self.path if path is None else path,
            "row_count": self.row_count,
            "schema_version": self.schema_version,
            "checksum": f"{self.checksum:016x}",
            "byte_size": self.byte_size,
            "columns": [c.to_dict() for c in self.columns],
        }
        if self.added_snapshot is not None:
            d["added_snapshot"] = self.added_snapshot
        return d

    @classmethod
    def from_dict(cls, d: dict, path: Optional[str] = None) -> "Segment":
        return cls(
            d["path"] if path is None else path,
            int(d["row_count"]),
            int(d["schema_version"]),
            [ColumnChunk.from_dict(c) for c in d["columns"]],
            int(d["checksum"], 16),
            int(d["byte_size"]),
            d.get("added_snapshot"),
        )


class IOStats:
    """Counts segment file opens and bytes read; shared by a lakehouse handle."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        with self._lock:
            self.files_opened = 0
            self.bytes_read = 0
            self.opened_paths: list[str] = []

    def record(self, path: str, nbytes: int) -> None:
        with self._lock:
            self.files_opened += 1
            self.bytes_read += nbytes
            self.opened_paths.append(path)


# --------------------------------------------------------------------------
# predicates
# --------------------------------------------------------------------------


class Condition:
    def may_match(self, lo: Any, hi: Any) -> bool:
        raise NotImplementedError

    def matches(self, v: Any) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class Eq(Condition):
    value: Any

    def may_match(self, lo, hi):
        return lo is not None and lo <= self.value <= hi

    def matches(self, v):
        return v == self.value


@dataclass(frozen=True)
class Range(Condition):
    """Inclusive range; either bound may be open."""

    lo: Any = None
    hi: Any = None

    def may_match(self, lo, hi):
        if lo is None:
            return False
        return (self.lo is None or hi >= self.lo) and (self.hi is None or lo <= self.hi)

    def matches(self, v):
        return v is not None and (self.lo is None or v >= self.lo) and (self.hi is None or v <= self.hi)


@dataclass(frozen=True)
class OneOf(Condition):
    values: frozenset

    def __init__(self, values: Iterable[Any]):
        object.__setattr__(self, "values", frozenset(values))

    def may_match(self, lo, hi):
        return lo is not None and any(lo <= v <= hi for v in self.values)

    def matches(self, v):
        return v in self.values


def segment_may_match(segment: Segment, predicate: Optional[Mapping[int, Condition]]) -> bool:
    """False only when column statistics prove no row can satisfy ``predicate``."""
    if not predicate:
        return True
    for fid, cond in predicate.items():
        chunk = segment.chunk(fid)
        if chunk is None:
            # field added after this segment was written: every value is null
            return False
        if not chunk.type.is_scalar:
            continue
        if chunk.null_count == segment.row_count:
            return False
        if chunk.min_value is not None and not cond.may_match(chunk.min_value, chunk.max_value):
            return False
    return True


# --------------------------------------------------------------------------
# value blocks
# --------------------------------------------------------------------------

MAX_TEXT_STAT = 256

_INT_WIDTHS = ((1, np.int8), (2, np.int16), (4, np.int32), (8, np.int64))
_UINT_WIDTHS = ((1, np.uint8), (2, np.uint16), (4, np.uint32), (8, np.uint64))
_U32 = struct.Struct("<I")
_HDR = struct.Struct("<BI")


def _pack_uint(arr: np.ndarray) -> bytes:
    top = int(arr.max()) if arr.size else 0
    for width, dt in _UINT_WIDTHS:
        if top <= np.iinfo(dt).max:
            return bytes([width]) + arr.astype(f"<u{width}", copy=False).tobytes()
    raise SchemaMismatch("unsigned value out of range")


def _unpack_uint(buf: memoryview, pos: int, count: int) -> tuple[np.ndarray, int]:
    width = buf[pos]
    pos += 1
    end = pos + width * count
    if width not in (1, 2, 4, 8) or end > len(buf):
        raise CorruptEncoding("bad unsigned array")
    return np.frombuffer(buf[pos:end], dtype=f"<u{width}"), end


def _encode_block(values: Sequence[Any], ftype: FieldType) -> bytes:
    n = len(values)
    parts = []
    nonnull = values
    null_count = values.count(None) if isinstance(values, list) else list(values).count(None)
    if null_count:
        valid = np.fromiter((v is not None for v in values), dtype=bool, count=n)
        bitmap = np.packbits(valid, bitorder="little").tobytes()
        parts.append(_HDR.pack(1, len(bitmap)))
        parts.append(bitmap)
        nonnull = [v for v in values if v is not None]
    else:
        parts.append(_HDR.pack(0, 0))
    count = len(nonnull)
    parts.append(_U32.pack(count))
    if ftype.is_textual:
        joined = "".join(nonnull)
        if joined.isascii():
            lengths = np.fromiter(map(len, nonnull), dtype=np.int64, count=count)
            data = joined.encode("ascii")
        else:
            enc = [s.encode("utf-8") for s in nonnull]
            lengths = np.fromiter(map(len, enc), dtype=np.int64, count=count)
            data = b"".join(enc)
        parts.append(_pack_uint(lengths))
        parts.append(data)
    elif ftype is FieldType.INTEGER:
        try:
            arr = np.array(nonnull, dtype=np.int64)
        except OverflowError as exc:
            raise SchemaMismatch("integer outside 64-bit range") from exc
        lo, hi = (int(arr.min()), int(arr.max())) if count else (0, 0)
        for width, dt in _INT_WIDTHS:
            info = np.iinfo(dt)
            if info.min <= lo and hi <= info.max:
                parts.append(bytes([width]) + arr.astype(f"<i{width}").tobytes())
                break
    else:
        parts.append(np.array(nonnull, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_block(buf: memoryview, pos: int, n: int, ftype: FieldType) -> tuple[list, int]:
    try:
        flag, blen = _HDR.unpack_from(buf, pos)
        pos += _HDR.size
        valid = None
        if flag:
            bits = np.frombuffer(buf[pos:pos + blen], dtype=np.uint8)
            valid = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
            pos += blen
        (count,) = _U32.unpack_from(buf, pos)
        pos += _U32.size
        if ftype.is_textual:
            lengths, pos = _unpack_uint(buf, pos, count)
            ends = np.cumsum(lengths, dtype=np.int64)
            total = int(ends[-1]) if count else 0
            data = bytes(buf[pos:pos + total])
            if len(data) != total:
                raise CorruptEncoding("truncated text data")
            pos += total
            ends_l = ends.tolist()
            starts_l = [0] + ends_l[:-1]
            if data.isascii():
                s = data.decode("ascii")
                out = [s[a:b] for a, b in zip(starts_l, ends_l)]
            else:
                out = [data[a:b].decode("utf-8") for a, b in zip(starts_l, ends_l)]
        elif ftype is FieldType.INTEGER:
            width = buf[pos]
            pos += 1
            end = pos + width * count
            if width not in (1, 2, 4, 8) or end > len(buf):
                raise CorruptEncoding("bad integer array")
            out = np.frombuffer(buf[pos:end], dtype=f"<i{width}").tolist()
            pos = end
        else:
            end = pos + 8 * count
            if end > len(buf):
                raise CorruptEncoding("truncated decimal data")
            out = np.frombuffer(buf[pos:end], dtype="<f8").tolist()
            pos = end
    except (struct.error, ValueError, IndexError) as exc:
        raise CorruptEncoding(str(exc)) from exc
    if valid is not None:
        if int(valid.sum()) != count:
            raise CorruptEncoding("validity bitmap disagrees with value count")
        it = iter(out)
        out = [next(it) if ok else None for ok in valid.tolist()]
    elif count != n:
        raise CorruptEncoding(f"expected {n} values, found {count}")
    return out, pos


# --------------------------------------------------------------------------
# column encode / decode
# --------------------------------------------------------------------------


def _run_starts(col: list) -> list[int]:
    n = len(col)
    if n == 0:
        return []
    return [0, *compress(range(1, n), map(ne, col[1:], col))]


def _check_types(f: Field, col: list) -> None:
    if None in col and not f.nullable:
        raise SchemaMismatch(f"null in non-nullable column {f.name!r}")
    if f.type.is_textual:
        ok = str
    elif f.type is FieldType.INTEGER:
        ok = int
    else:
        ok = float
    bad = [v for v in col if v is not None and type(v) is not ok]
    if bad:
        if ok is float and all(type(v) is int for v in bad):
            return
        raise SchemaMismatch(f"column {f.name!r} expects {f.type.value}, got {type(bad[0]).__name__}")


def _metric_text(f: Field, m: Any) -> str:
    if not isinstance(m, Mapping) or not all(
        type(k) is str and type(x) in (int, float) for k, x in m.items()
    ):
        raise SchemaMismatch(f"column {f.name!r} expects a map of metric name to number")
    return canonical_text(dict(m))


def _prepare(f: Field, col: list) -> list:
    if f.type is FieldType.METRIC_MAP:
        return [v if v is None or type(v) is str else _metric_text(f, v) for v in col]
    if f.type is FieldType.DECIMAL:
        return [float(v) if type(v) is int else v for v in col]
    return col


def _stats(ftype: FieldType, sample: list) -> tuple[Any, Any]:
    if not ftype.is_scalar:
        return None, None
    vals = [v for v in sample if v is not None]
    if ftype is FieldType.DECIMAL:
        vals = [v for v in vals if not math.isnan(v)]
        if any(math.isinf(v) for v in vals):
            return None, None
    if not vals:
        return None, None
    lo, hi = min(vals), max(vals)
    if ftype is FieldType.TEXT and max(len(lo), len(hi)) > MAX_TEXT_STAT:
        # long texts (source code) would bloat every manifest copy
        return None, None
    return lo, hi


def encode_column(f: Field, col: list, policy: EncodingPolicy = DEFAULT_POLICY) -> tuple[bytes, Encoding, int, Any, Any]:
    """Encode one column; returns (bytes, encoding, null_count, min, max)."""
    n = len(col)
    starts = _run_starts(col)
    equal_pairs = (n - 1) - (len(starts) - 1) if n else 0
    null_count = col.count(None)
    distinct = None
    if f.type.is_textual and n > 1 and equal_pairs / (n - 1) < policy.rle_adjacent_equal:
        uniq = list(dict.fromkeys(col))
        distinct = len(uniq)
    enc = policy.choose(f.type, n, equal_pairs, distinct if distinct is not None else n)
    if enc is Encoding.RLE:
        run_values = [col[i] for i in starts]
        lengths = np.diff(np.array(starts + [n], dtype=np.int64))
        body = _U32.pack(len(starts)) + _pack_uint(lengths) + _encode_block(run_values, f.type)
        lo, hi = _stats(f.type, run_values)
    elif enc is Encoding.DICT:
        pos = {v: i for i, v in enumerate(uniq)}
        idx = np.fromiter(map(pos.__getitem__, col), dtype=np.int64, count=n)
        body = _U32.pack(len(uniq)) + _encode_block(uniq, f.type) + _pack_uint(idx)
        lo, hi = _stats(f.type, uniq)
    else:
        body = _encode_block(col, f.type)
        lo, hi = _stats(f.type, col)
    return body, enc, null_count, lo, hi


def decode_column(buf: memoryview, chunk: ColumnChunk, n: int) -> list:
    view = buf[chunk.offset:chunk.offset + chunk.length]
    if len(view) != chunk.length:
        raise CorruptEncoding("column chunk outside file")
    try:
        if chunk.encoding is Encoding.PLAIN:
            out, _ = _decode_block(view, 0, n, chunk.type)
        elif chunk.encoding is Encoding.RLE:
            (runs,) = _U32.unpack_from(view, 0)
            lengths, pos = _unpack_uint(view, 4, runs)
            vals, _ = _decode_block(view, pos, runs, chunk.type)
            if int(lengths.sum()) != n:
                raise CorruptEncoding("run lengths do not cover the segment")
            out = []
            for v, k in zip(vals, lengths.tolist()):
                out.extend([v] * k)
        else:
            (size,) = _U32.unpack_from(view, 0)
            dictionary, pos = _decode_block(view, 4, size, chunk.type)
            idx, _ = _unpack_uint(view, pos, n)
            if n and int(idx.max()) >= size:
                raise CorruptEncoding("dictionary index out of range")
            out = list(map(dictionary.__getitem__, idx.tolist()))
    except struct.error as exc:
        raise CorruptEncoding(str(exc)) from exc
    if chunk.type is FieldType.METRIC_MAP:
        cache: dict = {}
        res = []
        for v in out:
            if v is None:
                res.append(None)
                continue
            d = cache.get(v)
            if d is None:
                d = cache[v] = json.loads(v)
            res.append(d)
        out = res
    return out


# --------------------------------------------------------------------------
# write / read
# --------------------------------------------------------------------------


def _publish_bytes(path: Path, data: bytes, durable: bool) -> None:
    """Write ``data`` to ``path`` atomically; fails if ``path`` exists."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    try:
        with open(tmp, "xb") as fh:
            fh.write(data)
            if durable:
                fh.flush()
                os.fsync(fh.fileno())
        try:
            os.link(tmp, path)
        except FileExistsError:
            raise SegmentExists(f"segment already exists: {path}") from None
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass


def write_columns(
    columns: Mapping[int, list],
    schema: TableSchema,
    path: str | os.PathLike,
    row_count: int,
    policy: EncodingPolicy = DEFAULT_POLICY,
    durable: bool = True,
) -> Segment:
    """Columnar form of :func:`write_segment`: ``columns`` maps field_id to values."""
    if row_count <= 0:
        raise SchemaMismatch("a segment needs at least one row")
    known = {f.field_id for f in schema.fields}
    extra = set(columns) - known
    if extra:
        raise SchemaMismatch(f"field ids not in schema {schema.schema_id}: {sorted(extra)}")
    path = Path(path)
    if path.exists():
        raise SegmentExists(f"segment already exists: {path}")
    parts = [MAGIC]
    offset = len(MAGIC)
    chunks = []
    for f in schema.fields:
        col = columns.get(f.field_id)
        if col is None:
            col = [None] * row_count
        elif len(col) != row_count:
            raise SchemaMismatch(f"column {f.name!r} has {len(col)} values, expected {row_count}")
        col = list(col) if not isinstance(col, list) else col
        col = _prepare(f, col)
        _check_types(f, col)
        body, enc, nulls, lo, hi = encode_column(f, col, policy)
        chunks.append(ColumnChunk(f.field_id, f.type, enc, offset, len(body), nulls, lo, hi))
        parts.append(body)
        offset += len(body)
    footer = json.dumps(
        {
            "format": MAGIC.decode(),
            "schema_version": schema.schema_id,
            "row_count": row_count,
            "schema": [f.to_dict() for f in schema.fields],
            "columns": [c.to_dict() for c in chunks],
        },
        separators=(",", ":"),
    ).encode()
    parts.append(footer)
    parts.append(_U32.pack(len(footer)))
    digest = hashlib.blake2b(digest_size=8)
    for p in parts:
        digest.update(p)
    checksum = int.from_bytes(digest.digest(), "little")
    parts.append(checksum.to_bytes(8, "little"))
    parts.append(MAGIC)
    data = b"".join(parts)
    _publish_bytes(path, data, durable)
    return Segment(str(path), row_count, schema.schema_id, chunks, checksum, len(data))


def write_segment(
    rows: Sequence[Mapping[int, Any]],
    schema: TableSchema,
    path: str | os.PathLike,
    policy: EncodingPolicy = DEFAULT_POLICY,
    durable: bool = True,
) -> Segment:
    """Write ``rows`` (maps keyed by field_id) as a new immutable segment."""
    if not rows:
        raise SchemaMismatch("a segment needs at least one row")
    known = {f.field_id for f in schema.fields}
    for r in rows:
        extra = set(r) - known
        if extra:
            raise SchemaMismatch(f"field ids not in schema: {sorted(extra)}")
    columns = {f.field_id: [r.get(f.field_id) for r in rows] for f in schema.fields}
    return write_columns(columns, schema, path, len(rows), policy, durable)


def _verify(data: bytes, path: str, expected: Optional[int]) -> int:
    if len(data) < len(MAGIC) + _TAIL_SIZE or data[:5] != MAGIC or data[-5:] != MAGIC:
        raise CorruptEncoding(f"not a segment file: {path}")
    footer_len, stored = _TAIL.unpack_from(data, len(data) - _TAIL_SIZE)
    actual = int.from_bytes(hashlib.blake2b(data[:-13], digest_size=8).digest(), "little")
    if actual != stored or (expected is not None and actual != expected):
        raise ChecksumMismatch(f"checksum mismatch in {path}")
    return footer_len


def load_segment(path: str | os.PathLike, io: Optional[IOStats] = None) -> Segment:
    """Reconstruct segment metadata from the file footer."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if io is not None:
        io.record(path, len(data))
    footer_len = _verify(data, path, None)
    end = len(data) - _TAIL_SIZE
    try:
        footer = json.loads(data[end - footer_len:end])
    except ValueError as exc:
        raise CorruptEncoding(f"bad footer in {path}") from exc
    checksum = int.from_bytes(data[-13:-5], "little")
    return Segment(
        path,
        footer["row_count"],
        footer["schema_version"],
        [ColumnChunk.from_dict(c) for c in footer["columns"]],
        checksum,
        len(data),
    )


@dataclass
class RowBatch:
    """Decoded columns (field_id -> values) from one segment."""

    columns: dict[int, list]
    num_rows: int
    segment: Optional[Segment] = None

    def rows(self) -> list[dict[int, Any]]:
        keys = list(self.columns)
        return [dict(zip(keys, vals)) for vals in zip(*(self.columns[k] for k in keys))] if keys else [{}] * self.num_rows


def read_segment(
    segment: Segment,
    projection: Optional[Iterable[int]] = None,
    predicate: Optional[Mapping[int, Condition]] = None,
    io: Optional[IOStats] = None,
) -> Iterator[RowBatch]:
    """Decode the projected columns of ``segment``.

    Yields nothing, without touching the file, when statistics rule the
    segment out. Field ids unknown to the segment (added by a later schema)
    decode as nulls. Rows failing ``predicate`` are filtered out.
    """
    if not segment_may_match(segment, predicate):
        return iter(())
    fids = sorted(segment.field_ids) if projection is None else list(projection)
    try:
        with open(segment.path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {segment.path}: {exc}") from exc
    if io is not None:
        io.record(segment.path, len(data))
    _verify(data, segment.path, segment.checksum)
    buf = memoryview(data)
    n = segment.row_count
    decoded: dict[int, list] = {}

    def column(fid: int) -> list:
        if fid not in decoded:
            chunk = segment.chunk(fid)
            decoded[fid] = [None] * n if chunk is None else decode_column(buf, chunk, n)
        return decoded[fid]

    out = {fid: column(fid) for fid in fids}
    if predicate:
        keep = [all(cond.matches(column(fid)[i]) for fid, cond in predicate.items()) for i in range(n)]
        if not all(keep):
            out = {fid: list(compress(vals, keep)) for fid, vals in out.items()}
            n = sum(keep)
        if n == 0:
            return iter(())
    return iter([RowBatch(out, n, segment)])
