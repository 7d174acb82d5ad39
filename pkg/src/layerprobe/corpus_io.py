"""Readers and writers for representation dumps, alignments, labels and manifests.

All text formats are UTF-8. Floats written to text use ``repr`` (shortest
round-trip form); floats read from text must use a decimal point.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REPR_MAGIC = b"LREP"
REPR_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")

DEFAULT_FRAME_HOP_S = 0.020
DEFAULT_FRAME_OFFSET_S = 0.0125

_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$")


class CorpusError(ValueError):
    """Base class for malformed corpus inputs."""


class ReprFormatError(CorpusError):
    pass


class BadMagicError(ReprFormatError):
    pass


class VersionMismatchError(ReprFormatError):
    pass


class TruncatedPayloadError(ReprFormatError):
    pass


class TrailingDataError(ReprFormatError):
    pass


class NonFiniteValueError(ReprFormatError):
    pass


class UnknownPhoneError(CorpusError):
    pass


class IntervalError(CorpusError):
    pass


class MalformedRowError(CorpusError):
    pass


class UnmappedSymbolError(CorpusError):
    def __init__(self, symbol: str, position: int):
        super().__init__(f"symbol {symbol!r} at position {position} has no mapping")
        self.symbol = symbol
        self.position = position


class UnknownGroupError(CorpusError):
    pass


def parse_decimal(text: str) -> float:
    """Parse a locale-independent decimal number; rejects ``0,5``, ``nan``, ``1_0``."""
    s = text.strip()
    if not _DECIMAL_RE.match(s):
        raise ValueError(f"not a decimal number: {text!r}")
    return float(s)


def format_float(x: float) -> str:
    return repr(float(x))


def _atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------------
# Representation tensors


@dataclass
class ReprTensor:
    """Layer-major activations of one utterance, shape ``(n_layers, n_frames, dim)``."""

    values: np.ndarray
    frame_hop_s: float = DEFAULT_FRAME_HOP_S
    frame_offset_s: float = DEFAULT_FRAME_OFFSET_S

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ReprFormatError(f"values must be 3-d (layer, frame, dim), got shape {v.shape}")
        if v.shape[0] < 1:
            raise ReprFormatError("n_layers must be >= 1")
        if not self.frame_hop_s > 0:
            raise ReprFormatError("frame_hop_s must be positive")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValueError("tensor contains non-finite values")
        self.values = v

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def frame_centers(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_hop_s + self.frame_offset_s

    def extent(self) -> tuple[float, float]:
        """Time span covered by the frames, each frame owning half a hop either side."""
        half = 0.5 * self.frame_hop_s
        return (self.frame_offset_s - half,
                self.frame_offset_s + (self.n_frames - 1) * self.frame_hop_s + half)

    def __eq__(self, other):
        if not isinstance(other, ReprTensor):
            return NotImplemented
        return (self.frame_hop_s == other.frame_hop_s
                and self.frame_offset_s == other.frame_offset_s
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())


def encode_repr_tensor(t: ReprTensor) -> bytes:
    header = _HEADER.pack(REPR_MAGIC, REPR_VERSION, t.n_layers, t.n_frames, t.dim,
                          float(t.frame_hop_s), float(t.frame_offset_s))
    return header + np.ascontiguousarray(t.values, dtype="<f4").tobytes()


def decode_repr_tensor(data: bytes) -> ReprTensor:
    if len(data) < 4 or data[:4] != REPR_MAGIC:
        raise BadMagicError(f"expected magic {REPR_MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(data)}")
    _, version, n_layers, n_frames, dim, hop, offset = _HEADER.unpack_from(data)
    if version != REPR_VERSION:
        raise VersionMismatchError(f"unsupported LREP version {version} (expected {REPR_VERSION})")
    expected = n_layers * n_frames * dim * 4
    payload = len(data) - _HEADER.size
    if payload < expected:
        raise TruncatedPayloadError(
            f"header declares {n_layers}x{n_frames}x{dim} floats ({expected} bytes), payload has {payload}")
    if payload > expected:
        raise TrailingDataError(f"{payload - expected} unexpected bytes after payload")
    values = np.frombuffer(data, dtype="<f4", count=n_layers * n_frames * dim, offset=_HEADER.size)
    values = values.astype(np.float32).reshape(n_layers, n_frames, dim)
    return ReprTensor(values, frame_hop_s=hop, frame_offset_s=offset)


def write_repr_tensor(path: str | os.PathLike, tensor: ReprTensor) -> None:
    _atomic_write_bytes(path, encode_repr_tensor(tensor))


def read_repr_tensor(path: str | os.PathLike) -> ReprTensor:
    with open(path, "rb") as fh:
        return decode_repr_tensor(fh.read())


# --------------------------------------------------------------------------
# Phone inventory and alignments


@dataclass(frozen=True)
class PhoneInventory:
    """Ordered phone symbols. Index 0 is the CTC blank; phones occupy 1..N."""

    symbols: tuple[str, ...]
    blank_index: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    BLANK = "<blank>"

    def __post_init__(self):
        syms = tuple(self.symbols)
        object.__setattr__(self, "symbols", syms)
        if self.blank_index != 0:
            raise CorpusError("blank_index is fixed at 0")
        if len(set(syms)) != len(syms):
            dup = sorted({s for s in syms if syms.count(s) > 1})
            raise CorpusError(f"duplicate phone symbols: {dup}")
        if self.BLANK in syms:
            raise CorpusError("the blank symbol cannot be an inventory member")
        if any(not s or s != s.strip() for s in syms):
            raise CorpusError("phone symbols must be non-empty and carry no surrounding whitespace")
        object.__setattr__(self, "_index", {s: i + 1 for i, s in enumerate(syms)})

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownPhoneError(f"phone {symbol!r} not in inventory") from None

    def symbol(self, index: int) -> str:
        if index == 0:
            return self.BLANK
        return self.symbols[index - 1]

    def encode(self, phones: Iterable[str]) -> list[int]:
        return [self.index(p) for p in phones]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.symbol(int(i)) for i in indices]


def read_inventory(path: str | os.PathLike, expected_size: int | None = None) -> PhoneInventory:
    """One symbol per line; blank lines and ``#`` comments are skipped."""
    symbols = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                symbols.append(s)
    inv = PhoneInventory(tuple(symbols))
    if expected_size is not None and len(inv) != expected_size:
        raise CorpusError(f"inventory has {len(inv)} symbols, expected {expected_size}")
    return inv


def write_inventory(path: str | os.PathLike, inventory: PhoneInventory) -> None:
    atomic_write_text(path, "".join(s + "\n" for s in inventory.symbols))


@dataclass(frozen=True)
class AlignmentEntry:
    utterance_id: str
    phone: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def parse_alignment_row(line: str, inventory: PhoneInventory | None = None,
                        lineno: int | None = None) -> AlignmentEntry:
    where = f"line {lineno}: " if lineno is not None else ""
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 4:
        raise MalformedRowError(f"{where}expected 4 tab-separated columns, got {len(cols)}")
    utt, phone, start, end = cols
    if not utt:
        raise MalformedRowError(f"{where}empty utterance id")
    try:
        start_s = parse_decimal(start)
        end_s = parse_decimal(end)
    except ValueError as exc:
        raise MalformedRowError(f"{where}{exc}") from None
    if inventory is not None and phone not in inventory:
        raise UnknownPhoneError(f"{where}phone {phone!r} not in inventory")
    if not end_s > start_s:
        raise IntervalError(f"{where}end {end_s} must exceed start {start_s}")
    return AlignmentEntry(utt, phone, start_s, end_s)


def read_alignments(path: str | os.PathLike, inventory: PhoneInventory | None) -> list[AlignmentEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            entries.append(parse_alignment_row(line, inventory, lineno))
    return entries


def write_alignments(path: str | os.PathLike, entries: Iterable[AlignmentEntry]) -> None:
    lines = [f"{e.utterance_id}\t{e.phone}\t{format_float(e.start_s)}\t{format_float(e.end_s)}\n"
             for e in entries]
    atomic_write_text(path, "".join(lines))


def group_alignments(entries: Iterable[AlignmentEntry]) -> dict[str, list[AlignmentEntry]]:
    out: dict[str, list[AlignmentEntry]] = {}
    for e in entries:
        out.setdefault(e.utterance_id, []).append(e)
    return out


def read_label_tracks(path: str | os.PathLike) -> dict[str, list[tuple[float, float, str]]]:
    """TSV ``utterance_id<TAB>start_s<TAB>end_s<TAB>label`` of labeled spans in long recordings."""
    out: dict[str, list[tuple[float, float, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            cols = line.rstrip("\r\n").split("\t")
            if len(cols) != 4 or not cols[0] or not cols[3]:
                raise MalformedRowError(f"line {lineno}: expected utterance_id, start_s, end_s, label")
            try:
                start, end = parse_decimal(cols[1]), parse_decimal(cols[2])
            except ValueError as exc:
                raise MalformedRowError(f"line {lineno}: {exc}") from None
            if not end > start:
                raise IntervalError(f"line {lineno}: end {end} must exceed start {start}")
            out.setdefault(cols[0], []).append((start, end, cols[3]))
    return out


# --------------------------------------------------------------------------
# SAMPA -> IPA


def read_mapping_table(path: str | os.PathLike) -> dict[str, str]:
    """Two-column TSV ``sampa<TAB>ipa``; ``#`` starts a comment line."""
    table: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.rstrip("\r\n").split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise MalformedRowError(f"line {lineno}: expected 'sampa<TAB>ipa'")
            if cols[0] in table:
                raise MalformedRowError(f"line {lineno}: duplicate SAMPA symbol {cols[0]!r}")
            table[cols[0]] = cols[1]
    return table


def default_sampa_table_path() -> Path:
    return Path(__file__).with_name("data") / "sampa_ipa.tsv"


def map_sampa_to_ipa(symbols: Sequence[str], table: dict[str, str] | str | os.PathLike) -> list[str]:
    if not isinstance(table, dict):
        table = read_mapping_table(table)
    out = []
    for pos, s in enumerate(symbols):
        try:
            out.append(table[s])
        except KeyError:
            raise UnmappedSymbolError(s, pos) from None
    return out


# --------------------------------------------------------------------------
# Manifests, labels, partitions


@dataclass(frozen=True)
class UtteranceManifest:
    utterance_id: str
    group_key: str
    duration_s: float
    audio_path: str | None = None
    repr_path: str | None = None

    def __post_init__(self):
        if not self.duration_s > 0:
            raise CorpusError(f"{self.utterance_id}: duration_s must be positive")
        if self.audio_path is None and self.repr_path is None:
            raise CorpusError(f"{self.utterance_id}: needs audio_path or repr_path")

    def to_json(self) -> dict:
        d = {"utterance_id": self.utterance_id, "group_key": self.group_key,
             "duration_s": self.duration_s}
        if self.audio_path is not None:
            d["audio_path"] = self.audio_path
        if self.repr_path is not None:
            d["repr_path"] = self.repr_path
        return d


@dataclass(frozen=True)
class LabelRecord:
    utterance_id: str
    task_id: str
    label: str


def _read_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRowError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise MalformedRowError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def read_manifest(path: str | os.PathLike, resolve_paths: bool = True) -> list[UtteranceManifest]:
    """Read a manifest; relative audio/repr paths resolve against the manifest's directory."""
    base = Path(path).parent
    allowed = {"utterance_id", "group_key", "duration_s", "audio_path", "repr_path"}
    out, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        extra = set(rec) - allowed
        if extra:
            raise MalformedRowError(f"{path}:{lineno}: unknown keys {sorted(extra)}")
        try:
            utt = str(rec["utterance_id"])
            group = str(rec["group_key"])
            dur = rec["duration_s"]
        except KeyError as exc:
            raise MalformedRowError(f"{path}:{lineno}: missing key {exc}") from None
        if isinstance(dur, bool) or not isinstance(dur, (int, float)):
            raise MalformedRowError(f"{path}:{lineno}: duration_s must be a number")
        if utt in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate utterance_id {utt!r}")
        seen.add(utt)
        paths = {}
        for key in ("audio_path", "repr_path"):
            p = rec.get(key)
            if p is not None and resolve_paths and not os.path.isabs(p):
                p = str(base / p)
            paths[key] = p
        out.append(UtteranceManifest(utt, group, float(dur), **paths))
    return out


def write_manifest(path: str | os.PathLike, manifest: Iterable[UtteranceManifest]) -> None:
    atomic_write_text(path, dumps_jsonl(m.to_json() for m in manifest))


def read_labels(path: str | os.PathLike,
                classes: dict[str, Sequence[str]] | None = None) -> list[LabelRecord]:
    """Read label JSON-lines; with ``classes`` given, every label must be in its task's set."""
    out = []
    for lineno, rec in _read_jsonl(path):
        try:
            r = LabelRecord(str(rec["utterance_id"]), str(rec["task_id"]), str(rec["label"]))
        except KeyError as exc:
            raise MalformedRowError(f"{path}:{lineno}: missing key {exc}") from None
        if classes is not None:
            if r.task_id not in classes:
                raise CorpusError(f"{path}:{lineno}: unknown task {r.task_id!r}")
            if r.label not in classes[r.task_id]:
                raise CorpusError(f"{path}:{lineno}: label {r.label!r} not in task {r.task_id!r} classes")
        out.append(r)
    return out


def write_labels(path: str | os.PathLike, labels: Iterable[LabelRecord]) -> None:
    atomic_write_text(path, dumps_jsonl(
        {"utterance_id": r.utterance_id, "task_id": r.task_id, "label": r.label} for r in labels))


def split_by_group(manifest: Sequence[UtteranceManifest], held_out_groups: Iterable[str]):
    """Partition utterances by ``group_key`` (e.g. leave-one-family-out).

    Returns ``(train, heldout)`` preserving input order.
    """
    held = set(held_out_groups)
    present = {m.group_key for m in manifest}
    missing = held - present
    if missing:
        raise UnknownGroupError(f"groups not in manifest: {sorted(missing)}")
    train = [m for m in manifest if m.group_key not in held]
    heldout = [m for m in manifest if m.group_key in held]
    return train, heldout
