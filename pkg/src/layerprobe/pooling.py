"""Frame-to-phoneme / utterance pooling and windowing of label tracks."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .corpus_io import (
    AlignmentEntry,
    CorpusError,
    PhoneInventory,
    ReprTensor,
    _read_jsonl,
    atomic_write_text,
    dumps_jsonl,
    read_repr_tensor,
    write_repr_tensor,
)

log = logging.getLogger(__name__)

# Frame-time comparisons tolerate accumulated rounding in index*hop + offset.
_TIME_EPS = 1e-9


class PoolingError(ValueError):
    pass


class OutOfExtentError(PoolingError):
    pass


class EmptySpanError(PoolingError):
    pass


class OverlappingTrackError(PoolingError):
    pass


@dataclass
class PhonemeSample:
    phone: str
    vector_per_layer: np.ndarray  # (n_layers, dim)
    utterance_id: str


@dataclass
class WindowSample:
    utterance_id: str
    start_s: float
    label: str | None
    vector_per_layer: np.ndarray  # (n_layers, dim)


def _frames_in(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Indices of frame centers in the half-open interval [lo, hi)."""
    return np.flatnonzero((centers >= lo - _TIME_EPS) & (centers < hi - _TIME_EPS))


def central_third_frames(tensor: ReprTensor, start_s: float, end_s: float) -> np.ndarray:
    """Frame indices used to pool one aligned segment.

    Frames whose centers fall in the middle third ``[start + d/3, end - d/3)``;
    when none does, the single frame nearest the segment midpoint.
    """
    lo, hi = tensor.extent()
    hop = tensor.frame_hop_s
    if end_s <= lo - hop or start_s >= hi + hop:
        raise OutOfExtentError(
            f"segment [{start_s}, {end_s}) lies outside tensor extent [{lo}, {hi})")
    if start_s < lo - hop or end_s > hi + hop:
        raise OutOfExtentError(
            f"segment [{start_s}, {end_s}) crosses tensor extent [{lo}, {hi}) by more than one frame")
    d = end_s - start_s
    centers = tensor.frame_centers()
    idx = _frames_in(centers, start_s + d / 3.0, end_s - d / 3.0)
    if idx.size == 0:
        mid = 0.5 * (start_s + end_s)
        idx = np.array([int(np.argmin(np.abs(centers - mid)))])
    return idx


def central_third_pool(tensor: ReprTensor, entry: AlignmentEntry) -> PhonemeSample:
    idx = central_third_frames(tensor, entry.start_s, entry.end_s)
    vec = tensor.values[:, idx, :].astype(np.float64).mean(axis=1)
    return PhonemeSample(entry.phone, vec, entry.utterance_id)


def utterance_mean_pool(tensor: ReprTensor, span: tuple[float, float] | None = None) -> np.ndarray:
    """Mean over frames per layer; ``span`` restricts to frame centers in ``[start, end)``.

    Returns an array of shape ``(n_layers, dim)``.
    """
    if span is None:
        idx = np.arange(tensor.n_frames)
    else:
        start, end = span
        lo, hi = tensor.extent()
        if start < lo - tensor.frame_hop_s or end > hi + tensor.frame_hop_s:
            raise OutOfExtentError(f"span [{start}, {end}) outside tensor extent [{lo}, {hi})")
        idx = _frames_in(tensor.frame_centers(), start, end)
    if idx.size == 0:
        raise EmptySpanError(f"no frame centers inside span {span}")
    return tensor.values[:, idx, :].astype(np.float64).mean(axis=1)


def pool_utterance_phonemes(tensor: ReprTensor, entries: Iterable[AlignmentEntry]) -> list[PhonemeSample]:
    """Pool every aligned phone of one utterance; phones outside the dump are dropped."""
    out = []
    for e in entries:
        try:
            out.append(central_third_pool(tensor, e))
        except OutOfExtentError as exc:
            log.warning("dropping %s/%s: %s", e.utterance_id, e.phone, exc)
    return out


def window_starts(total_s: float, win_s: float = 2.0, hop_s: float = 0.2) -> np.ndarray:
    if total_s < win_s - _TIME_EPS:
        return np.zeros(0)
    n = int(math.floor((total_s - win_s) / hop_s + 1e-9)) + 1
    return np.arange(n) * hop_s


def window_label_track(track: Sequence[tuple[float, float, Hashable]], total_s: float,
                       win_s: float = 2.0, hop_s: float = 0.2, core_s: float = 1.0):
    """Slide ``win_s`` windows every ``hop_s`` and label each by its centered core.

    The label is the one covering the most duration inside the centered
    ``core_s`` sub-window; ties go to the label whose first segment starts
    earliest within the core. Returns ``[(window_start_s, label_or_None), ...]``.
    """
    if win_s < core_s:
        raise ValueError("win_s must be >= core_s")
    if hop_s <= 0:
        raise ValueError("hop_s must be positive")
    segs = sorted((float(s), float(e), lab) for s, e, lab in track)
    for (s0, e0, _), (s1, _, _) in zip(segs, segs[1:]):
        if s1 < e0 - _TIME_EPS:
            raise OverlappingTrackError(f"track intervals [{s0}, {e0}) and [{s1}, ...) overlap")
    starts_arr = np.array([s for s, _, _ in segs])
    ends_arr = np.array([e for _, e, _ in segs])
    margin = 0.5 * (win_s - core_s)
    out = []
    for w in window_starts(total_s, win_s, hop_s):
        c0, c1 = w + margin, w + margin + core_s
        overlap = np.minimum(ends_arr, c1) - np.maximum(starts_arr, c0)
        totals: dict = {}
        first: dict = {}
        for k in np.flatnonzero(overlap > _TIME_EPS):
            lab = segs[k][2]
            totals[lab] = totals.get(lab, 0.0) + overlap[k]
            first.setdefault(lab, max(starts_arr[k], c0))
        if not totals:
            out.append((float(w), None))
            continue
        best = max(totals.values())
        tied = [lab for lab, v in totals.items() if v >= best - _TIME_EPS]
        out.append((float(w), min(tied, key=lambda lab: first[lab])))
    return out


def build_phoneme_dataset(samples: Sequence[PhonemeSample], per_phone_cap: int = 600, seed: int = 0,
                          inventory: PhoneInventory | None = None):
    """Subsample up to ``per_phone_cap`` samples per phone and stack them.

    Returns ``(X, Y, kept)`` where ``X`` has shape ``(n_layers, n, dim)``,
    ``Y`` is the ``n x |inventory|`` one-hot matrix and ``kept`` the sample
    indices in row order. Without an inventory, columns follow the sorted set
    of phones present.
    """
    if per_phone_cap < 1:
        raise ValueError("per_phone_cap must be >= 1")
    if not samples:
        raise PoolingError("no phoneme samples")
    if inventory is None:
        symbols = sorted({s.phone for s in samples})
        col = {p: i for i, p in enumerate(symbols)}
    else:
        symbols = list(inventory.symbols)
        col = {p: inventory.index(p) - 1 for p in {s.phone for s in samples}}
    rng = np.random.default_rng(seed)
    by_phone: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_phone.setdefault(s.phone, []).append(i)
    kept = []
    for phone in sorted(by_phone, key=col.__getitem__):
        idx = by_phone[phone]
        if len(idx) > per_phone_cap:
            pick = rng.choice(len(idx), size=per_phone_cap, replace=False)
            idx = [idx[j] for j in np.sort(pick)]
        kept.extend(idx)
    kept.sort()
    X = np.stack([samples[i].vector_per_layer for i in kept], axis=1)
    Y = np.zeros((len(kept), len(symbols)))
    Y[np.arange(len(kept)), [col[samples[i].phone] for i in kept]] = 1.0
    return X, Y, np.asarray(kept)


# --------------------------------------------------------------------------
# Pooled dataset container: one single-layer LREP per layer + JSON-lines row index


def save_pooled_dataset(directory: str | os.PathLike, X: np.ndarray, rows: Sequence[dict]) -> None:
    """Write ``X`` of shape ``(n_layers, n, dim)`` and the row index to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    X = np.asarray(X)
    if X.shape[1] != len(rows):
        raise PoolingError(f"{X.shape[1]} pooled rows but {len(rows)} index records")
    for layer in range(X.shape[0]):
        write_repr_tensor(d / f"layer_{layer:02d}.lrep",
                          ReprTensor(X[layer][None, :, :], frame_hop_s=1.0, frame_offset_s=0.0))
    atomic_write_text(d / "rows.jsonl", dumps_jsonl({"row": i, **r} for i, r in enumerate(rows)))


def load_pooled_dataset(directory: str | os.PathLike) -> tuple[np.ndarray, list[dict]]:
    d = Path(directory)
    rows = [rec for _, rec in _read_jsonl(d / "rows.jsonl")]
    layers = sorted(d.glob("layer_*.lrep"))
    if not layers:
        raise CorpusError(f"{d}: no layer_*.lrep files")
    mats = []
    for p in layers:
        t = read_repr_tensor(p)
        if t.n_layers != 1 or t.n_frames != len(rows):
            raise CorpusError(f"{p}: expected 1 x {len(rows)} rows, got {t.n_layers} x {t.n_frames}")
        mats.append(t.values[0])
    return np.stack(mats), rows
