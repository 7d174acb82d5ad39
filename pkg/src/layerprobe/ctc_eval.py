"""CTC greedy decoding and loss, phone error rate, and MAPSSWE significance testing.

Phone sequences are lists of inventory indices (1..N); index 0 is the CTC blank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .corpus_io import CorpusError, MalformedRowError, _read_jsonl, atomic_write_text, dumps_jsonl

BLANK = 0


class ScoringError(ValueError):
    pass


class InfeasibleTargetError(ScoringError):
    """The target cannot be emitted in the available frames; the loss is infinite."""

    loss = math.inf


def greedy_decode(grid) -> list[int]:
    """Per-frame argmax (ties to the lowest index), collapse repeats, drop blanks."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ScoringError(f"logit grid must be 2-d, got shape {grid.shape}")
    return collapse_path(np.argmax(grid, axis=1))


def collapse_path(path: Sequence[int]) -> list[int]:
    out = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


# --------------------------------------------------------------------------
# Edit distance


@dataclass
class Alignment:
    substitutions: int
    insertions: int
    deletions: int
    # ops: ("C"|"S"|"D"|"I", ref_index or None, hyp_index or None)
    trace: list = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def levenshtein_align(ref: Sequence[int], hyp: Sequence[int]) -> Alignment:
    """Unit-cost alignment; backtrace prefers substitution/match, then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ri != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    trace = []
    i, j = n, m
    s = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                trace.append(("C", i - 1, j - 1))
            else:
                trace.append(("S", i - 1, j - 1))
                s += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            trace.append(("D", i - 1, None))
            dels += 1
            i -= 1
        else:
            trace.append(("I", None, j - 1))
            ins += 1
            j -= 1
    trace.reverse()
    return Alignment(s, ins, dels, trace)


@dataclass
class ScoredHypothesis:
    utterance_id: str
    ref: list
    hyp: list
    substitutions: int
    insertions: int
    deletions: int

    @classmethod
    def score(cls, utterance_id: str, ref, hyp) -> "ScoredHypothesis":
        a = levenshtein_align(ref, hyp)
        return cls(utterance_id, list(ref), list(hyp), a.substitutions, a.insertions, a.deletions)


def per(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Phone error rate in percent over ``(ref, hyp)`` pairs; can exceed 100."""
    errors = 0
    total = 0
    for ref, hyp in pairs:
        errors += levenshtein_align(ref, hyp).errors
        total += len(ref)
    if total == 0:
        raise ScoringError("total reference length is zero")
    return 100.0 * errors / total


# --------------------------------------------------------------------------
# CTC loss


def min_frames_for(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_forward_loss(grid, target: Sequence[int], return_grad: bool = True):
    """Negative log-likelihood of ``target`` under CTC and its gradient w.r.t. the logits.

    ``grid`` holds unnormalized logits, shape ``(T, V)`` with blank at column 0.
    Raises :class:`InfeasibleTargetError` when ``T`` is too short for the target.
    """
    logits = np.asarray(grid, dtype=np.float64)
    T, V = logits.shape
    target = [int(t) for t in target]
    if any(t <= 0 or t >= V for t in target):
        raise ScoringError(f"target indices must lie in 1..{V - 1}")
    if T < min_frames_for(target):
        raise InfeasibleTargetError(f"target of length {len(target)} needs {min_frames_for(target)} "
                                    f"frames, grid has {T}")
    logp = log_softmax(logits, axis=1)
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    # transition from s-2 allowed for non-blank labels differing from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    emit = logp[:, ext]  # T x S
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]
    ll = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    loss = float(-ll)
    if not return_grad:
        return loss

    # beta[t, s]: log-prob of emitting the remainder after frame t, given state s at t
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b
    occ = alpha + beta - ll  # log posterior of being in state s at frame t
    post = np.zeros((T, V))
    for k in np.unique(ext):
        post[:, k] = np.exp(logsumexp(occ[:, ext == k], axis=1))
    grad = np.exp(logp) - post
    return loss, grad


# --------------------------------------------------------------------------
# MAPSSWE


@dataclass
class MapssweResult:
    W: float
    p: float
    n_segments: int
    segment_errors_a: list
    segment_errors_b: list

    def to_json(self) -> dict:
        return {"W": self.W, "p": self.p, "n_segments": self.n_segments}


def _position_profile(ref_len: int, alignment: Alignment):
    """Per reference position: is it correct; per gap 0..ref_len: insertion count."""
    correct = np.zeros(ref_len, dtype=bool)
    err_at = np.zeros(ref_len, dtype=np.int64)
    ins_at = np.zeros(ref_len + 1, dtype=np.int64)
    pos = 0
    for op, ri, _ in alignment.trace:
        if op == "I":
            ins_at[pos] += 1
        else:
            if op == "C":
                correct[ri] = True
            else:
                err_at[ri] += 1
            pos = ri + 1
    return correct, err_at, ins_at


def mapsswe_segments(ref, hyp_a, hyp_b, mode: str = "segment") -> list[tuple[int, int]]:
    """Error counts ``(errors_a, errors_b)`` per segment of one utterance.

    In ``segment`` mode, reference positions where both systems are correct
    and neither inserts immediately before or after act as segment
    boundaries; each maximal run of other positions (with its bordering
    insertion gaps) is one segment. ``utterance`` mode yields one segment.
    """
    al_a = levenshtein_align(ref, hyp_a)
    al_b = levenshtein_align(ref, hyp_b)
    if mode == "utterance":
        return [(al_a.errors, al_b.errors)]
    if mode != "segment":
        raise ScoringError(f"unknown MAPSSWE mode {mode!r}")
    n = len(ref)
    ca, ea, ia = _position_profile(n, al_a)
    cb, eb, ib = _position_profile(n, al_b)
    ins = ia + ib
    anchor = ca & cb & (ins[:-1] == 0) & (ins[1:] == 0)
    segs = []
    j = 0
    if n == 0:
        if ins[0]:
            segs.append((int(ia[0]), int(ib[0])))
        return segs
    while j < n:
        if anchor[j]:
            j += 1
            continue
        k = j
        while k + 1 < n and not anchor[k + 1]:
            k += 1
        err_a = int(ea[j:k + 1].sum() + ia[j:k + 2].sum())
        err_b = int(eb[j:k + 1].sum() + ib[j:k + 2].sum())
        segs.append((err_a, err_b))
        j = k + 1
    return segs


def normal_two_sided_p(w: float) -> float:
    return math.erfc(abs(w) / math.sqrt(2.0))


def mapsswe_test(triples: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]],
                 mode: str = "segment") -> MapssweResult:
    """Matched-pairs test on per-segment error differences (system A minus system B).

    Zero variance: W = 0, p = 1 when the mean difference is zero, otherwise
    W = +/-inf and p = 0.
    """
    ea, eb = [], []
    for ref, a, b in triples:
        for x, y in mapsswe_segments(ref, a, b, mode):
            ea.append(x)
            eb.append(y)
    n = len(ea)
    if n < 2:
        raise ScoringError(f"MAPSSWE needs at least 2 segments, found {n}")
    z = np.asarray(ea, dtype=np.float64) - np.asarray(eb, dtype=np.float64)
    mean = float(z.mean())
    sd = float(z.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            w, p = 0.0, 1.0
        else:
            w, p = math.copysign(math.inf, mean), 0.0
    else:
        w = mean * math.sqrt(n) / sd
        p = normal_two_sided_p(w)
    return MapssweResult(w, p, n, ea, eb)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.05:
        return "*"
    return ""


# --------------------------------------------------------------------------
# Transcript files: JSON-lines {"utterance_id": ..., "phones": [symbols]}


def read_transcripts(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, rec in _read_jsonl(path):
        try:
            utt, phones = str(rec["utterance_id"]), rec["phones"]
        except KeyError as exc:
            raise MalformedRowError(f"{path}:{lineno}: missing key {exc}") from None
        if not isinstance(phones, list) or not all(isinstance(p, str) for p in phones):
            raise MalformedRowError(f"{path}:{lineno}: phones must be a list of strings")
        if utt in out:
            raise CorpusError(f"{path}:{lineno}: duplicate utterance_id {utt!r}")
        out[utt] = phones
    return out


def write_transcripts(path, transcripts: dict[str, Sequence[str]]) -> None:
    atomic_write_text(path, dumps_jsonl({"utterance_id": u, "phones": list(p)}
                                        for u, p in transcripts.items()))
