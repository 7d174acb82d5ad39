"""Synthetic corpora shared by the CLI and acceptance tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from layerprobe.corpus_io import (
    AlignmentEntry,
    PhoneInventory,
    ReprTensor,
    UtteranceManifest,
    write_alignments,
    write_inventory,
    write_manifest,
    write_repr_tensor,
)
from layerprobe.pooling import save_pooled_dataset

HOP = 0.02
OFFSET = 0.0125
PHONES = ("a", "i", "u", "p", "t", "k")


def layer_profile(n_layers: int, peak: int, width: float = 1.5) -> np.ndarray:
    k = np.arange(n_layers)
    return np.exp(-0.5 * ((k - peak) / width) ** 2)


def phoneme_corpus(root: Path, name: str, n_utts: int = 12, n_layers: int = 12, dim: int = 8,
                   peak: int = 7, seed: int = 0, phones_per_utt: int = 25) -> tuple[Path, Path]:
    """Write LREP dumps, a manifest and alignments whose phone identity peaks at ``peak``."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    codes = rng.normal(size=(len(PHONES), dim))
    strength = 3.0 * layer_profile(n_layers, peak)
    manifest, entries = [], []
    for u in range(n_utts):
        utt = f"{name}_{u:03d}"
        durs = rng.uniform(0.08, 0.2, size=phones_per_utt)
        bounds = np.concatenate([[0.0], np.cumsum(durs)])
        total = float(bounds[-1])
        n_frames = int(np.floor((total - OFFSET) / HOP)) + 1
        centers = np.arange(n_frames) * HOP + OFFSET
        labels = rng.integers(0, len(PHONES), size=phones_per_utt)
        seg = np.clip(np.searchsorted(bounds, centers, side="right") - 1, 0, phones_per_utt - 1)
        values = rng.normal(size=(n_layers, n_frames, dim))
        values += strength[:, None, None] * codes[labels[seg]][None, :, :]
        path = root / f"{utt}.lrep"
        write_repr_tensor(path, ReprTensor(values.astype(np.float32), HOP, OFFSET))
        manifest.append(UtteranceManifest(utt, f"spk{u % 3}", round(total, 6), repr_path=path.name))
        for j in range(phones_per_utt):
            entries.append(AlignmentEntry(utt, PHONES[labels[j]], round(float(bounds[j]), 6),
                                          round(float(bounds[j + 1]), 6)))
    write_manifest(root / "manifest.jsonl", manifest)
    write_alignments(root / "alignments.tsv", entries)
    return root / "manifest.jsonl", root / "alignments.tsv"


def write_phone_inventory(path: Path) -> Path:
    write_inventory(path, PhoneInventory(PHONES))
    return path


def informative_layer_data(n_per_class: int = 60, n_classes: int = 3, n_layers: int = 12, dim: int = 16,
                           layer: int = 7, separation: float = 2.0, seed: int = 0):
    """``(x, y)`` with ``x`` of shape ``(n, L, dim)``; only ``layer`` carries class information."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = rng.normal(size=(y.size, n_layers, dim))
    x[:, layer, :] += means[y]
    return x, y


def window_dataset(directory: Path, classes=("cry", "fuss", "babble"), groups=("fam0", "fam1", "fam2", "fam3"),
                   n_per_class_group: int = 30, layer: int = 7, seed: int = 0, **kw) -> Path:
    """A pooled window dataset directory (as written by ``pool`` in window mode)."""
    n = n_per_class_group * len(groups)
    x, y = informative_layer_data(n, len(classes), layer=layer, seed=seed, **kw)
    rows = []
    for i, c in enumerate(y):
        rows.append({"utterance_id": f"u{i:04d}", "group_key": groups[(i // n_per_class_group) % len(groups)],
                     "start_s": 0.0, "end_s": 2.0, "label": classes[c], "task": "vc", "audio_path": None})
    save_pooled_dataset(directory, np.transpose(x, (1, 0, 2)), rows)
    return directory


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Test signals at 16 kHz

FS = 16000


def sine(f0: float, seconds: float = 1.0, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * FS)) / FS
    return amp * np.sin(2 * np.pi * f0 * t)


def sawtooth(f0: float, seconds: float = 1.0, amp: float = 0.3) -> np.ndarray:
    """Band-limited sawtooth: harmonic k has amplitude 1/k, so H1 - H2 = 20 log10(2)."""
    t = np.arange(int(seconds * FS)) / FS
    n_harm = int((FS / 2 - 1) // f0)
    return amp * sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, n_harm + 1))


def pulse_train(periods, seconds: float = 1.0, width: int = 41, amps=None) -> np.ndarray:
    """Symmetric Hann pulses at integer sample positions; ``periods`` (samples) cycle."""
    n = int(seconds * FS)
    x = np.zeros(n)
    w = np.hanning(width)
    half = width // 2
    pos, i = 100, 0
    while pos + half < n - 100:
        a = 1.0 if amps is None else amps[i % len(amps)]
        x[pos - half:pos + half + 1] += a * w
        pos += periods[i % len(periods)]
        i += 1
    return x


def vowel(f0: float = 140.0, formants=((700, 80), (1200, 90), (2600, 120)), seconds: float = 1.0,
          noise: float = 1e-3, seed: int = 0) -> np.ndarray:
    """Impulse train through a cascade of two-pole resonators, plus a little noise."""
    from scipy.signal import lfilter

    n = int(seconds * FS)
    src = np.zeros(n)
    src[::int(round(FS / f0))] = 1.0
    y = src
    for f, bw in formants:
        r = np.exp(-np.pi * bw / FS)
        y = lfilter([1.0], [1.0, -2 * r * np.cos(2 * np.pi * f / FS), r * r], y)
    y = 0.3 * y / np.max(np.abs(y))
    return y + noise * np.random.default_rng(seed).normal(size=n)
