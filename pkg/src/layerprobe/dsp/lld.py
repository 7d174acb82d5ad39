"""Frame-level extraction of the 25 low-level descriptors and their utterance functionals."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..corpus_io import atomic_write_text, format_float
from .formants import estimate_formants, preemphasize
from .pitch import compute_hnr, compute_jitter_shimmer, estimate_f0
from .spectral import compute_mfcc, compute_spectral_group, loudness_db
from .wav import AudioBuffer

GROUPS = (
    ("energy", ("loudness_db", "hnr_db")),
    ("mfcc", ("mfcc1", "mfcc2", "mfcc3", "mfcc4")),
    ("pitch", ("f0_hz",)),
    ("formant", ("f1_hz", "f1_bw_hz", "f2_hz", "f2_bw_hz", "f3_hz", "f3_bw_hz")),
    ("spectral", ("alpha_ratio_db", "hammarberg_db", "slope_0_500", "slope_500_1500",
                  "f1_rel_energy_db", "f2_rel_energy_db", "f3_rel_energy_db",
                  "h1_h2_db", "h1_a3_db", "spectral_flux")),
    ("voice_quality", ("shimmer_pct", "jitter_pct")),
)
GROUP_NAMES = tuple(g for g, _ in GROUPS)
GROUP_DIMS = {g: len(names) for g, names in GROUPS}
LLD_NAMES = tuple(n for _, names in GROUPS for n in names)

# averaged over voiced frames only; everything else over all frames
VOICED_ONLY = frozenset({
    "hnr_db", "f0_hz",
    "f1_hz", "f1_bw_hz", "f2_hz", "f2_bw_hz", "f3_hz", "f3_bw_hz",
    "f1_rel_energy_db", "f2_rel_energy_db", "f3_rel_energy_db",
    "h1_h2_db", "h1_a3_db", "shimmer_pct", "jitter_pct",
})


@dataclass(frozen=True)
class DspConfig:
    sample_rate_hz: int = 16000
    hop_s: float = 0.010
    pitch_win_s: float = 0.060
    short_win_s: float = 0.025
    f0_min_hz: float = 55.0
    f0_max_hz: float = 1000.0
    voicing_threshold: float = 0.45
    n_fft: int = 512
    n_mels: int = 26
    mel_fmin_hz: float = 20.0
    mel_fmax_hz: float = 8000.0
    lpc_order: int = 12
    preemphasis: float = 0.97
    formant_fmin_hz: float = 90.0
    formant_fmax_hz: float = 5500.0
    formant_max_bw_hz: float = 600.0
    neutral_value: float = 0.0

    def __post_init__(self):
        if self.pitch_win_s < 2.0 / self.f0_min_hz:
            raise ValueError("pitch window must hold two periods of f0_min_hz")
        if not 0 < self.short_win_s <= self.pitch_win_s:
            raise ValueError("short window must be positive and no longer than the pitch window")
        if self.hop_s <= 0:
            raise ValueError("hop_s must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LldFrame:
    t_s: float
    voiced: bool
    loudness_db: float
    hnr_db: float
    mfcc: np.ndarray  # 4
    f0_hz: float
    formants: np.ndarray  # 3 x (freq_hz, bw_hz)
    spectral: np.ndarray  # 10, SPECTRAL_NAMES order
    jitter_pct: float
    shimmer_pct: float

    @property
    def alpha_ratio_db(self) -> float:
        return float(self.spectral[0])

    @property
    def hammarberg_db(self) -> float:
        return float(self.spectral[1])

    @property
    def h1_h2_db(self) -> float:
        return float(self.spectral[7])

    @property
    def h1_a3_db(self) -> float:
        return float(self.spectral[8])

    def vector(self) -> np.ndarray:
        """The 25 descriptors in ``LLD_NAMES`` order (NaN = undefined)."""
        s = self.spectral
        return np.array([
            self.loudness_db, self.hnr_db,
            *self.mfcc,
            self.f0_hz,
            *self.formants.reshape(-1),
            *s,
            self.shimmer_pct, self.jitter_pct,
        ], dtype=np.float64)


@dataclass
class FeatureGroupVector:
    energy: np.ndarray
    mfcc: np.ndarray
    pitch: np.ndarray
    formant: np.ndarray
    spectral: np.ndarray
    voice_quality: np.ndarray
    # descriptors that had no defined frames and were set to the neutral value
    fallback: tuple = field(default_factory=tuple)

    def group(self, name: str) -> np.ndarray:
        if name not in GROUP_DIMS:
            raise KeyError(name)
        return getattr(self, name)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.group(g) for g in GROUP_NAMES])

    @property
    def no_voiced_frames(self) -> bool:
        return "f0_hz" in self.fallback

    def to_json(self) -> dict:
        d = {g: [float(v) for v in self.group(g)] for g in GROUP_NAMES}
        d["fallback"] = list(self.fallback)
        return d

    @classmethod
    def from_flat(cls, flat, fallback=()) -> "FeatureGroupVector":
        flat = np.asarray(flat, dtype=np.float64)
        parts, i = {}, 0
        for g in GROUP_NAMES:
            parts[g] = flat[i:i + GROUP_DIMS[g]]
            i += GROUP_DIMS[g]
        return cls(**parts, fallback=tuple(fallback))


def frame_count(n_samples: int, cfg: DspConfig) -> int:
    long_n = int(round(cfg.pitch_win_s * cfg.sample_rate_hz))
    hop = int(round(cfg.hop_s * cfg.sample_rate_hz))
    if n_samples < long_n:
        return 1
    return (n_samples - long_n) // hop + 1


def extract_llds(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> list[LldFrame]:
    """Per-hop descriptor frames. Long and short windows share each frame's center."""
    fs = audio.sample_rate_hz
    if fs != cfg.sample_rate_hz:
        raise ValueError(f"audio at {fs} Hz, config expects {cfg.sample_rate_hz} Hz")
    long_n = int(round(cfg.pitch_win_s * fs))
    short_n = int(round(cfg.short_win_s * fs))
    hop = int(round(cfg.hop_s * fs))
    x = audio.samples
    if x.size < long_n:
        x = np.concatenate([x, np.zeros(long_n - x.size)])
    emph = preemphasize(x, cfg.preemphasis)
    frames = []
    prev_short = None
    for k in range(frame_count(x.size, cfg)):
        a = k * hop
        center = a + long_n // 2
        long_fr = x[a:a + long_n]
        s0 = center - short_n // 2
        short_fr = x[s0:s0 + short_n]

        f0, voiced, _ = estimate_f0(long_fr, fs, cfg.f0_min_hz, cfg.f0_max_hz, cfg.voicing_threshold)
        if voiced:
            hnr = compute_hnr(long_fr, fs / f0)
            jitter, shimmer = compute_jitter_shimmer(long_fr, fs, f0)
        else:
            hnr = jitter = shimmer = math.nan
        formants = estimate_formants(emph[s0:s0 + short_n], fs, cfg.lpc_order, preemph=None,
                                     fmin=cfg.formant_fmin_hz, fmax=cfg.formant_fmax_hz,
                                     max_bw=cfg.formant_max_bw_hz)
        spectral = compute_spectral_group(short_fr, fs, f0, formants, prev_frame=prev_short)
        mfcc = compute_mfcc(short_fr, fs, cfg.n_fft, cfg.n_mels, cfg.mel_fmin_hz, cfg.mel_fmax_hz, 4)
        frames.append(LldFrame(center / fs, voiced, loudness_db(short_fr), hnr, mfcc, f0,
                               formants, spectral, jitter, shimmer))
        prev_short = short_fr
    return frames


def utterance_functionals(frames, neutral_value: float = 0.0) -> FeatureGroupVector:
    """Arithmetic mean per descriptor over defined frames (voiced frames for voiced-only ones)."""
    if not frames:
        raise ValueError("no frames")
    mat = np.stack([f.vector() for f in frames])
    voiced = np.array([f.voiced for f in frames])
    out = np.empty(len(LLD_NAMES))
    fallback = []
    for j, name in enumerate(LLD_NAMES):
        col = mat[voiced, j] if name in VOICED_ONLY else mat[:, j]
        col = col[np.isfinite(col)]
        if col.size:
            out[j] = col.mean()
        else:
            out[j] = neutral_value
            fallback.append(name)
    return FeatureGroupVector.from_flat(out, fallback)


def extract_feature_groups(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> FeatureGroupVector:
    return utterance_functionals(extract_llds(audio, cfg), cfg.neutral_value)


def lld_csv(frames) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "voiced", *LLD_NAMES])
    for f in frames:
        w.writerow([format_float(f.t_s), int(f.voiced), *(format_float(v) for v in f.vector())])
    return buf.getvalue()


def write_lld_csv(path, frames) -> None:
    atomic_write_text(path, lld_csv(frames))
