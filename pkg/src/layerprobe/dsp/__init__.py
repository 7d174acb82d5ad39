"""Paralinguistic descriptors: pitch, energy, MFCC, formants, spectral shape, voice quality."""

from .formants import estimate_formants, levinson_durbin
from .lld import (
    GROUP_DIMS,
    GROUP_NAMES,
    LLD_NAMES,
    DspConfig,
    FeatureGroupVector,
    LldFrame,
    extract_feature_groups,
    extract_llds,
    utterance_functionals,
)
from .pitch import compute_hnr, compute_jitter_shimmer, estimate_f0, hnr_from_r
from .spectral import compute_mfcc, compute_spectral_group, loudness_db
from .wav import AudioBuffer, read_wav, write_wav

__all__ = [
    "GROUP_DIMS", "GROUP_NAMES", "LLD_NAMES", "AudioBuffer", "DspConfig", "FeatureGroupVector", "LldFrame",
    "compute_hnr", "compute_jitter_shimmer", "compute_mfcc", "compute_spectral_group", "estimate_f0",
    "estimate_formants", "extract_feature_groups", "extract_llds", "hnr_from_r", "levinson_durbin",
    "loudness_db", "read_wav", "utterance_functionals", "write_wav",
]
