"""Acoustic feature extraction: mel spectrogram, pitch, energy, normalization.

All extractors frame a waveform identically (no padding, no centering), so
mel, lf0/vuv and energy of the same waveform always agree on frame count.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FrameConfig

LOG_FLOOR = 1e-10

# Normalized-autocorrelation peak height above which a frame counts as voiced.
VOICING_THRESHOLD = 0.45


class DspError(ValueError):
    """Invalid waveform or extraction parameters."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise DspError("waveform must be 1-D")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, n_mels], log-compressed
    frame_length_ms: float
    frame_shift_ms: float


@dataclass
class ProsodyTrack:
    """Frame-aligned explicit prosody: pitch, voicing, energy (raw + normalized)."""

    lf0: np.ndarray
    vuv: np.ndarray
    energy: np.ndarray
    lf0_norm: np.ndarray
    energy_norm: np.ndarray

    def __len__(self):
        return len(self.lf0)


def frame_count(n_samples: int, cfg: FrameConfig) -> int:
    if n_samples < cfg.frame_length:
        raise DspError(
            f"waveform too short: {n_samples} samples < one frame ({cfg.frame_length})"
        )
    return (n_samples - cfg.frame_length) // cfg.frame_shift + 1


def frame_signal(samples: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Slice a waveform into [T, frame_length] frames (copy)."""
    n = frame_count(len(samples), cfg)
    idx = np.arange(cfg.frame_length)[None, :] + cfg.frame_shift * np.arange(n)[:, None]
    return samples[idx]


def mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrameConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    edges = np.linspace(mel_from_hz(cfg.mel_fmin), mel_from_hz(cfg.mel_fmax), cfg.n_mels + 2)
    return hz_from_mel(edges[1:-1])


def mel_filterbank(cfg: FrameConfig, n_fft: int) -> np.ndarray:
    """Triangular mel filterbank [n_mels, n_fft//2 + 1], peak-normalized.

    Triangles are linear in Hz around mel-spaced centers with peak
    response 1, so a pure tone lands hardest in the band whose center
    frequency is nearest. ``mel_filter_width`` stretches every triangle
    around its center: wider overlap makes each band's response vary
    smoothly as a component drifts across the grid (the band sum stays a
    constant multiple of the spectrum mass).
    """
    edges_hz = hz_from_mel(
        np.linspace(mel_from_hz(cfg.mel_fmin), mel_from_hz(cfg.mel_fmax), cfg.n_mels + 2)
    )
    w = cfg.mel_filter_width
    fft_freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    fb = np.zeros((cfg.n_mels, len(fft_freqs)))
    for b in range(cfg.n_mels):
        lo, center, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        rising = (fft_freqs - (center - w * (center - lo))) / max(w * (center - lo), 1e-12)
        falling = ((center + w * (hi - center)) - fft_freqs) / max(w * (hi - center), 1e-12)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def compute_mel(w: Waveform, cfg: FrameConfig) -> MelSpectrogram:
    """Log mel spectrogram of a waveform.

    Frames are Hann-windowed, zero-padded to the next power of two, and
    projected through the triangular filterbank; compression is
    ``log(x + 1e-10)``.
    """
    if w.sample_rate != cfg.sample_rate:
        raise DspError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")
    frames = frame_signal(w.samples, cfg)
    window = np.hanning(cfg.frame_length)
    # double the next power of two: finer bin grid samples the narrow
    # low-frequency mel triangles adequately
    n_fft = 2 << (cfg.frame_length - 1).bit_length()
    spec = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))
    fb = mel_filterbank(cfg, n_fft)
    mel = np.log(spec @ fb.T + LOG_FLOOR)
    return MelSpectrogram(mel.astype(np.float64), cfg.frame_length_ms, cfg.frame_shift_ms)


def compute_energy(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Per-frame short-term average amplitude: mean(|samples|) per frame."""
    if w.sample_rate != cfg.sample_rate:
        raise DspError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")
    return np.abs(frame_signal(w.samples, cfg)).mean(axis=1)


def extract_f0_vuv(w: Waveform, cfg: FrameConfig,
                   f0_range: tuple[float, float] | None = None):
    """Per-frame pitch (natural-log Hz) and voicing flags.

    Normalized autocorrelation per frame with parabolic peak interpolation;
    a frame is voiced when the strongest in-range peak reaches
    ``VOICING_THRESHOLD`` of the zero-lag energy. Among near-maximal peaks
    the smallest lag wins, which suppresses octave-down errors on strongly
    periodic input. Unvoiced frames carry lf0 = 0.
    """
    f_min, f_max = f0_range if f0_range is not None else (cfg.f0_min, cfg.f0_max)
    if not (0 < f_min < f_max < w.sample_rate / 4):
        raise DspError("require 0 < f_min < f_max < sample_rate/4")
    if w.sample_rate != cfg.sample_rate:
        raise DspError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")

    frames = frame_signal(w.samples, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = cfg.frame_length
    n_fft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, n=n_fft, axis=1)[:, :n]

    lag_min = max(2, int(np.floor(w.sample_rate / f_max)))
    lag_max = min(n - 2, int(np.ceil(w.sample_rate / f_min)))
    if lag_min >= lag_max:
        raise DspError("frame too short for the requested f0 range")

    t_frames = frames.shape[0]
    lf0 = np.zeros(t_frames)
    vuv = np.zeros(t_frames, dtype=np.int8)
    for t in range(t_frames):
        r = acf[t]
        if r[0] <= 0:
            continue
        rn = r / r[0]
        seg = rn[lag_min:lag_max + 1]
        peaks = np.flatnonzero(
            (seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:]) & (seg[1:-1] >= VOICING_THRESHOLD)
        ) + 1 + lag_min
        if peaks.size == 0:
            continue
        best = rn[peaks].max()
        lag = int(peaks[rn[peaks] >= 0.9 * best].min())
        # parabolic interpolation around the integer-lag peak
        ym1, y0, yp1 = rn[lag - 1], rn[lag], rn[lag + 1]
        denom = ym1 - 2 * y0 + yp1
        delta = 0.5 * (ym1 - yp1) / denom if abs(denom) > 1e-12 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        f0 = w.sample_rate / (lag + delta)
        if f_min <= f0 <= f_max:
            lf0[t] = np.log(f0)
            vuv[t] = 1
    return lf0, vuv


def minmax_normalize(x: np.ndarray, voiced_mask: np.ndarray | None = None) -> np.ndarray:
    """Min-max normalize to [0, 1] over the masked support.

    Unmasked positions map to 0; a constant masked sequence maps to all
    zeros (degenerate range convention).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DspError("expected a non-empty 1-D sequence")
    if not np.all(np.isfinite(x)):
        raise DspError("non-finite values in input")
    if voiced_mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(voiced_mask).astype(bool)
        if mask.shape != x.shape:
            raise DspError("mask length must match input length")
    out = np.zeros_like(x)
    if not mask.any():
        return out
    lo = x[mask].min()
    hi = x[mask].max()
    if hi - lo <= 0:
        return out
    out[mask] = (x[mask] - lo) / (hi - lo)
    return out


def extract_prosody(w: Waveform, cfg: FrameConfig) -> ProsodyTrack:
    """Full explicit-prosody bundle: lf0/vuv/energy plus [0,1] normalizations.

    lf0 normalization runs over voiced frames only; energy over all frames.
    """
    lf0, vuv = extract_f0_vuv(w, cfg)
    energy = compute_energy(w, cfg)
    return ProsodyTrack(
        lf0=lf0,
        vuv=vuv,
        energy=energy,
        lf0_norm=minmax_normalize(lf0, vuv),
        energy_norm=minmax_normalize(energy),
    )
