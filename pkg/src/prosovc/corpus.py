"""Deterministic synthetic multi-speaker corpus with known prosody.

Each utterance is a phone sequence with per-phone frame durations, a
piecewise-linear f0 contour (speaker-scaled), an energy contour, and a
voicing plan. Waveforms are rendered as a phase-continuous harmonic stack
(voiced) plus band-filtered noise (unvoiced); the stack is normalized so
the per-frame mean absolute amplitude tracks the energy contour, which
makes the generation parameters an exact oracle for feature extraction.

Bottleneck features are built from phone identity alone (one-hot, smoothed
in time, projected through a fixed orthogonal map), so they carry phone
and duration information but no speaker or pitch quantity whatsoever.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig, FrameConfig, RunConfig, config_to_dict
from .dsp import Waveform, compute_energy, compute_mel, extract_prosody, mel_center_frequencies
from .seeds import seed_for
from .tensorfile import FEATURE_MAGIC, read_tensorfile, write_tensorfile

N_HARMONICS = 8
MAX_HARMONIC_HZ = 3800.0  # keep all harmonics inside the mel analysis band
# the bottleneck projection is part of the feature definition, shared by
# every corpus regardless of its seed
_BN_PROJECTION_SEED = 0x0B17E7EC


class CorpusError(ValueError):
    """Invalid corpus specification."""


@dataclass
class SpeakerSpec:
    speaker_id: int
    base_f0: float
    f0_span: float  # octaves
    timbre_gains_db: np.ndarray  # [n_mels] spectral shaping, dB

    def __post_init__(self):
        if not (100.0 <= self.base_f0 <= 320.0):
            raise CorpusError(f"base_f0 {self.base_f0} outside [100, 320] Hz")
        if not np.all(np.isfinite(self.timbre_gains_db)):
            raise CorpusError("non-finite timbre gains")


@dataclass
class UtteranceSpec:
    phones: list  # [(phone_class, duration_frames), ...]
    f0_contour: np.ndarray  # [T] Hz
    energy_contour: np.ndarray  # [T]
    voicing_plan: np.ndarray  # [T] binary
    # per-utterance voice-quality wobble (dB per kHz on top of the speaker
    # timbre): utterance-level style that only an implicit latent can carry
    tilt_db_per_khz: float = 0.0

    def __post_init__(self):
        T = sum(d for _, d in self.phones)
        if T != len(self.f0_contour) or T != len(self.energy_contour) or T != len(self.voicing_plan):
            raise CorpusError("phone durations do not sum to contour length")
        if not (np.all(np.isfinite(self.f0_contour)) and np.all(np.isfinite(self.energy_contour))):
            raise CorpusError("non-finite contour")

    @property
    def n_frames(self) -> int:
        return len(self.f0_contour)

    def phone_per_frame(self) -> np.ndarray:
        out = np.empty(self.n_frames, dtype=np.int64)
        pos = 0
        for phone, dur in self.phones:
            out[pos:pos + dur] = phone
            pos += dur
        return out


@dataclass
class Utterance:
    """Per-utterance feature bundle as stored in the corpus."""

    utt_id: str
    speaker_id: int
    mel: np.ndarray
    bn: np.ndarray
    lf0: np.ndarray
    vuv: np.ndarray
    energy: np.ndarray
    lf0_norm: np.ndarray
    energy_norm: np.ndarray
    oracle_f0: np.ndarray
    oracle_energy: np.ndarray
    wave: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


# ---------------------------------------------------------------------------
# phone inventory and speaker table


def _meanabs_to_l1_ratio(weights: np.ndarray) -> float:
    """Cycle mean-abs of the phase-locked stack divided by the weight sum."""
    return float(_cycle_mean_abs(weights[None, :])[0] / weights.sum())


def _equalize_spectral_ratio(weights: np.ndarray, target: float) -> np.ndarray:
    """Reshape harmonic weights (elementwise power) until the stack's
    mean-abs-to-L1 ratio hits ``target``.

    Keeping this ratio common across phone classes makes the time-domain
    amplitude envelope and the spectral band sum proportional, so both
    energy views of the corpus agree up to one global constant.
    """
    lo, hi = 0.05, 8.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        w = weights ** mid
        if _meanabs_to_l1_ratio(w / w.max()) < target:
            lo = mid
        else:
            hi = mid
    w = weights ** (0.5 * (lo + hi))
    return w / w.max()


def phone_profiles(corpus_cfg: CorpusConfig, seed: int) -> dict:
    """Per-class acoustic profiles: harmonic weights (voiced) or noise bands.

    Classes ``0 .. n_unvoiced_classes-1`` are unvoiced. Voiced profiles are
    reshaped to share one mean-abs-to-L1 ratio (see
    ``_equalize_spectral_ratio``).
    """
    rng = np.random.default_rng(seed_for(seed, "phones"))
    profiles = {"harmonic": {}, "noise_band": {}, "energy_factor": {}}
    n_unvoiced = corpus_cfg.n_unvoiced_classes
    for cls in range(corpus_cfg.n_phone_classes):
        if cls < n_unvoiced:
            lo = rng.uniform(1400.0, 2200.0)
            hi = lo + 1300.0
            profiles["noise_band"][cls] = (lo, min(hi, MAX_HARMONIC_HZ))
            profiles["energy_factor"][cls] = rng.uniform(0.35, 0.55)
        else:
            base = (1.0 / np.arange(1, N_HARMONICS + 1)) ** 0.7
            bumps = rng.uniform(0.0, 2.0, size=N_HARMONICS)
            profiles["harmonic"][cls] = _equalize_spectral_ratio(base * (1.0 + bumps), 0.28)
            profiles["energy_factor"][cls] = rng.uniform(0.8, 1.0)
    return profiles


def make_speakers(corpus_cfg: CorpusConfig, frame_cfg: FrameConfig, seed: int) -> list[SpeakerSpec]:
    rng = np.random.default_rng(seed_for(seed, "speakers"))
    n = corpus_cfg.n_speakers
    centers = np.geomspace(corpus_cfg.base_f0_low, corpus_cfg.base_f0_high, n)
    centers = centers * np.exp(rng.uniform(-0.03, 0.03, size=n))
    speakers = []
    for sid in range(n):
        tilt = rng.uniform(-4.0, 4.0)  # dB per kHz
        freqs = mel_center_frequencies(frame_cfg)
        gains = tilt * freqs / 1000.0
        for _ in range(3):
            center = rng.uniform(0, len(freqs))
            width = rng.uniform(6.0, 14.0)
            height = rng.uniform(-5.0, 5.0)
            gains = gains + height * np.exp(-0.5 * ((np.arange(len(freqs)) - center) / width) ** 2)
        speakers.append(
            SpeakerSpec(
                speaker_id=sid,
                base_f0=float(np.clip(centers[sid], 100.0, 320.0)),
                f0_span=float(rng.uniform(0.4, 0.7)),
                timbre_gains_db=gains,
            )
        )
    return speakers


# ---------------------------------------------------------------------------
# utterance specification


def _piecewise_linear(rng, T, n_knots, lo, hi):
    knots = np.sort(np.concatenate([[0, T - 1], rng.uniform(0, T - 1, size=max(0, n_knots - 2))]))
    values = rng.uniform(lo, hi, size=len(knots))
    return np.interp(np.arange(T), knots, values)


def make_utterance_spec(spk: SpeakerSpec, corpus_cfg: CorpusConfig, rng,
                        style_boost: float = 1.0) -> UtteranceSpec:
    """Draw a random utterance: phones, durations, contours, voicing plan.

    Each utterance carries its own register wobble (a global pitch offset
    around the speaker's base) and spectral-tilt wobble, so utterance-level
    style exists beyond the frame-level contours. ``style_boost > 1``
    widens the pitch and energy dynamics (style-rich test material).
    """
    T_target = int(rng.integers(corpus_cfg.min_frames, corpus_cfg.max_frames + 1))
    n_unvoiced = corpus_cfg.n_unvoiced_classes
    voiced_classes = list(range(n_unvoiced, corpus_cfg.n_phone_classes))
    unvoiced_classes = list(range(n_unvoiced))

    for _attempt in range(64):
        phones = []
        remaining = T_target
        prev = -1
        while remaining > 0:
            dur = int(rng.integers(6, 25))
            if remaining - dur < 6:
                dur = remaining
            if rng.uniform() < 0.25 and len(phones) > 0:
                pool = [c for c in unvoiced_classes if c != prev]
            else:
                pool = [c for c in voiced_classes if c != prev]
            cls = int(rng.choice(pool))
            phones.append((cls, dur))
            prev = cls
            remaining -= dur
        plan = np.concatenate([
            np.full(d, 1 if c >= n_unvoiced else 0, dtype=np.int8) for c, d in phones
        ])
        if plan.mean() >= 0.55:
            break
    T = len(plan)

    # style_boost raises contour dynamics (knot density) without widening
    # the value ranges, so style-rich test material stays inside the
    # training distribution of condition values
    knots = lambda: int(round(rng.integers(4, 9) * style_boost))
    span = spk.f0_span
    register = np.exp2(rng.uniform(-0.18, 0.18))
    curve = _piecewise_linear(rng, T, knots(), -0.5, 0.5)
    f0 = spk.base_f0 * register * np.exp2(span * curve)
    f0 = np.clip(f0, 75.0, 410.0)

    # per-phone energy factors are applied at synthesis time from the
    # phone profiles; the contour here is the style trajectory alone.
    # the scale keeps waveform peaks inside [-1, 1] given the stack's
    # peak-to-mean-abs ratio
    energy = _piecewise_linear(rng, T, knots(), 0.03, 0.25)
    energy = np.clip(energy, 0.02, 0.3)

    return UtteranceSpec(phones=phones, f0_contour=f0, energy_contour=energy,
                         voicing_plan=plan, tilt_db_per_khz=float(rng.uniform(-2.5, 2.5)))


# ---------------------------------------------------------------------------
# waveform synthesis


def _frame_centers(T: int, cfg: FrameConfig) -> np.ndarray:
    return cfg.frame_shift * np.arange(T) + cfg.frame_length / 2.0


def _sample_count(T: int, cfg: FrameConfig) -> int:
    return (T - 1) * cfg.frame_shift + cfg.frame_length


def _speaker_gain_at(spk: SpeakerSpec, frame_cfg: FrameConfig, freqs_hz: np.ndarray) -> np.ndarray:
    centers = mel_center_frequencies(frame_cfg)
    gains_db = np.interp(freqs_hz, centers, spk.timbre_gains_db)
    return 10.0 ** (gains_db / 20.0)


def _cycle_mean_abs(weights: np.ndarray) -> np.ndarray:
    """Mean |sum of harmonics| over one fundamental cycle, per weight row."""
    theta = (np.arange(512) + 0.5) * (2 * np.pi / 512)
    h = np.arange(1, weights.shape[1] + 1)
    stack = np.sin(np.outer(theta, h)) @ weights.T  # [512, T]
    return np.abs(stack).mean(axis=0)


def synth_utterance(spk: SpeakerSpec, utt: UtteranceSpec, cfg: FrameConfig, seed: int,
                    profiles: dict | None = None,
                    corpus_cfg: CorpusConfig | None = None) -> Waveform:
    """Render an utterance spec to a waveform.

    Voiced regions are the first 8 harmonics of the f0 contour with
    phase-locked partials, weighted by the phone's harmonic profile and the
    speaker's spectral gains, normalized so the frame-level mean absolute
    amplitude equals the energy contour. Unvoiced regions are band-filtered
    noise with the same energy normalization. Deterministic given the seed.
    """
    corpus_cfg = corpus_cfg or CorpusConfig()
    profiles = profiles or phone_profiles(corpus_cfg, 0)
    rng = np.random.default_rng(seed_for(seed, "synth"))
    T = utt.n_frames
    n = _sample_count(T, cfg)
    centers = _frame_centers(T, cfg)
    samples_idx = np.arange(n)

    f0_frame = utt.f0_contour
    f0_sample = np.interp(samples_idx, centers, f0_frame)
    energy_sample = np.interp(samples_idx, centers, utt.energy_contour)
    phone_frame = utt.phone_per_frame()
    energy_factor = np.array([profiles["energy_factor"][int(c)] for c in phone_frame])
    energy_sample = energy_sample * np.interp(samples_idx, centers, energy_factor)

    # per-frame harmonic weights: phone profile x speaker gain x utterance
    # tilt at h*f0, zeroed above the analysis band
    h = np.arange(1, N_HARMONICS + 1)
    weights = np.zeros((T, N_HARMONICS))
    for t in range(T):
        cls = int(phone_frame[t])
        if cls in profiles["harmonic"]:
            freqs = h * f0_frame[t]
            tilt = 10.0 ** (utt.tilt_db_per_khz * freqs / 1000.0 / 20.0)
            w = profiles["harmonic"][cls] * _speaker_gain_at(spk, cfg, freqs) * tilt
            w[freqs > MAX_HARMONIC_HZ] = 0.0
            weights[t] = w
    norm = _cycle_mean_abs(weights)
    norm[norm < 1e-9] = 1.0

    phase = 2 * np.pi * np.cumsum(f0_sample) / cfg.sample_rate
    phase0 = rng.uniform(0, 2 * np.pi)
    weights_sample = np.stack(
        [np.interp(samples_idx, centers, weights[:, k]) for k in range(N_HARMONICS)], axis=1
    )
    norm_sample = np.interp(samples_idx, centers, norm)
    voiced_wave = np.sin(np.outer(phase + phase0, h))
    voiced_wave = (voiced_wave * weights_sample).sum(axis=1) / norm_sample

    # ownership of each sample: nearest frame's phone decides voicing/class
    owner_frame = np.clip(np.round((samples_idx - cfg.frame_length / 2.0) / cfg.frame_shift),
                          0, T - 1).astype(np.int64)
    v_sample = utt.voicing_plan[owner_frame].astype(np.float64)

    noise_wave = np.zeros(n)
    if np.any(v_sample < 1.0):
        cls_sample = phone_frame[owner_frame]
        for cls, (lo, hi) in profiles["noise_band"].items():
            gate = (cls_sample == cls) & (v_sample < 1.0)
            if not gate.any():
                continue
            noise = rng.standard_normal(n)
            spec = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(n, d=1.0 / cfg.sample_rate)
            spec[(freqs < lo) | (freqs > hi)] = 0.0
            spec = spec * 10.0 ** (utt.tilt_db_per_khz * freqs / 1000.0 / 20.0)
            band = np.fft.irfft(spec, n=n)
            mean_abs = np.abs(band).mean()
            if mean_abs > 1e-12:
                band = band / mean_abs
            noise_wave[gate] = band[gate]

    # short raised-cosine crossfade at voicing transitions avoids clicks
    ramp = int(0.002 * cfg.sample_rate)
    if ramp > 1:
        win = np.hanning(2 * ramp + 1)
        win = win / win.sum()
        v_soft = np.convolve(np.pad(v_sample, ramp, mode="edge"), win, mode="valid")
    else:
        v_soft = v_sample

    samples = energy_sample * (v_soft * voiced_wave + (1.0 - v_soft) * noise_wave)
    return Waveform(samples, cfg.sample_rate)


def oracle_contours(utt: UtteranceSpec, cfg: FrameConfig, profiles: dict):
    """Frame-level ground-truth prosody as feature extraction should see it.

    ``oracle_f0`` is nonzero only on frames whose whole analysis window lies
    inside voiced phones; ``oracle_energy`` is the window mean of the
    per-sample energy envelope (the exact prediction of ``compute_energy``).
    """
    T = utt.n_frames
    n = _sample_count(T, cfg)
    centers = _frame_centers(T, cfg)
    samples_idx = np.arange(n)
    phone_frame = utt.phone_per_frame()
    energy_factor = np.array([profiles["energy_factor"][int(c)] for c in phone_frame])
    energy_sample = np.interp(samples_idx, centers, utt.energy_contour) * np.interp(
        samples_idx, centers, energy_factor
    )
    owner_frame = np.clip(np.round((samples_idx - cfg.frame_length / 2.0) / cfg.frame_shift),
                          0, T - 1).astype(np.int64)
    v_sample = utt.voicing_plan[owner_frame].astype(bool)

    oracle_f0 = np.zeros(T)
    oracle_energy = np.zeros(T)
    for t in range(T):
        start = t * cfg.frame_shift
        window = slice(start, start + cfg.frame_length)
        oracle_energy[t] = energy_sample[window].mean()
        if v_sample[window].all():
            oracle_f0[t] = utt.f0_contour[t]
    return oracle_f0, oracle_energy


# ---------------------------------------------------------------------------
# bottleneck features


def bn_projection(n_phone_classes: int, d_bn: int) -> np.ndarray:
    """Fixed orthogonal map [d_bn, P]; identical for every corpus."""
    rng = np.random.default_rng(seed_for(_BN_PROJECTION_SEED, "bn-projection",
                                         n_phone_classes, d_bn))
    a = rng.standard_normal((d_bn, n_phone_classes))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))  # sign-fixed for determinism across BLAS variants


def synth_bn(utt: UtteranceSpec, corpus_cfg: CorpusConfig) -> np.ndarray:
    """Speaker-independent bottleneck features [T, d_bn].

    One-hot phone identity per frame, smoothed with a triangular window,
    projected through the fixed orthogonal map. No speaker quantity enters.
    """
    P = corpus_cfg.n_phone_classes
    onehot = np.zeros((utt.n_frames, P))
    onehot[np.arange(utt.n_frames), utt.phone_per_frame()] = 1.0
    half = corpus_cfg.bn_smoothing_frames // 2
    tri = 1.0 - np.abs(np.arange(-half, half + 1)) / (half + 1.0)
    tri = tri / tri.sum()
    smoothed = np.stack([np.convolve(onehot[:, p], tri, mode="same") for p in range(P)], axis=1)
    return smoothed @ bn_projection(P, corpus_cfg.d_bn).T


# ---------------------------------------------------------------------------
# corpus assembly


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    target_speaker_id: int
    speakers: list
    files: dict  # split -> [relative paths]
    mel_mean: float
    mel_std: float
    config: dict = field(default_factory=dict)

    SPLITS = ("train", "adapt", "test")

    def save(self):
        doc = {
            "format": "prosovc-corpus",
            "version": 1,
            "seed": self.seed,
            "target_speaker_id": self.target_speaker_id,
            "speakers": self.speakers,
            "files": self.files,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "config": self.config,
        }
        (self.root / "manifest.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, root: str | Path) -> "CorpusManifest":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        if doc.get("format") != "prosovc-corpus" or doc.get("version") != 1:
            raise CorpusError(f"{root}: not a corpus directory")
        return cls(
            root=root,
            seed=doc["seed"],
            target_speaker_id=doc["target_speaker_id"],
            speakers=doc["speakers"],
            files=doc["files"],
            mel_mean=doc["mel_mean"],
            mel_std=doc["mel_std"],
            config=doc.get("config", {}),
        )

    def paths(self, split: str) -> list[Path]:
        return [self.root / rel for rel in self.files[split]]

    def load_split(self, split: str) -> list[Utterance]:
        return [load_utterance(p) for p in self.paths(split)]

    @property
    def pretrain_speaker_ids(self) -> list[int]:
        return [s["speaker_id"] for s in self.speakers if s["speaker_id"] != self.target_speaker_id]


def save_utterance(path: Path, utt: Utterance, extra_meta: dict | None = None):
    tensors = {
        "mel": utt.mel.astype(np.float32),
        "bn": utt.bn.astype(np.float32),
        "lf0": utt.lf0.astype(np.float32),
        "vuv": utt.vuv.astype(np.float32),
        "energy": utt.energy.astype(np.float32),
        "lf0_norm": utt.lf0_norm.astype(np.float32),
        "energy_norm": utt.energy_norm.astype(np.float32),
        "oracle_f0": utt.oracle_f0.astype(np.float32),
        "oracle_energy": utt.oracle_energy.astype(np.float32),
    }
    if utt.wave is not None:
        tensors["wave"] = utt.wave.astype(np.float32)
    meta = {"utt_id": utt.utt_id, "speaker_id": int(utt.speaker_id)}
    meta.update(extra_meta or {})
    write_tensorfile(path, tensors, meta=meta, magic=FEATURE_MAGIC)


def load_utterance(path: str | Path) -> Utterance:
    tensors, meta = read_tensorfile(path, magic=FEATURE_MAGIC)
    return Utterance(
        utt_id=meta["utt_id"],
        speaker_id=int(meta["speaker_id"]),
        mel=tensors["mel"],
        bn=tensors["bn"],
        lf0=tensors["lf0"],
        vuv=tensors["vuv"],
        energy=tensors["energy"],
        lf0_norm=tensors["lf0_norm"],
        energy_norm=tensors["energy_norm"],
        oracle_f0=tensors["oracle_f0"],
        oracle_energy=tensors["oracle_energy"],
        wave=tensors.get("wave"),
    )


def features_from_waveform(wave: Waveform, bn: np.ndarray, cfg: FrameConfig,
                           utt_id: str, speaker_id: int,
                           oracle_f0: np.ndarray | None = None,
                           oracle_energy: np.ndarray | None = None,
                           keep_wave: bool = True) -> Utterance:
    """Extract the full feature bundle for one waveform."""
    mel = compute_mel(wave, cfg)
    track = extract_prosody(wave, cfg)
    T = mel.frames.shape[0]
    if bn.shape[0] != T:
        raise CorpusError(f"bn frame count {bn.shape[0]} != mel frame count {T}")
    zeros = np.zeros(T)
    return Utterance(
        utt_id=utt_id,
        speaker_id=speaker_id,
        mel=mel.frames,
        bn=bn,
        lf0=track.lf0,
        vuv=track.vuv.astype(np.float64),
        energy=track.energy,
        lf0_norm=track.lf0_norm,
        energy_norm=track.energy_norm,
        oracle_f0=oracle_f0 if oracle_f0 is not None else zeros,
        oracle_energy=oracle_energy if oracle_energy is not None else zeros,
        wave=wave.samples if keep_wave else None,
    )


def build_corpus(cfg: RunConfig, out_dir: str | Path) -> CorpusManifest:
    """Generate the full corpus: waveforms, features, splits, manifest.

    Splits: ``train`` (all non-target speakers), ``adapt`` (target speaker),
    ``test`` (style-rich utterances from non-target speakers). The whole
    corpus is a pure function of (config, seed).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ccfg, fcfg, seed = cfg.corpus, cfg.frame, cfg.seed
    profiles = phone_profiles(ccfg, seed)
    speakers = make_speakers(ccfg, fcfg, seed)

    files = {split: [] for split in CorpusManifest.SPLITS}
    mel_sum, mel_sqsum, mel_count = 0.0, 0.0, 0

    jobs = []
    for spk in speakers:
        if spk.speaker_id == ccfg.target_speaker_id:
            jobs += [("adapt", spk, i, 1.0) for i in range(ccfg.utterances_per_speaker)]
        else:
            jobs += [("train", spk, i, 1.0) for i in range(ccfg.utterances_per_speaker)]
            jobs += [("test", spk, i, ccfg.style_boost)
                     for i in range(ccfg.test_utterances_per_speaker)]

    for split, spk, idx, boost in jobs:
        utt_seed = seed_for(seed, "utterance", split, spk.speaker_id, idx)
        rng = np.random.default_rng(utt_seed)
        spec = make_utterance_spec(spk, ccfg, rng, style_boost=boost)
        wave = synth_utterance(spk, spec, fcfg, utt_seed, profiles=profiles, corpus_cfg=ccfg)
        bn = synth_bn(spec, ccfg)
        oracle_f0, oracle_energy = oracle_contours(spec, fcfg, profiles)
        utt_id = f"{split}_{spk.speaker_id:02d}_{idx:03d}"
        utt = features_from_waveform(
            wave, bn, fcfg, utt_id, spk.speaker_id,
            oracle_f0=oracle_f0, oracle_energy=oracle_energy,
            keep_wave=ccfg.store_waveforms,
        )
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        rel = f"{split}/{utt_id}.pvc"
        save_utterance(root / rel, utt, extra_meta={"split": split, "seed": utt_seed})
        files[split].append(rel)
        if split == "train":
            mel_sum += float(utt.mel.sum())
            mel_sqsum += float((utt.mel ** 2).sum())
            mel_count += utt.mel.size

    mean = mel_sum / mel_count
    std = float(np.sqrt(max(mel_sqsum / mel_count - mean * mean, 1e-12)))
    manifest = CorpusManifest(
        root=root,
        seed=seed,
        target_speaker_id=ccfg.target_speaker_id,
        speakers=[
            {"speaker_id": s.speaker_id, "base_f0": s.base_f0, "f0_span": s.f0_span}
            for s in speakers
        ],
        files=files,
        mel_mean=mean,
        mel_std=std,
        config=config_to_dict(cfg),
    )
    manifest.save()
    return manifest
