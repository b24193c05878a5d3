"""Objective evaluation: prosody correlation, control sweeps, leakage probing.

Prosody of converted speech is estimated directly from the converted mel
(no vocoder in this pipeline): energy as the exponentiated band sum, f0 by
harmonic-comb scoring against the mel band energies. Correlations are
computed per utterance against the source's ground-truth contours and
macro-averaged.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import EvalConfig, FrameConfig
from .corpus import Utterance
from .dsp import mel_center_frequencies
from .models import ConversionModel
from .seeds import seed_for


class EvalError(ValueError):
    """Invalid evaluation input."""


@dataclass
class ProsodyEstimate:
    f0_hat: np.ndarray  # [T] Hz, 0 where judged unvoiced
    energy_hat: np.ndarray  # [T] exponentiated mel band sum


# ---------------------------------------------------------------------------
# primitives


def pearson(a, b) -> float:
    """Sample Pearson correlation coefficient.

    Raises for sequences shorter than 2 or constant input (undefined);
    aggregate callers catch and exclude those cases.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError("expected two 1-D sequences of equal length")
    if a.size < 2:
        raise EvalError("need at least two points")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom == 0.0:
        raise EvalError("correlation undefined for constant input")
    return float((da * db).sum() / denom)


def estimate_prosody_from_mel(mel: np.ndarray, frame_cfg: FrameConfig,
                              eval_cfg: EvalConfig | None = None) -> ProsodyEstimate:
    """Frame-level prosody estimated from a log-mel spectrogram.

    Energy is the per-frame sum of exponentiated bands. f0 is found by
    scoring a log-spaced candidate grid with a harmonic comb (band energy
    at harmonic positions minus energy between them) and refining the
    winner parabolically; frames whose harmonic/inter-harmonic contrast is
    too small, or whose energy sits at the silence floor, count as
    unvoiced.
    """
    eval_cfg = eval_cfg or EvalConfig()
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] < 64:
        raise EvalError("need a [T x n_mels] mel with at least 64 bands")
    if mel.shape[1] != frame_cfg.n_mels:
        raise EvalError("mel band count does not match the frame config")

    band_energy = np.exp(mel)
    energy_hat = band_energy.sum(axis=1)

    centers = mel_center_frequencies(frame_cfg)
    candidates = np.geomspace(frame_cfg.f0_min, frame_cfg.f0_max, eval_cfg.n_f0_candidates)
    h = np.arange(1, eval_cfg.n_harmonics + 1)
    harm_freqs = np.outer(candidates, h)  # [C, H]
    off_freqs = np.outer(candidates, h + 0.5)
    in_band = harm_freqs <= frame_cfg.mel_fmax * 0.98
    weights = in_band.astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True)

    T = mel.shape[0]
    f0_hat = np.zeros(T)
    log_c = np.log(candidates)
    for t in range(T):
        e = band_energy[t]
        harm = np.interp(harm_freqs, centers, e, left=0.0, right=0.0)
        off = np.interp(off_freqs, centers, e, left=0.0, right=0.0)
        score = (harm * weights).sum(axis=1)
        off_score = (off * weights).sum(axis=1)
        net = score - off_score
        k = int(np.argmax(net))
        if energy_hat[t] < eval_cfg.energy_floor:
            continue
        if score[k] < eval_cfg.voicing_contrast * max(off_score[k], 1e-300):
            continue
        if 0 < k < len(candidates) - 1:
            ym1, y0, yp1 = net[k - 1], net[k], net[k + 1]
            denom = ym1 - 2 * y0 + yp1
            delta = 0.5 * (ym1 - yp1) / denom if abs(denom) > 1e-300 else 0.0
            delta = float(np.clip(delta, -0.5, 0.5))
            step = log_c[min(k + 1, len(log_c) - 1)] - log_c[k]
            f0_hat[t] = float(np.exp(log_c[k] + delta * step))
        else:
            f0_hat[t] = float(candidates[k])
    return ProsodyEstimate(f0_hat=f0_hat, energy_hat=energy_hat)


# ---------------------------------------------------------------------------
# correlation protocol


@dataclass
class CorrelationRow:
    utt_id: str
    source_speaker_id: int
    pearson_lf0: float | None
    pearson_energy: float | None  # over oracle-voiced frames (primary protocol)
    pearson_energy_all: float | None  # over all frames (logged alternative)
    n_voiced: int


@dataclass
class CorrelationSummary:
    mean_lf0: float
    mean_energy: float
    rows: list
    n_excluded_lf0: int = 0
    n_excluded_energy: int = 0


def correlate_converted(source: Utterance, converted_mel: np.ndarray,
                        frame_cfg: FrameConfig, eval_cfg: EvalConfig) -> CorrelationRow:
    """Correlate prosody of a converted mel against the source oracle.

    Both channels correlate over frames the source oracle marks voiced
    (the primary protocol); the all-frames energy correlation is logged
    alongside since the voiced-frame handling is a protocol choice.
    Undefined correlations become None.
    """
    est = estimate_prosody_from_mel(converted_mel, frame_cfg, eval_cfg)
    mask = source.oracle_f0 > 0
    r_lf0 = r_energy = r_energy_all = None
    if mask.sum() >= 2:
        try:
            # log domain: register differences between source and target
            # become additive shifts, which Pearson ignores; frames the
            # estimator left unvoiced enter at the range floor as a penalty
            est_lf0 = np.log(np.where(est.f0_hat[mask] > 0,
                                      est.f0_hat[mask], frame_cfg.f0_min))
            r_lf0 = pearson(est_lf0, np.log(source.oracle_f0[mask]))
        except EvalError:
            pass
        try:
            r_energy = pearson(est.energy_hat[mask], source.oracle_energy[mask])
        except EvalError:
            pass
    try:
        r_energy_all = pearson(est.energy_hat, source.oracle_energy)
    except EvalError:
        pass
    return CorrelationRow(
        utt_id=source.utt_id,
        source_speaker_id=source.speaker_id,
        pearson_lf0=r_lf0,
        pearson_energy=r_energy,
        pearson_energy_all=r_energy_all,
        n_voiced=int(mask.sum()),
    )


def correlation_eval(model: ConversionModel, test_utts: list[Utterance],
                     target_speaker: int, frame_cfg: FrameConfig,
                     eval_cfg: EvalConfig | None = None) -> CorrelationSummary:
    """Convert every test utterance to the target speaker and score prosody transfer."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for utt in test_utts:
        converted = model.convert(utt, target_speaker)
        if converted.mel.shape[0] != utt.n_frames:
            raise EvalError(f"{utt.utt_id}: converted frame count changed")
        rows.append(correlate_converted(utt, converted.mel, frame_cfg, eval_cfg))
    lf0_values = [r.pearson_lf0 for r in rows if r.pearson_lf0 is not None]
    energy_values = [r.pearson_energy for r in rows if r.pearson_energy is not None]
    if not lf0_values or not energy_values:
        raise EvalError("no defined correlations over the test split")
    return CorrelationSummary(
        mean_lf0=float(np.mean(lf0_values)),
        mean_energy=float(np.mean(energy_values)),
        rows=rows,
        n_excluded_lf0=len(rows) - len(lf0_values),
        n_excluded_energy=len(rows) - len(energy_values),
    )


# ---------------------------------------------------------------------------
# prosody control sweep


@dataclass
class SweepRow:
    utt_id: str
    channel: str  # "f0" or "energy"
    coefficient: float
    mean_voiced_f0: float
    mean_energy: float


def control_sweep(model: ConversionModel, utt: Utterance, target_speaker: int,
                  frame_cfg: FrameConfig, eval_cfg: EvalConfig | None = None,
                  coefficients=None) -> list[SweepRow]:
    """Convert with each coefficient applied to lf0 and, separately, energy.

    Reports the mean voiced f0 estimate and mean energy estimate of each
    converted output.
    """
    eval_cfg = eval_cfg or EvalConfig()
    coefficients = list(coefficients if coefficients is not None else eval_cfg.coefficients)
    rows = []
    for channel in ("energy", "f0"):
        for c in coefficients:
            converted = model.convert(
                utt, target_speaker,
                scale_f0=c if channel == "f0" else 1.0,
                scale_energy=c if channel == "energy" else 1.0,
            )
            est = estimate_prosody_from_mel(converted.mel, frame_cfg, eval_cfg)
            voiced = est.f0_hat > 0
            rows.append(SweepRow(
                utt_id=utt.utt_id,
                channel=channel,
                coefficient=float(c),
                mean_voiced_f0=float(est.f0_hat[voiced].mean()) if voiced.any() else 0.0,
                mean_energy=float(est.energy_hat.mean()),
            ))
    return rows


# ---------------------------------------------------------------------------
# speaker-leakage probe


class _ProbeNet(nn.Module):
    """Same three-layer shape as the training-time adversary, logits out."""

    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, x):
        return self.net(x)


def leakage_probe(latents: np.ndarray, speaker_ids: np.ndarray,
                  eval_cfg: EvalConfig | None = None, folds: int | None = None,
                  seed: int = 0) -> float:
    """Cross-validated accuracy of a fresh classifier on frozen latents.

    Low accuracy (near chance) means the latents carry little speaker
    identity. Requires at least ``folds`` utterances per speaker.
    """
    eval_cfg = eval_cfg or EvalConfig()
    folds = folds if folds is not None else eval_cfg.probe_folds
    latents = np.asarray(latents, dtype=np.float32)
    speaker_ids = np.asarray(speaker_ids)
    classes = np.unique(speaker_ids)
    counts = {int(s): int((speaker_ids == s).sum()) for s in classes}
    if min(counts.values()) < max(folds, 10):
        raise EvalError(f"need at least {max(folds, 10)} utterances per speaker, got {counts}")
    label_of = {int(s): i for i, s in enumerate(classes)}
    labels = np.array([label_of[int(s)] for s in speaker_ids])

    # stratified fold assignment, round-robin within each speaker
    fold_of = np.zeros(len(labels), dtype=int)
    for s in classes:
        idx = np.flatnonzero(speaker_ids == s)
        fold_of[idx] = np.arange(len(idx)) % folds

    accuracies = []
    for fold in range(folds):
        train_idx = np.flatnonzero(fold_of != fold)
        test_idx = np.flatnonzero(fold_of == fold)
        torch.manual_seed(seed_for(seed, "probe", fold))
        probe = _ProbeNet(latents.shape[1], eval_cfg.probe_hidden, len(classes))
        opt = torch.optim.Adam(probe.parameters(), lr=eval_cfg.probe_lr)
        x_train = torch.from_numpy(latents[train_idx])
        y_train = torch.from_numpy(labels[train_idx])
        for _ in range(eval_cfg.probe_epochs):
            opt.zero_grad(set_to_none=True)
            loss = nn.functional.cross_entropy(probe(x_train), y_train)
            loss.backward()
            opt.step()
        with torch.no_grad():
            pred = probe(torch.from_numpy(latents[test_idx])).argmax(dim=-1).numpy()
        accuracies.append(float((pred == labels[test_idx]).mean()))
    return float(np.mean(accuracies))


def collect_latents(model: ConversionModel, utts: list[Utterance]):
    """Analysis-time latents (posterior means) with speaker ids."""
    if model.vae is None:
        raise EvalError("model has no prosody module")
    latents, ids = [], []
    with torch.no_grad():
        for utt in utts:
            mel = torch.as_tensor(utt.mel, dtype=torch.float32).unsqueeze(0)
            mu, _ = model.vae(model.normalize_mel(mel), torch.tensor([utt.n_frames]))
            latents.append(mu[0].numpy())
            ids.append(utt.speaker_id)
    return np.asarray(latents), np.asarray(ids)


# ---------------------------------------------------------------------------
# 2-D latent export


def export_latents_2d(latents: np.ndarray, speaker_ids: np.ndarray) -> np.ndarray:
    """Project latents onto their top two principal directions.

    Returns rows of (x, y, speaker_id). Degenerate covariance yields zeros
    with a warning.
    """
    latents = np.asarray(latents, dtype=np.float64)
    speaker_ids = np.asarray(speaker_ids)
    if latents.ndim != 2 or latents.shape[0] < 3:
        raise EvalError("need at least 3 latents")
    centered = latents - latents.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1.0):
        warnings.warn("degenerate latent covariance; emitting zero projection")
        points = np.zeros((latents.shape[0], 2))
    else:
        points = centered @ vt[:2].T
    return np.column_stack([points, speaker_ids.astype(np.float64)])


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    """Everything one evaluation run produced, JSON/TSV serializable."""

    target_speaker_id: int | None = None
    correlation: CorrelationSummary | None = None
    sweep: list = field(default_factory=list)
    probe_accuracy: float | None = None
    probe_chance: float | None = None
    latent_points: np.ndarray | None = None
    trajectories: list = field(default_factory=list)  # per-utterance curve dicts
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc: dict = {"target_speaker_id": self.target_speaker_id}
        if self.correlation is not None:
            doc["correlation"] = {
                "mean_lf0": self.correlation.mean_lf0,
                "mean_energy": self.correlation.mean_energy,
                "n_utterances": len(self.correlation.rows),
                "n_excluded_lf0": self.correlation.n_excluded_lf0,
                "n_excluded_energy": self.correlation.n_excluded_energy,
            }
        if self.sweep:
            doc["sweep"] = [vars(r) for r in self.sweep]
        if self.probe_accuracy is not None:
            doc["probe"] = {"accuracy": self.probe_accuracy, "chance": self.probe_chance}
        doc.update(self.extra)
        return doc


def write_report(report: EvalReport, out_dir: str | Path) -> dict:
    """Write report.json plus flat TSV tables; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    path = out / "report.json"
    path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    written["report"] = path

    if report.correlation is not None:
        path = out / "correlations.tsv"
        lines = ["utt_id\tsource_speaker\tpearson_lf0\tpearson_energy\tpearson_energy_all\tn_voiced"]
        for r in report.correlation.rows:
            lf0 = "" if r.pearson_lf0 is None else f"{r.pearson_lf0:.6f}"
            en = "" if r.pearson_energy is None else f"{r.pearson_energy:.6f}"
            en_all = "" if r.pearson_energy_all is None else f"{r.pearson_energy_all:.6f}"
            lines.append(f"{r.utt_id}\t{r.source_speaker_id}\t{lf0}\t{en}\t{en_all}\t{r.n_voiced}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written["correlations"] = path

    if report.sweep:
        path = out / "sweep.tsv"
        lines = ["utt_id\tchannel\tcoefficient\tmean_voiced_f0\tmean_energy"]
        for r in report.sweep:
            lines.append(f"{r.utt_id}\t{r.channel}\t{r.coefficient:g}"
                         f"\t{r.mean_voiced_f0:.4f}\t{r.mean_energy:.6g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written["sweep"] = path

    if report.latent_points is not None:
        path = out / "latents_2d.tsv"
        lines = ["x\ty\tspeaker_id"]
        for x, y, sid in report.latent_points:
            lines.append(f"{x:.6f}\t{y:.6f}\t{int(sid)}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written["latents_2d"] = path

    if report.trajectories:
        path = out / "trajectories.tsv"
        lines = ["utt_id\tframe\tsource_f0\tconverted_f0\tsource_energy\tconverted_energy"]
        for tr in report.trajectories:
            T = len(tr["source_f0"])
            for t in range(T):
                lines.append(
                    f"{tr['utt_id']}\t{t}\t{tr['source_f0'][t]:.3f}\t{tr['converted_f0'][t]:.3f}"
                    f"\t{tr['source_energy'][t]:.6g}\t{tr['converted_energy'][t]:.6g}"
                )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written["trajectories"] = path
    return written
