"""Full conversion model: encoder, prosody module, decoder, classifier.

The model operates on mean/variance-normalized log-mel internally and
denormalizes on output. ``convert`` runs the free-running decoder on a
source utterance conditioned on a target speaker, preserving the source
frame count exactly; explicit prosody tracks can be rescaled (then clipped
back to [0, 1]) for intuitive pitch/energy control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from ..config import RunConfig
from ..corpus import CorpusManifest, Utterance
from ..seeds import seed_for
from ..tensorfile import FEATURE_MAGIC, read_tensorfile, write_tensorfile
from .decoder import MelDecoder
from .encoder import SawaEncoder
from .prosody import ProsodyVae, ReferenceEncoder, SpeakerClassifier, reparameterize


class NotTrainedError(RuntimeError):
    """Conversion requested from a model with no completed training steps."""


@dataclass
class ConvertedUtterance:
    mel: np.ndarray  # [T, n_mels] log-mel, denormalized
    source_utt_id: str
    source_speaker_id: int
    target_speaker_id: int
    scale_f0: float
    scale_energy: float

    def save(self, path):
        """Corpus tensor format with a 'converted' tag and provenance fields."""
        write_tensorfile(
            path,
            {"mel": self.mel.astype(np.float32)},
            meta={
                "tag": "converted",
                "source_utt_id": self.source_utt_id,
                "source_speaker_id": int(self.source_speaker_id),
                "target_speaker_id": int(self.target_speaker_id),
                "scale_f0": self.scale_f0,
                "scale_energy": self.scale_energy,
            },
            magic=FEATURE_MAGIC,
        )


def load_converted(path) -> ConvertedUtterance:
    tensors, meta = read_tensorfile(path, magic=FEATURE_MAGIC)
    if meta.get("tag") != "converted":
        raise IOError(f"{path}: not a converted-mel file")
    return ConvertedUtterance(
        mel=tensors["mel"].astype(np.float64),
        source_utt_id=meta["source_utt_id"],
        source_speaker_id=meta["source_speaker_id"],
        target_speaker_id=meta["target_speaker_id"],
        scale_f0=meta["scale_f0"],
        scale_energy=meta["scale_energy"],
    )


class ConversionModel(nn.Module):
    def __init__(self, cfg: RunConfig, n_mels: int, d_bn: int, n_speakers_total: int,
                 pretrain_speaker_ids: list[int], mel_mean: float, mel_std: float):
        super().__init__()
        self.cfg = cfg
        mcfg = cfg.model
        self.n_mels = n_mels
        self.pretrain_speaker_ids = sorted(pretrain_speaker_ids)
        self.label_for_speaker = {sid: i for i, sid in enumerate(self.pretrain_speaker_ids)}
        self.encoder = SawaEncoder(d_bn, mcfg)
        self.decoder = MelDecoder(n_mels, n_speakers_total, mcfg)
        if mcfg.use_prosody_module:
            self.vae = ProsodyVae(n_mels, mcfg)
            self.refenc = ReferenceEncoder(d_bn, mcfg)
            self.classifier = SpeakerClassifier(
                mcfg.d_z, len(self.pretrain_speaker_ids), mcfg.classifier_hidden
            )
        else:
            self.vae = None
            self.refenc = None
            self.classifier = None
        self.register_buffer("mel_mean", torch.tensor(float(mel_mean)))
        self.register_buffer("mel_std", torch.tensor(float(max(mel_std, 1e-6))))
        self.register_buffer("trained_steps", torch.tensor(0, dtype=torch.int64))

    @classmethod
    def from_manifest(cls, cfg: RunConfig, manifest: CorpusManifest) -> "ConversionModel":
        return cls(
            cfg,
            n_mels=cfg.frame.n_mels,
            d_bn=cfg.corpus.d_bn,
            n_speakers_total=cfg.corpus.n_speakers,
            pretrain_speaker_ids=manifest.pretrain_speaker_ids,
            mel_mean=manifest.mel_mean,
            mel_std=manifest.mel_std,
        )

    # -- parameter groups ---------------------------------------------------

    def generator_parameters(self):
        """Everything optimized by the generator loss (all but the classifier)."""
        for name, p in self.named_parameters():
            if not name.startswith("classifier."):
                yield p

    def classifier_parameters(self):
        if self.classifier is None:
            return iter(())
        return self.classifier.parameters()

    def decoder_parameters(self):
        """Adaptation scope: the decoder, including the speaker embedding table."""
        return self.decoder.parameters()

    # -- normalization ------------------------------------------------------

    def normalize_mel(self, mel: Tensor) -> Tensor:
        """Clamp the log floor, then standardize.

        The raw log floor sits tens of units below the populated bands;
        clamping keeps the loss from being dominated by the
        populated-vs-empty gamble so the finer energy structure is
        learnable. Stored features stay unclamped.
        """
        return (mel.clamp(min=self.cfg.model.mel_floor) - self.mel_mean) / self.mel_std

    def denormalize_mel(self, mel: Tensor) -> Tensor:
        return mel * self.mel_std + self.mel_mean

    # -- forward paths ------------------------------------------------------

    def prosody_latent(self, mel_norm: Tensor, bn: Tensor, lengths: Tensor,
                       noise: Tensor | None = None):
        """(mu, logvar, z, ref) for a batch; z = mu when no noise is given."""
        mu, logvar = self.vae(mel_norm, lengths)
        z = reparameterize(mu, logvar, noise) if noise is not None else mu
        ref = self.refenc(bn, lengths)
        return mu, logvar, z, ref

    def teacher_forced(self, mel_norm: Tensor, bn: Tensor, explicit: Tensor | None,
                       speaker_ids: Tensor, lengths: Tensor,
                       noise: Tensor | None = None, train: bool = False,
                       gen: torch.Generator | None = None,
                       teacher_noise: float = 0.0):
        """Teacher-forced reconstruction pass.

        ``teacher_noise`` perturbs only the previous-frame feedback path
        (the reconstruction target stays clean), which keeps the
        free-running decoder close to its training distribution.
        Returns (mel_pre, mel_post, mu, logvar, z); the VAE outputs are
        None when the prosody module is disabled.
        """
        enc = self.encoder(bn, lengths=lengths, train=train, gen=gen)
        mu = logvar = z = prosody_embedding = None
        if self.vae is not None:
            mu, logvar, z, ref = self.prosody_latent(mel_norm, bn, lengths, noise=noise)
            prosody_embedding = torch.cat([z, ref], dim=-1)
        cond = self.decoder.build_conditions(
            enc.content, enc.sentential, speaker_ids, explicit, prosody_embedding
        )
        feedback = mel_norm
        if teacher_noise > 0.0 and gen is not None:
            feedback = mel_norm + teacher_noise * torch.randn(
                mel_norm.shape, generator=gen, dtype=mel_norm.dtype)
        mel_pre, mel_post = self.decoder.decode(cond, target=feedback, gen=gen)
        return mel_pre, mel_post, mu, logvar, z

    @torch.no_grad()
    def convert(self, source: Utterance, target_speaker: int,
                scale_f0: float = 1.0, scale_energy: float = 1.0,
                allow_untrained: bool = False) -> ConvertedUtterance:
        """Convert one utterance to the target speaker's voice.

        Deterministic: the always-on decoder prenet dropout draws from a
        generator seeded by the run config, so repeated calls are
        bit-identical.
        """
        if scale_f0 <= 0 or scale_energy <= 0:
            raise ValueError("prosody scales must be positive")
        if int(self.trained_steps) == 0 and not allow_untrained:
            raise NotTrainedError("model has no completed training steps")
        if not 0 <= target_speaker < self.decoder.speaker_embedding.num_embeddings:
            raise ValueError(f"unknown speaker id {target_speaker}")
        dtype = next(self.parameters()).dtype
        mel = torch.as_tensor(source.mel, dtype=dtype).unsqueeze(0)
        bn = torch.as_tensor(source.bn, dtype=dtype).unsqueeze(0)
        T = mel.shape[1]
        lengths = torch.tensor([T])
        mel_norm = self.normalize_mel(mel)

        enc = self.encoder(bn, lengths=lengths, train=False)
        explicit = prosody_embedding = None
        if self.vae is not None:
            mu, _logvar, _z, ref = self.prosody_latent(mel_norm, bn, lengths)
            prosody_embedding = torch.cat([mu, ref], dim=-1)
            lf0 = np.clip(source.lf0_norm * scale_f0, 0.0, 1.0)
            energy = np.clip(source.energy_norm * scale_energy, 0.0, 1.0)
            explicit = torch.as_tensor(
                np.stack([lf0, source.vuv, energy], axis=-1), dtype=dtype
            ).unsqueeze(0)

        cond = self.decoder.build_conditions(
            enc.content, enc.sentential,
            torch.tensor([target_speaker]), explicit, prosody_embedding,
        )
        gen = torch.Generator().manual_seed(seed_for(self.cfg.seed, "convert-prenet"))
        _pre, mel_post = self.decoder.decode(
            cond, target=None, gen=gen,
            feedback_noise=self.cfg.training.teacher_noise)
        out = self.denormalize_mel(mel_post)[0].cpu().numpy().astype(np.float64)
        return ConvertedUtterance(
            mel=out,
            source_utt_id=source.utt_id,
            source_speaker_id=source.speaker_id,
            target_speaker_id=int(target_speaker),
            scale_f0=float(scale_f0),
            scale_energy=float(scale_energy),
        )
