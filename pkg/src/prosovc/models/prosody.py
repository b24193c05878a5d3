"""Implicit prosody modeling and speaker disentanglement.

An utterance-level VAE summarizes the mel spectrogram into a latent
distribution, a reference encoder summarizes the bottleneck features into
a style vector, and a small classifier predicts the speaker from the
latent. The classifier trains with cross-entropy; the generator is pushed
toward uniform speaker predictions with a squared-distance loss, which
strips speaker identity from the latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from ..config import ModelConfig
from .layers import ConvStack, last_valid_state, zero_init_

LOG_CLAMP = 1e-12


@dataclass
class ProsodyLatent:
    """Utterance-level implicit prosody: VAE posterior plus reference vector."""

    mu: Tensor
    logvar: Tensor
    z: Tensor
    ref: Tensor

    @property
    def embedding(self) -> Tensor:
        return torch.cat([self.z, self.ref], dim=-1)


def reparameterize(mu: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ValueError("mu, logvar and noise must share a shape")
    return mu + torch.exp(0.5 * logvar) * noise


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), mean over the batch.

    Per item: 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar); always >= 0.
    """
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must share a shape")
    per_item = 0.5 * (torch.exp(logvar) + mu**2 - 1.0 - logvar).sum(dim=-1)
    return per_item.mean()


def ce_loss(p_s: Tensor, labels: Tensor) -> Tensor:
    """Cross-entropy of predicted speaker probabilities, mean over the batch.

    ``labels`` may be class indices or one-hot rows. The probability is
    floored at 1e-12 inside the log.
    """
    p_s = torch.atleast_2d(p_s)
    if labels.dim() == p_s.dim():
        idx = labels.argmax(dim=-1)
    else:
        idx = labels.reshape(-1).long()
    if idx.shape[0] != p_s.shape[0]:
        raise ValueError("batch sizes of predictions and labels differ")
    picked = p_s.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp(min=LOG_CLAMP)).mean()


def adv_loss(p_s: Tensor) -> Tensor:
    """Squared Euclidean distance from the uniform distribution, batch mean."""
    p_s = torch.atleast_2d(p_s)
    uniform = torch.full_like(p_s, 1.0 / p_s.shape[-1])
    return ((p_s - uniform) ** 2).sum(dim=-1).mean()


class ProsodyVae(nn.Module):
    """Utterance-level VAE over mel: conv downsampling, GRU, linear heads.

    The mu/logvar heads are zero-initialized, so an untrained module emits
    mu = logvar = 0 for any input. logvar is clamped to a configured range
    to keep early sampling bounded.
    """

    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        self.convs = ConvStack(n_mels, cfg.vae_channels, n_layers=2)
        self.rnn = nn.GRU(cfg.vae_channels, cfg.vae_rnn_dim, batch_first=True)
        self.mu_head = zero_init_(nn.Linear(cfg.vae_rnn_dim, cfg.d_z))
        self.logvar_head = zero_init_(nn.Linear(cfg.vae_rnn_dim, cfg.d_z))
        self.logvar_min = cfg.logvar_min
        self.logvar_max = cfg.logvar_max

    def forward(self, mel: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        if not torch.isfinite(mel).all():
            raise ValueError("non-finite mel input")
        h, down_lengths = self.convs(mel, lengths)
        out, _ = self.rnn(h)
        state = last_valid_state(out, down_lengths)
        mu = self.mu_head(state)
        logvar = self.logvar_head(state).clamp(self.logvar_min, self.logvar_max)
        return mu, logvar


class ReferenceEncoder(nn.Module):
    """Fixed-size style vector from bottleneck features: convs, GRU, tanh projection."""

    def __init__(self, d_bn: int, cfg: ModelConfig):
        super().__init__()
        self.convs = ConvStack(d_bn, cfg.refenc_channels, n_layers=4)
        self.rnn = nn.GRU(cfg.refenc_channels, cfg.refenc_rnn_dim, batch_first=True)
        self.proj = nn.Linear(cfg.refenc_rnn_dim, cfg.d_r)

    def forward(self, bn: Tensor, lengths: Tensor) -> Tensor:
        if not torch.isfinite(bn).all():
            raise ValueError("non-finite bottleneck input")
        h, down_lengths = self.convs(bn, lengths)
        out, _ = self.rnn(h)
        return torch.tanh(self.proj(last_valid_state(out, down_lengths)))


class SpeakerClassifier(nn.Module):
    """Three fully connected layers over the latent; softmax output.

    The final layer is zero-initialized: an untrained classifier predicts
    the uniform distribution.
    """

    def __init__(self, d_z: int, n_speakers: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_z, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            zero_init_(nn.Linear(hidden, n_speakers)),
        )

    def forward(self, z: Tensor) -> Tensor:
        if not torch.isfinite(z).all():
            raise ValueError("non-finite latent input")
        return torch.softmax(self.net(z), dim=-1)
