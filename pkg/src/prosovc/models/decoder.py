"""Frame-synchronous autoregressive mel decoder.

The decoder consumes, per frame: the content vector, the broadcast
sentential vector, explicit prosody scalars (normalized lf0, voicing,
normalized energy), the broadcast implicit prosody embedding, and the
speaker embedding. The previous mel frame passes a prenet whose dropout
stays active at inference (driven by an explicit generator, so repeated
calls are identical). Output length always equals input length; there is
no attention and no stop token.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from ..config import ModelConfig
from .layers import seeded_dropout, zero_init_


def recon_loss(mel_pre: Tensor, mel_post: Tensor, target: Tensor,
               frame_mask: Tensor | None = None) -> Tensor:
    """Mean squared error of the pre-postnet output plus that of the post-postnet output.

    With a frame mask, the mean runs over valid frames only.
    """
    if mel_pre.shape != target.shape or mel_post.shape != target.shape:
        raise ValueError("prediction/target shapes differ")
    if frame_mask is None:
        return ((mel_pre - target) ** 2).mean() + ((mel_post - target) ** 2).mean()
    w = frame_mask.to(target.dtype).unsqueeze(-1)
    denom = w.sum() * target.shape[-1]
    pre = (((mel_pre - target) ** 2) * w).sum() / denom
    post = (((mel_post - target) ** 2) * w).sum() / denom
    return pre + post


class DecoderPrenet(nn.Module):
    """Two FC+ReLU layers with always-on dropout over the previous mel frame."""

    def __init__(self, n_mels: int, dim: int, dropout: float):
        super().__init__()
        self.dropout = dropout
        self.fc1 = nn.Linear(n_mels, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, prev_mel: Tensor, gen: torch.Generator | None = None) -> Tensor:
        h = seeded_dropout(torch.relu(self.fc1(prev_mel)), self.dropout, gen)
        return seeded_dropout(torch.relu(self.fc2(h)), self.dropout, gen)


class Postnet(nn.Module):
    """Convolutional residual refinement; the last layer is zero-initialized."""

    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        k, ch, n = cfg.postnet_kernel, cfg.postnet_channels, cfg.postnet_layers
        layers = []
        for i in range(n):
            in_ch = n_mels if i == 0 else ch
            out_ch = n_mels if i == n - 1 else ch
            layers.append(nn.Conv1d(in_ch, out_ch, kernel_size=k, padding=k // 2))
        zero_init_(layers[-1])
        self.convs = nn.ModuleList(layers)

    def forward(self, mel_pre: Tensor) -> Tensor:
        if not torch.isfinite(mel_pre).all():
            raise ValueError("non-finite postnet input")
        h = mel_pre.transpose(-1, -2)
        for conv in self.convs[:-1]:
            h = torch.tanh(conv(h))
        return self.convs[-1](h).transpose(-1, -2)


class MelDecoder(nn.Module):
    """Prenet + recurrent cell + linear mel projection + postnet.

    Owns the speaker embedding table: speaker identity feeds only the
    decoder, so target adaptation can optimize the decoder alone.
    """

    def __init__(self, n_mels: int, n_speakers: int, cfg: ModelConfig):
        super().__init__()
        self.n_mels = n_mels
        self.cfg = cfg
        cond_dim = 2 * cfg.d_model + cfg.d_spk
        if cfg.use_prosody_module:
            # the three explicit scalars may be repeated so they are not
            # drowned out by the wide content/latent conditions
            cond_dim += 3 * cfg.explicit_repeat + cfg.d_z + cfg.d_r
        self.speaker_embedding = nn.Embedding(n_speakers, cfg.d_spk)
        self.prenet = DecoderPrenet(n_mels, cfg.decoder_prenet_dim, cfg.decoder_prenet_dropout)
        # one recurrent layer, exposed twice: fused full-sequence form for
        # teacher forcing, stepwise cell form for free-running decoding.
        # the cell shares the GRU's parameter tensors.
        self.rnn = nn.GRU(cfg.decoder_prenet_dim + cond_dim, cfg.decoder_rnn_dim,
                          batch_first=True)
        self.cell = nn.GRUCell(cfg.decoder_prenet_dim + cond_dim, cfg.decoder_rnn_dim)
        self.cell.weight_ih = self.rnn.weight_ih_l0
        self.cell.weight_hh = self.rnn.weight_hh_l0
        self.cell.bias_ih = self.rnn.bias_ih_l0
        self.cell.bias_hh = self.rnn.bias_hh_l0
        self.mel_proj = zero_init_(nn.Linear(cfg.decoder_rnn_dim, n_mels))
        self.postnet = Postnet(n_mels, cfg)

    def initial_state(self, batch: int, dtype=None, device=None) -> Tensor:
        p = next(self.parameters())
        return torch.zeros(batch, self.cell.hidden_size,
                           dtype=dtype or p.dtype, device=device or p.device)

    def build_conditions(self, content: Tensor, sentential: Tensor, speaker_ids: Tensor,
                         explicit: Tensor | None, prosody_embedding: Tensor | None) -> Tensor:
        """Assemble the per-frame condition matrix [B, T, cond_dim].

        ``sentential``, ``prosody_embedding`` and the speaker embedding are
        broadcast across frames; ``explicit`` carries the three prosody
        scalars per frame.
        """
        B, T, _ = content.shape
        spk = self.speaker_embedding(speaker_ids).unsqueeze(1).expand(B, T, -1)
        parts = [content, sentential.unsqueeze(1).expand(B, T, -1), spk]
        if self.cfg.use_prosody_module:
            if explicit is None or prosody_embedding is None:
                raise ValueError("prosody inputs required when the prosody module is enabled")
            parts.insert(2, explicit.repeat(1, 1, self.cfg.explicit_repeat))
            parts.insert(3, prosody_embedding.unsqueeze(1).expand(B, T, -1))
        return torch.cat(parts, dim=-1)

    def step(self, prev_mel: Tensor, cond_t: Tensor, state: Tensor,
             gen: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        """One decode step: returns (pre-postnet mel frame, new state)."""
        if not (torch.isfinite(prev_mel).all() and torch.isfinite(cond_t).all()):
            raise ValueError("non-finite decoder input")
        x = torch.cat([self.prenet(prev_mel, gen=gen), cond_t], dim=-1)
        state = self.cell(x, state)
        return self.mel_proj(state), state

    def decode(self, conditions: Tensor, target: Tensor | None = None,
               gen: torch.Generator | None = None,
               feedback_noise: float = 0.0) -> tuple[Tensor, Tensor]:
        """Run T steps; teacher-forced when ``target`` is given, else free-running.

        Teacher forcing uses the fused recurrent layer over the whole
        sequence; free running steps the shared cell one frame at a time.
        ``feedback_noise`` perturbs the fed-back frames during free running,
        matching the noise the feedback path saw in training (deterministic
        given ``gen``). Returns (mel_pre, mel_post), both [B, T, n_mels].
        """
        B, T, _ = conditions.shape
        if target is not None:
            prev = torch.cat([
                torch.zeros(B, 1, self.n_mels, dtype=target.dtype, device=target.device),
                target[:, :-1],
            ], dim=1)
            x = torch.cat([self.prenet(prev, gen=gen), conditions], dim=-1)
            if not torch.isfinite(x).all():
                raise ValueError("non-finite decoder input")
            out, _ = self.rnn(x)
            mel_pre = self.mel_proj(out)
        else:
            state = self.initial_state(B, dtype=conditions.dtype, device=conditions.device)
            prev = torch.zeros(B, self.n_mels, dtype=conditions.dtype, device=conditions.device)
            frames = []
            for t in range(T):
                frame, state = self.step(prev, conditions[:, t], state, gen=gen)
                frames.append(frame)
                prev = frame
                if feedback_noise > 0.0 and gen is not None:
                    prev = frame + feedback_noise * torch.randn(
                        frame.shape, generator=gen, dtype=frame.dtype)
            mel_pre = torch.stack(frames, dim=1)
        mel_post = mel_pre + self.postnet(mel_pre)
        return mel_pre, mel_post
