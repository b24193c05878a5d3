"""Shared test utilities: tiny configs and an independent finite-difference checker."""

import numpy as np
import torch

from prosovc.config import RunConfig, config_from_dict, config_to_dict


def tiny_config(**model_overrides) -> RunConfig:
    """Small dimensions for shape and gradient tests."""
    data = config_to_dict(RunConfig())
    data["frame"]["n_mels"] = 8
    data["corpus"].update(d_bn=12, n_speakers=3, target_speaker_id=2)
    data["model"].update(
        d_model=8, n_blocks=2, n_heads=2, ffn_dim=16, dropout=0.0,
        d_z=4, d_r=4, vae_channels=6, vae_rnn_dim=6, refenc_channels=6,
        refenc_rnn_dim=6, classifier_hidden=8, d_spk=4,
        decoder_prenet_dim=6, decoder_rnn_dim=10,
        postnet_channels=6, postnet_layers=3,
    )
    data["model"].update(model_overrides)
    return config_from_dict(data)


def finite_diff_check(f, tensors, eps=1e-5, rtol=1e-3, max_per_tensor=None, seed=0):
    """Compare autograd gradients of scalar f() against central differences.

    ``tensors`` are leaf tensors (parameters or inputs) that f() reads.
    Perturbations are applied in place; f must recompute the forward pass
    on each call. Checks all coordinates unless ``max_per_tensor`` caps
    them (a seeded subset is used then).
    """
    loss = f()
    grads = torch.autograd.grad(loss, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(tensors, grads):
        flat = p.detach().reshape(-1)
        gflat = g.detach().reshape(-1)
        n = flat.numel()
        if max_per_tensor is not None and n > max_per_tensor:
            idxs = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = gflat[i].item()
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-2)
            worst = max(worst, rel)
            assert rel <= rtol, (
                f"gradient mismatch at coord {i}: analytic={analytic:.8g} "
                f"numeric={numeric:.8g} rel={rel:.3g}"
            )
    return worst
