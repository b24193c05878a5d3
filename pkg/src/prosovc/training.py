"""Joint optimization: alternating generator/classifier updates, KL ramp,
stepped learning-rate decay, pretrain-then-adapt.

Every training step is a pure function of (config, seed, step): batch
membership and all noise derive from per-step named substreams, so runs
are bit-reproducible in single-threaded mode and a resumed run continues
exactly where it left off.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, TrainConfig, config_from_dict, config_to_dict
from .corpus import CorpusManifest, Utterance
from .models import ConversionModel
from .models.decoder import recon_loss
from .models.prosody import adv_loss, ce_loss, kl_loss, reparameterize
from .seeds import seed_for
from .tensorfile import CHECKPOINT_MAGIC, read_tensorfile, write_tensorfile


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite; names the offending component."""


# ---------------------------------------------------------------------------
# schedule


def schedule(cfg: TrainConfig, step: int, total_steps: int | None = None):
    """(learning rate, KL weight, phase) at a training step.

    The learning rate decays by ``lr_decay`` every ``lr_decay_every``
    steps. The KL weight ramps linearly from 0 to ``kl_weight_max`` over
    the first ``kl_ramp_frac`` of the run, then stays constant. Phases
    alternate ``d_steps`` classifier updates with ``g_steps`` generator
    updates, classifier first.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    lr = cfg.lr0 * cfg.lr_decay ** (step // cfg.lr_decay_every)
    total = total_steps if total_steps is not None else cfg.pretrain_steps
    ramp_steps = max(1, int(round(cfg.kl_ramp_frac * total)))
    kl_weight = cfg.kl_weight_max * min(1.0, step / ramp_steps)
    cycle = cfg.d_steps + cfg.g_steps
    phase = "D" if (step % cycle) < cfg.d_steps else "G"
    return lr, kl_weight, phase


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    mel_norm: torch.Tensor  # [B, T, n_mels], mean/std normalized
    bn: torch.Tensor  # [B, T, d_bn]
    explicit: torch.Tensor | None  # [B, T, 3] (lf0_norm, vuv, energy_norm)
    speaker_ids: torch.Tensor  # [B] global ids (embedding lookup)
    labels: torch.Tensor | None  # [B] classifier label indices
    lengths: torch.Tensor  # [B]
    mask: torch.Tensor  # [B, T] bool

    @property
    def size(self) -> int:
        return self.mel_norm.shape[0]


def make_batch(utts: list[Utterance], model: ConversionModel) -> Batch:
    """Pad a list of utterances into one batch, normalizing mel."""
    B = len(utts)
    T = max(u.n_frames for u in utts)
    n_mels = utts[0].mel.shape[1]
    d_bn = utts[0].bn.shape[1]
    mel = torch.zeros(B, T, n_mels)
    bn = torch.zeros(B, T, d_bn)
    explicit = torch.zeros(B, T, 3)
    lengths = torch.zeros(B, dtype=torch.long)
    speaker_ids = torch.zeros(B, dtype=torch.long)
    labels = torch.zeros(B, dtype=torch.long)
    for i, u in enumerate(utts):
        L = u.n_frames
        mel[i, :L] = torch.from_numpy(u.mel.astype(np.float32))
        bn[i, :L] = torch.from_numpy(u.bn.astype(np.float32))
        explicit[i, :L, 0] = torch.from_numpy(u.lf0_norm.astype(np.float32))
        explicit[i, :L, 1] = torch.from_numpy(u.vuv.astype(np.float32))
        explicit[i, :L, 2] = torch.from_numpy(u.energy_norm.astype(np.float32))
        lengths[i] = L
        speaker_ids[i] = u.speaker_id
        labels[i] = model.label_for_speaker.get(u.speaker_id, 0)
    mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
    use_prosody = model.cfg.model.use_prosody_module
    return Batch(
        mel_norm=model.normalize_mel(mel),
        bn=bn,
        explicit=explicit if use_prosody else None,
        speaker_ids=speaker_ids,
        labels=labels if use_prosody else None,
        lengths=lengths,
        mask=mask,
    )


def batch_indices_for_step(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch membership: a pure function of (seed, step)."""
    rng = np.random.default_rng(seed_for(seed, "batch", step))
    replace = n_items < batch_size
    return rng.choice(n_items, size=batch_size, replace=replace)


# ---------------------------------------------------------------------------
# losses


def generator_loss(model: ConversionModel, batch: Batch, adv_weight: float,
                   kl_weight: float, noise: torch.Tensor | None,
                   gen: torch.Generator | None, train: bool = True,
                   teacher_noise: float = 0.0):
    """Total generator loss and its components.

    total = recon + adv_weight * adv + kl_weight * kl; the adversarial and
    KL terms vanish when the prosody module is disabled.
    """
    try:
        mel_pre, mel_post, mu, logvar, z = model.teacher_forced(
            batch.mel_norm, batch.bn, batch.explicit, batch.speaker_ids, batch.lengths,
            noise=noise, train=train, gen=gen, teacher_noise=teacher_noise,
        )
    except ValueError as exc:
        # module-level finiteness guards fired mid-forward
        raise TrainingDivergedError(f"forward pass: {exc}") from None
    parts = {"recon": recon_loss(mel_pre, mel_post, batch.mel_norm, batch.mask)}
    if model.classifier is not None:
        parts["adv"] = adv_loss(model.classifier(z))
        parts["kl"] = kl_loss(mu, logvar)
        total = parts["recon"] + adv_weight * parts["adv"] + kl_weight * parts["kl"]
    else:
        total = parts["recon"]
    parts["loss_g"] = total
    _check_finite(parts)
    return total, parts


def classifier_loss(model: ConversionModel, batch: Batch,
                    noise: torch.Tensor | None) -> torch.Tensor:
    """Cross-entropy of the classifier on latents treated as constants.

    The latent is computed without a graph, so no gradient can reach the
    VAE from this loss.
    """
    if model.classifier is None:
        raise ValueError("classifier loss requires the prosody module")
    with torch.no_grad():
        mu, logvar = model.vae(batch.mel_norm, batch.lengths)
        z = reparameterize(mu, logvar, noise) if noise is not None else mu
    loss = ce_loss(model.classifier(z), batch.labels)
    _check_finite({"ce": loss})
    return loss


def _check_finite(parts: dict):
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(f"loss component {name!r} is non-finite")


# ---------------------------------------------------------------------------
# train state and checkpoints


@dataclass
class TrainState:
    model: ConversionModel
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam | None
    step: int = 0
    stage: str = "pretrain"
    metrics: list = field(default_factory=list)

    @property
    def cfg(self) -> RunConfig:
        return self.model.cfg


def mel_statistics(manifest: CorpusManifest, mel_floor: float) -> tuple[float, float]:
    """Scalar mean/std of the floor-clamped log-mel over the train split."""
    total, sq_total, count = 0.0, 0.0, 0
    for utt in manifest.load_split("train"):
        mel = np.maximum(utt.mel, mel_floor)
        total += float(mel.sum())
        sq_total += float((mel.astype(np.float64) ** 2).sum())
        count += mel.size
    mean = total / count
    return mean, float(np.sqrt(max(sq_total / count - mean * mean, 1e-12)))


def init_state(cfg: RunConfig, manifest: CorpusManifest) -> TrainState:
    torch.manual_seed(seed_for(cfg.seed, "init"))
    mel_mean, mel_std = mel_statistics(manifest, cfg.model.mel_floor)
    model = ConversionModel.from_manifest(cfg, manifest)
    with torch.no_grad():
        model.mel_mean.fill_(mel_mean)
        model.mel_std.fill_(max(mel_std, 1e-6))
    opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=cfg.training.lr0,
                             betas=(0.9, 0.999), eps=1e-8)
    opt_d = None
    if model.classifier is not None:
        opt_d = torch.optim.Adam(list(model.classifier_parameters()),
                                 lr=cfg.training.lr0 * cfg.training.d_lr_scale,
                                 betas=(0.9, 0.999), eps=1e-8)
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d)


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for pid, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}.state.{pid}.{key}"] = value.detach().cpu().numpy()
            else:
                scalars[f"{pid}.{key}"] = value
    meta = {"param_groups": sd["param_groups"], "scalars": scalars}
    return tensors, meta


def _optimizer_from_tensors(opt: torch.optim.Optimizer, tensors: dict, meta: dict, prefix: str):
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + ".state."):
            continue
        _, _, pid, key = name.split(".", 3)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    for flat_key, value in meta.get("scalars", {}).items():
        pid, key = flat_key.split(".", 1)
        state.setdefault(int(pid), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path: str | Path, state: TrainState):
    tensors = {}
    for name, value in state.model.state_dict().items():
        tensors[f"model.{name}"] = value.detach().cpu().numpy()
    g_tensors, g_meta = _optimizer_tensors(state.opt_g, "opt_g")
    tensors.update(g_tensors)
    meta = {
        "kind": "prosovc-checkpoint",
        "step": state.step,
        "stage": state.stage,
        "config": config_to_dict(state.cfg),
        "pretrain_speaker_ids": state.model.pretrain_speaker_ids,
        "n_mels": state.model.n_mels,
        "opt_g": g_meta,
    }
    if state.opt_d is not None:
        d_tensors, d_meta = _optimizer_tensors(state.opt_d, "opt_d")
        tensors.update(d_tensors)
        meta["opt_d"] = d_meta
    write_tensorfile(path, tensors, meta=meta, magic=CHECKPOINT_MAGIC)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, meta = read_tensorfile(path, magic=CHECKPOINT_MAGIC)
    if meta.get("kind") != "prosovc-checkpoint":
        raise IOError(f"{path}: not a training checkpoint")
    cfg = config_from_dict(meta["config"])
    model = ConversionModel(
        cfg,
        n_mels=meta["n_mels"],
        d_bn=cfg.corpus.d_bn,
        n_speakers_total=cfg.corpus.n_speakers,
        pretrain_speaker_ids=meta["pretrain_speaker_ids"],
        mel_mean=0.0, mel_std=1.0,  # overwritten by the state dict buffers
    )
    state_dict = {
        name[len("model."):]: torch.from_numpy(arr.copy())
        for name, arr in tensors.items() if name.startswith("model.")
    }
    model.load_state_dict(state_dict, strict=True)
    opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=cfg.training.lr0,
                             betas=(0.9, 0.999), eps=1e-8)
    _optimizer_from_tensors(opt_g, tensors, meta["opt_g"], "opt_g")
    opt_d = None
    if model.classifier is not None:
        opt_d = torch.optim.Adam(list(model.classifier_parameters()),
                                 lr=cfg.training.lr0 * cfg.training.d_lr_scale,
                                 betas=(0.9, 0.999), eps=1e-8)
        if "opt_d" in meta:
            _optimizer_from_tensors(opt_d, tensors, meta["opt_d"], "opt_d")
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d,
                      step=meta["step"], stage=meta["stage"])


# ---------------------------------------------------------------------------
# metric log


class MetricLog:
    """Append-only JSONL metric log, step-keyed, optionally mirrored to disk."""

    def __init__(self, path: Path | None = None, records: list | None = None):
        self.path = Path(path) if path is not None else None
        self.records = records if records is not None else []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def smoothed_recon(records: list, k: int = 25, which: str = "first") -> float:
    values = [r["recon"] for r in records if "recon" in r]
    if not values:
        raise ValueError("no reconstruction entries in the metric log")
    window = values[:k] if which == "first" else values[-k:]
    return float(np.mean(window))


# ---------------------------------------------------------------------------
# training loops


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def _save_periodic(state: TrainState, run_dir: Path | None, every: int):
    if run_dir is None:
        return
    if every > 0 and state.step % every == 0:
        save_checkpoint(run_dir / "ckpt-last.pvck", state)


def pretrain(cfg: RunConfig, manifest: CorpusManifest,
             run_dir: str | Path | None = None,
             state: TrainState | None = None,
             progress: bool = False) -> TrainState:
    """Alternating-update pretraining on the multi-speaker train split.

    Pass a loaded ``state`` to resume; the loop continues from
    ``state.step`` and reproduces the uninterrupted run exactly.
    """
    tcfg = cfg.training
    torch.set_num_threads(max(1, tcfg.num_threads))
    run_dir = Path(run_dir) if run_dir is not None else None
    if state is None:
        state = init_state(cfg, manifest)
    model = state.model
    train_utts = manifest.load_split("train")
    log = MetricLog(run_dir / "metrics.jsonl" if run_dir else None, state.metrics)

    for step in range(state.step, tcfg.pretrain_steps):
        lr, kl_weight, phase = schedule(tcfg, step, tcfg.pretrain_steps)
        if model.classifier is None:
            phase = "G"  # no adversary to alternate with
        idx = batch_indices_for_step(len(train_utts), tcfg.batch_size, cfg.seed, step)
        batch = make_batch([train_utts[i] for i in idx], model)
        gen = torch.Generator().manual_seed(seed_for(cfg.seed, "noise", step))
        noise = None
        if model.vae is not None:
            noise = torch.randn(batch.size, cfg.model.d_z, generator=gen)
        record = {"step": step, "phase": phase, "lr": lr, "kl_weight": kl_weight}

        try:
            if phase == "D":
                _set_lr(state.opt_d, lr * tcfg.d_lr_scale)
                state.opt_d.zero_grad(set_to_none=True)
                loss = classifier_loss(model, batch, noise)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(
                    [p for g in state.opt_d.param_groups for p in g["params"]], tcfg.grad_clip)
                state.opt_d.step()
                record["ce"] = loss.item()
            else:
                _set_lr(state.opt_g, lr)
                model.zero_grad(set_to_none=True)
                loss, parts = generator_loss(model, batch, tcfg.adv_weight, kl_weight,
                                             noise, gen, train=True,
                                             teacher_noise=tcfg.teacher_noise)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(
                    [p for g in state.opt_g.param_groups for p in g["params"]], tcfg.grad_clip)
                state.opt_g.step()
                record.update({k: v.item() for k, v in parts.items()})
        except TrainingDivergedError as exc:
            where = (run_dir / "ckpt-last.pvck") if run_dir else None
            raise TrainingDivergedError(
                f"{exc} at step {step}"
                + (f"; last good checkpoint: {where}" if where and where.exists() else "")
            ) from None

        state.step = step + 1
        with torch.no_grad():
            model.trained_steps.fill_(state.step)
        log.append(record)
        _save_periodic(state, run_dir, tcfg.checkpoint_every)
        if progress and (step + 1) % 100 == 0:
            shown = {k: v for k, v in record.items() if k not in ("step", "phase")}
            print(f"  step {step + 1}/{tcfg.pretrain_steps} [{phase}] "
                  + " ".join(f"{k}={v:.4g}" for k, v in shown.items()))

    state.stage = "pretrained"
    if run_dir is not None:
        save_checkpoint(run_dir / "pretrain.pvck", state)
    return state


def _decoder_only_loss(model: ConversionModel, batch: Batch,
                       gen: torch.Generator | None,
                       teacher_noise: float = 0.0) -> torch.Tensor:
    """Teacher-forced reconstruction with every non-decoder module frozen.

    Encoder and prosody outputs are computed without a graph, so gradients
    reach the decoder (and its speaker embedding) only.
    """
    with torch.no_grad():
        enc = model.encoder(batch.bn, lengths=batch.lengths, train=False)
        prosody_embedding = None
        if model.vae is not None:
            mu, _logvar, _z, ref = model.prosody_latent(
                batch.mel_norm, batch.bn, batch.lengths)
            prosody_embedding = torch.cat([mu, ref], dim=-1)
    cond = model.decoder.build_conditions(
        enc.content, enc.sentential, batch.speaker_ids, batch.explicit, prosody_embedding)
    feedback = batch.mel_norm
    if teacher_noise > 0.0 and gen is not None:
        feedback = batch.mel_norm + teacher_noise * torch.randn(
            batch.mel_norm.shape, generator=gen, dtype=batch.mel_norm.dtype)
    mel_pre, mel_post = model.decoder.decode(cond, target=feedback, gen=gen)
    loss = recon_loss(mel_pre, mel_post, batch.mel_norm, batch.mask)
    _check_finite({"recon": loss})
    return loss


def adapt_validation_error(model: ConversionModel, utts: list[Utterance],
                           seed: int) -> float:
    """Teacher-forced reconstruction error on held-out target utterances."""
    if not utts:
        return float("nan")
    with torch.no_grad():
        batch = make_batch(utts, model)
        gen = torch.Generator().manual_seed(seed_for(seed, "adapt-val"))
        enc = model.encoder(batch.bn, lengths=batch.lengths, train=False)
        prosody_embedding = None
        if model.vae is not None:
            mu, _lv, _z, ref = model.prosody_latent(batch.mel_norm, batch.bn, batch.lengths)
            prosody_embedding = torch.cat([mu, ref], dim=-1)
        cond = model.decoder.build_conditions(
            enc.content, enc.sentential, batch.speaker_ids, batch.explicit, prosody_embedding)
        mel_pre, mel_post = model.decoder.decode(cond, target=batch.mel_norm, gen=gen)
        return float(recon_loss(mel_pre, mel_post, batch.mel_norm, batch.mask))


def adapt(state: TrainState, manifest: CorpusManifest,
          run_dir: str | Path | None = None, progress: bool = False) -> TrainState:
    """Fine-tune the decoder alone on the target speaker's split.

    All non-decoder parameters stay bitwise unchanged. The learning rate
    is held at its end-of-pretraining value. The last
    ``adapt_val_fraction`` of the adapt split is held out for validation
    and never trained on.
    """
    cfg = state.cfg
    tcfg = cfg.training
    torch.set_num_threads(max(1, tcfg.num_threads))
    run_dir = Path(run_dir) if run_dir is not None else None
    model = state.model
    utts = manifest.load_split("adapt")
    n_val = int(math.ceil(len(utts) * tcfg.adapt_val_fraction))
    train_utts = utts[:-n_val] if n_val else utts
    val_utts = utts[-n_val:] if n_val else []
    log = MetricLog(run_dir / "metrics.jsonl" if run_dir else None, state.metrics)

    val_before = adapt_validation_error(model, val_utts, cfg.seed)
    lr = schedule(tcfg, max(tcfg.pretrain_steps - 1, 0), tcfg.pretrain_steps)[0]
    opt = torch.optim.Adam(list(model.decoder_parameters()), lr=lr,
                           betas=(0.9, 0.999), eps=1e-8)

    start = state.step
    end = tcfg.pretrain_steps + tcfg.adapt_steps
    for step in range(max(start, tcfg.pretrain_steps), end):
        idx = batch_indices_for_step(len(train_utts), tcfg.batch_size, cfg.seed, step)
        batch = make_batch([train_utts[i] for i in idx], model)
        gen = torch.Generator().manual_seed(seed_for(cfg.seed, "noise", step))
        opt.zero_grad(set_to_none=True)
        loss = _decoder_only_loss(model, batch, gen, teacher_noise=tcfg.teacher_noise)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(
            [p for g in opt.param_groups for p in g["params"]], tcfg.grad_clip)
        opt.step()
        state.step = step + 1
        with torch.no_grad():
            model.trained_steps.fill_(state.step)
        log.append({"step": step, "phase": "G", "lr": lr, "recon": loss.item(),
                    "loss_g": loss.item(), "stage": "adapt"})
        _save_periodic(state, run_dir, tcfg.checkpoint_every)
        if progress and (step + 1) % 100 == 0:
            print(f"  adapt step {step + 1}/{end} recon={loss.item():.4g}")

    val_after = adapt_validation_error(model, val_utts, cfg.seed)
    log.append({"step": state.step, "phase": "eval", "stage": "adapt",
                "val_recon_before": val_before, "val_recon_after": val_after})
    state.stage = "adapted"
    if run_dir is not None:
        save_checkpoint(run_dir / "adapted.pvck", state)
    return state
