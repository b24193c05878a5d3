"""Batch command-line interface.

One config document drives everything; dotted-path ``--set`` overrides and
a ``--seed`` flag adjust it per run. All outputs land under a run
directory named by the config hash plus the seed, so a run is reproducible
from its config alone.

Exit codes: 0 success, 1 validation error (arguments, config, missing
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    iter_flat_items,
    load_config,
    run_dir_name,
    save_config,
)
from .corpus import (
    CorpusError,
    CorpusManifest,
    build_corpus,
    features_from_waveform,
    load_utterance,
    save_utterance,
    synth_bn,
)
from .dsp import DspError, Waveform
from .evaluation import (
    EvalError,
    EvalReport,
    collect_latents,
    control_sweep,
    correlation_eval,
    estimate_prosody_from_mel,
    export_latents_2d,
    leakage_probe,
    write_report,
)
from .models.model import NotTrainedError
from .tensorfile import FEATURE_MAGIC, TensorFileError, read_tensorfile
from .training import (
    TrainingDivergedError,
    adapt,
    load_checkpoint,
    pretrain,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ConfigError, CorpusError, DspError, EvalError, TensorFileError,
    FileNotFoundError, NotTrainedError,
)


class CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def _config_epilog() -> str:
    lines = ["config keys (override with --set KEY=VALUE):"]
    for key, value in iter_flat_items(RunConfig()):
        lines.append(f"  {key} = {value}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="prosovc",
        description="Prosody-preserving voice conversion on a synthetic corpus.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"prosovc {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the root seed")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path config override (repeatable)")
    common.add_argument("--runs-dir", type=Path, default=Path("runs"),
                        help="parent directory for run outputs")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="synthesize the corpus with features and manifest")
    p.add_argument("--out", type=Path, default=None,
                   help="corpus directory (default: <run-dir>/corpus)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract-features", parents=[common],
                       help="extract feature bundles from waveform files")
    p.add_argument("--input", type=Path, required=True,
                   help="directory of .wav files or .pvc bundles carrying a 'wave' tensor")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", parents=[common], help="pretrain then adapt (resumable)")
    p.add_argument("--corpus", type=Path, default=None,
                   help="corpus directory (default: <run-dir>/corpus, built if missing)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--stage", choices=["all", "pretrain", "adapt"], default="all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common],
                       help="convert utterances to the target speaker")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="model checkpoint (default: <run-dir>/adapted.pvck)")
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--utterance", default=None, help="single utterance id")
    p.add_argument("--split", default="test", help="convert a whole split (default: test)")
    p.add_argument("--target-speaker", type=int, default=None,
                   help="target speaker id (default: the corpus target)")
    p.add_argument("--scale-f0", type=float, default=1.0)
    p.add_argument("--scale-energy", type=float, default=1.0)
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: <run-dir>/converted)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", parents=[common],
                       help="objective evaluation: correlation, sweep, probe, 2-D export")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--correlation", action="store_true")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--probe", action="store_true")
    p.add_argument("--latents", action="store_true")
    p.add_argument("--sweep-utterances", type=int, default=4,
                   help="how many test utterances the sweep covers")
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: <run-dir>/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common],
                       help="train and evaluate the ablation variants for comparison")
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None,
                   help="comparison output directory (default: <run-dir>/ablation)")
    p.set_defaults(func=cmd_ablate)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        data = config_to_dict(cfg)
        data["seed"] = args.seed
        cfg = config_from_dict(data)
    return cfg.validate()


def run_dir_for(args, cfg: RunConfig) -> Path:
    run_dir = args.runs_dir / run_dir_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    return run_dir


def _load_manifest(args, cfg, run_dir, build_if_missing=False) -> CorpusManifest:
    corpus_dir = args.corpus if getattr(args, "corpus", None) else run_dir / "corpus"
    if not (Path(corpus_dir) / "manifest.json").exists():
        if build_if_missing:
            print(f"corpus not found, building it at {corpus_dir}")
            return build_corpus(cfg, corpus_dir)
        raise CorpusError(f"no corpus manifest under {corpus_dir}; run gen-corpus first")
    return CorpusManifest.load(corpus_dir)


def _load_model(args, run_dir):
    ckpt = args.checkpoint if args.checkpoint else run_dir / "adapted.pvck"
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; run train first")
    return load_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    run_dir = run_dir_for(args, cfg)
    out = args.out if args.out else run_dir / "corpus"
    manifest = build_corpus(cfg, out)
    counts = {split: len(files) for split, files in manifest.files.items()}
    print(f"corpus written to {manifest.root} ({counts}, seed {cfg.seed})")
    return EXIT_OK


def cmd_extract_features(args, cfg: RunConfig) -> int:
    from scipy.io import wavfile

    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} not found")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(list(in_dir.glob("*.wav")) + list(in_dir.glob("*.pvc")))
    if not sources:
        raise CorpusError(f"no .wav or .pvc files under {in_dir}")
    n_done = 0
    for src in sources:
        if src.suffix == ".wav":
            rate, samples = wavfile.read(src)
            if samples.dtype.kind == "i":
                samples = samples.astype(np.float64) / np.iinfo(samples.dtype).max
            elif samples.dtype.kind == "u":
                info = np.iinfo(samples.dtype)
                samples = (samples.astype(np.float64) - info.max / 2) / (info.max / 2)
            if samples.ndim > 1:
                samples = samples.mean(axis=1)
            wave = Waveform(samples, int(rate))
            speaker_id, bn = -1, None
        else:
            tensors, meta = read_tensorfile(src, magic=FEATURE_MAGIC)
            if "wave" not in tensors:
                print(f"  skipping {src.name}: no 'wave' tensor stored")
                continue
            wave = Waveform(tensors["wave"].astype(np.float64), cfg.frame.sample_rate)
            speaker_id = int(meta.get("speaker_id", -1))
            bn = tensors.get("bn")
        if bn is None:
            # no phone transcription available for external audio: a single
            # placeholder class keeps the bundle schema complete
            from .corpus import UtteranceSpec
            from .dsp import frame_count

            T = frame_count(len(wave.samples), cfg.frame)
            spec = UtteranceSpec(
                phones=[(cfg.corpus.n_unvoiced_classes, T)],
                f0_contour=np.full(T, 100.0),
                energy_contour=np.full(T, 0.1),
                voicing_plan=np.ones(T, dtype=np.int8),
            )
            bn = synth_bn(spec, cfg.corpus)
        utt = features_from_waveform(wave, np.asarray(bn, dtype=np.float64), cfg.frame,
                                     utt_id=src.stem, speaker_id=speaker_id)
        save_utterance(out_dir / f"{src.stem}.pvc", utt)
        n_done += 1
    print(f"extracted features for {n_done} file(s) into {out_dir}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .plotting import plot_training_curves

    run_dir = run_dir_for(args, cfg)
    manifest = _load_manifest(args, cfg, run_dir, build_if_missing=True)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at step {state.step} ({state.stage})")
    if args.stage in ("all", "pretrain"):
        print(f"pretraining for {cfg.training.pretrain_steps} steps")
        state = pretrain(cfg, manifest, run_dir=run_dir, state=state, progress=True)
    if args.stage in ("all", "adapt"):
        if state is None:
            raise CliValidationError("adapt stage needs --resume with a pretrained checkpoint")
        print(f"adapting the decoder for {cfg.training.adapt_steps} steps")
        state = adapt(state, manifest, run_dir=run_dir, progress=True)
    plot_training_curves(state.metrics, run_dir / "losses.png")
    print(f"training done at step {state.step}; outputs under {run_dir}")
    return EXIT_OK


def cmd_convert(args, cfg: RunConfig) -> int:
    run_dir = run_dir_for(args, cfg)
    manifest = _load_manifest(args, cfg, run_dir)
    state = _load_model(args, run_dir)
    target = args.target_speaker if args.target_speaker is not None else manifest.target_speaker_id
    out_dir = args.out if args.out else run_dir / "converted"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.utterance:
        utts = [u for split in manifest.SPLITS
                for u in manifest.load_split(split) if u.utt_id == args.utterance]
        if not utts:
            raise CorpusError(f"utterance {args.utterance!r} not found in the corpus")
    else:
        utts = manifest.load_split(args.split)
    for utt in utts:
        conv = state.model.convert(utt, target,
                                   scale_f0=args.scale_f0, scale_energy=args.scale_energy)
        name = f"{utt.utt_id}__to{target}_f{args.scale_f0:g}_e{args.scale_energy:g}.pvc"
        conv.save(out_dir / name)
    print(f"converted {len(utts)} utterance(s) into {out_dir}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .plotting import plot_latents_2d, plot_sweep, plot_trajectories

    run_dir = run_dir_for(args, cfg)
    manifest = _load_manifest(args, cfg, run_dir)
    state = _load_model(args, run_dir)
    model = state.model
    out_dir = args.out if args.out else run_dir / "eval"
    do_all = not (args.correlation or args.sweep or args.probe or args.latents)

    report = EvalReport(target_speaker_id=manifest.target_speaker_id)
    test_utts = manifest.load_split("test")

    if do_all or args.correlation:
        print(f"correlation over {len(test_utts)} test utterances")
        report.correlation = correlation_eval(
            model, test_utts, manifest.target_speaker_id, cfg.frame, cfg.eval)
        for utt in test_utts[:3]:
            conv = model.convert(utt, manifest.target_speaker_id)
            est = estimate_prosody_from_mel(conv.mel, cfg.frame, cfg.eval)
            report.trajectories.append({
                "utt_id": utt.utt_id,
                "source_f0": utt.oracle_f0.tolist(),
                "converted_f0": est.f0_hat.tolist(),
                "source_energy": utt.oracle_energy.tolist(),
                "converted_energy": est.energy_hat.tolist(),
            })
    if do_all or args.sweep:
        for utt in test_utts[: args.sweep_utterances]:
            report.sweep.extend(control_sweep(
                model, utt, manifest.target_speaker_id, cfg.frame, cfg.eval))
    if (do_all or args.probe) and model.vae is not None:
        latents, ids = collect_latents(model, manifest.load_split("train"))
        report.probe_accuracy = leakage_probe(latents, ids, cfg.eval, seed=cfg.seed)
        report.probe_chance = 1.0 / len(set(ids.tolist()))
    if (do_all or args.latents) and model.vae is not None:
        latents, ids = collect_latents(model, manifest.load_split("train"))
        report.latent_points = export_latents_2d(latents, ids)

    written = write_report(report, out_dir)
    if report.trajectories:
        written["trajectories_png"] = plot_trajectories(
            report.trajectories, out_dir / "trajectories.png")
    if report.sweep:
        written["sweep_png"] = plot_sweep(report.sweep, out_dir / "sweep.png")
    if report.latent_points is not None:
        written["latents_png"] = plot_latents_2d(report.latent_points, out_dir / "latents_2d.png")
    print("evaluation outputs:")
    for kind, path in written.items():
        print(f"  {kind}: {path}")
    if report.correlation:
        print(f"mean pearson lf0={report.correlation.mean_lf0:.3f} "
              f"energy={report.correlation.mean_energy:.3f}")
    if report.probe_accuracy is not None:
        print(f"leakage probe accuracy {report.probe_accuracy:.3f} "
              f"(chance {report.probe_chance:.3f})")
    return EXIT_OK


def _variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    data = config_to_dict(cfg)
    if variant == "adv-off":
        data["training"]["adv_weight"] = 0.0
    elif variant == "no-prosody":
        data["model"]["use_prosody_module"] = False
    elif variant != "full":
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return config_from_dict(data)


def cmd_ablate(args, cfg: RunConfig) -> int:
    run_dir = run_dir_for(args, cfg)
    manifest = _load_manifest(args, cfg, run_dir, build_if_missing=True)
    out_dir = args.out if args.out else run_dir / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    for variant in ("full", "adv-off", "no-prosody"):
        vcfg = _variant_config(cfg, variant)
        vdir = args.runs_dir / run_dir_name(vcfg)
        vdir.mkdir(parents=True, exist_ok=True)
        save_config(vcfg, vdir / "config.json")
        ckpt = vdir / "adapted.pvck"
        if ckpt.exists():
            print(f"[{variant}] reusing {ckpt}")
            state = load_checkpoint(ckpt)
        else:
            print(f"[{variant}] pretraining ({vcfg.training.pretrain_steps} steps)")
            state = pretrain(vcfg, manifest, run_dir=vdir, progress=True)
            state = adapt(state, manifest, run_dir=vdir, progress=True)
        entry = {"run_dir": str(vdir)}
        summary = correlation_eval(state.model, manifest.load_split("test"),
                                   manifest.target_speaker_id, vcfg.frame, vcfg.eval)
        entry["pearson_lf0"] = summary.mean_lf0
        entry["pearson_energy"] = summary.mean_energy
        if state.model.vae is not None:
            latents, ids = collect_latents(state.model, manifest.load_split("train"))
            entry["probe_accuracy"] = leakage_probe(latents, ids, vcfg.eval, seed=vcfg.seed)
        results[variant] = entry

    (out_dir / "comparison.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = ["variant\tpearson_lf0\tpearson_energy\tprobe_accuracy"]
    for variant, entry in results.items():
        probe = entry.get("probe_accuracy")
        lines.append(f"{variant}\t{entry['pearson_lf0']:.4f}\t{entry['pearson_energy']:.4f}"
                     f"\t{'' if probe is None else f'{probe:.4f}'}")
    (out_dir / "comparison.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"ablation comparison written to {out_dir}")
    for variant, entry in results.items():
        line = (f"  {variant}: lf0={entry['pearson_lf0']:.3f} "
                f"energy={entry['pearson_energy']:.3f}")
        if entry.get("probe_accuracy") is not None:
            line += f" probe={entry['probe_accuracy']:.3f}"
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (CliValidationError, *_VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - defensive surface
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
