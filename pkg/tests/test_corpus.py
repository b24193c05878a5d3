"""Synthetic corpus: oracle consistency, speaker independence, determinism."""

import numpy as np
import pytest

from prosovc.config import CorpusConfig, FrameConfig, RunConfig, config_from_dict, config_to_dict
from prosovc.corpus import (
    CorpusManifest,
    SpeakerSpec,
    UtteranceSpec,
    build_corpus,
    load_utterance,
    make_speakers,
    make_utterance_spec,
    oracle_contours,
    phone_profiles,
    synth_bn,
    synth_utterance,
)
from prosovc.dsp import compute_energy, compute_mel, extract_f0_vuv

FCFG = FrameConfig()
CCFG = CorpusConfig()
PROFILES = phone_profiles(CCFG, seed=3)


def constant_spec(n_frames=120, phone=5, f0=180.0, energy=0.5):
    return UtteranceSpec(
        phones=[(phone, n_frames)],
        f0_contour=np.full(n_frames, f0),
        energy_contour=np.full(n_frames, energy),
        voicing_plan=np.ones(n_frames, dtype=np.int8),
    )


def make_speaker(base_f0=200.0):
    return SpeakerSpec(
        speaker_id=0, base_f0=base_f0, f0_span=0.5,
        timbre_gains_db=np.zeros(FCFG.n_mels),
    )


class TestSynthUtterance:
    def test_constant_voiced_phone_f0_and_energy_recovered(self):
        spk = make_speaker()
        spec = constant_spec(f0=spk.base_f0, energy=0.5)
        wave = synth_utterance(spk, spec, FCFG, seed=11, profiles=PROFILES, corpus_cfg=CCFG)
        lf0, vuv = extract_f0_vuv(wave, FCFG)
        voiced = vuv == 1
        assert voiced.mean() > 0.9
        rel = np.abs(np.exp(lf0[voiced]) - spk.base_f0) / spk.base_f0
        assert np.mean(rel <= 0.05) >= 0.95
        # the synthesizer normalizes the harmonic stack to unit cycle
        # mean-abs, so the recovered energy equals the energy value times
        # the phone's energy factor
        expected = 0.5 * PROFILES["energy_factor"][5]
        energy = compute_energy(wave, FCFG)
        assert np.all(np.abs(energy - expected) / expected < 0.03)

    def test_all_unvoiced_plan_yields_unvoiced_frames(self):
        spk = make_speaker()
        fractions = []
        for seed in range(20):
            spec = UtteranceSpec(
                phones=[(0, 50), (1, 50)],
                f0_contour=np.full(100, 150.0),
                energy_contour=np.full(100, 0.4),
                voicing_plan=np.zeros(100, dtype=np.int8),
            )
            wave = synth_utterance(spk, spec, FCFG, seed=seed, profiles=PROFILES, corpus_cfg=CCFG)
            _, vuv = extract_f0_vuv(wave, FCFG)
            fractions.append((vuv == 0).mean())
        assert np.mean(fractions) >= 0.95

    def test_two_speakers_same_spec_differ_in_timbre(self):
        rng = np.random.default_rng(5)
        gains_a = np.zeros(FCFG.n_mels)
        gains_b = -6.0 * np.arange(FCFG.n_mels) / FCFG.n_mels * 4  # strong tilt
        spk_a = SpeakerSpec(0, 200.0, 0.5, gains_a)
        spk_b = SpeakerSpec(1, 200.0, 0.5, gains_b)
        spec = constant_spec(f0=200.0)
        mel_a = compute_mel(synth_utterance(spk_a, spec, FCFG, 7, PROFILES, CCFG), FCFG).frames
        mel_b = compute_mel(synth_utterance(spk_b, spec, FCFG, 7, PROFILES, CCFG), FCFG).frames
        # same phone sequence by construction; band-energy profile differs
        assert not np.allclose(mel_a.mean(axis=0), mel_b.mean(axis=0), atol=0.1)

    def test_deterministic_given_seed(self):
        spk = make_speaker()
        spec = constant_spec()
        a = synth_utterance(spk, spec, FCFG, seed=9, profiles=PROFILES, corpus_cfg=CCFG)
        b = synth_utterance(spk, spec, FCFG, seed=9, profiles=PROFILES, corpus_cfg=CCFG)
        assert np.array_equal(a.samples, b.samples)

    def test_sweep_recovered_within_tolerance(self):
        spk = make_speaker()
        T = 160
        f0 = np.linspace(120.0, 260.0, T)
        spec = UtteranceSpec(
            phones=[(4, T)], f0_contour=f0,
            energy_contour=np.full(T, 0.4), voicing_plan=np.ones(T, dtype=np.int8),
        )
        wave = synth_utterance(spk, spec, FCFG, seed=2, profiles=PROFILES, corpus_cfg=CCFG)
        lf0, vuv = extract_f0_vuv(wave, FCFG)
        voiced = vuv == 1
        rel = np.abs(np.exp(lf0[voiced]) - f0[voiced]) / f0[voiced]
        assert np.mean(rel <= 0.05) >= 0.90


class TestBottleneck:
    def test_speaker_never_enters(self):
        spec = make_utterance_spec(make_speaker(), CCFG, np.random.default_rng(0))
        a = synth_bn(spec, CCFG)
        b = synth_bn(spec, CCFG)
        assert np.array_equal(a, b)
        assert a.shape == (spec.n_frames, CCFG.d_bn)

    def test_single_phone_rows_equal_after_warmup(self):
        spec = constant_spec(n_frames=40)
        bn = synth_bn(spec, CCFG)
        half = CCFG.bn_smoothing_frames // 2
        interior = bn[half:-half]
        assert np.allclose(interior, interior[0])

    def test_duration_change_shifts_segments(self):
        base = UtteranceSpec(
            phones=[(4, 20), (7, 20)],
            f0_contour=np.full(40, 150.0), energy_contour=np.full(40, 0.4),
            voicing_plan=np.ones(40, dtype=np.int8),
        )
        longer = UtteranceSpec(
            phones=[(4, 30), (7, 10)],
            f0_contour=np.full(40, 150.0), energy_contour=np.full(40, 0.4),
            voicing_plan=np.ones(40, dtype=np.int8),
        )
        bn_a = synth_bn(base, CCFG)
        bn_b = synth_bn(longer, CCFG)
        # interiors of matching phones agree; the boundary has moved
        assert np.allclose(bn_a[5], bn_b[5])
        assert not np.allclose(bn_a[25], bn_b[25])


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    data = config_to_dict(RunConfig())
    data["seed"] = 7
    data["corpus"].update(
        n_speakers=3, target_speaker_id=2, utterances_per_speaker=3,
        test_utterances_per_speaker=2, min_frames=60, max_frames=100,
    )
    cfg = config_from_dict(data)
    root = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(cfg, root)
    return cfg, manifest


class TestBuildCorpus:
    def test_three_disjoint_splits(self, small_corpus):
        _, manifest = small_corpus
        all_files = sum((manifest.files[s] for s in manifest.SPLITS), [])
        assert len(all_files) == len(set(all_files))
        assert len(manifest.files["train"]) == 2 * 3
        assert len(manifest.files["adapt"]) == 3
        assert len(manifest.files["test"]) == 2 * 2

    def test_adapt_split_is_target_speaker_only(self, small_corpus):
        _, manifest = small_corpus
        for utt in manifest.load_split("adapt"):
            assert utt.speaker_id == manifest.target_speaker_id

    def test_byte_identical_rebuild(self, small_corpus, tmp_path):
        cfg, manifest = small_corpus
        rebuilt = build_corpus(cfg, tmp_path / "again")
        for split in manifest.SPLITS:
            for rel in manifest.files[split]:
                a = (manifest.root / rel).read_bytes()
                b = (rebuilt.root / rel).read_bytes()
                assert a == b, f"{rel} differs between identical builds"
        assert (manifest.root / "manifest.json").read_text() == (
            rebuilt.root / "manifest.json"
        ).read_text()

    def test_round_trip_and_alignment(self, small_corpus):
        _, manifest = small_corpus
        utt = load_utterance(manifest.paths("train")[0])
        T = utt.n_frames
        for name in ("bn", "lf0", "vuv", "energy", "lf0_norm", "energy_norm",
                     "oracle_f0", "oracle_energy"):
            assert getattr(utt, name).shape[0] == T

    def test_oracle_consistency_over_corpus(self, small_corpus):
        # extraction of synthesized audio recovers the generated contours
        _, manifest = small_corpus
        f0_ok, f0_total = 0, 0
        e_ok, e_total = 0, 0
        for split in manifest.SPLITS:
            for utt in manifest.load_split(split):
                mask = utt.oracle_f0 > 0
                est = np.exp(utt.lf0[mask]) * (utt.vuv[mask] > 0)
                rel = np.abs(est - utt.oracle_f0[mask]) / utt.oracle_f0[mask]
                f0_ok += int((rel <= 0.05).sum())
                f0_total += int(mask.sum())
                rel_e = np.abs(utt.energy[mask] - utt.oracle_energy[mask]) / utt.oracle_energy[mask]
                e_ok += int((rel_e <= 0.05).sum())
                e_total += int(mask.sum())
        assert f0_total > 200
        assert f0_ok / f0_total >= 0.95
        assert e_ok / e_total >= 0.95

    def test_bn_identical_across_speakers_in_corpus(self, small_corpus):
        # render one spec under two different speakers through the real path
        cfg, _ = small_corpus
        speakers = make_speakers(cfg.corpus, cfg.frame, cfg.seed)
        spec = make_utterance_spec(speakers[0], cfg.corpus, np.random.default_rng(1))
        assert np.array_equal(synth_bn(spec, cfg.corpus), synth_bn(spec, cfg.corpus))

    def test_manifest_reload(self, small_corpus):
        _, manifest = small_corpus
        again = CorpusManifest.load(manifest.root)
        assert again.files == manifest.files
        assert again.mel_mean == manifest.mel_mean
        assert again.pretrain_speaker_ids == manifest.pretrain_speaker_ids
