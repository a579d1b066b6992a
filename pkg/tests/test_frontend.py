import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svforge import frontend as fe


@pytest.fixture(scope="module")
def corpus():
    return fe.synth_dataset(20, 10, seed=7)


def test_one_second_gives_98_frames():
    f = fe.fbank(fe.Waveform(np.zeros(16000)))
    assert f.frames.shape == (98, 80)


@given(st.integers(400, 6000))
def test_frame_count_formula(n):
    x = np.random.default_rng(n).uniform(-0.5, 0.5, n)
    assert fe.fbank(x).num_frames == (n - 400) // 160 + 1


def test_too_short_input_raises():
    with pytest.raises(ValueError):
        fe.fbank(np.zeros(399))


def test_silence_is_constant_log_floor():
    f = fe.fbank(fe.Waveform(np.zeros(4000))).frames
    assert np.all(f == np.log(fe.LOG_FLOOR))


def _direct_dft_power(frame, n_fft):
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(frame.size)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    return np.abs(basis @ frame) ** 2


def test_sine_peak_bin_matches_direct_dft():
    t = np.arange(16000) / 16000
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    f = fe.fbank(fe.Waveform(x)).frames
    peaks = f.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    emph = np.concatenate([[x[0]], x[1:] - fe.PREEMPH * x[:-1]])
    frame = emph[800:1200] * np.hamming(400)
    mel = fe.mel_filterbank() @ _direct_dft_power(frame, fe.N_FFT)
    assert mel.argmax() == peaks[5]
    assert np.allclose(np.log(np.maximum(mel, fe.LOG_FLOOR)), f[5], atol=1e-8)


def test_filterbank_spans_to_nyquist():
    fb = fe.mel_filterbank()
    assert fb.shape == (80, 257)
    assert fb[:, 0].sum() == 0.0
    assert fb[-1, -1] < 1e-12 and fb[-1, -2] > 0.0


def test_normalize_self_stats():
    f = fe.fbank(np.random.default_rng(0).uniform(-0.5, 0.5, 8000))
    n = fe.normalize(f).frames
    assert np.allclose(n.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(n.std(axis=0), 1.0, atol=1e-9)


def test_constant_column_normalizes_to_zero():
    frames = np.random.default_rng(1).normal(size=(20, 80))
    frames[:, 3] = 7.0
    n = fe.normalize(fe.FbankFeatures(frames)).frames
    assert np.all(n[:, 3] == 0.0)


def test_denormalize_inverts_normalize():
    rng = np.random.default_rng(2)
    f = fe.FbankFeatures(rng.normal(size=(30, 80)) * 3 + 1)
    stats = fe.FeatureStats.from_frames([fe.FbankFeatures(rng.normal(size=(50, 80)))])
    back = fe.denormalize(fe.normalize(f, stats), stats).frames
    assert np.allclose(back, f.frames, atol=1e-12)


def _speech(seed=0, n=16000):
    spk = fe.SynthSpeaker("s", seed)
    return fe.Waveform(fe.synth_utterance(spk, np.random.default_rng(seed), n / 16000))


def test_augment_none_is_identity():
    w = _speech()
    assert np.array_equal(fe.augment(w, "none", np.random.default_rng(0)).samples, w.samples)
    assert np.array_equal(fe.add_noise(w.samples, np.ones(len(w)), np.inf), w.samples)


def test_noise_at_zero_db_power_ratio():
    x = _speech().samples * 0.3
    noise = np.random.default_rng(3).standard_normal(x.size)
    y = fe.add_noise(x, noise, 0.0)
    assert np.max(np.abs(y)) <= 1.0
    # undo any peak renormalisation before measuring
    scale = np.dot(y, x) / np.dot(x, x) if np.max(np.abs(x + noise)) > 1 else 1.0
    added = y / scale - x
    ratio_db = 10 * np.log10(fe.power(x) / fe.power(added))
    assert abs(ratio_db) < 0.1


def test_unit_impulse_reverb_is_identity():
    x = _speech().samples
    assert np.allclose(fe.reverberate(x, np.array([1.0])), x, atol=0)


@given(st.integers(0, 10_000), st.sampled_from(["noise", "reverb", "none"]))
def test_augment_preserves_length_and_range(seed, policy):
    w = fe.Waveform(np.random.default_rng(seed).uniform(-1, 1, 3000))
    out = fe.augment(w, policy, np.random.default_rng(seed))
    assert len(out) == len(w)
    assert np.max(np.abs(out.samples)) <= 1.0


def test_augment_is_deterministic_given_rng():
    w = _speech()
    a = fe.augment(w, fe.AugmentPolicy(), np.random.default_rng(11))
    b = fe.augment(w, fe.AugmentPolicy(), np.random.default_rng(11))
    assert np.array_equal(a.samples, b.samples)


def test_speed_perturb_lengths():
    w = fe.Waveform(np.random.default_rng(0).uniform(-1, 1, 16000))
    assert np.array_equal(fe.speed_perturb(w, 1.0).samples, w.samples)
    assert len(fe.speed_perturb(w, 0.9)) == 17778
    assert len(fe.speed_perturb(w, 1.1)) == round(16000 / 1.1)
    with pytest.raises(fe.ConfigError):
        fe.speed_perturb(w, 1.2)


def test_perturbation_triples_class_count(corpus):
    assert len(corpus.class_labels(perturb=True)) == 60
    assert len(corpus.class_labels(perturb=False)) == 20


def test_corpus_counts_and_durations(corpus):
    assert len(corpus.utterances) == 200
    durs = [u.waveform.duration for u in corpus.utterances]
    assert min(durs) >= 2.0 and max(durs) <= 4.0


def test_corpus_is_pure_function_of_seed(corpus):
    again = fe.synth_dataset(20, 10, seed=7)
    for a, b in zip(corpus.utterances, again.utterances):
        assert a.utt_id == b.utt_id and np.array_equal(a.waveform.samples, b.waveform.samples)
    other = fe.synth_dataset(2, 1, seed=8)
    assert not np.array_equal(other.utterances[0].waveform.samples, corpus.utterances[0].waveform.samples)


def test_same_seed_same_signature():
    assert np.array_equal(fe.SynthSpeaker("a", 5).signature, fe.SynthSpeaker("b", 5).signature)


def test_speakers_are_separable_by_centroid_cosine(corpus):
    cents = {}
    for u in corpus.utterances:
        c = fe.fbank(u.waveform).frames.mean(axis=0)
        cents.setdefault(u.speaker_id, []).append(c - np.log(fe.LOG_FLOOR))
    keys = sorted(cents)
    vecs = [np.array(cents[k]) for k in keys]
    unit = [v / np.linalg.norm(v, axis=1, keepdims=True) for v in vecs]
    within, across = [], []
    for i, a in enumerate(unit):
        for j, b in enumerate(unit):
            sims = a @ b.T
            if i == j:
                within.extend(sims[np.triu_indices(len(a), 1)])
            else:
                across.extend(sims.ravel())
    assert np.mean(within) > np.mean(across)


def test_trials_balanced_and_labelled(corpus):
    trials = fe.make_trials(corpus.utterances, 100, np.random.default_rng(0))
    spk = {u.utt_id: u.speaker_id for u in corpus.utterances}
    assert len(trials) == 100 and sum(t[0] for t in trials) == 50
    for label, e, t in trials:
        assert label == int(spk[e] == spk[t]) and e != t


def test_wav_and_manifest_round_trip(tmp_path, corpus):
    small = fe.SynthCorpus(corpus.speakers[:2], corpus.utterances[:3], corpus.seed)
    manifest = fe.save_corpus(small, str(tmp_path))
    utts = fe.load_manifest_utterances(manifest)
    assert [u.utt_id for u in utts] == [u.utt_id for u in small.utterances]
    for a, b in zip(utts, small.utterances):
        assert np.max(np.abs(a.waveform.samples - b.waveform.samples)) <= 0.5 / 32767 + 1e-15
    line = open(manifest).readline().rstrip("\n").split("\t")
    assert len(line) == 3 and os.path.exists(os.path.join(tmp_path, line[2]))
