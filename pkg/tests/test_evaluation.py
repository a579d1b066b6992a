import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from svforge import evaluation as ev
from svforge.oracles import TOLERANCES, oracle_metric


def _scoreset(scores, labels):
    trials = ev.TrialList.from_tuples((int(l), f"e{i}", f"t{i}") for i, l in enumerate(labels))
    return ev.ScoreSet(trials, np.asarray(scores, dtype=float))


def _random_case(rng, n, ties):
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    shift = rng.uniform(0, 3)
    s = rng.normal(size=n) + shift * labels
    if ties:
        s = np.round(s * 4) / 4
    return s, labels


# -- metrics -----------------------------------------------------------------------------

def test_eer_hand_case():
    s = [0.9, 0.4, 0.6, 0.1]
    lab = [1, 1, 0, 0]
    eer, thr = ev.compute_eer(s, lab)
    assert eer == 0.25
    assert oracle_metric(s, lab)[0] == 0.25
    assert 0.4 <= thr <= 0.6


def test_eer_perfect_separation():
    eer, thr = ev.compute_eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert eer == 0.0
    assert 0.2 < thr < 0.8
    assert ev.compute_mindcf([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0


def test_eer_inverted_scores():
    assert ev.compute_eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 0.5


def test_eer_same_distribution():
    rng = np.random.default_rng(3)
    s = rng.normal(size=2000)
    lab = rng.random(2000) < 0.5
    assert abs(ev.compute_eer(s, lab)[0] - 0.5) <= 0.05


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 1001))
    s, lab = _random_case(rng, n, ties=seed % 2 == 0)
    eer, _ = ev.compute_eer(_scoreset(s, lab))
    o_eer, o_dcf = oracle_metric(s, lab)
    assert eer == o_eer
    assert ev.compute_mindcf(s, lab) == o_dcf


@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=60))
def test_metrics_match_bruteforce_property(rows):
    s = np.array([r[0] for r in rows], dtype=float) / 8
    lab = np.array([r[1] for r in rows])
    if lab.all() or not lab.any():
        with pytest.raises(ev.MetricError):
            ev.compute_eer(s, lab)
        return
    o_eer, o_dcf = oracle_metric(s, lab, p_target=0.05)
    assert ev.compute_eer(s, lab)[0] == o_eer
    assert ev.compute_mindcf(s, lab, p_target=0.05) == o_dcf


@given(st.integers(0, 10_000), st.sampled_from(["exp", "affine", "cube"]))
def test_metrics_invariant_under_monotone_maps(seed, kind):
    rng = np.random.default_rng(seed)
    s, lab = _random_case(rng, 200, ties=True)
    f = {"exp": np.exp, "affine": lambda x: 3.0 * x - 7.0, "cube": lambda x: x ** 3}[kind]
    assert ev.compute_eer(f(s), lab)[0] == ev.compute_eer(s, lab)[0]
    assert ev.compute_mindcf(f(s), lab) == ev.compute_mindcf(s, lab)


@given(st.integers(0, 10_000))
def test_mindcf_bounds(seed):
    rng = np.random.default_rng(seed)
    s, lab = _random_case(rng, 150, ties=False)
    v = ev.compute_mindcf(s, lab, p_target=0.01)
    assert 0.0 <= v <= 1.0
    eer = ev.compute_eer(s, lab)[0]
    assert 0.0 <= eer <= 0.5


def test_scoreset_prefers_calibrated_then_normalized():
    s = _scoreset([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])
    assert ev.compute_eer(s)[0] == 0.25
    s.normalized = np.array([0.9, 0.8, 0.2, 0.1])
    assert ev.compute_eer(s)[0] == 0.0
    s.calibrated = np.array([0.1, 0.2, 0.8, 0.9])
    assert ev.compute_eer(s)[0] == 0.5


def test_metric_errors():
    with pytest.raises(ev.MetricError):
        ev.compute_eer([0.1, 0.2], [1, 1])
    with pytest.raises(ev.MetricError):
        ev.compute_eer([0.1, 0.2, 0.3], [1, 0])
    with pytest.raises(ev.MetricError):
        ev.compute_mindcf([0.1, 0.2], [1, 0], p_target=0.0)
    with pytest.raises(ev.MetricError):
        _scoreset([0.1, math.nan], [1, 0])
    with pytest.raises(ev.MetricError):
        _scoreset([0.1], [1, 0])


# -- scoring ----------------------------------------------------------------------------------

def test_enroll_average():
    assert np.allclose(ev.enroll_average([[3.0, 4.0]]), [0.6, 0.8])
    assert np.allclose(ev.enroll_average([[1.0, 0.0], [0.0, 1.0]]), [2 ** -0.5, 2 ** -0.5])
    with pytest.raises(ev.MetricError):
        ev.enroll_average(np.zeros((0, 3)))
    with pytest.raises(ev.MetricError):
        ev.enroll_average([[1.0, 2.0], [-1.0, -2.0]])


def test_cosine_score_cases():
    assert ev.cosine_score([1.0, 0.0], [0.0, 2.0]) == 0.0
    assert ev.cosine_score([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0, abs=1e-15)
    assert ev.cosine_score([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ev.MetricError):
        ev.cosine_score([0.0, 0.0], [1.0, 0.0])


@given(st.integers(0, 10_000))
def test_cosine_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 7)) * rng.uniform(1e-3, 1e3, size=(2, 1))
    s = ev.cosine_score(a, b)
    assert s == ev.cosine_score(b, a)
    assert -1.0 <= s <= 1.0
    assert abs(s - a @ b / np.linalg.norm(a) / np.linalg.norm(b)) <= TOLERANCES["cosine"]


def test_score_trials_missing_embedding():
    trials = ev.TrialList.from_tuples([(1, "a", "b")])
    with pytest.raises(ev.MetricError, match="no embedding"):
        ev.score_trials(trials, {"a": np.ones(3)})


# -- AS-norm ----------------------------------------------------------------------------------

def _emb_setup(rng, n_utts=6, n_cohort=12, dim=5):
    emb = {f"u{i}": rng.normal(size=dim) for i in range(n_utts)}
    rows = [(int(rng.random() < 0.5), f"u{i}", f"u{(i + 1) % n_utts}") for i in range(n_utts)]
    rows[0] = (1, rows[0][1], rows[0][2])
    rows[1] = (0, rows[1][1], rows[1][2])
    trials = ev.TrialList.from_tuples(rows)
    cohort = ev.Cohort(rng.normal(size=(n_cohort, dim)))
    return emb, trials, cohort


def test_asnorm_full_cohort_is_symmetric_snorm():
    rng = np.random.default_rng(0)
    emb, trials, cohort = _emb_setup(rng)
    assert cohort.top_k == cohort.size
    s = ev.as_norm(ev.score_trials(trials, emb), emb, cohort)
    for i, t in enumerate(trials.entries):
        ce = [ev.cosine_score(emb[t.enroll], c) for c in cohort.embeddings]
        ct = [ev.cosine_score(emb[t.test], c) for c in cohort.embeddings]
        x = ev.cosine_score(emb[t.enroll], emb[t.test])
        want = 0.5 * ((x - np.mean(ce)) / np.std(ce) + (x - np.mean(ct)) / np.std(ct))
        assert s.normalized[i] == pytest.approx(want, abs=1e-12)


def test_asnorm_top_k_uses_largest_scores():
    rng = np.random.default_rng(1)
    cohort = ev.Cohort(rng.normal(size=(10, 4)), top_k=3)
    e = rng.normal(size=4)
    sc = sorted((ev.cosine_score(e, c) for c in cohort.embeddings), reverse=True)[:3]
    mu, sd = cohort.stats(e)
    assert mu == pytest.approx(np.mean(sc), abs=1e-14)
    assert sd == pytest.approx(np.std(sc), abs=1e-14)


def test_asnorm_degenerate_cohort_is_finite():
    # identical cohort rows give zero spread; the epsilon guard keeps scores finite
    emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]), "c": np.array([1.0, 1.0])}
    trials = ev.TrialList.from_tuples([(1, "a", "c"), (0, "a", "b")])
    cohort = ev.Cohort(np.tile([[1.0, 1.0]], (4, 1)))
    s = ev.as_norm(ev.score_trials(trials, emb), emb, cohort)
    assert np.all(np.isfinite(s.normalized))


def test_cohort_validation():
    with pytest.raises(ev.MetricError):
        ev.Cohort(np.zeros((0, 3)))
    with pytest.raises(ev.MetricError):
        ev.Cohort(np.ones((3, 2)), top_k=4)
    with pytest.raises(ev.MetricError):
        ev.Cohort(np.ones((3, 2)), top_k=0)
    assert ev.Cohort(np.ones((400, 2))).top_k == 300


@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_asnorm_invariant_to_embedding_scale(seed, a):
    rng = np.random.default_rng(seed)
    emb, trials, cohort = _emb_setup(rng)
    scales = rng.uniform(0.5, 2.0, size=len(emb)) * a
    emb2 = {k: v * c for (k, v), c in zip(emb.items(), scales)}
    cohort2 = ev.Cohort(cohort.embeddings * a)
    s1 = ev.as_norm(ev.score_trials(trials, emb), emb, cohort)
    s2 = ev.as_norm(ev.score_trials(trials, emb2), emb2, cohort2)
    assert np.allclose(s1.normalized, s2.normalized, atol=1e-9)


def test_from_speakers_averages_per_speaker():
    by = {"s1": [np.array([1.0, 0.0]), np.array([0.0, 1.0])], "s0": [np.array([0.0, 3.0])]}
    c = ev.Cohort.from_speakers(by)
    assert np.allclose(c.embeddings, [[0.0, 1.0], [2 ** -0.5, 2 ** -0.5]])


# -- QMF -------------------------------------------------------------------------------------

def test_fit_logistic_recovers_weights():
    rng = np.random.default_rng(11)
    n = 10_000
    X = rng.normal(size=(n, 3))
    w_true, b_true = np.array([1.5, -0.8, 0.5]), 0.3
    p = 1 / (1 + np.exp(-(X @ w_true + b_true)))
    y = (rng.random(n) < p).astype(float)
    w, b, gn, it = ev.fit_logistic(X, y)
    assert gn < 1e-6
    assert np.all(np.abs(w - w_true) <= 0.05 * np.abs(w_true))


def test_qmf_single_feature_is_monotone():
    rng = np.random.default_rng(2)
    x = rng.normal(size=400)
    y = (rng.random(400) < 1 / (1 + np.exp(-2 * x))).astype(int)
    m = ev.qmf_calibrate(x[:, None], y, names=("score",))
    assert m.weights[0] > 0
    grid = np.linspace(-3, 3, 50)[:, None]
    assert np.all(np.diff(m(grid)) > 0)


def test_qmf_errors_and_constant_columns(caplog):
    X = np.column_stack([np.arange(10.0), np.full(10, 2.0)])
    y = np.array([0, 1] * 5)
    with pytest.raises(ev.MetricError):
        ev.qmf_calibrate(X, np.ones(10))
    with pytest.raises(ev.MetricError):
        ev.qmf_calibrate(X, y[:5])
    with pytest.raises(ev.MetricError):
        ev.qmf_calibrate(np.full((10, 2), 3.0), y)
    with caplog.at_level(logging.WARNING, logger="svforge.evaluation"):
        m = ev.qmf_calibrate(X, y, names=("score", "log_enroll_dur"))
    assert m.kept == [0]
    assert "log_enroll_dur" in caplog.text
    assert m(X).shape == (10,)


def test_qmf_features_layout():
    rng = np.random.default_rng(4)
    emb, trials, cohort = _emb_setup(rng)
    s = ev.as_norm(ev.score_trials(trials, emb), emb, cohort)
    dur = {u: 1.0 + i for i, u in enumerate(sorted(emb))}
    F = ev.qmf_features(s, dur, emb, cohort)
    assert F.shape == (len(trials), len(ev.QMF_FEATURES))
    assert np.array_equal(F[:, 0], s.normalized)
    t0 = trials.entries[0]
    assert F[0, 1] == math.log(dur[t0.enroll])
    assert F[0, 3] == cohort.stats(emb[t0.enroll])[0]
    model = ev.qmf_calibrate(F, s.labels)
    ev.apply_qmf(s, model, F)
    assert s.calibrated.shape == s.raw.shape


# -- files ------------------------------------------------------------------------------------

def test_trial_and_score_files_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    s, lab = _random_case(rng, 30, ties=False)
    ss = _scoreset(s, lab)
    ev.write_trials(tmp_path / "trials.txt", ss.trials)
    trials = ev.read_trials(tmp_path / "trials.txt")
    assert trials.entries == ss.trials.entries
    ev.write_scores(tmp_path / "scores.txt", ss)
    back = ev.read_scores(tmp_path / "scores.txt", trials)
    assert np.array_equal(back.raw, ss.raw)


def test_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("2 a b\n")
    with pytest.raises(ev.MetricError):
        ev.read_trials(p)
    p.write_text("a b 0.5\n")
    with pytest.raises(ev.MetricError, match="lacks trial"):
        ev.read_scores(p, ev.TrialList.from_tuples([(1, "a", "c")]))


def test_embedding_file_round_trip(tmp_path):
    emb = {"spk1/u1": np.arange(4.0), "spk2/u9": -np.ones(4)}
    ev.save_embeddings(tmp_path / "e.ckpt", emb)
    back = ev.load_embeddings(tmp_path / "e.ckpt")
    assert set(back) == set(emb)
    for k in emb:
        assert np.array_equal(back[k], emb[k])
