import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attriclean import attribution, sepmodel
from attriclean.attribution import AttributionMatrix, FisherDiagonal, UnlearnConfig
from attriclean.synthdata import TARGETS, corrupt_label_noise, synth_clean_song


@pytest.fixture(scope="module")
def fishers(trained, small_feats):
    return {t: attribution.fisher_diagonal(trained[t], small_feats, t) for t in TARGETS}


def exact_fit_feats(p, rng, n=3):
    feats = []
    for i in range(n):
        x = rng.random((8, p.n_bins))
        y = sepmodel.forward_mask(p, x) * x
        feats.append(sepmodel.SongFeatures(f"z{i}", x, {p.target: y}))
    return feats


def test_fisher_zero_gradient_hits_floor(trained, rng):
    p = trained["vocals"]
    f = attribution.fisher_diagonal(p, exact_fit_feats(p, rng))
    assert not f.values.any()
    np.testing.assert_array_equal(f.floored(), attribution.FLOOR_ABSOLUTE)


def test_fisher_matches_per_song_loop(trained, small_feats, fishers, rng):
    p = trained["bass"]
    idx = rng.choice(p.theta.size, 20, replace=False)
    acc = np.zeros(idx.size)
    for f in small_feats:
        _, g = sepmodel.loss_and_grad(p.theta, f.mixture, f.targets["bass"])
        acc += g[idx] ** 2
    np.testing.assert_allclose(fishers["bass"].values[idx], acc / len(small_feats), rtol=1e-6)
    assert fishers["bass"].n_samples == len(small_feats)


def test_fisher_against_finite_differences(trained, small_feats, fishers):
    # squared central differences of each song's loss, coordinate by coordinate
    p = trained["drums"]
    w1_block = np.arange(p.n_bins * p.n_hidden)
    g = np.abs(sepmodel.song_gradient(p, small_feats[0], "drums"))
    idx = w1_block[np.argsort(g[w1_block])[-5:]]
    h = 1e-6
    acc = np.zeros(idx.size)
    for f in small_feats:
        for n, i in enumerate(idx):
            tp, tm = p.theta.copy(), p.theta.copy()
            tp[i] += h
            tm[i] -= h
            d = (sepmodel.batch_loss(p.with_theta(tp), f.mixture, f.targets["drums"])
                 - sepmodel.batch_loss(p.with_theta(tm), f.mixture, f.targets["drums"])) / (2 * h)
            acc[n] += d * d
    np.testing.assert_allclose(fishers["drums"].values[idx], acc / len(small_feats), rtol=1e-4)


def test_fisher_quadratic_in_loss_scale(trained, small_feats, fishers):
    scaled = attribution.fisher_diagonal(trained["other"], small_feats, "other", loss_scale=3.0)
    np.testing.assert_allclose(scaled.values, 9.0 * fishers["other"].values, rtol=1e-12)


def test_fisher_floor(fishers):
    f = fishers["vocals"]
    assert np.all(f.values >= 0)
    assert f.floor() == pytest.approx(max(1e-8 * f.values.max(), 1e-12))
    assert np.all(f.floored() >= f.floor())
    assert f.floored(0.5).min() >= 0.5


def test_unlearn_zero_alpha_is_identity(trained, fishers, small_ref_feats):
    p = trained["vocals"]
    out, alpha = attribution.unlearn(p, fishers["vocals"], small_ref_feats[0], cfg=UnlearnConfig(alpha=0.0))
    assert alpha == 0.0
    assert out.theta.tobytes() == p.theta.tobytes()


def test_unlearn_raises_reference_loss(trained, fishers, small_ref_feats):
    for t in TARGETS:
        y = small_ref_feats[1]
        before = trained[t].theta.copy()
        out, alpha = attribution.unlearn(trained[t], fishers[t], y)
        assert alpha > 0
        assert trained[t].theta.tobytes() == before.tobytes()
        assert sepmodel.song_loss(out, y).loss >= sepmodel.song_loss(trained[t], y).loss
        step = np.linalg.norm(out.theta - before)
        assert step == pytest.approx(1e-3 * np.linalg.norm(before), rel=1e-9)


def test_unlearn_reduces_to_naive_rule(trained, small_ref_feats):
    p = trained["bass"]
    ones = FisherDiagonal(np.ones_like(p.theta), 1, "bass")
    cfg = UnlearnConfig(alpha=0.37, n_train=1, fisher_floor=1e-12)
    out, _ = attribution.unlearn(p, ones, small_ref_feats[0], cfg=cfg)
    naive = attribution.naive_unlearn(p, small_ref_feats[0], 0.37)
    assert out.theta.tobytes() == naive.theta.tobytes()


def test_unlearn_divergence(trained, small_ref_feats):
    p = trained["drums"]
    tiny = FisherDiagonal(np.zeros_like(p.theta), 1, "drums")
    cfg = UnlearnConfig(alpha=1e300, fisher_floor=1e-300)
    with pytest.warns(RuntimeWarning):
        with pytest.raises(attribution.UnlearningDiverged, match="unlearning diverged"):
            attribution.unlearn(p, tiny, small_ref_feats[0], cfg=cfg)


def test_unlearn_config_validation():
    with pytest.raises(ValueError):
        UnlearnConfig(alpha=-1)
    with pytest.raises(ValueError):
        UnlearnConfig(steps=0)


def test_shape_mismatch(trained, small_ref_feats):
    with pytest.raises(ValueError):
        attribution.unlearn(trained["vocals"], FisherDiagonal(np.ones(3), 1), small_ref_feats[0])


@pytest.fixture(scope="module")
def matrix(trained, fishers, small_feats, small_ref_feats):
    return attribution.attribution_matrix(trained, fishers, small_feats, small_ref_feats)


def test_matrix_shape_and_runs(matrix, small_feats, small_ref_feats):
    n, m = len(small_feats), len(small_ref_feats)
    assert matrix.shape == (n, m, 4)
    assert np.all(np.isfinite(matrix.delta))
    assert matrix.n_unlearn_runs == m * 4


def test_exactly_m_unlearning_runs_per_target(monkeypatch, trained, fishers, small_feats, small_ref_feats):
    calls = []
    real = attribution.unlearn

    def counting(p, fisher, y, target=None, cfg=UnlearnConfig()):
        calls.append(target)
        return real(p, fisher, y, target, cfg)

    monkeypatch.setattr(attribution, "unlearn", counting)
    attribution.attribution_matrix(trained, fishers, small_feats, small_ref_feats)
    assert {t: calls.count(t) for t in TARGETS} == {t: len(small_ref_feats) for t in TARGETS}


def test_matrix_entries_are_loss_differences(matrix, trained, fishers, small_feats, small_ref_feats):
    t, j, i = "other", 2, 5
    unlearned, _ = attribution.unlearn(trained[t], fishers[t], small_ref_feats[j], t)
    expected = (sepmodel.song_loss(unlearned, small_feats[i], t).loss
                - sepmodel.song_loss(trained[t], small_feats[i], t).loss)
    assert matrix.delta[i, j, TARGETS.index(t)] == pytest.approx(expected, rel=1e-9, abs=1e-15)


def test_zero_alpha_matrix_is_zero(trained, fishers, small_feats, small_ref_feats):
    a = attribution.attribution_matrix(trained, fishers, small_feats, small_ref_feats[:2],
                                       UnlearnConfig(alpha=0.0))
    assert not a.delta.any()


def test_refs_must_be_disjoint(trained, fishers, small_feats):
    with pytest.raises(ValueError):
        attribution.attribution_matrix(trained, fishers, small_feats, small_feats[:1])


def test_divergence_carries_context(monkeypatch, trained, fishers, small_feats, small_ref_feats):
    def boom(*args, **kwargs):
        raise attribution.UnlearningDiverged("unlearning diverged")

    monkeypatch.setattr(attribution, "unlearn", boom)
    with pytest.raises(attribution.UnlearningDiverged, match=small_ref_feats[0].id):
        attribution.attribution_matrix(trained, fishers, small_feats, small_ref_feats)


def test_planted_duplicate_ranks_high(trained, fishers, small_feats, small_ref_feats):
    ref = small_ref_feats[0]
    copy = sepmodel.SongFeatures("planted", ref.mixture, ref.targets)
    corpus = small_feats + [copy]
    a = attribution.attribution_matrix(trained, fishers, corpus, small_ref_feats[:1])
    top = int(np.ceil(0.1 * len(corpus)))
    for k, t in enumerate(TARGETS):
        column = a.delta[:, 0, k]
        assert len(corpus) - 1 in np.argsort(-column)[:top], t


def test_swapped_targets_score_lower(trained, fishers, small_feats, small_ref_feats):
    song = corrupt_label_noise(synth_clean_song(77, 1.0, "swapped"), 1, pair=("vocals", "bass"))
    corpus = small_feats + [sepmodel.song_features(song)]
    a = attribution.attribution_matrix(trained, fishers, corpus, small_ref_feats)
    rank = {t: np.argsort(np.argsort(attribution.aggregate_per_target(a, t)))[-1] for t in TARGETS}
    # lowest per-target rank means most misaligned with the clean references
    assert rank["vocals"] < rank["drums"]
    assert rank["bass"] < rank["drums"]


def toy(delta):
    delta = np.asarray(delta, dtype=float)
    n, m, k = delta.shape
    return AttributionMatrix(delta, np.zeros((n, k)), [f"s{i}" for i in range(n)],
                             [f"r{j}" for j in range(m)], TARGETS[:k],
                             ref_targets={t: list(range(m)) for t in TARGETS[:k]})


def test_unified_examples():
    np.testing.assert_array_equal(attribution.aggregate_unified(toy([[[1.0], [3.0]], [[2.0], [4.0]]])),
                                  [2.0, 3.0])
    single = toy(np.arange(5.0).reshape(5, 1, 1))
    np.testing.assert_array_equal(attribution.aggregate_unified(single), np.arange(5.0))


def test_unified_shift(rng):
    a = toy(rng.normal(size=(6, 3, 4)))
    b = toy(a.delta + 2.5)
    np.testing.assert_allclose(attribution.aggregate_unified(b), attribution.aggregate_unified(a) + 2.5)


def test_per_target_average_equals_unified(rng):
    a = toy(rng.normal(size=(7, 3, 4)))
    per = np.mean([attribution.aggregate_per_target(a, t) for t in TARGETS], axis=0)
    np.testing.assert_allclose(per, attribution.aggregate_unified(a), rtol=1e-12)


def test_per_target_constant_slice_ties():
    a = toy(np.full((4, 2, 4), 0.3))
    assert len(set(attribution.aggregate_per_target(a, "drums"))) == 1


def test_per_target_without_references():
    a = toy(np.zeros((3, 2, 4)))
    a.ref_targets["bass"] = []
    with pytest.raises(ValueError, match="no references for target"):
        attribution.aggregate_per_target(a, "bass")


def test_filter_counts():
    ids = [f"s{i:03d}" for i in range(200)]
    scores = np.linspace(0, 1, 200)
    assert len(attribution.filter_ranked(scores, ids, 1.0)) == 200
    assert len(attribution.filter_ranked(scores, ids, 0.75)) == 150
    assert len(attribution.filter_ranked(scores, ids, 0.7)) == 140
    assert attribution.retained_count(3, 0.1) == 1


def test_filter_tie_rule():
    ids = [f"s{i:03d}" for i in range(200)][::-1]
    kept = attribution.filter_ranked(np.zeros(200), ids, 0.5)
    assert sorted(kept) == [f"s{i:03d}" for i in range(100)]


def test_filter_direction():
    ids = ["a", "b", "c", "d"]
    assert attribution.filter_ranked([4, 3, 2, 1], ids, 0.5) == ["a", "b"]
    assert attribution.filter_ranked([4, 3, 2, 1], ids, 0.5, higher_is_better=False) == ["d", "c"]


def test_filter_errors():
    with pytest.raises(ValueError):
        attribution.filter_ranked([1.0], ["a"], 0.0)
    with pytest.raises(ValueError):
        attribution.filter_ranked([np.nan], ["a"], 1.0)
    with pytest.raises(ValueError):
        attribution.filter_ranked([1.0, 2.0], ["a"], 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=40), st.floats(0.01, 1.0),
       st.sampled_from(["cube", "exp", "affine"]))
def test_filter_invariant_under_monotone_maps(values, ratio, kind):
    x = np.array(values, dtype=float)
    ids = [f"s{i:02d}" for i in range(x.size)]
    mapped = {"cube": x ** 3, "exp": np.exp(x / 10), "affine": 2.0 * x - 7.0}[kind]
    assert attribution.filter_ranked(mapped, ids, ratio) == attribution.filter_ranked(x, ids, ratio)
