import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bqsched.errors import InvalidArgument, MissingDataError
from bqsched.knowledge import (
    OBSERVED, PREDICTED, UNFILLED, Clustering, ConfigMask, GainMatrix, GainPredictor, agglomerate,
    build_clustering, cluster_support, compute_gains, default_cluster_count, derive_masks, fill_predicted,
    fit_gain_predictor, predict_gain, resolve_config,
)
from bqsched.workload import ExecLog, LogEntry, RoundRecord

from conftest import tiny_batch


def log_of(*rounds):
    """Each round is a list of (query_id, workers, start, finish)."""
    out = ExecLog()
    for rid, entries in enumerate(rounds):
        out.rounds.append(RoundRecord(rid, [LogEntry(q, w, c, s, s, f) for c, (q, w, s, f) in enumerate(entries)]))
    return out


def timing_log(table):
    """``table`` maps query -> {workers: duration}; one solo round per pair."""
    return log_of(*[[(q, w, 0.0, d)] for q, per in table.items() for w, d in per.items()])


# masks -------------------------------------------------------------------

def test_mask_small_gain_masked():
    m = derive_masks(timing_log({0: {1: 10.0, 2: 9.8}}), 0.05, 0.5, menu=(1, 2))
    assert m.is_allowed(0, 1) and not m.is_allowed(0, 2)


def test_mask_large_gain_allowed():
    m = derive_masks(timing_log({0: {1: 10.0, 2: 6.0}}), 0.05, 0.5, menu=(1, 2))
    assert m.is_allowed(0, 2)


def test_single_config_menu_allows_everything():
    m = derive_masks(timing_log({0: {1: 3.0}, 1: {1: 5.0}}), menu=(1,))
    assert m.allowed.all()


def test_mask_compares_against_fastest_cheaper_config():
    # 9.45 improves on 9.6 by under both thresholds but is masked only when
    # compared with the best cheaper config, not just its neighbour
    m = derive_masks(timing_log({0: {1: 10.0, 2: 9.6, 4: 9.45}}), 0.05, 0.5, menu=(1, 2, 4))
    assert m.allowed[0].tolist() == [True, False, False]


def test_mask_requires_full_coverage():
    with pytest.raises(MissingDataError):
        derive_masks(timing_log({0: {1: 10.0}}), menu=(1, 2))
    with pytest.raises(MissingDataError):
        derive_masks(timing_log({0: {1: 10.0, 2: 5.0}}), menu=(1, 2), ids=[0, 1])


def test_mask_minimal_config_always_allowed():
    with pytest.raises(InvalidArgument):
        ConfigMask([0], (1, 2), np.array([[False, True]]))


def test_mask_json_round_trip(tmp_path):
    m = derive_masks(timing_log({3: {1: 10.0, 2: 9.9, 4: 4.0}, 5: {1: 2.0, 2: 1.0, 4: 0.99}}), menu=(1, 2, 4))
    m.save(tmp_path / "m.json")
    back = ConfigMask.load(tmp_path / "m.json")
    assert back.ids == m.ids and back.menu == m.menu
    np.testing.assert_array_equal(back.allowed, m.allowed)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(0.1, 50.0)),
       st.floats(0.0, 0.5), st.floats(0.0, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_lowering_thresholds_never_masks_more(times, tau_rel, tau_abs, shrink_rel, shrink_abs):
    log = timing_log({q: {w: float(times[q, k]) for k, w in enumerate((1, 2, 4))} for q in range(6)})
    hi = derive_masks(log, tau_rel, tau_abs, menu=(1, 2, 4))
    lo = derive_masks(log, tau_rel * shrink_rel, tau_abs * shrink_abs, menu=(1, 2, 4))
    assert np.all(lo.allowed >= hi.allowed)


def test_resolver_picks_closest_allowed():
    assert resolve_config(np.array([True, False, False]), 2) == 0
    assert resolve_config(np.array([True, True, True]), 2) == 2
    # |log2| ties go to fewer workers
    assert resolve_config(np.array([True, False, True]), 1, menu=(1, 2, 4)) == 0
    with pytest.raises(InvalidArgument):
        resolve_config(np.array([False, False, False]), 1)


# gains -------------------------------------------------------------------

def test_gain_hand_case():
    log = log_of([(0, 1, 0.0, 3.0), (1, 1, 1.5, 10.5)])
    g = compute_gains(log, tbar={0: 4.0, 1: 9.0})
    assert g.values[0, 1] == pytest.approx(0.05, abs=1e-9)
    assert g.values[1, 0] == g.values[0, 1]
    assert g.source[0, 1] == OBSERVED


def test_gain_zero_overlap_is_unfilled():
    log = log_of([(0, 1, 0.0, 3.0), (1, 1, 3.0, 5.0)], [(0, 1, 0.0, 3.0)], [(1, 1, 0.0, 2.0)])
    g = compute_gains(log)
    assert g.source[0, 1] == UNFILLED and not g.complete


def test_gain_zero_acceleration():
    log = log_of([(0, 1, 0.0, 4.0), (1, 1, 1.0, 10.0)])
    assert compute_gains(log, tbar={0: 4.0, 1: 9.0}).values[0, 1] == 0.0


def _gain_oracle(log, tbar, i, j):
    """Evaluate the pairwise formula from the point of view of ``i`` then ``j``."""
    total, count = 0.0, 0
    for rnd in log.rounds:
        by = {e.query_id: e for e in rnd.entries}
        if i not in by or j not in by:
            continue
        a, b = by[i], by[j]
        ov = min(a.finish, b.finish) - max(a.start, b.start)
        if ov <= 0:
            continue
        ta, tb_ = a.finish - a.start, b.finish - b.start
        term_i = ov / ta * (1 - ta / tbar[i]) * np.sqrt(tbar[i])
        term_j = ov / tb_ * (1 - tb_ / tbar[j]) * np.sqrt(tbar[j])
        total += (term_i + term_j) / (np.sqrt(tbar[i]) + np.sqrt(tbar[j]))
        count += 1
    return total / count if count else None


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_gains_match_oracle_and_are_symmetric(n, n_rounds, seed):
    rng = np.random.default_rng(seed)
    rounds = []
    for _ in range(n_rounds):
        starts = rng.uniform(0, 5, n)
        rounds.append([(q, 1, float(starts[q]), float(starts[q] + rng.uniform(0.5, 6))) for q in range(n)])
    log = log_of(*rounds)
    g = compute_gains(log)
    tbar = {q: np.mean([e.duration for e in log.entries() if e.query_id == q]) for q in range(n)}
    for i, j in itertools.combinations(range(n), 2):
        want, back = _gain_oracle(log, tbar, i, j), _gain_oracle(log, tbar, j, i)
        if want is None:
            assert g.source[i, j] == UNFILLED
            continue
        assert want == pytest.approx(back, abs=1e-12)
        assert g.values[i, j] == pytest.approx(want, abs=1e-12)
    np.testing.assert_array_equal(g.values, g.values.T)


def test_gain_matrix_json_round_trip(tmp_path):
    g = compute_gains(log_of([(0, 1, 0.0, 3.0), (1, 1, 1.5, 10.5), (2, 1, 20.0, 21.0)]))
    g.save(tmp_path / "g.json")
    back = GainMatrix.load(tmp_path / "g.json")
    np.testing.assert_array_equal(back.source, g.source)
    np.testing.assert_allclose(back.values, g.values, atol=0)


# predictor ---------------------------------------------------------------

def test_predictor_symmetric_by_construction(rng):
    model = GainPredictor(6, seed=1)
    ei, ej = rng.normal(size=6), rng.normal(size=6)
    assert predict_gain(model, ei, ej) == pytest.approx(predict_gain(model, ej, ei), abs=1e-12)


def test_predictor_equal_inputs_double_one_branch(rng):
    from bqsched import nncore as nn
    model = GainPredictor(6, seed=1)
    e = rng.normal(size=6)
    with nn.no_grad():
        branch = model.branch(np.concatenate([e, e])[None]).value[0]
    assert predict_gain(model, e, e) == pytest.approx(2 * branch, abs=1e-12)


def _synthetic_gains(n, seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, 4))
    truth = np.tanh(emb @ np.diag([1.0, -0.5, 0.3, 0.0]) @ emb.T) * 0.5
    return emb, truth


def test_predictor_beats_mean_baseline_on_held_out_cells():
    n = 24
    emb, truth = _synthetic_gains(n, 0)
    iu, ju = np.triu_indices(n, 1)
    held = np.random.default_rng(1).random(iu.size) < 0.25
    src = np.zeros((n, n), np.int8)
    src[iu[~held], ju[~held]] = src[ju[~held], iu[~held]] = OBSERVED
    gains = GainMatrix(list(range(n)), np.where(src == OBSERVED, truth, 0.0), src)
    model = fit_gain_predictor(gains, emb, epochs=300, seed=0)
    pred = model.predict(emb[iu[held]], emb[ju[held]])
    target = truth[iu[held], ju[held]]
    baseline = np.mean((truth[iu[~held], ju[~held]].mean() - target) ** 2)
    assert np.mean((pred - target) ** 2) < baseline


def test_fill_keeps_observed_cells():
    n = 5
    emb, truth = _synthetic_gains(n, 2)
    src = np.zeros((n, n), np.int8)
    src[0, 1] = src[1, 0] = OBSERVED
    gains = GainMatrix(list(range(n)), np.where(src == OBSERVED, truth, 0.0), src)
    filled = fill_predicted(gains, fit_gain_predictor(gains, emb, epochs=5), emb)
    assert filled.complete and filled.values[0, 1] == truth[0, 1]
    assert filled.source[2, 3] == PREDICTED
    np.testing.assert_array_equal(filled.values, filled.values.T)


def test_fit_requires_observations():
    g = GainMatrix([0, 1], np.zeros((2, 2)), np.zeros((2, 2), np.int8))
    with pytest.raises(MissingDataError):
        fit_gain_predictor(g, np.zeros((2, 3)))


# clustering --------------------------------------------------------------

def test_agglomerate_example():
    sim = np.array([[0, 0.9, 0.1], [0.9, 0, 0.2], [0.1, 0.2, 0]])
    c = agglomerate(sim, 2, ids=[1, 2, 3])
    assert sorted(map(sorted, c.members())) == [[1, 2], [3]]


def test_agglomerate_all_singletons_and_range_checks():
    sim = np.random.default_rng(0).random((4, 4))
    assert agglomerate(sim + sim.T, 4).labels.tolist() == [0, 1, 2, 3]
    for bad in (0, 5):
        with pytest.raises(InvalidArgument):
            agglomerate(sim + sim.T, bad)


def test_agglomerate_refuses_incomplete_matrix():
    g = GainMatrix([0, 1], np.zeros((2, 2)), np.zeros((2, 2), np.int8))
    with pytest.raises(MissingDataError):
        agglomerate(g, 1)


def brute_force_merges(sim, n_clusters):
    """Greedy average linkage from member lists; clusters are ordered by
    their smallest member and the first maximum wins."""
    clusters = [[i] for i in range(sim.shape[0])]
    merges = []
    while len(clusters) > n_clusters:
        best, best_v = None, -np.inf
        for x in range(len(clusters)):
            for y in range(x + 1, len(clusters)):
                total = sum(sim[a, b] for a in clusters[x] for b in clusters[y])
                v = total / (len(clusters[x]) * len(clusters[y]))
                if v > best_v:
                    best, best_v = (x, y), v
        x, y = best
        merges.append((clusters[x][0], clusters[y][0]))
        clusters[x] = sorted(clusters[x] + clusters[y])
        del clusters[y]
    return merges


def test_agglomerate_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(2, 9))
        # half the trials use small integers so exact ties exercise the tie rule
        raw = rng.integers(-3, 4, (n, n)).astype(float) if trial % 2 else rng.normal(size=(n, n))
        sim = raw + raw.T
        np.fill_diagonal(sim, 0.0)
        k = int(rng.integers(1, n + 1))
        got = [(a, b) for a, b, _ in agglomerate(sim, k).merges]
        assert got == brute_force_merges(sim, k), trial


def test_clustering_file_round_trip(tmp_path):
    c = Clustering([10, 11, 12], np.array([0, 1, 0]))
    c.save(tmp_path / "c.tsv")
    assert (tmp_path / "c.tsv").read_text().splitlines()[0] == "10\t0"
    back = Clustering.load(tmp_path / "c.tsv")
    assert back.assignment == c.assignment
    with pytest.raises(MissingDataError):
        back.for_batch(tiny_batch(3))


def test_cluster_support_pooling_and_resolution():
    labels = np.array([0, 0, 1])
    allowed = np.array([[True, True, True], [True, False, False], [True, True, False]])
    emb = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
    sup = cluster_support(labels, allowed, emb)
    np.testing.assert_array_equal(sup.embeddings, [[4.0, 6.0], [0.0, 0.0]])
    assert sup.allowed.tolist() == [[True, True, True], [True, True, False]]
    assert sup.resolve(0, 2) == 2 and sup.resolve(1, 2) == 0
    zero = cluster_support(np.array([0, 0]), np.ones((2, 3), bool), np.zeros((2, 2)))
    assert np.all(zero.embeddings == 0)


def test_default_cluster_count():
    assert default_cluster_count(32) is None
    assert default_cluster_count(33) == 33
    assert default_cluster_count(500) == 100


def test_build_clustering_is_deterministic(planted20):
    from bqsched.envsim import EnvConfig
    from bqsched.runner import random_corun_log
    log = random_corun_log(planted20, EnvConfig(), 6, 0)
    a, ga = build_clustering(planted20, log, 5, seed=0)
    b, gb = build_clustering(planted20, log, 5, seed=0)
    assert a.labels.tolist() == b.labels.tolist() and ga.complete
    np.testing.assert_array_equal(ga.values, gb.values)
