import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bqsched.errors import DataError, InvalidArgument, MissingDataError
from bqsched.workload import (
    AvgTimeTable, BatchSet, ExecLog, LogEntry, PlanNode, QuerySpec, RoundRecord, RunState, TimeNormalizer,
    avg_exec_time, batch_features, feature_dim, feature_vector, generate_workload, makespan_stats,
)

from conftest import make_query


def test_plan_node_rules():
    scan = PlanNode("scan", frozenset({1}))
    with pytest.raises(InvalidArgument):
        PlanNode("join", children=(scan,))
    with pytest.raises(InvalidArgument):
        PlanNode("scan", frozenset({1}), children=(scan,))
    with pytest.raises(InvalidArgument):
        PlanNode("filter", selectivity=0.0, children=(scan,))
    with pytest.raises(InvalidArgument):
        PlanNode("hash", children=())
    root = PlanNode("join", children=(scan, PlanNode("scan", frozenset({2}))))
    assert root.scan_tables() == frozenset({1, 2})
    assert PlanNode.from_dict(root.to_dict()) == root
    assert [d for _, d in root.walk()] == [0, 1, 1]


def test_query_spec_validation():
    with pytest.raises(InvalidArgument):
        QuerySpec(0, PlanNode("scan", frozenset({1})), 1.0, 0.0, frozenset({1}), 0.5)
    with pytest.raises(InvalidArgument):
        QuerySpec(0, PlanNode("scan", frozenset({1})), 1.0, 1.0, frozenset({2}), 0.5)
    q = make_query(3, tables=(1, 2))
    assert QuerySpec.from_dict(q.to_dict()) == q


def test_minimal_plain_batch():
    b = generate_workload(1, 0, "plain")
    assert b.n == 1
    q = b.queries[0]
    assert q.cpu_work > 0 and q.io_work > 0


def test_generator_is_deterministic():
    a = generate_workload(20, 7, "planted").to_json()
    b = generate_workload(20, 7, "planted").to_json()
    assert a == b
    assert generate_workload(20, 8, "planted").to_json() != a


def test_generator_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        generate_workload(0, 0)
    with pytest.raises(InvalidArgument):
        generate_workload(5, 0, "planted")
    with pytest.raises(InvalidArgument):
        generate_workload(5, 0, "weird")


def test_planted_structure(planted20):
    totals = np.array([q.total_work for q in planted20.queries])
    assert totals.max() >= 3 * np.median(totals)
    cpu_heavy = [q for q in planted20.queries if q.cpu_work >= 2 * q.io_work]
    io_heavy = [q for q in planted20.queries if q.io_work >= 2 * q.cpu_work]
    pairs = [(a.query_id, b.query_id) for a in cpu_heavy for b in io_heavy if not a.table_set & b.table_set]
    used, disjoint = set(), 0
    for a, b in pairs:
        if a not in used and b not in used:
            used |= {a, b}
            disjoint += 1
    assert disjoint >= 2
    sharing = 0
    qs = planted20.queries
    for i in range(len(qs)):
        for j in range(i + 1, len(qs)):
            inter = len(qs[i].table_set & qs[j].table_set)
            if inter >= 0.5 * max(len(qs[i].table_set), len(qs[j].table_set)) and inter > 0:
                sharing += 1
    assert sharing >= 2


def test_batch_json_round_trip(planted20, tmp_path):
    p = tmp_path / "b.json"
    planted20.save(p)
    assert BatchSet.load(p).to_json() == planted20.to_json()


def test_batch_rejects_duplicates():
    with pytest.raises(InvalidArgument):
        BatchSet([make_query(1), make_query(1)])
    with pytest.raises(InvalidArgument):
        BatchSet([])


def test_run_state_config_iff_started():
    with pytest.raises(InvalidArgument):
        RunState("pending", workers=2)
    with pytest.raises(InvalidArgument):
        RunState("running", workers=None)


@pytest.mark.parametrize("status,workers,elapsed,expected", [
    ("pending", None, 0.0, [1, 0, 0, 0, 0, 0, 0.0, 0.5]),
    ("running", 2, 2.0, [0, 1, 0, 0, 1, 0, 0.25, 0.5]),
    ("finished", 1, 4.0, [0, 0, 1, 1, 0, 0, 0.5, 0.5]),
])
def test_feature_vector_layout(status, workers, elapsed, expected):
    f = feature_vector(make_query(0), RunState(status, workers, elapsed, 4.0), TimeNormalizer(8.0))
    assert f.tolist() == expected
    assert len(f) == feature_dim()


def _log(*rounds):
    return ExecLog([RoundRecord(k, list(es)) for k, es in enumerate(rounds)])


def test_avg_exec_time_examples():
    lg = _log([LogEntry(0, 1, 0, 0, 0, 4)], [LogEntry(0, 1, 0, 10, 10, 16)])
    assert avg_exec_time(lg, 0, 1) == 5.0
    assert avg_exec_time(_log([LogEntry(5, 2, 0, 2, 2, 5)]), 5, 2) == 3.0
    only1 = _log([LogEntry(0, 1, 0, 0, 0, 3)], [LogEntry(0, 1, 0, 0, 0, 5)])
    assert avg_exec_time(only1, 0, 2) == 4.0
    with pytest.raises(MissingDataError):
        avg_exec_time(only1, 9, 1)
    with pytest.raises(MissingDataError):
        avg_exec_time(ExecLog(), 0, 1)


def test_avg_time_table_matches_scalar_lookup(planted20, calib20):
    t = AvgTimeTable(calib20, planted20)
    for i, q in enumerate(planted20.queries[:5]):
        for k, w in enumerate(t.menu):
            assert t.table[i, k] == pytest.approx(avg_exec_time(calib20, q.query_id, w), abs=1e-12)
    assert t.normalizer().scale == pytest.approx(t.table.max())


def test_batch_features_match_single_vectors(planted20, calib20):
    t = AvgTimeTable(calib20, planted20)
    norm = t.normalizer()
    status = np.array([0, 1, 2] + [0] * 17)
    workers = np.array([0, 2, 4] + [0] * 17)
    start = np.array([np.nan, 1.0, 0.5] + [np.nan] * 17)
    finish = np.array([np.nan, np.nan, 3.0] + [np.nan] * 17)
    F = batch_features(status, workers, start, finish, 2.0, t, norm.scale)
    expect = [
        RunState("pending", None, 0.0, t.overall[0]),
        RunState("running", 2, 1.0, t.table[1, 1]),
        RunState("finished", 4, 2.5, t.table[2, 2]),
    ]
    for i, rs in enumerate(expect):
        np.testing.assert_allclose(F[i], feature_vector(planted20.queries[i], rs, norm), atol=1e-15)


def test_exec_log_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(0)
    rounds = []
    for r in range(3):
        es = []
        for q in range(4):
            s = float(rng.uniform(0, 10))
            es.append(LogEntry(q, int(rng.choice([1, 2, 4])), q, s, s, s + float(rng.uniform(0.1, 5))))
        rounds.append(RoundRecord(r, es))
    lg = ExecLog(rounds)
    p = tmp_path / "log.tsv"
    lg.save(p)
    back = ExecLog.load(p)
    for a, b in zip(lg.entries(), back.entries()):
        assert a.query_id == b.query_id and a.workers == b.workers
        assert abs(a.finish - b.finish) < 1e-9 and abs(a.start - b.start) < 1e-9


def test_exec_log_rejects_malformed_lines():
    with pytest.raises(DataError):
        ExecLog.from_text("0\t1\t2\n")


def test_round_validation():
    bad = RoundRecord(0, [LogEntry(0, 1, 0, 0, 0, 5), LogEntry(1, 1, 0, 1, 1, 3)])
    with pytest.raises(DataError):
        bad.validate()
    with pytest.raises(DataError):
        RoundRecord(0, [LogEntry(0, 1, 0, 0, 3, 2)]).validate()


def test_makespan_stats_population_std():
    assert makespan_stats([8, 12]) == (10.0, 2.0)
    assert makespan_stats([10] * 5) == (10.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000), st.sampled_from(["plain", "planted"]))
def test_generator_is_pure_and_valid(n, seed, profile):
    if profile == "planted" and n < 9:
        return
    a = generate_workload(n, seed, profile)
    assert a.to_json() == generate_workload(n, seed, profile).to_json()
    assert a.ids == list(range(n))
    for q in a.queries:
        assert q.table_set == q.plan_root.scan_tables()


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["pending", "running", "finished"]), st.sampled_from([1, 2, 4]),
       st.floats(0, 8), st.floats(0.01, 8))
def test_feature_vector_properties(status, w, elapsed, avg):
    rs = RunState(status, None if status == "pending" else w, elapsed, avg)
    f = feature_vector(make_query(0), rs, TimeNormalizer(8.0))
    assert f[:3].sum() == 1
    assert np.all((f >= 0) & (f <= 1))
