import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bqsched.envsim import (
    FINISHED, RUNNING, EnvConfig, EnvSession, advance_to_next_completion, calibrate, reset, run_episode,
    submit, work_lower_bound,
)
from bqsched.errors import InvalidArgument, ProtocolError
from bqsched.workload import BatchSet, generate_workload

from conftest import make_query

QUIET = dict(noise_sigma=0.0)


def test_config_validation_and_keys():
    with pytest.raises(InvalidArgument):
        EnvConfig(num_connections=0)
    with pytest.raises(InvalidArgument):
        EnvConfig(share_bonus=1.0)
    with pytest.raises(InvalidArgument):
        EnvConfig.from_dict({"bogus": 1})
    cfg = EnvConfig(num_connections=3)
    assert EnvConfig.from_dict(cfg.to_dict()) == cfg


def test_reset_without_noise_keeps_spec_work(planted20):
    st_ = reset(planted20, EnvConfig(**QUIET), 5)
    np.testing.assert_array_equal(st_.remaining_cpu, [q.cpu_work for q in planted20.queries])
    np.testing.assert_array_equal(st_.remaining_io, [q.io_work for q in planted20.queries])
    assert st_.clock == 0 and not st_.buffer and st_.free_connections == 4


def test_reset_noise_keyed_by_round_seed(planted20):
    cfg = EnvConfig()
    a, b, c = reset(planted20, cfg, 1), reset(planted20, cfg, 1), reset(planted20, cfg, 2)
    np.testing.assert_array_equal(a.remaining_cpu, b.remaining_cpu)
    assert np.any(a.remaining_cpu != c.remaining_cpu)
    # one shared multiplier per query
    np.testing.assert_allclose(a.remaining_cpu / [q.cpu_work for q in planted20.queries],
                               a.remaining_io / [q.io_work for q in planted20.queries], rtol=1e-12)


def test_submit_buffer_bonus():
    warm = make_query(0, tables=(1, 2))
    q = make_query(1, cpu=1.0, io=8.0, tables=(1, 2, 3, 4))
    cfg = EnvConfig(num_connections=2, share_bonus=0.5, **QUIET)
    st_ = reset(BatchSet([warm, q]), cfg, 0)
    submit(st_, 0, 1)
    submit(st_, 1, 1)
    assert st_.remaining_io[1] == 6.0
    assert list(st_.buffer) == [1, 2, 3, 4]


def test_submit_cold_buffer_and_tableless_query():
    q = make_query(0, io=8.0, tables=(5,))
    empty = make_query(1, io=3.0, tables=())
    assert empty.table_set == frozenset()
    st_ = reset(BatchSet([q, empty]), EnvConfig(**QUIET), 0)
    submit(st_, 0, 1)
    submit(st_, 1, 1)
    assert st_.remaining_io.tolist() == [8.0, 3.0]


def test_buffer_lru_eviction():
    qs = [make_query(i, tables=(2 * i, 2 * i + 1)) for i in range(3)]
    st_ = reset(BatchSet(qs), EnvConfig(buffer_capacity=4, **QUIET), 0)
    for i in range(3):
        submit(st_, i, 1)
    assert list(st_.buffer) == [2, 3, 4, 5]


def test_submit_protocol_errors():
    st_ = reset(BatchSet([make_query(0), make_query(1)]), EnvConfig(num_connections=1, **QUIET), 0)
    submit(st_, 0, 1)
    with pytest.raises(ProtocolError):
        submit(st_, 0, 1)
    with pytest.raises(ProtocolError):
        submit(st_, 1, 1)
    with pytest.raises(ProtocolError):
        submit(st_, 7, 1)


def test_advance_single_query():
    cfg = EnvConfig(num_connections=1, cpu_capacity=1, io_capacity=1, **QUIET)
    st_ = reset(BatchSet([make_query(0, cpu=2, io=2)]), cfg, 0)
    submit(st_, 0, 1)
    assert advance_to_next_completion(st_) == (0, 2.0)
    assert st_.status[0] == FINISHED and st_.free_conns == [0]


def test_advance_two_identical_queries_tie_by_id():
    cfg = EnvConfig(num_connections=2, cpu_capacity=2, io_capacity=2, **QUIET)
    st_ = reset(BatchSet([make_query(1, tables=(1,)), make_query(0, tables=(2,))]), cfg, 0)
    submit(st_, 1, 1)
    submit(st_, 0, 1)
    assert advance_to_next_completion(st_) == (0, 2.0)
    assert advance_to_next_completion(st_) == (1, 2.0)


def test_advance_amdahl_full_parallel():
    cfg = EnvConfig(num_connections=1, cpu_capacity=2, **QUIET)
    st_ = reset(BatchSet([make_query(0, cpu=4, io=1, alpha=1.0)]), cfg, 0)
    st_.remaining_io[0] = 0.0  # a pure-CPU query; specs require io > 0
    submit(st_, 0, 2)
    assert advance_to_next_completion(st_) == (0, 2.0)


def test_advance_without_running_query():
    st_ = reset(BatchSet([make_query(0)]), EnvConfig(), 0)
    with pytest.raises(ProtocolError):
        advance_to_next_completion(st_)


def test_run_episode_single_query_is_solo_time():
    b = BatchSet([make_query(0, cpu=3, io=1)])
    rec = run_episode(b, EnvConfig(**QUIET), 0, lambda s: (0, 1))
    assert rec.makespan == 3.0


def test_serial_execution_sums_solo_times():
    b = BatchSet([make_query(i, cpu=1 + i, io=2.5 - i * 0.5, tables=(i,), alpha=0.3) for i in range(3)])
    cfg = EnvConfig(num_connections=1, **QUIET)
    solo = sum(run_episode(BatchSet([q]), cfg, 0, lambda s, q=q: (q.query_id, 2)).makespan for q in b.queries)
    rec = run_episode(b, cfg, 0, lambda s: (s.pending_ids()[-1], 2))
    assert rec.makespan == pytest.approx(solo, abs=1e-12)


def test_policy_must_pick_pending():
    b = BatchSet([make_query(0), make_query(1)])
    with pytest.raises(ProtocolError):
        run_episode(b, EnvConfig(num_connections=2), 0, lambda s: (0, 1))


def test_connections_never_idle_with_pending(planted20):
    rec = run_episode(planted20, EnvConfig(), 3, lambda s: (s.pending_ids()[0], 1))
    rec.validate()
    starts = sorted(e.start for e in rec.entries)
    finishes = sorted(e.finish for e in rec.entries)
    # every start after the first |C| coincides with some completion
    for s in starts[4:]:
        assert any(abs(s - f) < 1e-12 for f in finishes)


def test_calibrate_covers_every_config(small_batch):
    lg = calibrate(small_batch, EnvConfig())
    assert len(lg) == 3 * small_batch.n
    seen = {(e.query_id, e.workers) for e in lg.entries()}
    assert seen == {(q, w) for q in small_batch.ids for w in (1, 2, 4)}


def test_session_counts_events(small_batch):
    s = EnvSession(small_batch, EnvConfig())
    st_ = s.reset(0)
    for q in small_batch.ids:
        s.submit(q, 1)
    while not st_.done:
        s.advance()
    assert s.events == 2 * small_batch.n
    assert s.to_round(0).makespan == np.nanmax(st_.finish_time)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(0, 500), st.integers(0, 1000), st.integers(1, 4),
       st.sampled_from(["plain", "planted"]))
def test_makespan_respects_work_bound(n, wseed, rseed, conns, profile):
    if profile == "planted" and n < 9:
        profile = "plain"
    b = generate_workload(n, wseed, profile)
    cfg = EnvConfig(num_connections=conns)
    rng = np.random.default_rng(rseed)
    st_ = reset(b, cfg, rseed)
    while not st_.done:
        while st_.free_conns and (st_.status == 0).any():
            submit(st_, int(rng.choice(st_.pending_ids())), int(rng.choice([1, 2, 4])))
        advance_to_next_completion(st_)
    makespan = float(np.nanmax(st_.finish_time))
    assert makespan >= work_lower_bound(b, cfg, rseed) - 1e-9
    assert makespan >= work_lower_bound(b, cfg, rseed, st_.effective_io) - 1e-9
    assert np.all(st_.status == FINISHED) and RUNNING not in st_.status
