"""Deterministic event-driven execution of a batch under CPU contention,
IO contention and buffer sharing.

Rates are piecewise constant between completions:

* CPU: Amdahl speedup ``1 / ((1 - a) + a / r)`` scaled by
  ``min(1, P / sum(r))`` over running queries.
* IO: ``min(1, B / n_running)`` per query.
* Buffer: at submission, IO work shrinks by ``h * |T ∩ buffer| / |T|``;
  the query's tables then enter an LRU buffer.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, ProtocolError
from .kernels import rate_step
from .workload import BatchSet, ExecLog, LogEntry, RoundRecord

PENDING, RUNNING, FINISHED = 0, 1, 2


@dataclass(frozen=True)
class EnvConfig:
    num_connections: int = 4
    cpu_capacity: float = 6.0
    io_capacity: float = 4.0
    buffer_capacity: int = 8
    share_bonus: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_connections < 1:
            raise InvalidArgument("need at least one connection")
        if not (self.cpu_capacity > 0 and self.io_capacity > 0):
            raise InvalidArgument("capacities must be positive")
        if not 0.0 <= self.share_bonus < 1.0:
            raise InvalidArgument("share_bonus must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise InvalidArgument("noise_sigma must be >= 0")
        if self.buffer_capacity < 0:
            raise InvalidArgument("buffer_capacity must be >= 0")

    # keys used by the experiment config file
    _KEYS = {
        "connections": "num_connections",
        "cpu_capacity": "cpu_capacity",
        "io_capacity": "io_capacity",
        "buffer_tables": "buffer_capacity",
        "share_bonus": "share_bonus",
        "noise_sigma": "noise_sigma",
        "env_seed": "seed",
    }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        unknown = set(d) - set(cls._KEYS)
        if unknown:
            raise InvalidArgument(f"unknown env keys: {sorted(unknown)}")
        return cls(**{cls._KEYS[k]: v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, attr) for k, attr in self._KEYS.items()}


@dataclass
class EnvState:
    """Mutable per-episode state. Arrays are indexed by batch position."""

    batch: BatchSet
    cfg: EnvConfig
    clock: float
    ids: np.ndarray
    alpha: np.ndarray
    remaining_cpu: np.ndarray
    remaining_io: np.ndarray
    status: np.ndarray
    workers: np.ndarray
    conn: np.ndarray
    submit_time: np.ndarray
    start_time: np.ndarray
    finish_time: np.ndarray
    effective_io: np.ndarray
    buffer: OrderedDict = field(default_factory=OrderedDict)
    free_conns: list = field(default_factory=list)
    events: int = 0

    @property
    def free_connections(self) -> int:
        return len(self.free_conns)

    def index(self, query_id) -> int:
        hits = np.flatnonzero(self.ids == query_id)
        if hits.size == 0:
            raise ProtocolError(f"query {query_id} not in this episode")
        return int(hits[0])

    def pending_ids(self) -> list:
        return [int(q) for q in self.ids[self.status == PENDING]]

    def running_ids(self) -> list:
        return [int(q) for q in self.ids[self.status == RUNNING]]

    @property
    def done(self) -> bool:
        return bool(np.all(self.status == FINISHED))

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)


def noise_factors(batch: BatchSet, cfg: EnvConfig, round_seed: int) -> np.ndarray:
    out = np.ones(batch.n)
    if cfg.noise_sigma == 0:
        return out
    for i, q in enumerate(batch.queries):
        z = np.random.default_rng([int(cfg.seed), int(round_seed), int(q.query_id)]).standard_normal()
        out[i] = np.exp(cfg.noise_sigma * z)
    return out


def reset(batch: BatchSet, cfg: EnvConfig, round_seed: int) -> EnvState:
    n = batch.n
    noise = noise_factors(batch, cfg, round_seed)
    return EnvState(
        batch=batch,
        cfg=cfg,
        clock=0.0,
        ids=np.array(batch.ids, dtype=np.int64),
        alpha=np.array([q.parallel_fraction for q in batch.queries], dtype=np.float64),
        remaining_cpu=np.array([q.cpu_work for q in batch.queries]) * noise,
        remaining_io=np.array([q.io_work for q in batch.queries]) * noise,
        status=np.zeros(n, dtype=np.int8),
        workers=np.zeros(n, dtype=np.float64),
        conn=np.full(n, -1, dtype=np.int64),
        submit_time=np.full(n, np.nan),
        start_time=np.full(n, np.nan),
        finish_time=np.full(n, np.nan),
        effective_io=np.zeros(n),
        buffer=OrderedDict(),
        free_conns=list(range(cfg.num_connections)),
    )


def submit(state: EnvState, query_id: int, workers: int) -> EnvState:
    """Start a pending query on the lowest free connection (mutates ``state``)."""
    i = state.index(query_id)
    if state.status[i] != PENDING:
        raise ProtocolError(f"query {query_id} is not pending")
    if not state.free_conns:
        raise ProtocolError("no free connection")
    if workers < 1:
        raise ProtocolError(f"invalid worker count {workers}")
    tables = state.batch.queries[i].table_set
    if tables:
        hits = sum(1 for t in tables if t in state.buffer)
        state.remaining_io[i] *= 1.0 - state.cfg.share_bonus * hits / len(tables)
    state.effective_io[i] = state.remaining_io[i]
    for t in sorted(tables):
        state.buffer[t] = None
        state.buffer.move_to_end(t)
    while len(state.buffer) > state.cfg.buffer_capacity:
        state.buffer.popitem(last=False)
    state.conn[i] = state.free_conns.pop(0)
    state.status[i] = RUNNING
    state.workers[i] = float(workers)
    state.submit_time[i] = state.clock
    state.start_time[i] = state.clock
    state.events += 1
    return state


def advance_to_next_completion(state: EnvState) -> tuple:
    """Run until the next query finishes; returns ``(query_id, finish_clock)``."""
    running = state.status == RUNNING
    if not running.any():
        raise ProtocolError("no running query")
    best, dt = rate_step(state.remaining_cpu, state.remaining_io, state.workers, state.alpha,
                         running, state.ids, state.cfg.cpu_capacity, state.cfg.io_capacity)
    state.clock += dt
    state.status[best] = FINISHED
    state.finish_time[best] = state.clock
    state.free_conns.append(int(state.conn[best]))
    state.free_conns.sort()
    state.events += 1
    return int(state.ids[best]), state.clock


def to_round(state: EnvState, round_id: int) -> RoundRecord:
    entries = []
    for i in np.argsort(state.start_time, kind="stable"):
        if state.status[i] == PENDING:
            continue
        entries.append(LogEntry(int(state.ids[i]), int(state.workers[i]), int(state.conn[i]),
                                float(state.submit_time[i]), float(state.start_time[i]),
                                float(state.finish_time[i])))
    return RoundRecord(round_id, entries)


Policy = Callable[[EnvState], Optional[tuple]]


def run_episode(batch: BatchSet, cfg: EnvConfig, round_seed: int, policy: Policy,
                round_id: Optional[int] = None) -> RoundRecord:
    """Keep every connection busy: whenever one is free and a query is
    pending, ask ``policy(state)`` for ``(query_id, workers)``."""
    state = reset(batch, cfg, round_seed)
    while not state.done:
        while state.free_conns and (state.status == PENDING).any():
            action = policy(state)
            if action is None:
                raise ProtocolError("policy returned no action while queries are pending")
            qid, workers = action
            if int(qid) not in state.pending_ids():
                raise ProtocolError(f"policy chose non-pending query {qid}")
            submit(state, int(qid), int(workers))
        advance_to_next_completion(state)
    return to_round(state, round_seed if round_id is None else round_id)


def run_rounds(batch: BatchSet, cfg: EnvConfig, round_seeds, policy_factory) -> ExecLog:
    """One episode per seed; ``policy_factory(round_seed)`` builds the policy."""
    return ExecLog([run_episode(batch, cfg, s, policy_factory(s), round_id=k)
                    for k, s in enumerate(round_seeds)])


def calibrate(batch: BatchSet, cfg: EnvConfig, menu=(1, 2, 4), seed_offset: int = 1_000_000) -> ExecLog:
    """Run every query alone under every config once (``len(menu) * n`` rounds)."""
    log = ExecLog()
    rid = 0
    for q in batch.queries:
        solo = BatchSet([q])
        for w in menu:
            rec = run_episode(solo, cfg, seed_offset + rid, lambda s, w=w, q=q: (q.query_id, w), round_id=rid)
            log.rounds.append(rec)
            rid += 1
    return log


def work_lower_bound(batch: BatchSet, cfg: EnvConfig, round_seed: int, effective_io=None) -> float:
    """Makespan lower bound from work conservation.

    Total CPU throughput never exceeds ``P`` (speedup <= workers) and total
    IO throughput never exceeds ``B``. Pass the episode's ``effective_io``
    for the tight IO term; otherwise the maximal buffer bonus is assumed.
    """
    noise = noise_factors(batch, cfg, round_seed)
    cpu = float(np.sum(np.array([q.cpu_work for q in batch.queries]) * noise))
    if effective_io is None:
        io = float(np.sum(np.array([q.io_work for q in batch.queries]) * noise)) * (1.0 - cfg.share_bonus)
    else:
        io = float(np.sum(effective_io))
    return max(cpu / cfg.cpu_capacity, io / cfg.io_capacity)


class EnvSession:
    """Stateful wrapper used by schedulers: the true environment."""

    def __init__(self, batch: BatchSet, cfg: EnvConfig):
        self.batch = batch
        self.cfg = cfg
        self.state: Optional[EnvState] = None
        self.events = 0

    def reset(self, round_seed: int) -> EnvState:
        self.state = reset(self.batch, self.cfg, round_seed)
        return self.state

    def submit(self, query_id: int, workers: int):
        submit(self.state, query_id, workers)
        self.events += 1

    def advance(self) -> tuple:
        out = advance_to_next_completion(self.state)
        self.events += 1
        return out

    def to_round(self, round_id: int) -> RoundRecord:
        return to_round(self.state, round_id)
