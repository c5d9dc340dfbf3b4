"""Queries, batches, running-state features, execution logs and the
synthetic workload generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DataError, InvalidArgument, MissingDataError

OPERATORS = ("scan", "filter", "join", "aggregate", "sort")
STATUSES = ("pending", "running", "finished")
WORKER_MENU = (1, 2, 4)
NUM_TABLES = 24


@dataclass(frozen=True)
class PlanNode:
    operator_kind: str
    table_ids: frozenset = frozenset()
    selectivity: float = 1.0
    children: tuple = ()

    def __post_init__(self):
        if self.operator_kind not in OPERATORS:
            raise InvalidArgument(f"unknown operator {self.operator_kind!r}")
        if not 0.0 < self.selectivity <= 1.0:
            raise InvalidArgument(f"selectivity {self.selectivity} outside (0, 1]")
        if len(self.children) > 2:
            raise InvalidArgument("plan nodes have at most two children")
        if self.operator_kind == "scan" and self.children:
            raise InvalidArgument("scan nodes are leaves")
        if self.operator_kind == "join" and len(self.children) != 2:
            raise InvalidArgument("join nodes need exactly two children")
        if self.operator_kind != "scan" and self.table_ids:
            raise InvalidArgument("only scans reference tables")

    def walk(self, depth=0):
        """Yield ``(node, depth)`` in pre-order."""
        yield self, depth
        for child in self.children:
            yield from child.walk(depth + 1)

    def scan_tables(self) -> frozenset:
        out = set()
        for node, _ in self.walk():
            out |= node.table_ids
        return frozenset(out)

    def to_dict(self) -> dict:
        return {
            "op": self.operator_kind,
            "tables": sorted(self.table_ids),
            "sel": self.selectivity,
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanNode":
        return cls(d["op"], frozenset(d.get("tables", ())), float(d.get("sel", 1.0)),
                   tuple(cls.from_dict(c) for c in d.get("children", ())))


@dataclass(frozen=True)
class QuerySpec:
    query_id: int
    plan_root: PlanNode
    cpu_work: float
    io_work: float
    table_set: frozenset
    parallel_fraction: float

    def __post_init__(self):
        if not (self.cpu_work > 0 and self.io_work > 0):
            raise InvalidArgument("query work must be positive")
        if not 0.0 <= self.parallel_fraction <= 1.0:
            raise InvalidArgument("parallel fraction outside [0, 1]")
        if frozenset(self.table_set) != self.plan_root.scan_tables():
            raise InvalidArgument(f"query {self.query_id}: table_set differs from plan scans")

    @property
    def total_work(self) -> float:
        return self.cpu_work + self.io_work

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "plan": self.plan_root.to_dict(),
            "cpu_work": self.cpu_work,
            "io_work": self.io_work,
            "table_set": sorted(self.table_set),
            "parallel_fraction": self.parallel_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuerySpec":
        return cls(int(d["query_id"]), PlanNode.from_dict(d["plan"]), float(d["cpu_work"]),
                   float(d["io_work"]), frozenset(d["table_set"]), float(d["parallel_fraction"]))


@dataclass
class RunState:
    status: str = "pending"
    workers: Optional[int] = None
    elapsed: float = 0.0
    avg_time: float = 1.0

    def __post_init__(self):
        if self.status not in STATUSES:
            raise InvalidArgument(f"unknown status {self.status!r}")
        if (self.status == "pending") != (self.workers is None):
            raise InvalidArgument("config is absent iff the query is pending")


@dataclass(frozen=True)
class TimeNormalizer:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgument("time scale must be positive")


@dataclass
class BatchSet:
    queries: list

    def __post_init__(self):
        if not self.queries:
            raise InvalidArgument("a batch needs at least one query")
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("duplicate query ids in batch")

    @property
    def n(self) -> int:
        return len(self.queries)

    @property
    def ids(self) -> list:
        return [q.query_id for q in self.queries]

    def by_id(self, query_id) -> QuerySpec:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise MissingDataError(f"query {query_id} not in batch")

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "queries": [q.to_dict() for q in self.queries]},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BatchSet":
        data = json.loads(text)
        return cls([QuerySpec.from_dict(q) for q in data["queries"]])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BatchSet":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# execution logs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    query_id: int
    workers: int
    conn_id: int
    submit: float
    start: float
    finish: float

    @property
    def duration(self) -> float:
        return self.finish - self.start


@dataclass
class RoundRecord:
    round_id: int
    entries: list = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max(e.finish for e in self.entries)

    def validate(self):
        by_conn = {}
        for e in self.entries:
            if e.start > e.finish or e.submit > e.start:
                raise DataError(f"round {self.round_id}: query {e.query_id} has unordered times")
            by_conn.setdefault(e.conn_id, []).append(e)
        for conn, es in by_conn.items():
            es = sorted(es, key=lambda e: (e.start, e.finish))
            for prev, cur in zip(es, es[1:]):
                if cur.start < prev.finish:
                    raise DataError(f"round {self.round_id}: overlapping entries on connection {conn}")


@dataclass
class ExecLog:
    rounds: list = field(default_factory=list)

    def __len__(self):
        return len(self.rounds)

    def entries(self) -> Iterable[LogEntry]:
        for r in self.rounds:
            yield from r.entries

    def extend(self, other: "ExecLog") -> "ExecLog":
        self.rounds.extend(other.rounds)
        return self

    def next_round_id(self) -> int:
        return max((r.round_id for r in self.rounds), default=-1) + 1

    def to_text(self) -> str:
        lines = []
        for r in self.rounds:
            for e in r.entries:
                lines.append("\t".join([str(r.round_id), str(e.query_id), str(e.workers), str(e.conn_id),
                                        repr(float(e.submit)), repr(float(e.start)), repr(float(e.finish))]))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "ExecLog":
        rounds = {}
        order = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"line {lineno}: expected 7 tab-separated fields, got {len(parts)}")
            try:
                rid, qid, w, conn = (int(p) for p in parts[:4])
                submit, start, finish = (float(p) for p in parts[4:])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if rid not in rounds:
                rounds[rid] = RoundRecord(rid)
                order.append(rid)
            rounds[rid].entries.append(LogEntry(qid, w, conn, submit, start, finish))
        return cls([rounds[r] for r in order])

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExecLog":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def avg_exec_time(log: ExecLog, query_id: int, workers: Optional[int] = None) -> float:
    """Mean execution time of a query under ``workers``.

    Falls back to the mean over all configs when the pair is absent (or when
    ``workers`` is None).
    """
    if not log.rounds:
        raise MissingDataError("empty execution log")
    same_cfg, any_cfg = [], []
    for e in log.entries():
        if e.query_id == query_id:
            any_cfg.append(e.duration)
            if e.workers == workers:
                same_cfg.append(e.duration)
    if not any_cfg:
        raise MissingDataError(f"query {query_id} absent from log")
    vals = same_cfg or any_cfg
    return float(np.mean(vals))


class AvgTimeTable:
    """Precomputed ``avg_exec_time`` lookups for one batch.

    ``table[i, k]`` is the mean time of the i-th batch query under
    ``WORKER_MENU[k]`` and ``overall[i]`` the mean over every config.
    """

    def __init__(self, log: ExecLog, batch: BatchSet, menu=WORKER_MENU):
        self.menu = tuple(menu)
        self.ids = batch.ids
        sums = {}
        for e in log.entries():
            sums.setdefault(e.query_id, {}).setdefault(e.workers, []).append(e.duration)
        n, k = batch.n, len(self.menu)
        self.table = np.zeros((n, k))
        self.overall = np.zeros(n)
        for i, qid in enumerate(self.ids):
            if qid not in sums:
                raise MissingDataError(f"query {qid} absent from log")
            per = sums[qid]
            all_vals = [d for ds in per.values() for d in ds]
            self.overall[i] = np.mean(all_vals)
            for j, w in enumerate(self.menu):
                self.table[i, j] = np.mean(per[w]) if w in per else self.overall[i]

    def normalizer(self) -> TimeNormalizer:
        return TimeNormalizer(float(max(self.table.max(), self.overall.max())))


def feature_vector(q: QuerySpec, rs: RunState, norm: TimeNormalizer, menu=WORKER_MENU) -> np.ndarray:
    """Running-state features: status one-hot, workers one-hot, elapsed, avg time."""
    f = np.zeros(3 + len(menu) + 2)
    f[STATUSES.index(rs.status)] = 1.0
    if rs.workers is not None:
        f[3 + menu.index(rs.workers)] = 1.0
    f[3 + len(menu)] = rs.elapsed / norm.scale
    f[4 + len(menu)] = rs.avg_time / norm.scale
    return f


def makespan_stats(makespans) -> tuple:
    """(mean, population std) over rounds."""
    m = np.asarray(makespans, dtype=np.float64)
    if m.size == 0:
        raise InvalidArgument("need at least one round")
    return float(m.mean()), float(np.sqrt(np.mean((m - m.mean()) ** 2)))


def feature_dim(menu=WORKER_MENU) -> int:
    return 3 + len(menu) + 2


def batch_features(status, workers, start, finish, clock: float, times: AvgTimeTable, scale: float) -> np.ndarray:
    """Vectorized ``feature_vector`` for a whole batch.

    ``status`` holds indices into ``STATUSES``; ``workers`` is ignored for
    pending queries, whose average time is the mean over every config.
    """
    status = np.asarray(status)
    n, K = status.size, len(times.menu)
    kidx = {w: k for k, w in enumerate(times.menu)}
    F = np.zeros((n, 3 + K + 2))
    F[np.arange(n), status] = 1.0
    started = status != 0
    k = np.array([kidx.get(int(w), 0) if s else 0 for w, s in zip(workers, started)], dtype=np.int64)
    F[np.flatnonzero(started), 3 + k[started]] = 1.0
    elapsed = np.zeros(n)
    run, fin = status == 1, status == 2
    elapsed[run] = clock - np.asarray(start)[run]
    elapsed[fin] = np.asarray(finish)[fin] - np.asarray(start)[fin]
    F[:, 3 + K] = elapsed / scale
    F[:, 4 + K] = np.where(started, times.table[np.arange(n), k], times.overall) / scale
    return F


# --------------------------------------------------------------------------
# synthetic workload generator
# --------------------------------------------------------------------------


def _random_plan(rng, tables, kind):
    """Plan tree over ``tables``; io-heavy plans lean on scans and filters,
    cpu-heavy plans on joins, aggregates and sorts."""
    leaves = []
    for t in tables:
        node = PlanNode("scan", frozenset([int(t)]), float(rng.uniform(0.3, 1.0)))
        if kind != "cpu" and rng.random() < 0.6:
            node = PlanNode("filter", selectivity=float(rng.uniform(0.05, 0.8)), children=(node,))
        leaves.append(node)
    root = leaves[0]
    for leaf in leaves[1:]:
        root = PlanNode("join", selectivity=float(rng.uniform(0.1, 1.0)), children=(root, leaf))
    if kind == "cpu" or rng.random() < 0.5:
        root = PlanNode("aggregate", selectivity=float(rng.uniform(0.01, 0.5)), children=(root,))
    if kind == "cpu" and rng.random() < 0.7:
        root = PlanNode("sort", selectivity=1.0, children=(root,))
    return root


def _make_query(qid, rng, tables, kind, total, alpha):
    share = {"cpu": rng.uniform(0.75, 0.85), "io": rng.uniform(0.15, 0.25),
             "mixed": rng.uniform(0.35, 0.65)}[kind]
    plan = _random_plan(rng, tables, kind)
    return QuerySpec(qid, plan, float(total * share), float(total * (1 - share)),
                     plan.scan_tables(), float(alpha))


def generate_workload(n: int, seed: int, profile: str = "plain") -> BatchSet:
    """Deterministic synthetic batch.

    ``plain`` draws independent queries. ``planted`` additionally plants
    long-tail queries (total work several times the median, highly
    parallelisable, placed last in batch order), disjoint CPU-heavy/IO-heavy
    complementary pairs, and pairs that share most of their tables.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if profile not in ("plain", "planted"):
        raise InvalidArgument(f"unknown profile {profile!r}")
    if profile == "planted" and n < 9:
        raise InvalidArgument("the planted profile needs n >= 9")
    rng = np.random.default_rng([int(seed), 0 if profile == "plain" else 1, int(n)])

    def tables(k):
        return sorted(rng.choice(NUM_TABLES, size=k, replace=False).tolist())

    def base_total():
        return float(rng.lognormal(np.log(4.0), 0.35))

    if profile == "plain":
        qs = []
        for i in range(n):
            kind = rng.choice(["cpu", "io", "mixed"])
            qs.append(_make_query(i, rng, tables(int(rng.integers(1, 4))), kind,
                                  base_total(), rng.uniform(0.05, 0.95)))
        return BatchSet(qs)

    n_tail = max(1, n // 10)
    n_comp = max(2, n // 8)
    n_share = max(2, n // 8)
    n_rest = n - n_tail - 2 * n_comp - 2 * n_share
    specs = []  # (kind, tables, total, alpha, role)
    for _ in range(n_comp):
        specs.append(("cpu", tables(1), base_total(), rng.uniform(0.1, 0.3), "comp"))
        specs.append(("io", tables(2), base_total(), rng.uniform(0.1, 0.3), "comp"))
    for _ in range(n_share):
        shared = tables(3)
        specs.append(("mixed", shared, base_total(), rng.uniform(0.2, 0.6), "share"))
        other = shared[:2] + [t for t in tables(3) if t not in shared][:1]
        specs.append(("mixed", sorted(set(other)), base_total(), rng.uniform(0.2, 0.6), "share"))
    for _ in range(n_rest):
        kind = str(rng.choice(["cpu", "io", "mixed"]))
        specs.append((kind, tables(int(rng.integers(1, 4))), base_total(), rng.uniform(0.05, 0.6), "rest"))
    order = rng.permutation(len(specs))
    specs = [specs[i] for i in order]
    median = float(np.median([s[2] for s in specs]))
    for _ in range(n_tail):
        specs.append(("cpu", tables(2), median * float(rng.uniform(5.0, 6.0)), rng.uniform(0.85, 0.95), "tail"))
    qs = [_make_query(i, rng, s[1], s[0], s[2], s[3]) for i, s in enumerate(specs)]
    return BatchSet(qs)
