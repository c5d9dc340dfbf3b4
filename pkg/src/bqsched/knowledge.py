"""Knowledge distilled from execution logs: per-query config masks,
pairwise scheduling gains with a symmetric predictor for unobserved pairs,
and average-linkage clustering of queries for cluster-level scheduling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore as nn
from .errors import DataError, InvalidArgument, MissingDataError
from .kernels import average_linkage, gain_accumulate
from .workload import WORKER_MENU, BatchSet, ExecLog

TAU_REL = 0.05
TAU_ABS = 0.5
CLUSTER_BYPASS_N = 32
MAX_CLUSTERS = 100

UNFILLED, OBSERVED, PREDICTED = 0, 1, 2
_SOURCE_NAMES = {UNFILLED: "unfilled", OBSERVED: "observed", PREDICTED: "predicted"}


# --------------------------------------------------------------------------
# config masks
# --------------------------------------------------------------------------


@dataclass
class ConfigMask:
    ids: list
    menu: tuple
    allowed: np.ndarray          # (n, K) bool, columns follow ``menu``
    tau_rel: float = TAU_REL
    tau_abs: float = TAU_ABS

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.shape != (len(self.ids), len(self.menu)):
            raise InvalidArgument("mask shape does not match ids x menu")
        if not self.allowed[:, int(np.argmin(self.menu))].all():
            raise InvalidArgument("the minimal config must always be allowed")

    def is_allowed(self, query_id, workers) -> bool:
        return bool(self.allowed[self.ids.index(query_id), self.menu.index(workers)])

    def for_batch(self, batch: BatchSet) -> np.ndarray:
        pos = {q: i for i, q in enumerate(self.ids)}
        missing = [q for q in batch.ids if q not in pos]
        if missing:
            raise MissingDataError(f"mask lacks queries {missing[:5]}")
        return self.allowed[[pos[q] for q in batch.ids]]

    def to_json(self) -> str:
        return json.dumps({
            "menu": list(self.menu), "tau_rel": self.tau_rel, "tau_abs": self.tau_abs,
            "allowed": {str(q): [int(w) for w, ok in zip(self.menu, row) if ok]
                        for q, row in zip(self.ids, self.allowed)},
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ConfigMask":
        d = json.loads(text)
        menu = tuple(d["menu"])
        ids = [int(q) for q in d["allowed"]]
        allowed = np.array([[w in d["allowed"][str(q)] for w in menu] for q in ids], dtype=bool)
        return cls(ids, menu, allowed, d["tau_rel"], d["tau_abs"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConfigMask":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _config_means(log: ExecLog):
    per = {}
    for e in log.entries():
        per.setdefault(e.query_id, {}).setdefault(e.workers, []).append(e.duration)
    return per


def derive_masks(log: ExecLog, tau_rel: float = TAU_REL, tau_abs: float = TAU_ABS, menu=WORKER_MENU,
                 ids: Optional[list] = None) -> ConfigMask:
    """Mask a config when its gain over the fastest cheaper config is below
    both thresholds. The cheapest config is never masked."""
    menu = tuple(sorted(menu))
    per = _config_means(log)
    ids = sorted(per) if ids is None else list(ids)
    allowed = np.ones((len(ids), len(menu)), dtype=bool)
    for r, qid in enumerate(ids):
        if qid not in per:
            raise MissingDataError(f"query {qid} absent from calibration log")
        missing = [w for w in menu if w not in per[qid]]
        if missing:
            raise MissingDataError(f"query {qid} lacks configs {missing}")
        tbar = np.array([np.mean(per[qid][w]) for w in menu])
        for k in range(1, len(menu)):
            low = tbar[:k].min()
            gain = low - tbar[k]
            if gain < tau_abs and gain / low < tau_rel:
                allowed[r, k] = False
    return ConfigMask(ids, menu, allowed, tau_rel, tau_abs)


def resolve_config(allowed_row, target_k: int, menu=WORKER_MENU) -> int:
    """Allowed config index closest to ``target_k`` in |log2(workers)|;
    ties go to fewer workers."""
    if allowed_row[target_k]:
        return int(target_k)
    logs = np.log2(np.asarray(menu, dtype=float))
    best, best_d = -1, np.inf
    for k in range(len(menu)):
        if not allowed_row[k]:
            continue
        d = abs(logs[k] - logs[target_k])
        if d < best_d or (d == best_d and menu[k] < menu[best]):
            best, best_d = k, d
    if best < 0:
        raise InvalidArgument("no allowed config for query")
    return best


# --------------------------------------------------------------------------
# scheduling gains
# --------------------------------------------------------------------------


@dataclass
class GainMatrix:
    ids: list
    values: np.ndarray       # (n, n)
    source: np.ndarray       # (n, n) int8: UNFILLED / OBSERVED / PREDICTED
    counts: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.ids)

    def off_diagonal(self) -> np.ndarray:
        return ~np.eye(self.n, dtype=bool)

    @property
    def complete(self) -> bool:
        return bool(np.all(self.source[self.off_diagonal()] != UNFILLED))

    def to_json(self) -> str:
        cells = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if self.source[i, j] != UNFILLED:
                    cells.append([self.ids[i], self.ids[j], float(self.values[i, j]),
                                  _SOURCE_NAMES[int(self.source[i, j])]])
        return json.dumps({"ids": self.ids, "cells": cells})

    @classmethod
    def from_json(cls, text: str) -> "GainMatrix":
        d = json.loads(text)
        ids = [int(q) for q in d["ids"]]
        pos = {q: i for i, q in enumerate(ids)}
        names = {v: k for k, v in _SOURCE_NAMES.items()}
        vals = np.zeros((len(ids), len(ids)))
        src = np.zeros((len(ids), len(ids)), dtype=np.int8)
        for a, b, v, s in d["cells"]:
            i, j = pos[int(a)], pos[int(b)]
            vals[i, j] = vals[j, i] = v
            src[i, j] = src[j, i] = names[s]
        return cls(ids, vals, src)

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GainMatrix":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def mean_times(log: ExecLog) -> dict:
    per = {}
    for e in log.entries():
        per.setdefault(e.query_id, []).append(e.duration)
    return {q: float(np.mean(v)) for q, v in per.items()}


def compute_gains(log: ExecLog, ids: Optional[list] = None, tbar: Optional[dict] = None) -> GainMatrix:
    """Observed gain cells from co-runs in ``log``.

    ``tbar`` defaults to each query's mean duration over the same log.
    """
    tbar = mean_times(log) if tbar is None else tbar
    ids = sorted(tbar) if ids is None else list(ids)
    pos = {q: i for i, q in enumerate(ids)}
    tb = np.array([tbar.get(q, np.nan) for q in ids], dtype=np.float64)
    n = len(ids)
    sums = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    for rnd in log.rounds:
        entries = [e for e in rnd.entries if e.query_id in pos]
        if len(entries) < 2:
            continue
        qidx = np.array([pos[e.query_id] for e in entries], dtype=np.int64)
        if np.any(~(tb[qidx] > 0)):
            raise DataError("average execution time must be positive")
        gain_accumulate(qidx, [e.start for e in entries], [e.finish for e in entries], tb, sums, counts)
    observed = counts > 0
    values = np.where(observed, sums / np.maximum(counts, 1), 0.0)
    values = 0.5 * (values + values.T)   # already symmetric; guards float drift
    source = np.where(observed, OBSERVED, UNFILLED).astype(np.int8)
    return GainMatrix(ids, values, source, counts)


# --------------------------------------------------------------------------
# symmetric gain predictor
# --------------------------------------------------------------------------


class GainPredictor:
    """``f(e_i || e_j) + f(e_j || e_i)`` with a small tanh MLP ``f``."""

    def __init__(self, emb_dim: int, hidden: int = 32, depth: int = 2, seed: int = 0):
        self.params = nn.ParamStore(seed)
        self.params.add_mlp("gain", 2 * emb_dim, hidden, 1, depth)
        self.depth = depth

    def branch(self, x):
        out = nn.mlp(x, self.params, "gain", self.depth, head=True)
        return nn.reshape(out, (out.shape[0],))

    def forward(self, ei, ej):
        ei, ej = np.atleast_2d(ei), np.atleast_2d(ej)
        return nn.add(self.branch(np.concatenate([ei, ej], axis=1)),
                      self.branch(np.concatenate([ej, ei], axis=1)))

    def predict(self, ei, ej) -> np.ndarray:
        with nn.no_grad():
            return self.forward(ei, ej).value.copy()


def predict_gain(model: GainPredictor, ei, ej):
    out = model.predict(ei, ej)
    return float(out[0]) if np.ndim(ei) == 1 else out


def fit_gain_predictor(gains: GainMatrix, embeddings: np.ndarray, epochs: int = 200, lr: float = 3e-3,
                       hidden: int = 32, seed: int = 0, minibatch: int = 256) -> GainPredictor:
    iu, ju = np.triu_indices(gains.n, k=1)
    obs = gains.source[iu, ju] == OBSERVED
    if not obs.any():
        raise MissingDataError("no observed gain cells")
    iu, ju = iu[obs], ju[obs]
    target = gains.values[iu, ju]
    emb = np.asarray(embeddings, dtype=np.float64)
    model = GainPredictor(emb.shape[1], hidden, seed=seed)
    opt = nn.Adam(dict(model.params), lr=lr)
    rng = np.random.default_rng([seed, 3])
    for _ in range(epochs):
        perm = rng.permutation(iu.size)
        for s in range(0, iu.size, minibatch):
            idx = perm[s:s + minibatch]
            opt.zero_grad()
            loss = nn.mse(model.forward(emb[iu[idx]], emb[ju[idx]]), target[idx])
            loss.backward()
            opt.step()
    return model


def fill_predicted(gains: GainMatrix, model: GainPredictor, embeddings: np.ndarray) -> GainMatrix:
    """Copy of ``gains`` with every unfilled off-diagonal cell predicted.
    Observed cells are kept as they are."""
    vals, src = gains.values.copy(), gains.source.copy()
    iu, ju = np.triu_indices(gains.n, k=1)
    hole = src[iu, ju] == UNFILLED
    if hole.any():
        emb = np.asarray(embeddings, dtype=np.float64)
        pred = model.predict(emb[iu[hole]], emb[ju[hole]])
        a, b = iu[hole], ju[hole]
        vals[a, b] = vals[b, a] = pred
        src[a, b] = src[b, a] = PREDICTED
    return GainMatrix(list(gains.ids), vals, src, gains.counts)


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------


@dataclass
class Clustering:
    ids: list
    labels: np.ndarray            # cluster id per entry of ``ids``
    merges: list = field(default_factory=list)   # (id_a, id_b, average gain)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def assignment(self) -> dict:
        return {q: int(c) for q, c in zip(self.ids, self.labels)}

    def members(self) -> list:
        return [[q for q, c in zip(self.ids, self.labels) if c == k] for k in range(self.n_clusters)]

    def for_batch(self, batch: BatchSet) -> np.ndarray:
        a = self.assignment
        missing = [q for q in batch.ids if q not in a]
        if missing:
            raise MissingDataError(f"clustering lacks queries {missing[:5]}")
        return np.array([a[q] for q in batch.ids])

    def save(self, path):
        lines = [f"{q}\t{c}" for q, c in zip(self.ids, self.labels)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Clustering":
        ids, labels = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"bad cluster line: {line!r}")
            ids.append(int(parts[0]))
            labels.append(int(parts[1]))
        return cls(ids, np.array(labels))


def agglomerate(gains, n_clusters: int, ids: Optional[list] = None) -> Clustering:
    """Greedy average-linkage merging on gains (higher = more similar).

    Accepts a :class:`GainMatrix` (which must be complete) or a plain
    symmetric array.
    """
    if isinstance(gains, GainMatrix):
        if not gains.complete:
            raise MissingDataError("gain matrix has unfilled cells")
        ids, sim = list(gains.ids), gains.values
    else:
        sim = np.asarray(gains, dtype=np.float64)
        ids = list(range(sim.shape[0])) if ids is None else list(ids)
    n = sim.shape[0]
    if not 1 <= n_clusters <= n:
        raise InvalidArgument(f"n_clusters must lie in [1, {n}]")
    sim = sim.copy()
    np.fill_diagonal(sim, 0.0)
    ma, mb, mv = average_linkage(sim, n_clusters)
    root = np.arange(n)
    for a, b in zip(ma, mb):
        root[root == b] = a
    # cluster ids follow the smallest member position
    _, labels = np.unique(root, return_inverse=True)
    merges = [(ids[int(a)], ids[int(b)], float(v)) for a, b, v in zip(ma, mb, mv)]
    return Clustering(ids, labels.astype(np.int64), merges)


def default_cluster_count(n: int) -> Optional[int]:
    """None means clustering is bypassed for a batch this small."""
    return None if n <= CLUSTER_BYPASS_N else min(n, MAX_CLUSTERS)


@dataclass
class ClusterSupport:
    embeddings: np.ndarray   # (n_c, H)
    allowed: np.ndarray      # (n_c, K)
    member_allowed: np.ndarray
    labels: np.ndarray
    menu: tuple

    def resolve(self, position: int, cluster_k: int) -> int:
        return resolve_config(self.member_allowed[position], cluster_k, self.menu)


def cluster_support(labels, allowed: np.ndarray, embeddings: np.ndarray, menu=WORKER_MENU) -> ClusterSupport:
    """Sum-pooled cluster embeddings, cluster masks (a config is allowed when
    any member allows it) and the per-member config resolver."""
    labels = np.asarray(labels, dtype=int)
    allowed = np.asarray(allowed, dtype=bool)
    emb = np.asarray(embeddings, dtype=np.float64)
    n_c = int(labels.max()) + 1
    pooled = np.zeros((n_c, emb.shape[1]))
    np.add.at(pooled, labels, emb)
    c_allowed = np.zeros((n_c, allowed.shape[1]), dtype=bool)
    for c in range(n_c):
        c_allowed[c] = allowed[labels == c].any(axis=0)
    return ClusterSupport(pooled, c_allowed, allowed, labels, tuple(menu))


def plan_embeddings(batch: BatchSet, hidden: int = 64, seed: int = 0) -> np.ndarray:
    """Plan embeddings from a seeded (untrained) plan encoder; used as
    inputs to the gain predictor before any agent exists."""
    from .encoder import StateEncoder, plan_arrays
    from .workload import feature_dim
    cfg = nn.NetConfig(hidden_dim=hidden)
    enc = StateEncoder(nn.ParamStore(seed), cfg, batch.n, feature_dim(), 1)
    with nn.no_grad():
        return enc.encode_plans(plan_arrays([q.plan_root for q in batch.queries])).value.copy()


def build_clustering(batch: BatchSet, corun_log: ExecLog, n_clusters: int, seed: int = 0,
                     embeddings: Optional[np.ndarray] = None) -> tuple:
    """Gains from ``corun_log``, predictions for unobserved pairs, then
    agglomeration. Returns ``(clustering, gain_matrix)``."""
    gains = compute_gains(corun_log, ids=batch.ids)
    if not gains.complete:
        emb = plan_embeddings(batch, seed=seed) if embeddings is None else embeddings
        model = fit_gain_predictor(gains, emb, seed=seed)
        gains = fill_predicted(gains, model, emb)
    return agglomerate(gains, n_clusters), gains
