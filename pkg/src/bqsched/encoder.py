"""Shared state representation: plan embeddings, single-query
representations, the attention stack with a learnable super query, and the
global / per-query final representations."""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import nncore as nn
from .errors import ShapeError
from .workload import NUM_TABLES, OPERATORS, PlanNode

MAX_PLAN_DEPTH = 16


@dataclass
class StateSnapshot:
    """Observation at one decision instant.

    ``features`` holds one running-state vector per unit (query or cluster)
    in batch order; ``concurrent`` holds one row per connection slot, zero
    when the slot is idle.
    """

    features: np.ndarray
    concurrent: np.ndarray
    pending: np.ndarray
    running: np.ndarray
    clock: float = 0.0

    def __post_init__(self):
        if np.any(self.pending & self.running):
            raise ShapeError("a unit cannot be pending and running at once")


@dataclass
class EncodedState:
    global_repr: nn.Tensor        # x''_s, (B, H)
    query_repr: nn.Tensor         # x''_i, (B, n, H)
    attn_global: nn.Tensor        # x'_s, (B, H)
    attn_query: nn.Tensor         # x'_i, (B, n, H)


@dataclass
class PlanArrays:
    feats: np.ndarray   # (N, L, node_dim)
    depth: np.ndarray   # (N, L) int
    valid: np.ndarray   # (N, L) bool


def node_dim(num_tables=NUM_TABLES) -> int:
    return len(OPERATORS) + num_tables + 1


def plan_arrays(plans, num_tables=NUM_TABLES) -> PlanArrays:
    """Pad a list of plan trees into dense node-feature arrays."""
    walks = [list(p.walk()) for p in plans]
    length = max(len(w) for w in walks)
    nd = node_dim(num_tables)
    feats = np.zeros((len(plans), length, nd))
    depth = np.zeros((len(plans), length), dtype=np.int64)
    valid = np.zeros((len(plans), length), dtype=bool)
    for i, walk in enumerate(walks):
        for j, (node, d) in enumerate(walk):
            feats[i, j, OPERATORS.index(node.operator_kind)] = 1.0
            for t in node.table_ids:
                feats[i, j, len(OPERATORS) + t] = 1.0
            feats[i, j, -1] = node.selectivity
            depth[i, j] = min(d, MAX_PLAN_DEPTH - 1)
            valid[i, j] = True
    return PlanArrays(feats, depth, valid)


class StateEncoder:
    """Parameters live in a shared :class:`ParamStore` under ``prefix``."""

    def __init__(self, params: nn.ParamStore, cfg: nn.NetConfig, n_units: int, feat_dim: int,
                 num_connections: int, num_tables: int = NUM_TABLES, prefix: str = "enc"):
        self.params = params
        self.cfg = cfg
        self.n = n_units
        self.fdim = feat_dim
        self.C = num_connections
        self.num_tables = num_tables
        self.p = prefix
        h = cfg.hidden_dim
        p = prefix
        params.glorot(f"{p}.plan.node.w", node_dim(num_tables), h)
        params.zeros(f"{p}.plan.node.b", (h,))
        params.glorot(f"{p}.plan.depth", MAX_PLAN_DEPTH, h, shape=(MAX_PLAN_DEPTH, h))
        params.glorot(f"{p}.plan.super", 1, h, shape=(h,))
        params.add_attention(f"{p}.plan.att", h)
        params.add_mlp(f"{p}.plan.ff", h, h, h, 2)
        params.add_mlp(f"{p}.single", h + feat_dim, h, h, cfg.depth_query)
        params.glorot(f"{p}.super", 1, h, shape=(h,))
        for layer in range(cfg.attn_layers):
            params.add_attention(f"{p}.layer{layer}.att", h)
            params.add_mlp(f"{p}.layer{layer}.ff", h, h, h, 2)
            for k in (1, 2):
                params.ones(f"{p}.layer{layer}.norm{k}.gain", (h,))
                params.zeros(f"{p}.layer{layer}.norm{k}.bias", (h,))
        params.add_mlp(f"{p}.global", h + n_units * feat_dim, h, h, cfg.depth_global)
        params.add_mlp(f"{p}.final", 2 * h + num_connections * feat_dim, h, h, cfg.depth_final)

    def __getitem__(self, name):
        return self.params[f"{self.p}.{name}"]

    # plans -----------------------------------------------------------------
    def encode_plans(self, arrays: PlanArrays) -> nn.Tensor:
        """Super-node output per plan, shape (N, H)."""
        P = self.params
        p = self.p
        h = self.cfg.hidden_dim
        x = nn.tanh(nn.linear(arrays.feats, P[f"{p}.plan.node.w"], P[f"{p}.plan.node.b"]))
        x = nn.add(x, nn.index(P[f"{p}.plan.depth"], arrays.depth))
        count = arrays.feats.shape[0]
        sup = nn.broadcast_to(nn.reshape(P[f"{p}.plan.super"], (1, 1, h)), (count, 1, h))
        x = nn.concat([sup, x], axis=1)
        mask = np.concatenate([np.ones((count, 1), dtype=bool), arrays.valid], axis=1)
        x = nn.add(x, nn.multi_head_attention(x, P, f"{p}.plan.att", self.cfg.attn_heads, key_mask=mask))
        x = nn.add(x, nn.mlp(x, P, f"{p}.plan.ff", 2, head=True))
        return nn.index(x, (slice(None), 0))

    def encode_plan(self, plan_root: PlanNode) -> np.ndarray:
        with nn.no_grad():
            return self.encode_plans(plan_arrays([plan_root], self.num_tables)).value[0].copy()

    # states ----------------------------------------------------------------
    def single_query_repr(self, emb, feats) -> nn.Tensor:
        """x_i from the plan embedding and running-state features."""
        emb, feats = nn.as_tensor(emb), nn.as_tensor(feats)
        if emb.shape[:-1] != feats.shape[:-1]:
            emb = nn.broadcast_to(emb, feats.shape[:-1] + (emb.shape[-1],))
        return nn.mlp(nn.concat([emb, feats], axis=-1), self.params, f"{self.p}.single",
                      self.cfg.depth_query)

    def _norm(self, x, layer, k):
        if self.cfg.norm == "none":
            return x
        return nn.set_norm(x, self[f"layer{layer}.norm{k}.gain"], self[f"layer{layer}.norm{k}.bias"])

    def encode(self, emb, feats: np.ndarray, concurrent: np.ndarray) -> EncodedState:
        """Batched encoding.

        ``emb`` (n, H) unit embeddings, ``feats`` (B, n, f), ``concurrent``
        (B, C, f). Returns representations with a leading batch axis.
        """
        feats = np.asarray(feats, dtype=np.float64)
        bsz, n, fdim = feats.shape
        if n != self.n or fdim != self.fdim:
            raise ShapeError(f"expected (B, {self.n}, {self.fdim}) features, got {feats.shape}")
        h = self.cfg.hidden_dim
        x = self.single_query_repr(nn.broadcast_to(emb, (bsz, n, h)), feats)
        sup = nn.broadcast_to(nn.reshape(self["super"], (1, 1, h)), (bsz, 1, h))
        x = nn.concat([x, sup], axis=1)
        for layer in range(self.cfg.attn_layers):
            x = self._norm(nn.add(x, nn.multi_head_attention(x, self.params, f"{self.p}.layer{layer}.att",
                                                             self.cfg.attn_heads)), layer, 1)
            x = self._norm(nn.add(x, nn.mlp(x, self.params, f"{self.p}.layer{layer}.ff", 2, head=True)),
                           layer, 2)
        xq = nn.index(x, (slice(None), slice(0, n)))
        xs = nn.index(x, (slice(None), n))
        g_in = nn.concat([xs, feats.reshape(bsz, n * fdim)], axis=-1)
        xs2 = nn.mlp(g_in, self.params, f"{self.p}.global", self.cfg.depth_global)
        conc = np.asarray(concurrent, dtype=np.float64).reshape(bsz, 1, self.C * fdim)
        q_in = nn.concat([xq, nn.broadcast_to(nn.reshape(xs, (bsz, 1, h)), (bsz, n, h)),
                          np.broadcast_to(conc, (bsz, n, self.C * fdim))], axis=-1)
        xq2 = nn.mlp(q_in, self.params, f"{self.p}.final", self.cfg.depth_final)
        return EncodedState(xs2, xq2, xs, xq)

    def encode_state(self, snap: StateSnapshot, emb) -> EncodedState:
        return self.encode(emb, snap.features[None], snap.concurrent[None])


def pad_units(feats: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad or truncate the unit axis to ``n`` (cross-size transfer)."""
    out = np.zeros((n,) + feats.shape[1:])
    k = min(n, feats.shape[0])
    out[:k] = feats[:k]
    return out
