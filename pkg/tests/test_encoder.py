import numpy as np
import pytest

from bqsched import nncore as nn
from bqsched.encoder import StateEncoder, StateSnapshot, node_dim, pad_units, plan_arrays
from bqsched.errors import ShapeError
from bqsched.workload import feature_dim

H, N, C = 16, 5, 2
F = feature_dim()


def _encoder(norm="set", seed=0):
    store = nn.ParamStore(seed)
    enc = StateEncoder(store, nn.NetConfig(hidden_dim=H, norm=norm), N, F, C)
    return store, enc


def _inputs(rng, b=2):
    return rng.normal(size=(N, H)), rng.normal(size=(b, N, F)), rng.normal(size=(b, C, F))


def test_output_shapes(rng):
    _, enc = _encoder()
    out = enc.encode(*_inputs(rng, 3))
    assert out.global_repr.shape == (3, H)
    assert out.query_repr.shape == (3, N, H)
    assert out.attn_global.shape == (3, H) and out.attn_query.shape == (3, N, H)


def test_rejects_wrong_unit_count(rng):
    _, enc = _encoder()
    emb, feats, conc = _inputs(rng)
    with pytest.raises(ShapeError):
        enc.encode(emb, feats[:, :4], conc)


@pytest.mark.parametrize("norm", ["set", "none"])
def test_attention_stack_is_permutation_equivariant(rng, norm):
    _, enc = _encoder(norm)
    emb, feats, conc = _inputs(rng, 1)
    perm = rng.permutation(N)
    a = enc.encode(emb, feats, conc)
    b = enc.encode(emb[perm], feats[:, perm], conc)
    np.testing.assert_allclose(b.attn_query.value, a.attn_query.value[:, perm], atol=1e-10)
    np.testing.assert_allclose(b.attn_global.value, a.attn_global.value, atol=1e-10)


def test_batched_encoding_matches_single(rng):
    _, enc = _encoder()
    emb, feats, conc = _inputs(rng, 3)
    full = enc.encode(emb, feats, conc).query_repr.value
    for i in range(3):
        snap = StateSnapshot(feats[i], conc[i], np.zeros(N, bool), np.zeros(N, bool))
        np.testing.assert_allclose(enc.encode_state(snap, emb).query_repr.value[0], full[i], atol=1e-12)


def test_snapshot_rejects_overlap():
    flags = np.array([True, False])
    with pytest.raises(ShapeError):
        StateSnapshot(np.zeros((2, F)), np.zeros((C, F)), flags, flags)


def test_plan_arrays_padding(planted20):
    plans = [q.plan_root for q in planted20.queries[:4]]
    arr = plan_arrays(plans)
    sizes = [len(list(p.walk())) for p in plans]
    assert arr.feats.shape == (4, max(sizes), node_dim())
    assert arr.valid.sum(axis=1).tolist() == sizes
    assert np.all(arr.feats[~arr.valid] == 0)


def test_plan_embedding_ignores_padding(planted20):
    _, enc = _encoder()
    plans = [q.plan_root for q in planted20.queries[:4]]
    with nn.no_grad():
        together = enc.encode_plans(plan_arrays(plans)).value
    for i, p in enumerate(plans):
        np.testing.assert_allclose(enc.encode_plan(p), together[i], atol=1e-10)


def test_gradients_reach_every_encoder_parameter(planted20, rng):
    store, enc = _encoder()
    plans = [q.plan_root for q in planted20.queries[:N]]
    _, feats, conc = _inputs(rng)

    def loss():
        emb = enc.encode_plans(plan_arrays(plans))
        out = enc.encode(emb, feats, conc)
        return nn.add(nn.tsum(nn.tanh(out.query_repr)), nn.tsum(nn.tanh(out.global_repr)))

    store.zero_grad()
    loss().backward()
    pick = np.random.default_rng(0)
    bad = []
    with nn.no_grad():
        for name, p in store.items():
            flat = p.value.reshape(-1)
            for c in pick.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[c]
                flat[c] = old + 1e-5
                up = loss().item()
                flat[c] = old - 1e-5
                down = loss().item()
                flat[c] = old
                # biases feeding a set norm have an exactly zero gradient, so compare with an absolute floor
                if not np.isclose(p.grad.reshape(-1)[c], (up - down) / 2e-5, rtol=1e-4, atol=1e-7):
                    bad.append(name)
    assert not bad


def test_pad_units():
    x = np.arange(6.0).reshape(3, 2)
    assert pad_units(x, 5).shape == (5, 2) and pad_units(x, 5)[3:].sum() == 0
    np.testing.assert_array_equal(pad_units(x, 2), x[:2])


def _plan(table):
    from bqsched.workload import PlanNode
    return PlanNode("join", children=(PlanNode("scan", frozenset({1})), PlanNode("scan", frozenset({table}))))


def test_plan_embedding_sensitive_to_tables_and_deterministic():
    _, enc = _encoder()
    a, b = enc.encode_plan(_plan(2)), enc.encode_plan(_plan(3))
    assert np.abs(a - b).max() > 1e-6
    np.testing.assert_array_equal(enc.encode_plan(_plan(2)), a)


def test_single_node_plan_embedding_is_finite():
    from bqsched.workload import PlanNode
    _, enc = _encoder()
    assert np.all(np.isfinite(enc.encode_plan(PlanNode("scan", frozenset({0})))))


def test_single_query_repr_zero_inputs():
    store, enc = _encoder()
    assert np.all(enc.single_query_repr(np.zeros((1, H)), np.zeros((1, F))).value == 0.0)


def test_single_query_with_idle_connections_is_finite():
    store = nn.ParamStore(0)
    enc = StateEncoder(store, nn.NetConfig(hidden_dim=H), 1, F, C)
    snap = StateSnapshot(np.zeros((1, F)), np.zeros((C, F)), np.ones(1, bool), np.zeros(1, bool))
    out = enc.encode_state(snap, np.zeros((1, H)))
    assert np.all(np.isfinite(out.global_repr.value)) and np.all(np.isfinite(out.query_repr.value))
