"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public wrappers dispatch on :data:`bqsched._jit.USE_NUMBA`. Both paths
perform the same floating-point operations in the same order so results are
bit-identical; ``tests/test_kernels.py`` checks that.
"""
import numpy as np

from ._jit import USE_NUMBA, njit

# --------------------------------------------------------------------------
# environment rate step
# --------------------------------------------------------------------------


@njit(cache=True)
def _rate_step_nb(rem_cpu, rem_io, workers, alpha, running, ids, cpu_cap, io_cap):
    n = rem_cpu.shape[0]
    total_workers = 0.0
    n_running = 0
    for i in range(n):
        if running[i]:
            total_workers += workers[i]
            n_running += 1
    cpu_share = min(1.0, cpu_cap / total_workers)
    io_rate = min(1.0, io_cap / n_running)
    cpu_rate = np.zeros(n)
    best = -1
    best_h = np.inf
    for i in range(n):
        if not running[i]:
            continue
        speedup = 1.0 / ((1.0 - alpha[i]) + alpha[i] / workers[i])
        cpu_rate[i] = speedup * cpu_share
        h = max(rem_cpu[i] / cpu_rate[i], rem_io[i] / io_rate)
        if h < best_h or (h == best_h and ids[i] < ids[best]):
            best_h = h
            best = i
    for i in range(n):
        if not running[i]:
            continue
        if i == best:
            rem_cpu[i] = 0.0
            rem_io[i] = 0.0
        else:
            rem_cpu[i] = max(0.0, rem_cpu[i] - best_h * cpu_rate[i])
            rem_io[i] = max(0.0, rem_io[i] - best_h * io_rate)
    return best, best_h


def _rate_step_np(rem_cpu, rem_io, workers, alpha, running, ids, cpu_cap, io_cap):
    idx = np.flatnonzero(running)
    total_workers = 0.0
    for w in workers[idx]:
        total_workers += w
    cpu_share = min(1.0, cpu_cap / total_workers)
    io_rate = min(1.0, io_cap / idx.size)
    a = alpha[idx]
    cpu_rate = (1.0 / ((1.0 - a) + a / workers[idx])) * cpu_share
    h = np.maximum(rem_cpu[idx] / cpu_rate, rem_io[idx] / io_rate)
    best_h = h.min()
    tied = idx[h == best_h]
    best = int(tied[np.argmin(ids[tied])])
    rem_cpu[idx] = np.maximum(0.0, rem_cpu[idx] - best_h * cpu_rate)
    rem_io[idx] = np.maximum(0.0, rem_io[idx] - best_h * io_rate)
    rem_cpu[best] = 0.0
    rem_io[best] = 0.0
    return best, float(best_h)


def rate_step(rem_cpu, rem_io, workers, alpha, running, ids, cpu_cap, io_cap):
    """Advance every running query to the next completion, in place.

    Returns ``(index_of_finisher, elapsed_seconds)``. ``workers`` and
    ``alpha`` are float arrays, ``running`` a boolean mask with at least one
    set entry.
    """
    fn = _rate_step_nb if USE_NUMBA else _rate_step_np
    best, dt = fn(rem_cpu, rem_io, workers, alpha, running, ids, float(cpu_cap), float(io_cap))
    return int(best), float(dt)


# --------------------------------------------------------------------------
# pairwise scheduling gain accumulation
# --------------------------------------------------------------------------


@njit(cache=True)
def _gain_accumulate_nb(qidx, start, finish, tbar, sums, counts):
    m = qidx.shape[0]
    for u in range(m):
        for v in range(u + 1, m):
            ov = min(finish[u], finish[v]) - max(start[u], start[v])
            if ov <= 0.0:
                continue
            i = qidx[u]
            j = qidx[v]
            ti = finish[u] - start[u]
            tj = finish[v] - start[v]
            ri = np.sqrt(tbar[i])
            rj = np.sqrt(tbar[j])
            term = ((ov / ti) * (1.0 - ti / tbar[i]) * ri + (ov / tj) * (1.0 - tj / tbar[j]) * rj) / (ri + rj)
            sums[i, j] += term
            sums[j, i] += term
            counts[i, j] += 1
            counts[j, i] += 1


def _gain_accumulate_np(qidx, start, finish, tbar, sums, counts):
    m = qidx.shape[0]
    if m < 2:
        return
    u, v = np.triu_indices(m, k=1)
    ov = np.minimum(finish[u], finish[v]) - np.maximum(start[u], start[v])
    keep = ov > 0.0
    u, v, ov = u[keep], v[keep], ov[keep]
    i, j = qidx[u], qidx[v]
    ti = finish[u] - start[u]
    tj = finish[v] - start[v]
    ri = np.sqrt(tbar[i])
    rj = np.sqrt(tbar[j])
    term = ((ov / ti) * (1.0 - ti / tbar[i]) * ri + (ov / tj) * (1.0 - tj / tbar[j]) * rj) / (ri + rj)
    # a pair occurs at most once per round, so fancy-index accumulation is safe
    sums[i, j] += term
    sums[j, i] += term
    counts[i, j] += 1
    counts[j, i] += 1


def gain_accumulate(qidx, start, finish, tbar, sums, counts):
    """Add one round's pairwise gain terms into ``sums``/``counts`` (in place).

    ``qidx`` maps each round entry to a row of the n x n accumulators.
    """
    fn = _gain_accumulate_nb if USE_NUMBA else _gain_accumulate_np
    fn(np.ascontiguousarray(qidx, dtype=np.int64), np.asarray(start, dtype=np.float64),
       np.asarray(finish, dtype=np.float64), tbar, sums, counts)


# --------------------------------------------------------------------------
# average-linkage agglomeration on a similarity matrix
# --------------------------------------------------------------------------


@njit(cache=True)
def _average_linkage_nb(sim, n_clusters):
    n = sim.shape[0]
    s = sim.copy()
    size = np.ones(n)
    active = np.ones(n, dtype=np.bool_)
    steps = n - n_clusters
    merges_a = np.empty(steps, dtype=np.int64)
    merges_b = np.empty(steps, dtype=np.int64)
    merges_v = np.empty(steps)
    for step in range(steps):
        best_a = -1
        best_b = -1
        best_v = -np.inf
        for a in range(n):
            if not active[a]:
                continue
            for b in range(a + 1, n):
                if not active[b]:
                    continue
                val = s[a, b] / (size[a] * size[b])
                if val > best_v:
                    best_v = val
                    best_a = a
                    best_b = b
        for k in range(n):
            s[best_a, k] += s[best_b, k]
        for k in range(n):
            s[k, best_a] += s[k, best_b]
        size[best_a] += size[best_b]
        active[best_b] = False
        merges_a[step] = best_a
        merges_b[step] = best_b
        merges_v[step] = best_v
    return merges_a, merges_b, merges_v


def _average_linkage_np(sim, n_clusters):
    n = sim.shape[0]
    s = sim.copy()
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    steps = n - n_clusters
    merges_a = np.empty(steps, dtype=np.int64)
    merges_b = np.empty(steps, dtype=np.int64)
    merges_v = np.empty(steps)
    for step in range(steps):
        avg = s / np.outer(size, size)
        valid = upper & active[:, None] & active[None, :]
        avg = np.where(valid, avg, -np.inf)
        flat = int(np.argmax(avg))  # row-major first max = lexicographic tie rule
        a, b = divmod(flat, n)
        best_v = avg[a, b]
        s[a, :] += s[b, :]
        s[:, a] += s[:, b]
        size[a] += size[b]
        active[b] = False
        merges_a[step], merges_b[step], merges_v[step] = a, b, best_v
    return merges_a, merges_b, merges_v


def average_linkage(sim, n_clusters):
    """Greedy average-linkage merges on a similarity matrix.

    Clusters are identified by their smallest original index; a merge of
    ``a < b`` keeps ``a``. Returns arrays ``(a, b, average_similarity)`` with
    one row per merge, ``n - n_clusters`` rows in total.
    """
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    fn = _average_linkage_nb if USE_NUMBA else _average_linkage_np
    return fn(sim, int(n_clusters))
