"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public wrappers dispatch on :func:`ambientflow._accel.backend`; the
``*_numba`` / ``*_numpy`` variants are exported for benchmarking and for
cross-checking one against the other.
"""
from __future__ import annotations

import numpy as np

from ._accel import backend, njit

# -- linear assignment (shortest augmenting path, Jonker-Volgenant style) ----


@njit
def _lsap_numba(cost):
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = -np.ones(n, dtype=np.int64)
    row4col = -np.ones(n, dtype=np.int64)
    shortest = np.empty(n)
    path = np.empty(n, dtype=np.int64)
    sr = np.zeros(n, dtype=np.bool_)
    sc = np.zeros(n, dtype=np.bool_)
    for cur in range(n):
        shortest[:] = np.inf
        path[:] = -1
        sr[:] = False
        sc[:] = False
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            lowest = np.inf
            idx = -1
            for j in range(n):
                if sc[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    idx = j
            min_val = lowest
            if idx == -1 or not np.isfinite(min_val):
                return col4row, False
            sc[idx] = True
            if row4col[idx] == -1:
                sink = idx
            else:
                i = row4col[idx]
        u[cur] += min_val
        for r_ in range(n):
            if sr[r_] and r_ != cur:
                u[r_] += min_val - shortest[col4row[r_]]
        for c in range(n):
            if sc[c]:
                v[c] -= min_val - shortest[c]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row, True


def _lsap_numpy(cost):
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = -np.ones(n, dtype=np.int64)
    row4col = -np.ones(n, dtype=np.int64)
    for cur in range(n):
        shortest = np.full(n, np.inf)
        path = -np.ones(n, dtype=np.int64)
        sr = np.zeros(n, dtype=bool)
        sc = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            free = np.flatnonzero(~sc)
            r = min_val + cost[i, free] - u[i] - v[free]
            better = r < shortest[free]
            upd = free[better]
            shortest[upd] = r[better]
            path[upd] = i
            vals = shortest[free]
            lowest = vals.min()
            if not np.isfinite(lowest):
                return col4row, False
            ties = free[vals == lowest]
            unassigned = ties[row4col[ties] == -1]
            idx = int(unassigned[0] if unassigned.size else ties[0])
            min_val = lowest
            sc[idx] = True
            if row4col[idx] == -1:
                sink = idx
            else:
                i = int(row4col[idx])
        u[cur] += min_val
        rows = np.flatnonzero(sr)
        rows = rows[rows != cur]
        u[rows] += min_val - shortest[col4row[rows]]
        v[sc] -= min_val - shortest[sc]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, True


def linear_assignment(cost, impl: str | None = None) -> np.ndarray:
    """Column index assigned to each row of a square cost matrix (exact minimum)."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    fn = _lsap_numba if (impl or backend()) == "numba" else _lsap_numpy
    cols, ok = fn(cost)
    if not ok:
        raise ValueError("cost matrix is infeasible (non-finite entries)")
    return np.asarray(cols)


# -- top-k hard thresholding -----------------------------------------------


@njit
def _topk_mask_numba(c, k):
    b, l = c.shape
    out = np.zeros((b, l), dtype=np.bool_)
    for r in range(b):
        order = np.argsort(-np.abs(c[r]), kind="mergesort")
        for t in range(k):
            out[r, order[t]] = True
    return out


def _topk_mask_numpy(c, k):
    order = np.argsort(-np.abs(c), axis=1, kind="stable")[:, :k]
    out = np.zeros(c.shape, dtype=bool)
    np.put_along_axis(out, order, True, axis=1)
    return out


def topk_mask(c, k: int, impl: str | None = None) -> np.ndarray:
    """Boolean mask of the ``k`` largest-magnitude entries per row.

    Ties go to the lowest index, so the mask is a deterministic function of
    ``c``.
    """
    c = np.asarray(c, dtype=np.float64)
    flat = np.ascontiguousarray(c.reshape(-1, c.shape[-1]))
    k = min(int(k), flat.shape[1])
    fn = _topk_mask_numba if (impl or backend()) == "numba" else _topk_mask_numpy
    return fn(flat, k).reshape(c.shape)


# -- restricted eigenvalue extremes over support subspaces -----------------


@njit
def _restricted_extremes_numba(bases, gram):
    s = bases.shape[0]
    lo = np.empty(s)
    hi = np.empty(s)
    for t in range(s):
        q = np.ascontiguousarray(bases[t])
        m = q.T @ gram @ q
        m = 0.5 * (m + m.T)
        ev = np.linalg.eigvalsh(m)
        lo[t] = ev[0]
        hi[t] = ev[-1]
    return lo, hi


def _restricted_extremes_numpy(bases, gram):
    m = np.einsum("sni,nm,smj->sij", bases, gram, bases, optimize=True)
    m = 0.5 * (m + np.swapaxes(m, 1, 2))
    ev = np.linalg.eigvalsh(m)
    return ev[:, 0].copy(), ev[:, -1].copy()


def restricted_extremes(bases, gram, impl: str | None = None):
    """Min/max eigenvalue of ``Q_t^T gram Q_t`` for each orthonormal basis ``Q_t``."""
    bases = np.ascontiguousarray(bases, dtype=np.float64)
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    fn = _restricted_extremes_numba if (impl or backend()) == "numba" else _restricted_extremes_numpy
    return fn(bases, gram)


# -- nearest point in a union of subspaces ---------------------------------


@njit
def _union_projection_numba(x, bases):
    nx, n = x.shape
    s, _, d = bases.shape
    best = np.full(nx, np.inf)
    arg = np.zeros(nx, dtype=np.int64)
    out = np.zeros((nx, n))
    for p in range(nx):
        for t in range(s):
            q = bases[t]
            coef = q.T @ x[p]
            proj = q @ coef
            r = 0.0
            for i in range(n):
                diff = x[p, i] - proj[i]
                r += diff * diff
            if r < best[p]:
                best[p] = r
                arg[p] = t
                out[p] = proj
    return out, arg


def _union_projection_numpy(x, bases):
    coef = np.einsum("snd,pn->psd", bases, x)
    proj = np.einsum("snd,psd->psn", bases, coef)
    res = ((x[:, None, :] - proj) ** 2).sum(axis=2)
    arg = np.argmin(res, axis=1)
    return proj[np.arange(x.shape[0]), arg], arg


def union_projection(x, bases, impl: str | None = None):
    """Nearest point of each row of ``x`` in the union of ``span(bases[t])``.

    Returns ``(projections, winning_subspace_index)``; ties keep the first
    subspace in enumeration order.
    """
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    bases = np.ascontiguousarray(bases, dtype=np.float64)
    fn = _union_projection_numba if (impl or backend()) == "numba" else _union_projection_numpy
    return fn(x, bases)


# -- one-pass moments ------------------------------------------------------


@njit
def _welford_numba(samples):
    n = samples.shape[0]
    mean = np.zeros(samples.shape[1])
    m2 = np.zeros(samples.shape[1])
    for i in range(n):
        delta = samples[i] - mean
        mean += delta / (i + 1)
        m2 += delta * (samples[i] - mean)
    return mean, m2


def _welford_numpy(samples):
    mean = np.zeros(samples.shape[1])
    m2 = np.zeros(samples.shape[1])
    for i, row in enumerate(samples):
        delta = row - mean
        mean += delta / (i + 1)
        m2 += delta * (row - mean)
    return mean, m2


def streaming_moments(samples, impl: str | None = None):
    """Welford one-pass mean and (N-1)-denominator std over axis 0."""
    samples = np.asarray(samples, dtype=np.float64)
    shape = samples.shape[1:]
    flat = np.ascontiguousarray(samples.reshape(samples.shape[0], -1))
    fn = _welford_numba if (impl or backend()) == "numba" else _welford_numpy
    mean, m2 = fn(flat)
    n = flat.shape[0]
    std = np.sqrt(m2 / (n - 1)) if n > 1 else np.zeros_like(mean)
    return mean.reshape(shape), std.reshape(shape)
