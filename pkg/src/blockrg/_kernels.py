"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The two genuinely loop-heavy reductions in this package are (a) tensor-grid
partition sums over per-site atom measures and (b) pairwise periodic sup
distances.  Both carry an @njit implementation and a vectorized numpy one.
Selection: set BLOCKRG_NUMBA=0 to force numpy; by default numba is used when
importable.  Everything else in the package is BLAS-bound dense algebra or
set combinatorics, which numba does not help.
"""

from __future__ import annotations

import os

import numpy as np

_ENV = os.environ.get("BLOCKRG_NUMBA", "1")
_njit = None
if _ENV != "0":
    try:
        from numba import njit as _njit  # type: ignore
    except Exception:
        _njit = None

BACKEND = "numba" if _njit is not None else "numpy"

# Guard for the dense numpy tensor path (and for total work in either path).
GRID_POINT_CAP = 50_000_000


class GridCapExceeded(RuntimeError):
    """Raised when a tensor-grid reduction would exceed GRID_POINT_CAP points."""


# ===== pairwise periodic sup distance =====


def pairwise_torus_supdist_numpy(coords_a, coords_b, n_side):
    a = np.asarray(coords_a, dtype=np.int64)
    b = np.asarray(coords_b, dtype=np.int64)
    d = np.abs(a[:, None, :] - b[None, :, :])
    d = np.minimum(d, n_side - d)
    return d.max(axis=2).astype(np.float64)


def _pairwise_loop(a, b, n_side, out):
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            best = 0.0
            for mu in range(a.shape[1]):
                d = a[i, mu] - b[j, mu]
                if d < 0:
                    d = -d
                if n_side - d < d:
                    d = n_side - d
                if d > best:
                    best = d
            out[i, j] = best
    return out


if _njit is not None:
    _pairwise_loop_jit = _njit(cache=True)(_pairwise_loop)


def pairwise_torus_supdist_numba(coords_a, coords_b, n_side):
    if _njit is None:
        raise RuntimeError("numba backend unavailable")
    a = np.ascontiguousarray(coords_a, dtype=np.int64)
    b = np.ascontiguousarray(coords_b, dtype=np.int64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    return _pairwise_loop_jit(a, b, n_side, out)


def pairwise_torus_supdist(coords_a, coords_b, n_side):
    """Pairwise periodic sup distances between integer coordinate lists (site units)."""
    if BACKEND == "numba":
        return pairwise_torus_supdist_numba(coords_a, coords_b, n_side)
    return pairwise_torus_supdist_numpy(coords_a, coords_b, n_side)


# ===== tensor-grid partition sums =====
#
# Input model: n sites, site i carrying radix r_i atoms with weights w_i[a].
# Terms are (site_ids, table) pairs where table has shape tuple(r[site_ids])
# in the listed site order.  The reduction returns
#     sum over atom configs  prod_i w_i[a_i] * exp( sum_t table_t[config|t] ).


def _pack_terms(radices, terms):
    radices = np.asarray(radices, dtype=np.int64)
    n = radices.size
    site_ids = []
    site_off = [0]
    tabs = []
    tab_off = [0]
    for ids, tab in terms:
        ids = list(int(i) for i in ids)
        tab = np.asarray(tab, dtype=np.float64)
        if tab.shape != tuple(int(radices[i]) for i in ids):
            raise ValueError("term table shape does not match site radices")
        if len(set(ids)) != len(ids):
            raise ValueError("term site list has repeats")
        if any(i < 0 or i >= n for i in ids):
            raise ValueError("term site out of range")
        site_ids.extend(ids)
        site_off.append(len(site_ids))
        tabs.append(tab.reshape(-1))
        tab_off.append(tab_off[-1] + tab.size)
    flat_tabs = np.concatenate(tabs) if tabs else np.zeros(0)
    return (
        radices,
        np.asarray(site_ids, dtype=np.int64),
        np.asarray(site_off, dtype=np.int64),
        flat_tabs,
        np.asarray(tab_off, dtype=np.int64),
    )


def tensor_partition_numpy(radices, site_weights, terms):
    radices = [int(r) for r in radices]
    n = len(radices)
    total = 1
    for r in radices:
        total *= r
    if total > GRID_POINT_CAP:
        raise GridCapExceeded(f"{total} grid points exceed cap {GRID_POINT_CAP}")
    energy = np.zeros(tuple(radices))
    for ids, tab in terms:
        tab = np.asarray(tab, dtype=np.float64)
        order = np.argsort(ids)
        tab_sorted = np.transpose(tab, axes=tuple(order))
        shape = [1] * n
        for pos in order:
            shape[ids[pos]] = radices[ids[pos]]
        energy = energy + tab_sorted.reshape(shape)
    out = np.exp(energy)
    for i in range(n):
        w = np.asarray(site_weights[i], dtype=np.float64)
        shape = [1] * n
        shape[i] = radices[i]
        out = out * w.reshape(shape)
    return float(out.sum())


def _tensor_loop(radices, wflat, woff, site_ids, site_off, tabs, tab_off):
    n = radices.size
    nterms = site_off.size - 1
    total = 1
    for i in range(n):
        total *= radices[i]
    cfg = np.zeros(n, dtype=np.int64)
    acc = 0.0
    for _ in range(total):
        wprod = 1.0
        for i in range(n):
            wprod *= wflat[woff[i] + cfg[i]]
        e = 0.0
        for t in range(nterms):
            idx = 0
            for p in range(site_off[t], site_off[t + 1]):
                s = site_ids[p]
                idx = idx * radices[s] + cfg[s]
            e += tabs[tab_off[t] + idx]
        acc += wprod * np.exp(e)
        # mixed-radix increment, last site fastest
        for i in range(n - 1, -1, -1):
            cfg[i] += 1
            if cfg[i] < radices[i]:
                break
            cfg[i] = 0
    return acc


if _njit is not None:
    _tensor_loop_jit = _njit(cache=True)(_tensor_loop)


def _pack_weights(radices, site_weights):
    woff = [0]
    ws = []
    for i, r in enumerate(radices):
        w = np.asarray(site_weights[i], dtype=np.float64).reshape(-1)
        if w.size != r:
            raise ValueError("weight count does not match radix")
        ws.append(w)
        woff.append(woff[-1] + w.size)
    return np.concatenate(ws) if ws else np.zeros(0), np.asarray(woff, dtype=np.int64)


def tensor_partition_numba(radices, site_weights, terms):
    if _njit is None:
        raise RuntimeError("numba backend unavailable")
    radices_a, site_ids, site_off, tabs, tab_off = _pack_terms(radices, terms)
    total = 1
    for r in radices_a:
        total *= int(r)
    if total > GRID_POINT_CAP:
        raise GridCapExceeded(f"{total} grid points exceed cap {GRID_POINT_CAP}")
    wflat, woff = _pack_weights(radices_a, site_weights)
    return float(_tensor_loop_jit(radices_a, wflat, woff, site_ids, site_off, tabs, tab_off))


def tensor_partition(radices, site_weights, terms):
    """Weighted tensor-grid sum of exp(sum of local tables).

    radices: per-site atom counts; site_weights: per-site weight arrays;
    terms: list of (site_id_list, table) with table shaped to the listed
    sites' radices.  Returns sum_configs prod(weights) * exp(sum tables).
    """
    if BACKEND == "numba":
        return tensor_partition_numba(radices, site_weights, terms)
    return tensor_partition_numpy(radices, site_weights, terms)
