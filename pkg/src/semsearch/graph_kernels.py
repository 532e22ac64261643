"""Numba kernels for the layered proximity graph.

The graph is stored as flat slabs: node ``i`` owns rows ``offsets[i] + layer``
for layers 0..levels[i] in the ``neigh``/``counts`` arrays, each row holding
up to ``row_cap`` neighbor ids (-1 padded).  All kernels treat similarity as
the inner product of unit-norm float32 vectors and work on negated dots so
that smaller is better.

Insertion is strictly sequential, so a fixed level assignment yields an
identical graph on every run.  Search releases the GIL, which lets the
serving layer answer concurrent requests on one shared index.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NO_NODE = -1


@njit(cache=True, nogil=True, fastmath=True, inline="always")
def _neg_dot(vectors, node, query):
    acc = 0.0
    for k in range(query.shape[0]):
        acc += vectors[node, k] * query[k]
    return -acc


@njit(cache=True, nogil=True, inline="always")
def _heap_push(keys, vals, size, key, val):
    """Min-heap push; caller guarantees capacity."""
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@njit(cache=True, nogil=True, inline="always")
def _heap_pop(keys, vals, size):
    """Min-heap pop; returns the new size, root left in keys[size]/vals[size]."""
    size -= 1
    root_key = keys[0]
    root_val = vals[0]
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        smallest = left
        right = left + 1
        if right < size and keys[right] < keys[left]:
            smallest = right
        if keys[i] <= keys[smallest]:
            break
        keys[i], keys[smallest] = keys[smallest], keys[i]
        vals[i], vals[smallest] = vals[smallest], vals[i]
        i = smallest
    keys[size] = root_key
    vals[size] = root_val
    return size


@njit(cache=True, nogil=True)
def _grow_f8(arr):
    out = np.empty(arr.shape[0] * 2, dtype=np.float64)
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True, nogil=True)
def _grow_i4(arr):
    out = np.empty(arr.shape[0] * 2, dtype=np.int32)
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True, nogil=True)
def _greedy_step(vectors, neigh, counts, offsets, query, start, layer):
    """Walk to the locally closest node on ``layer``; returns (node, neg dot)."""
    cur = start
    cur_d = _neg_dot(vectors, cur, query)
    improved = True
    while improved:
        improved = False
        row = offsets[cur] + layer
        for j in range(counts[row]):
            nb = neigh[row, j]
            d = _neg_dot(vectors, nb, query)
            if d < cur_d:
                cur_d = d
                cur = nb
                improved = True
    return cur, cur_d


@njit(cache=True, nogil=True)
def _search_layer(
    vectors, neigh, counts, offsets, query, eps, n_eps, layer, ef,
    visited, stamp, out_nodes, out_dists,
):
    """Beam search on one layer from ``eps``; fills outputs ascending by dist.

    Returns the number of results (<= ef).  ``out_nodes``/``out_dists`` must
    hold at least ``ef`` entries.
    """
    cand_d = np.empty(ef * 4 + 64, dtype=np.float64)
    cand_n = np.empty(ef * 4 + 64, dtype=np.int32)
    # Result heap keyed by negated distance: the root is the worst kept hit.
    res_d = np.empty(ef + 1, dtype=np.float64)
    res_n = np.empty(ef + 1, dtype=np.int32)
    c_size = 0
    r_size = 0

    for t in range(n_eps):
        e = eps[t]
        if visited[e] == stamp:
            continue
        visited[e] = stamp
        d = _neg_dot(vectors, e, query)
        c_size = _heap_push(cand_d, cand_n, c_size, d, e)
        r_size = _heap_push(res_d, res_n, r_size, -d, e)
        if r_size > ef:
            r_size = _heap_pop(res_d, res_n, r_size)

    while c_size > 0:
        c_size = _heap_pop(cand_d, cand_n, c_size)
        d = cand_d[c_size]
        node = cand_n[c_size]
        if r_size >= ef and d > -res_d[0]:
            break
        row = offsets[node] + layer
        for j in range(counts[row]):
            nb = neigh[row, j]
            if visited[nb] == stamp:
                continue
            visited[nb] = stamp
            dn = _neg_dot(vectors, nb, query)
            if r_size < ef or dn < -res_d[0]:
                if c_size == cand_d.shape[0]:
                    cand_d = _grow_f8(cand_d)
                    cand_n = _grow_i4(cand_n)
                c_size = _heap_push(cand_d, cand_n, c_size, dn, nb)
                r_size = _heap_push(res_d, res_n, r_size, -dn, nb)
                if r_size > ef:
                    r_size = _heap_pop(res_d, res_n, r_size)

    # Drain the result heap: pops come worst-first, write back to front.
    n_out = r_size
    idx = n_out - 1
    while r_size > 0:
        r_size = _heap_pop(res_d, res_n, r_size)
        out_nodes[idx] = res_n[r_size]
        out_dists[idx] = -res_d[r_size]
        idx -= 1
    return n_out


@njit(cache=True, nogil=True)
def _select_neighbors(vectors, cand_nodes, cand_dists, n_cand, cap, backfill, out):
    """Diversity-aware neighbor pick over distance-ascending candidates.

    A candidate is kept only when it is closer to the query than to every
    already-kept neighbor, which spreads edges across directions.  With
    ``backfill`` the remaining slots are topped up with the nearest discarded
    candidates; without it the row shrinks to the diverse subset.  Returns
    the number selected into ``out``.
    """
    kept = np.zeros(n_cand, dtype=np.uint8)
    n_sel = 0
    for idx in range(n_cand):
        if n_sel >= cap:
            break
        e = cand_nodes[idx]
        d_eq = cand_dists[idx]
        ok = True
        for s in range(n_sel):
            d_er = _neg_dot(vectors, e, vectors[out[s]])
            if d_er < d_eq:
                ok = False
                break
        if ok:
            out[n_sel] = e
            kept[idx] = 1
            n_sel += 1
    if backfill and n_sel < cap:
        for idx in range(n_cand):
            if n_sel >= cap:
                break
            if kept[idx] == 0:
                out[n_sel] = cand_nodes[idx]
                n_sel += 1
    return n_sel


@njit(cache=True, nogil=True)
def build_range(
    vectors, levels, offsets, neigh, counts,
    start, stop, entry, max_level, ef_build, degree,
    visited, stamp,
):
    """Insert nodes ``start..stop`` into the graph; returns updated state.

    The caller owns the (entry, max_level, stamp) state between calls so the
    build can be chunked for progress reporting without losing determinism.
    """
    row_cap = neigh.shape[1]
    eps = np.empty(ef_build + 1, dtype=np.int32)
    res_nodes = np.empty(ef_build, dtype=np.int32)
    res_dists = np.empty(ef_build, dtype=np.float64)
    sel = np.empty(row_cap, dtype=np.int32)
    sel2 = np.empty(row_cap, dtype=np.int32)
    re_nodes = np.empty(row_cap + 1, dtype=np.int32)
    re_dists = np.empty(row_cap + 1, dtype=np.float64)

    for i in range(start, stop):
        lvl = levels[i]
        if entry == NO_NODE:
            entry = i
            max_level = lvl
            continue
        query = vectors[i]
        cur = entry
        for layer in range(max_level, lvl, -1):
            cur, _ = _greedy_step(vectors, neigh, counts, offsets, query, cur, layer)
        eps[0] = cur
        n_eps = 1
        top = min(lvl, max_level)
        for layer in range(top, -1, -1):
            stamp += 1
            n_res = _search_layer(
                vectors, neigh, counts, offsets, query, eps, n_eps, layer,
                ef_build, visited, stamp, res_nodes, res_dists,
            )
            # A node links out to at most `degree` diverse neighbors on every
            # layer; layer-0 rows may grow past that (up to `row_cap`) only
            # through backlinks from later inserts.
            n_sel = _select_neighbors(vectors, res_nodes, res_dists, n_res, degree, True, sel)
            row = offsets[i] + layer
            for s in range(n_sel):
                neigh[row, s] = sel[s]
            counts[row] = n_sel

            # Connect back, re-pruning full neighbor rows with the same rule.
            link_cap = row_cap if layer == 0 else degree
            for s in range(n_sel):
                nb = sel[s]
                nrow = offsets[nb] + layer
                if counts[nrow] < link_cap:
                    neigh[nrow, counts[nrow]] = i
                    counts[nrow] += 1
                else:
                    n_re = counts[nrow]
                    base = vectors[nb]
                    for t in range(n_re):
                        re_nodes[t] = neigh[nrow, t]
                        re_dists[t] = _neg_dot(vectors, re_nodes[t], base)
                    re_nodes[n_re] = i
                    re_dists[n_re] = _neg_dot(vectors, i, base)
                    n_re += 1
                    # Insertion sort: tiny n, ascending distance, id tie-break.
                    for a in range(1, n_re):
                        kd = re_dists[a]
                        kn = re_nodes[a]
                        b = a - 1
                        while b >= 0 and (
                            re_dists[b] > kd or (re_dists[b] == kd and re_nodes[b] > kn)
                        ):
                            re_dists[b + 1] = re_dists[b]
                            re_nodes[b + 1] = re_nodes[b]
                            b -= 1
                        re_dists[b + 1] = kd
                        re_nodes[b + 1] = kn
                    n_keep = _select_neighbors(
                        vectors, re_nodes, re_dists, n_re, link_cap, False, sel2
                    )
                    counts[nrow] = n_keep
                    for t in range(n_keep):
                        neigh[nrow, t] = sel2[t]

            for t in range(n_res):
                eps[t] = res_nodes[t]
            n_eps = n_res
        if lvl > max_level:
            entry = i
            max_level = lvl
    return entry, max_level, stamp


@njit(cache=True, nogil=True)
def graph_search(
    vectors, levels, offsets, neigh, counts, entry, max_level,
    query, ef, out_nodes, out_dists,
):
    """Top-level search: greedy descent to layer 0, then one beam search.

    Returns the number of candidates written, ascending by negated dot.
    """
    cur = entry
    for layer in range(max_level, 0, -1):
        cur, _ = _greedy_step(vectors, neigh, counts, offsets, query, cur, layer)
    visited = np.zeros(vectors.shape[0], dtype=np.uint8)
    eps = np.empty(1, dtype=np.int32)
    eps[0] = cur
    return _search_layer(
        vectors, neigh, counts, offsets, query, eps, 1, 0,
        ef, visited, np.uint8(1), out_nodes, out_dists,
    )
