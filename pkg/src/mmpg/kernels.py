"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time: numba is used when it imports
cleanly and ``MMPG_USE_NUMBA`` is not set to ``0``. Both paths are always
importable as ``<name>_numpy`` / ``<name>_numba`` so tests and the benchmark
can compare them directly.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MMPG_USE_NUMBA", "1") != "0"

EPS = 1e-12
N_SEQ_BUCKETS = 12
N_RBF = 16
RBF_MAX = 16.0
EDGE_DIM = N_SEQ_BUCKETS + 3 + N_RBF
RBF_CENTERS = np.linspace(0.0, RBF_MAX, N_RBF)
RBF_WIDTH = RBF_MAX / (N_RBF - 1)


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------- pair geometry


def pair_geometry_numpy(origins, bases, ii, jj):
    """6-D descriptors for residue pairs (ii[p], jj[p]).

    Returns ``(desc, degenerate)`` where ``desc`` is (P, 6) holding
    r, θi, φi, θj, φj, ω and ``degenerate`` flags pairs whose ω is undefined
    (ω is then reported as 0). Coincident origins give r == 0.
    """
    d = origins[jj] - origins[ii]
    r = np.sqrt(np.einsum("pa,pa->p", d, d))
    safe = np.where(r > 0.0, r, 1.0)
    u = d / safe[:, None]
    li = np.einsum("pab,pb->pa", bases[ii], u)
    lj = -np.einsum("pab,pb->pa", bases[jj], u)
    out = np.empty((len(ii), 6))
    out[:, 0] = r
    out[:, 1] = np.arctan2(np.sqrt(li[:, 0] ** 2 + li[:, 1] ** 2), li[:, 2])
    out[:, 2] = np.arctan2(li[:, 1], li[:, 0])
    out[:, 3] = np.arctan2(np.sqrt(lj[:, 0] ** 2 + lj[:, 1] ** 2), lj[:, 2])
    out[:, 4] = np.arctan2(lj[:, 1], lj[:, 0])
    b1 = -bases[ii, 2]
    b3 = bases[jj, 2]
    n1 = np.cross(b1, d)
    n2 = np.cross(d, b3)
    nn1 = np.sqrt(np.einsum("pa,pa->p", n1, n1))
    nn2 = np.sqrt(np.einsum("pa,pa->p", n2, n2))
    degenerate = (nn1 < EPS) | (nn2 < EPS)
    y = r * np.einsum("pa,pa->p", b1, n2)
    x = np.einsum("pa,pa->p", n1, n2)
    out[:, 5] = np.where(degenerate, 0.0, np.arctan2(y, x))
    for c in (2, 4, 5):
        out[:, c] = np.where(out[:, c] <= -np.pi, np.pi, out[:, c])
    return out, degenerate


def _pair_geometry_loop(origins, bases, ii, jj):
    P = ii.shape[0]
    out = np.empty((P, 6))
    degenerate = np.zeros(P, dtype=np.bool_)
    for p in range(P):
        i = ii[p]
        j = jj[p]
        d0 = origins[j, 0] - origins[i, 0]
        d1 = origins[j, 1] - origins[i, 1]
        d2 = origins[j, 2] - origins[i, 2]
        r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        s = r if r > 0.0 else 1.0
        u0, u1, u2 = d0 / s, d1 / s, d2 / s
        a0 = bases[i, 0, 0] * u0 + bases[i, 0, 1] * u1 + bases[i, 0, 2] * u2
        a1 = bases[i, 1, 0] * u0 + bases[i, 1, 1] * u1 + bases[i, 1, 2] * u2
        a2 = bases[i, 2, 0] * u0 + bases[i, 2, 1] * u1 + bases[i, 2, 2] * u2
        c0 = -(bases[j, 0, 0] * u0 + bases[j, 0, 1] * u1 + bases[j, 0, 2] * u2)
        c1 = -(bases[j, 1, 0] * u0 + bases[j, 1, 1] * u1 + bases[j, 1, 2] * u2)
        c2 = -(bases[j, 2, 0] * u0 + bases[j, 2, 1] * u1 + bases[j, 2, 2] * u2)
        out[p, 0] = r
        out[p, 1] = math.atan2(math.sqrt(a0 * a0 + a1 * a1), a2)
        out[p, 2] = math.atan2(a1, a0)
        out[p, 3] = math.atan2(math.sqrt(c0 * c0 + c1 * c1), c2)
        out[p, 4] = math.atan2(c1, c0)
        # omega = dihedral(p_i + vz_i, p_i, p_j, p_j + vz_j)
        b10, b11, b12 = -bases[i, 2, 0], -bases[i, 2, 1], -bases[i, 2, 2]
        b30, b31, b32 = bases[j, 2, 0], bases[j, 2, 1], bases[j, 2, 2]
        n10 = b11 * d2 - b12 * d1
        n11 = b12 * d0 - b10 * d2
        n12 = b10 * d1 - b11 * d0
        n20 = d1 * b32 - d2 * b31
        n21 = d2 * b30 - d0 * b32
        n22 = d0 * b31 - d1 * b30
        nn1 = math.sqrt(n10 * n10 + n11 * n11 + n12 * n12)
        nn2 = math.sqrt(n20 * n20 + n21 * n21 + n22 * n22)
        if nn1 < EPS or nn2 < EPS:
            degenerate[p] = True
            out[p, 5] = 0.0
        else:
            y = r * (b10 * n20 + b11 * n21 + b12 * n22)
            x = n10 * n20 + n11 * n21 + n12 * n22
            out[p, 5] = math.atan2(y, x)
        for c in (2, 4, 5):
            if out[p, c] <= -math.pi:
                out[p, c] = math.pi
    return out, degenerate


pair_geometry_numba = _njit(_pair_geometry_loop)


# --------------------------------------------------------------------------- binning


def bin_index_numpy(desc, r_min, r_max, n_r, n_theta, n_phi, n_omega):
    """Flat geometric bin of each descriptor, row-major over (r, θi, φi, θj, φj, ω)."""
    two_pi = 2.0 * np.pi
    br = np.floor((desc[:, 0] - r_min) / (r_max - r_min) * n_r).astype(np.int64)
    bti = np.floor(desc[:, 1] / np.pi * n_theta).astype(np.int64)
    bpi = np.floor((desc[:, 2] + np.pi) / two_pi * n_phi).astype(np.int64)
    btj = np.floor(desc[:, 3] / np.pi * n_theta).astype(np.int64)
    bpj = np.floor((desc[:, 4] + np.pi) / two_pi * n_phi).astype(np.int64)
    bo = np.floor((desc[:, 5] + np.pi) / two_pi * n_omega).astype(np.int64)
    br = np.clip(br, 0, n_r - 1)
    bti = np.clip(bti, 0, n_theta - 1)
    btj = np.clip(btj, 0, n_theta - 1)
    bpi = np.clip(bpi, 0, n_phi - 1)
    bpj = np.clip(bpj, 0, n_phi - 1)
    bo = np.clip(bo, 0, n_omega - 1)
    idx = br
    idx = idx * n_theta + bti
    idx = idx * n_phi + bpi
    idx = idx * n_theta + btj
    idx = idx * n_phi + bpj
    idx = idx * n_omega + bo
    return idx


def _clip(v, hi):
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def _bin_index_loop(desc, r_min, r_max, n_r, n_theta, n_phi, n_omega):
    P = desc.shape[0]
    out = np.empty(P, dtype=np.int64)
    two_pi = 2.0 * math.pi
    for p in range(P):
        br = _clip(int(math.floor((desc[p, 0] - r_min) / (r_max - r_min) * n_r)), n_r - 1)
        bti = _clip(int(math.floor(desc[p, 1] / math.pi * n_theta)), n_theta - 1)
        bpi = _clip(int(math.floor((desc[p, 2] + math.pi) / two_pi * n_phi)), n_phi - 1)
        btj = _clip(int(math.floor(desc[p, 3] / math.pi * n_theta)), n_theta - 1)
        bpj = _clip(int(math.floor((desc[p, 4] + math.pi) / two_pi * n_phi)), n_phi - 1)
        bo = _clip(int(math.floor((desc[p, 5] + math.pi) / two_pi * n_omega)), n_omega - 1)
        out[p] = ((((br * n_theta + bti) * n_phi + bpi) * n_theta + btj) * n_phi + bpj) * n_omega + bo
    return out


if HAVE_NUMBA:
    _clip = _njit(_clip)
bin_index_numba = _njit(_bin_index_loop)


# --------------------------------------------------------------------------- radius graph


def radius_edges_numpy(pos, radius):
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.einsum("ija,ija->ij", diff, diff))
    adj = dist <= radius
    np.fill_diagonal(adj, False)
    src, dst = np.nonzero(adj)
    return src.astype(np.int64), dst.astype(np.int64)


def _radius_edges_loop(pos, radius):
    n = pos.shape[0]
    count = 0
    src = np.empty(n * (n - 1), dtype=np.int64)
    dst = np.empty(n * (n - 1), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a = pos[i, 0] - pos[j, 0]
            b = pos[i, 1] - pos[j, 1]
            c = pos[i, 2] - pos[j, 2]
            if math.sqrt(a * a + b * b + c * c) <= radius:
                src[count] = i
                dst[count] = j
                count += 1
    return src[:count], dst[:count]


radius_edges_numba = _njit(_radius_edges_loop)


# --------------------------------------------------------------------------- scatter / gather


def scatter_add_rows_numpy(values, index, n):
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, index, values)
    return out


def _scatter_add_rows_loop(values, index, n):
    out = np.zeros((n, values.shape[1]))
    for e in range(values.shape[0]):
        row = index[e]
        for c in range(values.shape[1]):
            out[row, c] += values[e, c]
    return out


scatter_add_rows_numba = _njit(_scatter_add_rows_loop)


# --------------------------------------------------------------------------- cosine top-k


def cosine_similarity(h):
    hn = h / np.linalg.norm(h, axis=1, keepdims=True)
    return hn @ hn.T


def _rank_keys(sim):
    # rounding makes BLAS-level noise between equal embeddings an exact tie
    return np.round(sim, 12)


def topk_similarity_numpy(h, k):
    """Directed edges i→j for the k most cosine-similar j ≠ i with positive similarity.

    Ties at equal similarity keep the smaller index first. Returns (src, dst, sim).
    """
    n = h.shape[0]
    sim = cosine_similarity(h)
    k = min(k, n - 1)
    masked = _rank_keys(sim)
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = order.reshape(-1).astype(np.int64)
    vals = sim[src, dst]
    keep = vals > 0.0
    return src[keep], dst[keep], vals[keep]


def _topk_from_keys_loop(keys, sim, k):
    n = keys.shape[0]
    if k > n - 1:
        k = n - 1
    src = np.empty(n * k, dtype=np.int64)
    dst = np.empty(n * k, dtype=np.int64)
    vals = np.empty(n * k)
    count = 0
    row = np.empty(n)
    for i in range(n):
        for j in range(n):
            row[j] = -keys[i, j]
        row[i] = np.inf
        order = np.argsort(row, kind="mergesort")
        for t in range(k):
            j = order[t]
            if sim[i, j] > 0.0:
                src[count] = i
                dst[count] = j
                vals[count] = sim[i, j]
                count += 1
    return src[:count], dst[:count], vals[:count]


_topk_from_keys = _njit(_topk_from_keys_loop)


def topk_similarity_numba(h, k):
    sim = cosine_similarity(h)
    return _topk_from_keys(_rank_keys(sim), sim, k)


# --------------------------------------------------------------------------- edge features


def edge_features_all_numpy(origins, bases, seq_index):
    """Dense (n, n, EDGE_DIM) edge-feature tensor; the diagonal is left at zero."""
    n = origins.shape[0]
    out = np.zeros((n, n, EDGE_DIM))
    sep = seq_index[None, :] - seq_index[:, None]
    bucket = np.full((n, n), -1, dtype=np.int64)
    neg = (sep >= -5) & (sep <= -1)
    pos = (sep >= 1) & (sep <= 5)
    bucket[neg] = sep[neg] + 5
    bucket[pos] = sep[pos] + 4
    bucket[sep < -5] = 10
    bucket[sep > 5] = 11
    ii, jj = np.nonzero(bucket >= 0)
    out[ii, jj, bucket[ii, jj]] = 1.0
    d = origins[None, :, :] - origins[:, None, :]
    dist = np.sqrt(np.einsum("ija,ija->ij", d, d))
    off = ~np.eye(n, dtype=bool)
    safe = np.where(off, dist, 1.0)
    u = d / safe[..., None]
    local = np.einsum("iab,ijb->ija", bases, u)
    out[..., N_SEQ_BUCKETS:N_SEQ_BUCKETS + 3] = local * off[..., None]
    rbf = np.exp(-(((dist[..., None] - RBF_CENTERS) / RBF_WIDTH) ** 2))
    out[..., N_SEQ_BUCKETS + 3:] = rbf * off[..., None]
    return out


def _edge_features_all_loop(origins, bases, seq_index):
    n = origins.shape[0]
    out = np.zeros((n, n, EDGE_DIM))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            sep = seq_index[j] - seq_index[i]
            b = -1
            if -5 <= sep <= -1:
                b = sep + 5
            elif 1 <= sep <= 5:
                b = sep + 4
            elif sep < -5:
                b = 10
            elif sep > 5:
                b = 11
            if b >= 0:
                out[i, j, b] = 1.0
            d0 = origins[j, 0] - origins[i, 0]
            d1 = origins[j, 1] - origins[i, 1]
            d2 = origins[j, 2] - origins[i, 2]
            dist = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            s = dist if dist > 0.0 else 1.0
            for a in range(3):
                out[i, j, N_SEQ_BUCKETS + a] = (bases[i, a, 0] * d0 + bases[i, a, 1] * d1 + bases[i, a, 2] * d2) / s
            for c in range(N_RBF):
                z = (dist - RBF_CENTERS[c]) / RBF_WIDTH
                out[i, j, N_SEQ_BUCKETS + 3 + c] = math.exp(-z * z)
    return out


edge_features_all_numba = _njit(_edge_features_all_loop)


# --------------------------------------------------------------------------- dispatch

if USE_NUMBA:
    pair_geometry = pair_geometry_numba
    bin_index = bin_index_numba
    radius_edges = radius_edges_numba
    scatter_add_rows = scatter_add_rows_numba
    topk_similarity = topk_similarity_numba
    edge_features_all = edge_features_all_numba
else:
    pair_geometry = pair_geometry_numpy
    bin_index = bin_index_numpy
    radius_edges = radius_edges_numpy
    scatter_add_rows = scatter_add_rows_numpy
    topk_similarity = topk_similarity_numpy
    edge_features_all = edge_features_all_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
