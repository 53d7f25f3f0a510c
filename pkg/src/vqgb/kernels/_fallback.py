"""Numpy implementations of the compiled kernels.

Same algorithms and return conventions as ``_ckernels``; used when the
extension is not built or when ``VQGB_PURE=1`` is set.
"""
import numpy as np


def linear_assignment(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    path = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n)
    v = np.zeros(n)
    for cur in range(n):
        spc = np.full(n, np.inf)
        SR = np.zeros(n, dtype=bool)
        SC = np.zeros(n, dtype=bool)
        remaining = np.ones(n, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            SR[i] = True
            r = min_val + cost[i] - u[i] - v
            better = remaining & (r < spc)
            path[better] = i
            spc[better] = r[better]
            cand = np.where(remaining, spc, np.inf)
            lowest = cand.min()
            if lowest == np.inf:
                raise ValueError("cost matrix is infeasible")
            ties = np.flatnonzero(cand == lowest)
            free = ties[row4col[ties] == -1]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = lowest
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
            SC[j] = True
            remaining[j] = False

        u[cur] += min_val
        others = SR.copy()
        others[cur] = False
        rows = np.flatnonzero(others)
        u[rows] += min_val - spc[col4row[rows]]
        v[SC] -= min_val - spc[SC]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row


def knn_radius_counts(x, labels, kvec, chunk=512):
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    kvec = np.asarray(kvec, dtype=np.int64)
    n = x.shape[0]
    radius = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = np.arange(start, stop)
        dist = np.abs(x[rows, None, :] - x[None, :, :]).max(axis=2)
        dist[np.arange(rows.size), rows] = np.inf
        same = np.where(labels[rows, None] == labels[None, :], dist, np.inf)
        for a, i in enumerate(rows):
            k = kvec[i]
            if k <= 0:
                continue
            rad = np.partition(same[a], k - 1)[k - 1]
            radius[i] = rad
            count[i] = np.count_nonzero(dist[a] <= rad)
    return radius, count
