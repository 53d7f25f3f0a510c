# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: dense linear assignment and k-NN neighbor counting."""
import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()


def linear_assignment(double[:, ::1] cost):
    """Min-cost perfect matching of a square cost matrix.

    Shortest augmenting path with row/column potentials (Jonker-Volgenant
    style). Returns ``col_for_row`` as an int64 array.
    """
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    col4row_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] col4row = col4row_arr
    cdef long long[::1] row4col = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] path = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] remaining = np.empty(n, dtype=np.int64)
    cdef double[::1] u = np.zeros(n)
    cdef double[::1] v = np.zeros(n)
    cdef double[::1] spc = np.empty(n)
    cdef unsigned char[::1] SR = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] SC = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t cur, i, j, it, index, n_rem, sink, tmp
    cdef double min_val, lowest, r

    for cur in range(n):
        for j in range(n):
            spc[j] = INFINITY
            SR[j] = 0
            SC[j] = 0
            remaining[j] = n - 1 - j
        n_rem = n
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            SR[i] = 1
            index = -1
            lowest = INFINITY
            for it in range(n_rem):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < spc[j]:
                    path[j] = i
                    spc[j] = r
                if spc[j] < lowest or (spc[j] == lowest and row4col[j] == -1):
                    lowest = spc[j]
                    index = it
            min_val = lowest
            if min_val == INFINITY:
                raise ValueError("cost matrix is infeasible")
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            SC[j] = 1
            n_rem -= 1
            remaining[index] = remaining[n_rem]

        u[cur] += min_val
        for i in range(n):
            if SR[i] and i != cur:
                u[i] += min_val - spc[col4row[i]]
        for j in range(n):
            if SC[j]:
                v[j] -= min_val - spc[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur:
                break
    return col4row_arr


def knn_radius_counts(double[:, ::1] x, long long[::1] labels, long long[::1] kvec):
    """Per-point max-norm radius to the k-th same-label neighbor and the count
    of all other points within that radius (inclusive).

    Points with ``kvec[i] == 0`` get radius 0 and count 0.
    """
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j, t, a, kmax = 0
    cdef long long k
    for i in range(n):
        if kvec[i] > kmax:
            kmax = kvec[i]
    radius_arr = np.zeros(n)
    count_arr = np.zeros(n, dtype=np.int64)
    cdef double[::1] radius = radius_arr
    cdef long long[::1] count = count_arr
    cdef double[::1] buf = np.empty(max(kmax, 1))
    cdef double dist, diff, rad
    cdef long long filled, c

    for i in range(n):
        k = kvec[i]
        if k <= 0:
            continue
        filled = 0
        for j in range(n):
            if j == i or labels[j] != labels[i]:
                continue
            dist = 0.0
            for t in range(dim):
                diff = fabs(x[i, t] - x[j, t])
                if diff > dist:
                    dist = diff
            if filled < k:
                a = filled
                filled += 1
            elif dist < buf[k - 1]:
                a = k - 1
            else:
                continue
            while a > 0 and buf[a - 1] > dist:
                buf[a] = buf[a - 1]
                a -= 1
            buf[a] = dist
        rad = buf[k - 1]
        radius[i] = rad
        c = 0
        for j in range(n):
            if j == i:
                continue
            dist = 0.0
            for t in range(dim):
                diff = fabs(x[i, t] - x[j, t])
                if diff > dist:
                    dist = diff
                    if dist > rad:
                        break
            if dist <= rad:
                c += 1
        count[i] = c
    return radius_arr, count_arr
