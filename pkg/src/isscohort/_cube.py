"""Numba kernel for the fast flight phase of the cube method."""

import numpy as np
from numba import njit

EPS = 1e-10


@njit(cache=True)
def _null_vector(m, tol):
    """A unit vector u with m @ u = 0 for an r x (r + 1) matrix, via reduced row echelon form."""
    r, c = m.shape
    a = m.copy()
    pivcol = np.empty(r, dtype=np.int64)
    is_piv = np.zeros(c, dtype=np.bool_)
    scale = 0.0
    for i in range(r):
        for j in range(c):
            if abs(a[i, j]) > scale:
                scale = abs(a[i, j])
    thresh = tol * max(scale, 1.0)
    row = 0
    for col in range(c):
        if row >= r:
            break
        best = row
        for i in range(row + 1, r):
            if abs(a[i, col]) > abs(a[best, col]):
                best = i
        if abs(a[best, col]) <= thresh:
            continue
        if best != row:
            for j in range(c):
                tmp = a[row, j]
                a[row, j] = a[best, j]
                a[best, j] = tmp
        pv = a[row, col]
        for j in range(c):
            a[row, j] /= pv
        for i in range(r):
            if i != row:
                f = a[i, col]
                if f != 0.0:
                    for j in range(c):
                        a[i, j] -= f * a[row, j]
        pivcol[row] = col
        is_piv[col] = True
        row += 1
    free = 0
    for j in range(c):
        if not is_piv[j]:
            free = j
            break
    u = np.zeros(c)
    u[free] = 1.0
    for i in range(row):
        u[pivcol[i]] = -a[i, free]
    nrm = 0.0
    for j in range(c):
        nrm += u[j] * u[j]
    nrm = np.sqrt(nrm)
    for j in range(c):
        u[j] /= nrm
    return u


@njit(cache=True)
def flight(pi, amat, order, n_cols, uniforms, start_u):
    """Run the flight phase on the first ``n_cols`` columns of ``amat``.

    ``pi`` is updated in place; units are visited in ``order``. Returns the index
    of the next unused uniform. Stops when fewer than ``n_cols + 1`` fractional
    units remain.
    """
    n = order.shape[0]
    window = np.empty(n_cols + 1, dtype=np.int64)
    filled = 0
    pos = 0
    ui = start_u
    while True:
        while filled < n_cols + 1 and pos < n:
            idx = order[pos]
            pos += 1
            if pi[idx] > EPS and pi[idx] < 1.0 - EPS:
                window[filled] = idx
                filled += 1
        if filled < n_cols + 1:
            break
        if n_cols == 0:
            u = np.ones(1)
        else:
            m = np.empty((n_cols, n_cols + 1))
            for a in range(n_cols):
                for b in range(n_cols + 1):
                    m[a, b] = amat[window[b], a]
            u = _null_vector(m, 1e-12)
        l1 = np.inf
        l2 = np.inf
        for b in range(n_cols + 1):
            p = pi[window[b]]
            if u[b] > 1e-14:
                l1 = min(l1, (1.0 - p) / u[b])
                l2 = min(l2, p / u[b])
            elif u[b] < -1e-14:
                l1 = min(l1, p / -u[b])
                l2 = min(l2, (1.0 - p) / -u[b])
        if not np.isfinite(l1) or not np.isfinite(l2):
            break
        if uniforms[ui] < l2 / (l1 + l2):
            step = l1
        else:
            step = -l2
        ui += 1
        keep = 0
        for b in range(n_cols + 1):
            idx = window[b]
            v = pi[idx] + step * u[b]
            if v <= EPS:
                v = 0.0
            elif v >= 1.0 - EPS:
                v = 1.0
            pi[idx] = v
        for b in range(n_cols + 1):
            idx = window[b]
            if pi[idx] > 0.0 and pi[idx] < 1.0:
                window[keep] = idx
                keep += 1
        filled = keep
    return ui
