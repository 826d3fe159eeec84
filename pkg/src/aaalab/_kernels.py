"""Hot loop of the logit post-processor: Adam on the margin/confidence objective.

Two interchangeable backends share one signature::

    optimize_logits(z0, l_t, p_t, c, beta, iters, lr, beta1, beta2, eps) -> z

``z0`` is ``(n, K)``; ``l_t``, ``p_t`` are ``(n,)`` float targets and ``c`` the
``(n,)`` original top-1 indices. Rows are independent. The numba kernel loops
per row; the numpy kernel vectorizes over rows. Both follow the same
subgradient convention (sign(0) = 0, lowest index wins ties). Probability
gaps within ``PROB_TIE`` count as zero: at ``z = z0`` with T = 1 the gap is
exactly zero in real arithmetic, and its rounded sign would otherwise depend
on the softmax summation order.
"""

import math

import numpy as np

from aaalab._accel import njit, use_numba

PROB_TIE = 1e-12


@njit(cache=True)
def _optimize_numba(z0, l_t, p_t, c, beta, iters, lr, beta1, beta2, eps):
    n, k = z0.shape
    out = np.empty_like(z0)
    z = np.empty(k)
    m = np.empty(k)
    v = np.empty(k)
    g = np.empty(k)
    p = np.empty(k)
    for r in range(n):
        for j in range(k):
            z[j] = z0[r, j]
            m[j] = 0.0
            v[j] = 0.0
        cr = c[r]
        for it in range(1, iters + 1):
            i1 = 0
            for j in range(1, k):
                if z[j] > z[i1]:
                    i1 = j
            i2 = 1 if i1 == 0 else 0
            for j in range(k):
                if j != i1 and z[j] > z[i2]:
                    i2 = j
            zmax = z[i1]
            s = 0.0
            for j in range(k):
                p[j] = math.exp(z[j] - zmax)
                s += p[j]
            for j in range(k):
                p[j] /= s
            dm = z[i1] - z[i2] - l_t[r]
            sm = 1.0 if dm > 0.0 else (-1.0 if dm < 0.0 else 0.0)
            dc = p[cr] - p_t[r]
            sc = 1.0 if dc > PROB_TIE else (-1.0 if dc < -PROB_TIE else 0.0)
            coef = beta * sc * p[cr]
            for j in range(k):
                g[j] = -coef * p[j]
            g[cr] += coef
            g[i1] += sm
            g[i2] -= sm
            bc1 = 1.0 - beta1**it
            bc2 = 1.0 - beta2**it
            for j in range(k):
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j]
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j]
                z[j] -= lr * (m[j] / bc1) / (math.sqrt(v[j] / bc2) + eps)
        for j in range(k):
            out[r, j] = z[j]
    return out


def _optimize_numpy(z0, l_t, p_t, c, beta, iters, lr, beta1, beta2, eps):
    z = np.array(z0, dtype=np.float64, copy=True)
    n, k = z.shape
    rows = np.arange(n)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for it in range(1, iters + 1):
        i1 = np.argmax(z, axis=1)
        rest = z.copy()
        rest[rows, i1] = -np.inf
        i2 = np.argmax(rest, axis=1)
        e = np.exp(z - z[rows, i1][:, None])
        p = e / e.sum(axis=1, keepdims=True)
        sm = np.sign(z[rows, i1] - z[rows, i2] - l_t)
        pc = p[rows, c]
        dc = pc - p_t
        coef = beta * np.where(np.abs(dc) <= PROB_TIE, 0.0, np.sign(dc)) * pc
        g = -coef[:, None] * p
        g[rows, c] += coef
        g[rows, i1] += sm
        g[rows, i2] -= sm
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        z = z - lr * (m / (1.0 - beta1**it)) / (np.sqrt(v / (1.0 - beta2**it)) + eps)
    return z


def optimize_logits(z0, l_t, p_t, c, beta, iters, lr, beta1, beta2, eps, backend=None):
    """Dispatch to the numba kernel when available (or ``backend="numba"``)."""
    z0 = np.ascontiguousarray(z0, dtype=np.float64)
    l_t = np.ascontiguousarray(l_t, dtype=np.float64)
    p_t = np.ascontiguousarray(p_t, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.int64)
    if backend is None:
        backend = "numba" if use_numba() else "numpy"
    fn = _optimize_numba if backend == "numba" else _optimize_numpy
    return fn(z0, l_t, p_t, c, float(beta), int(iters), float(lr), float(beta1), float(beta2), float(eps))
