"""Euler-Maruyama inner loops for the parametric sine coefficient family.

Every coefficient phi in (b1, b2, sigma1, sigma2) is

    p0 + p1 sin(y) + p2 v + p3 sin(m_state) + p4 cos(m_control) + p5 sin(t)

with (m_state, m_control) the means of the mean-field joint law at the
current step. Rows of ``params`` are ordered b1, b2, sigma1, sigma2.

Two implementations share this contract: vectorised numpy (always
available) and numba-compiled loops. Per-step means are accumulated in
particle-index order in the compiled path, so its output does not depend on
the thread count.
"""

import numpy as np

from ._accel import NUMBA_AVAILABLE, njit, numba_enabled

B1, B2, S1, S2 = 0, 1, 2, 3
N_PARAMS = 6


def eval_sine(p, t, y, v, m_state, m_control):
    return (p[0] + p[1] * np.sin(y) + p[2] * v + p[3] * np.sin(m_state)
            + p[4] * np.cos(m_control) + p[5] * np.sin(t))


def meanfield_numpy(params, t0, h, offset, x0, u, dB):
    M, S = u.shape
    X = np.empty((M, S + 1))
    X[:, 0] = x0
    feats = np.empty((S, 2))
    for k in range(S):
        t = t0 + (offset + k) * h
        x = X[:, k]
        v = u[:, k]
        my = x.sum() / M
        mv = v.sum() / M
        feats[k, 0] = my
        feats[k, 1] = mv
        drift = eval_sine(params[B1], t, x, v, my, mv)
        vol = eval_sine(params[S1], t, x, v, my, mv)
        X[:, k + 1] = x + drift * h + vol * dB[:, k]
    return X, feats


def individual_numpy(params, t0, h, offset, x0, u, dB, feats):
    K, S = u.shape
    X = np.empty((K, S + 1))
    X[:, 0] = x0
    for k in range(S):
        t = t0 + (offset + k) * h
        x = X[:, k]
        v = u[:, k]
        my, mv = feats[k, 0], feats[k, 1]
        drift = eval_sine(params[B2], t, x, v, my, mv)
        vol = eval_sine(params[S2], t, x, v, my, mv)
        X[:, k + 1] = x + drift * h + vol * dB[:, k]
    return X


if NUMBA_AVAILABLE:
    from numba import prange

    @njit(cache=True)
    def _sine(p, i, t, y, v, my, mv):
        return (p[i, 0] + p[i, 1] * np.sin(y) + p[i, 2] * v + p[i, 3] * np.sin(my)
                + p[i, 4] * np.cos(mv) + p[i, 5] * np.sin(t))

    @njit(cache=True, parallel=True)
    def meanfield_numba(params, t0, h, offset, x0, u, dB):
        M, S = u.shape
        X = np.empty((M, S + 1))
        for i in range(M):
            X[i, 0] = x0[i]
        feats = np.empty((S, 2))
        for k in range(S):
            t = t0 + (offset + k) * h
            sy = 0.0
            sv = 0.0
            for i in range(M):
                sy += X[i, k]
                sv += u[i, k]
            my = sy / M
            mv = sv / M
            feats[k, 0] = my
            feats[k, 1] = mv
            for i in prange(M):
                x = X[i, k]
                v = u[i, k]
                X[i, k + 1] = (x + _sine(params, 0, t, x, v, my, mv) * h
                               + _sine(params, 2, t, x, v, my, mv) * dB[i, k])
        return X, feats

    @njit(cache=True, parallel=True)
    def individual_numba(params, t0, h, offset, x0, u, dB, feats):
        K, S = u.shape
        X = np.empty((K, S + 1))
        for i in prange(K):
            x = x0[i]
            X[i, 0] = x
            for k in range(S):
                t = t0 + (offset + k) * h
                v = u[i, k]
                x = (x + _sine(params, 1, t, x, v, feats[k, 0], feats[k, 1]) * h
                     + _sine(params, 3, t, x, v, feats[k, 0], feats[k, 1]) * dB[i, k])
                X[i, k + 1] = x
        return X

else:  # pragma: no cover
    meanfield_numba = None
    individual_numba = None


def backend_name():
    return "numba" if numba_enabled() else "numpy"


def _prep(params, x0, u, dB):
    return (np.ascontiguousarray(params, dtype=np.float64), np.ascontiguousarray(x0, dtype=np.float64),
            np.ascontiguousarray(u, dtype=np.float64), np.ascontiguousarray(dB, dtype=np.float64))


def run_meanfield(params, t0, h, offset, x0, u, dB, backend=None):
    params, x0, u, dB = _prep(params, x0, u, dB)
    backend = backend or backend_name()
    if backend == "numba":
        return meanfield_numba(params, float(t0), float(h), int(offset), x0, u, dB)
    return meanfield_numpy(params, t0, h, offset, x0, u, dB)


def run_individual(params, t0, h, offset, x0, u, dB, feats, backend=None):
    params, x0, u, dB = _prep(params, x0, u, dB)
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    backend = backend or backend_name()
    if backend == "numba":
        return individual_numba(params, float(t0), float(h), int(offset), x0, u, dB, feats)
    return individual_numpy(params, t0, h, offset, x0, u, dB, feats)
