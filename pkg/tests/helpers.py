"""Independent oracles shared by the test modules.

Nothing here calls into the autodiff engine's backward pass; these are the
reference computations the engine is checked against.
"""

import itertools

import numpy as np


def central_diff(f, params, h=1e-5):
    """Central finite differences of scalar ``f(list_of_arrays)`` w.r.t. every entry."""
    params = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f(params)
            p[idx] = old - h
            fm = f(params)
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def brute_sq_dist(X, Y):
    out = np.zeros((len(X), len(Y)))
    for i in range(len(X)):
        for j in range(len(Y)):
            s = 0.0
            for k in range(len(X[i])):
                s += (X[i][k] - Y[j][k]) ** 2
            out[i, j] = s
    return out


def np_softmax(row):
    e = [np.exp(v) for v in row]
    tot = sum(e)
    return [v / tot for v in e]


def enumerate_walks(p2x, x2x, x2p, tau):
    """T[a, b] summed over every explicit path a -> x0 -> x1 ... -> x_tau -> b."""
    n_c, m = p2x.shape
    T = np.zeros((n_c, n_c))
    for a in range(n_c):
        for path in itertools.product(range(m), repeat=tau + 1):
            w = p2x[a, path[0]]
            for u, v in zip(path, path[1:]):
                w *= x2x[u, v]
            for b in range(n_c):
                T[a, b] += w * x2p[path[-1], b]
    return T


def transitions_from_embeddings(h_unl, protos):
    """Direct numpy construction of the three transition matrices."""
    A = -brute_sq_dist(h_unl, protos)
    B = -brute_sq_dist(h_unl, h_unl)
    m = len(h_unl)

    def sm(M, mask=None):
        M = np.array(M, float)
        out = np.zeros_like(M)
        for i, row in enumerate(M):
            keep = [j for j in range(M.shape[1]) if mask is None or not mask[i, j]]
            vals = np.array([row[j] for j in keep])
            e = np.exp(vals - vals.max())
            out[i, keep] = e / e.sum()
        return out

    return sm(A.T), sm(B, np.eye(m, dtype=bool)), sm(A)
