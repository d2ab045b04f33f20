"""Jitted numerical kernels: banded Cholesky, per-time Gibbs sweeps, FFBS.

Everything here is deliberately loop-based so numba can compile it; the public
modules wrap these with array bookkeeping.  Band storage convention: a banded
symmetric matrix M with bandwidth b is stored as ab[d, j] = M[j + d, j] for
d = 0..b (diagonal and subdiagonals, column j).  Lower Cholesky factors use
the same layout.  All random draws are passed in as pre-generated standard
normals so reproducibility is controlled by the caller's Generator.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def band_cholesky(ab):
    """Lower Cholesky factor of a banded SPD matrix, same band layout.

    Raises ValueError when a pivot is nonpositive (matrix not positive
    definite at working precision).
    """
    b1, n = ab.shape
    b = b1 - 1
    L = np.zeros((b1, n))
    for j in range(n):
        s = ab[0, j]
        kmin = j - b
        if kmin < 0:
            kmin = 0
        for k in range(kmin, j):
            s -= L[j - k, k] * L[j - k, k]
        if s <= 0.0:
            raise ValueError("banded matrix is not positive definite")
        L[0, j] = np.sqrt(s)
        imax = j + b
        if imax > n - 1:
            imax = n - 1
        for i in range(j + 1, imax + 1):
            s = ab[i - j, j]
            kmin = i - b
            if kmin < 0:
                kmin = 0
            for k in range(kmin, j):
                s -= L[i - k, k] * L[j - k, k]
            L[i - j, j] = s / L[0, j]
    return L


@njit(cache=True)
def band_solve_lower(L, x):
    """Solve L y = x for banded lower-triangular L."""
    b1, n = L.shape
    b = b1 - 1
    y = np.empty(n)
    for i in range(n):
        s = x[i]
        kmin = i - b
        if kmin < 0:
            kmin = 0
        for k in range(kmin, i):
            s -= L[i - k, k] * y[k]
        y[i] = s / L[0, i]
    return y


@njit(cache=True)
def band_solve_upper(L, x):
    """Solve L' y = x for banded lower-triangular L."""
    b1, n = L.shape
    b = b1 - 1
    y = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = x[i]
        kmax = i + b
        if kmax > n - 1:
            kmax = n - 1
        for k in range(i + 1, kmax + 1):
            s -= L[k - i, i] * y[k]
        y[i] = s / L[0, i]
    return y


@njit(cache=True)
def band_solve_upper_many(L, Z):
    """Solve L' y = z for each row z of Z; returns an array of the same shape."""
    m = Z.shape[0]
    out = np.empty_like(Z)
    for r in range(m):
        out[r] = band_solve_upper(L, Z[r])
    return out


@njit(cache=True)
def dense_solve_lower(L, x):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = x[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    return y


@njit(cache=True)
def dense_solve_upper(L, x):
    """Solve L' y = x for dense lower-triangular L."""
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * y[k]
        y[i] = s / L[i, i]
    return y


@njit(cache=True)
def sweep_weights(L_mid, L_last, q_data, q_indices, q_indptr,
                  at_data, at_indices, at_indptr,
                  resid, weights, sigma2, tau2, z):
    """One full pass of the node-weight Gibbs sweep, t = 1..T in order.

    weights is (T, N) and updated in place; row t-1 holds R_t with R_0 = 0
    implicit.  L_mid factors the t < T precision (c_t = 2), L_last the t = T
    one (c_t = 1).  q_* is the CSR of the spatial precision Q_kappa, at_* the
    CSR of A', resid the (T, n) residual lambda - F'theta - X beta, z a (T, N)
    matrix of standard normals.
    """
    T, N = weights.shape
    for t in range(T):
        rhs = np.zeros(N)
        if t > 0:
            for k in range(N):
                rhs[k] += weights[t - 1, k]
        if t < T - 1:
            for k in range(N):
                rhs[k] += weights[t + 1, k]
        tmp = np.empty(N)
        for r in range(N):
            s = 0.0
            for idx in range(q_indptr[r], q_indptr[r + 1]):
                s += q_data[idx] * rhs[q_indices[idx]]
            tmp[r] = s / sigma2
        for r in range(N):
            s = 0.0
            for idx in range(at_indptr[r], at_indptr[r + 1]):
                s += at_data[idx] * resid[t, at_indices[idx]]
            tmp[r] += s / tau2
        if t < T - 1:
            L = L_mid
        else:
            L = L_last
        half = band_solve_lower(L, tmp)
        mean = band_solve_upper(L, half)
        noise = band_solve_upper(L, z[t])
        for k in range(N):
            weights[t, k] = mean[k] + noise[k]


@njit(cache=True)
def sweep_mu(L_mid, L_last, omega_inv, resid, mu, sigma2, tau2, z):
    """Dense-path analogue of sweep_weights: mu is (T, n), updated in place."""
    T, n = mu.shape
    for t in range(T):
        rhs = np.zeros(n)
        if t > 0:
            for k in range(n):
                rhs[k] += mu[t - 1, k]
        if t < T - 1:
            for k in range(n):
                rhs[k] += mu[t + 1, k]
        tmp = np.dot(omega_inv, rhs)
        for k in range(n):
            tmp[k] = tmp[k] / sigma2 + resid[t, k] / tau2
        if t < T - 1:
            L = L_mid
        else:
            L = L_last
        half = dense_solve_lower(L, tmp)
        mean = dense_solve_upper(L, half)
        noise = dense_solve_upper(L, z[t])
        for k in range(n):
            mu[t, k] = mean[k] + noise[k]


@njit(cache=True)
def _chol_psd_small(A):
    """Cholesky of a small PSD matrix, clamping degenerate pivots to zero."""
    p = A.shape[0]
    L = np.zeros((p, p))
    for j in range(p):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s > 1e-300:
            L[j, j] = np.sqrt(s)
        for i in range(j + 1, p):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if L[j, j] > 0.0:
                L[i, j] = s / L[j, j]
    return L


@njit(cache=True)
def _solve_psd_small(L, B):
    """Solve (L L') X = B columnwise for small matrices."""
    p, m = B.shape
    X = np.empty((p, m))
    for c in range(m):
        # forward
        y = np.empty(p)
        for i in range(p):
            s = B[i, c]
            for k in range(i):
                s -= L[i, k] * y[k]
            y[i] = s / L[i, i]
        # backward
        for i in range(p - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, p):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True)
def ffbs_draw(F, G, w, z, v, m0, c0, znorm):
    """Forward-filter backward-sample draw of the seasonal states.

    F is (T, p), G (p, p), w (p,) evolution variances, z (T,) scalar
    pseudo-observations with common variance v, prior theta_0 ~ N(m0, c0 I),
    znorm (T+1, p) standard normals.  Returns (theta0, theta) with theta of
    shape (T, p); the draw is from the joint smoothing distribution.
    """
    T, p = F.shape
    fm = np.empty((T + 1, p))        # filtered means, index 0 = prior
    fC = np.empty((T + 1, p, p))     # filtered covariances
    pm = np.empty((T + 1, p))        # one-step predicted means (a_t)
    pR = np.empty((T + 1, p, p))     # one-step predicted covariances (R_t)
    fm[0] = m0
    fC[0] = c0 * np.eye(p)
    for t in range(1, T + 1):
        a = np.dot(G, fm[t - 1])
        R = np.dot(G, np.dot(fC[t - 1], G.T))
        for j in range(p):
            R[j, j] += w[j]
        Ft = F[t - 1]
        RF = np.dot(R, Ft)
        Qt = np.dot(Ft, RF) + v
        err = z[t - 1] - np.dot(Ft, a)
        fm[t] = a + RF * (err / Qt)
        C = R - np.outer(RF, RF) / Qt
        fC[t] = 0.5 * (C + C.T)
        pm[t] = a
        pR[t] = R
    thetas = np.empty((T + 1, p))
    L = _chol_psd_small(fC[T])
    thetas[T] = fm[T] + np.dot(L, znorm[T])
    for t in range(T - 1, -1, -1):
        Lr = _chol_psd_small(pR[t + 1])
        GC = np.dot(G, fC[t])
        S = _solve_psd_small(Lr, GC)            # R_{t+1}^{-1} G C_t
        h = fm[t] + np.dot(S.T, thetas[t + 1] - pm[t + 1])
        H = fC[t] - np.dot(S.T, GC)
        H = 0.5 * (H + H.T)
        Lh = _chol_psd_small(H)
        thetas[t] = h + np.dot(Lh, znorm[t])
    return thetas[0], thetas[1:]
