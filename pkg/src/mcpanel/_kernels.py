"""Compiled inner loops for the coordinate-descent block."""

import numpy as np
from numba import njit


@njit(cache=True)
def cd_sweep(D, resid, weight, coef, norm2, thresh):
    """One cyclic pass of exact coordinate minimization with soft thresholding.

    Minimizes ``sum(weight * resid**2) / n + sum(lam_k |coef_k|)`` one
    coordinate at a time, where ``thresh[k] = lam_k * n / 2``. `resid` and
    `coef` are updated in place. Coordinates with ``norm2[k] == 0`` are
    skipped (pinned).
    """
    K, M = D.shape
    n_changed = 0
    for k in range(K):
        nk = norm2[k]
        if nk <= 0.0:
            continue
        c = 0.0
        for m in range(M):
            c += D[k, m] * weight[m] * resid[m]
        old = coef[k]
        z = old + c / nk
        t = thresh[k] / nk
        if z > t:
            new = z - t
        elif z < -t:
            new = z + t
        else:
            new = 0.0
        if new != old:
            delta = new - old
            for m in range(M):
                resid[m] -= D[k, m] * delta
            coef[k] = new
            n_changed += 1
    return n_changed


@njit(cache=True)
def masked_correlations(D, resid, weight):
    """``D @ (weight * resid)`` without a temporary."""
    K, M = D.shape
    out = np.zeros(K)
    for k in range(K):
        c = 0.0
        for m in range(M):
            c += D[k, m] * weight[m] * resid[m]
        out[k] = c
    return out


@njit(cache=True)
def fe_passes(E, weight, row_cnt, col_cnt, Gamma, Delta, passes, tol):
    """Alternating masked row/column mean updates of the fixed effects."""
    N, T = E.shape
    scale = 1.0
    for i in range(N):
        for t in range(T):
            if weight[i, t] > 0.0 and abs(E[i, t]) + 1.0 > scale:
                scale = abs(E[i, t]) + 1.0
    for _ in range(passes):
        big = 0.0
        for i in range(N):
            if row_cnt[i] <= 0.0:
                continue
            s = 0.0
            for t in range(T):
                s += weight[i, t] * E[i, t]
            s /= row_cnt[i]
            Gamma[i] += s
            for t in range(T):
                E[i, t] -= s
            if abs(s) > big:
                big = abs(s)
        for t in range(T):
            if col_cnt[t] <= 0.0:
                continue
            s = 0.0
            for i in range(N):
                s += weight[i, t] * E[i, t]
            s /= col_cnt[t]
            Delta[t] += s
            for i in range(N):
                E[i, t] -= s
            if abs(s) > big:
                big = abs(s)
        if big <= tol * scale:
            break


@njit(cache=True)
def _rank(s, atol):
    if s.size == 0 or s[0] <= atol or s[0] == 0.0:
        return 0
    cut = max(1e-12 * s[0], atol)
    r = 0
    for v in s:
        if v > cut:
            r += 1
    return r


@njit(cache=True)
def gram_sweeps(G, c, coef, norm2, thresh, max_sweeps, tol):
    """Covariance-update coordinate descent on a quadratic with l1 terms.

    Minimizes ``coef' G coef / 2 - c0' coef + sum(thresh |coef|)`` where
    `c` holds the current correlations ``c0 - G coef`` and is updated in
    place together with `coef`. Stops when a sweep moves no coordinate by
    more than ``tol`` relative to the largest coefficient.
    """
    K = coef.size
    sweeps = 0
    for sw in range(max_sweeps):
        sweeps += 1
        step = 0.0
        size = 0.0
        for k in range(K):
            nk = norm2[k]
            if nk <= 0.0:
                continue
            old = coef[k]
            z = old + c[k] / nk
            t = thresh[k] / nk
            if z > t:
                new = z - t
            elif z < -t:
                new = z + t
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for j in range(K):
                    c[j] -= G[j, k] * delta
                coef[k] = new
                if abs(delta) > step:
                    step = abs(delta)
            if abs(new) > size:
                size = abs(new)
        if step <= tol * max(size, 1e-12):
            break
    return sweeps


@njit(cache=True)
def _below(A, thr):
    """True when ``sigma_max(A) <= thr``, checked by cheap upper bounds first."""
    if thr <= 0.0:
        return False
    fro = 0.0
    for v in A.ravel():
        fro += v * v
    if fro <= thr * thr:
        return True
    N, T = A.shape
    G = A @ A.T if N <= T else A.T @ A
    # eigvalsh is exact to rounding; keep a small margin so the SVD path decides ties
    return np.linalg.eigvalsh(G)[-1] <= thr * thr * (1.0 - 1e-10)


@njit(cache=True)
def _gram_block(E, weight, D, G, norm2, thresh, coef, Gamma, Delta, fixed_effects, max_rounds, tol,
                free, P):
    """Joint solve of the covariate and fixed-effect block through its Gram matrix.

    Coordinates are ordered ``(coef, Gamma, Delta)``; fixed effects carry no
    penalty. `G` and `norm2` cover all of them. The unpenalized coordinates
    `free` are updated exactly with the pseudo-inverse `P` of their Gram
    block, alternating with covariance-update sweeps over the penalized
    ones. `E` is updated at the end.
    """
    N, T = E.shape
    K = coef.size
    Kf = G.shape[0]
    Ef = E.reshape(N * T)
    wf = weight.reshape(N * T)
    c = np.zeros(Kf)
    if K > 0:
        c[:K] = masked_correlations(D, Ef, wf)
    if fixed_effects:
        for i in range(N):
            for t in range(T):
                v = weight[i, t] * E[i, t]
                c[K + i] += v
                c[K + N + t] += v
    full = np.zeros(Kf)
    full[:K] = coef
    th = np.zeros(Kf)
    th[:K] = thresh
    start = full.copy()
    pen_norm2 = norm2.copy()
    for j in free:
        pen_norm2[j] = 0.0
    n_pen = 0
    for k in range(Kf):
        if pen_norm2[k] > 0.0:
            n_pen += 1
    nf = free.size
    cs = np.empty(nf)
    for rnd in range(max_rounds):
        step = 0.0
        if nf > 0:
            for a in range(nf):
                cs[a] = c[free[a]]
            d = P @ cs
            for a in range(nf):
                da = d[a]
                if da != 0.0:
                    ja = free[a]
                    full[ja] += da
                    for j in range(Kf):
                        c[j] -= G[j, ja] * da
            step = np.abs(d).max()
        if n_pen == 0:
            break
        before = full.copy()
        gram_sweeps(G, c, full, pen_norm2, th, 1, 0.0)
        size = 0.0
        for k in range(Kf):
            step = max(step, abs(full[k] - before[k]))
            size = max(size, abs(full[k]))
        if rnd > 0 and step <= tol * max(size, 1e-12):
            break
    for k in range(K):
        d = full[k] - start[k]
        if d != 0.0:
            for m in range(N * T):
                Ef[m] -= D[k, m] * d
            coef[k] = full[k]
    if fixed_effects:
        for i in range(N):
            d = full[K + i] - start[K + i]
            Gamma[i] += d
            for t in range(T):
                E[i, t] -= d
        for t in range(T):
            d = full[K + N + t] - start[K + N + t]
            Delta[t] += d
            for i in range(N):
                E[i, t] -= d


@njit(cache=True)
def block_descent(E, weight, D, norm2, thresh, lam_L, lam_H, lam_b, n_H, L, coef, Gamma, Delta,
                  row_cnt, col_cnt, fixed_effects, rank_cap, max_iter, tol, fe_first, fe_passes_n,
                  fe_tol, zero_tol, start_obj, trace, inner_max, G, gram_sweeps_max, free, P):
    """Outer block-coordinate-descent loop.

    Per iteration: alternate fixed-effect passes and cyclic coordinate sweeps
    over the covariate coefficients (up to `inner_max` rounds, stopping once
    a sweep leaves the coefficients unchanged to ``tol``), then one
    soft-impute step for ``L`` (a hard rank projection when
    ``rank_cap >= 0``). When a Gram matrix `G` of the stacked covariate and
    fixed-effect features is supplied (nonempty), the first block is solved
    jointly on it instead and `norm2` must cover all of its coordinates.
    ``E`` is the residual on all cells.
    Returns ``(n_iter, converged, nuclear_norm, rank)``.
    """
    N, T = E.shape
    n = 0.0
    for i in range(N):
        for t in range(T):
            n += weight[i, t]
    Ef = E.reshape(N * T)
    wf = weight.reshape(N * T)
    thr_L = lam_L * n / 2.0
    prev = start_obj
    nuc = 0.0
    rank = 0
    target = np.empty((N, T))
    for it in range(max_iter):
        if G.shape[0] > 0:
            _gram_block(E, weight, D, G, norm2, thresh, coef, Gamma, Delta, fixed_effects,
                        gram_sweeps_max, tol, free, P)
        else:
            for rnd in range(inner_max):
                if fixed_effects:
                    fe_passes(E, weight, row_cnt, col_cnt, Gamma, Delta,
                              fe_first if it == 0 and rnd == 0 else fe_passes_n, fe_tol)
                if D.shape[0] == 0:
                    break
                before = coef.copy()
                cd_sweep(D, Ef, wf, coef, norm2, thresh)
                step = 0.0
                size = 0.0
                for j in range(coef.size):
                    step = max(step, abs(coef[j] - before[j]))
                    size = max(size, abs(coef[j]))
                if step <= tol * max(size, 1e-12):
                    break
        for i in range(N):
            for t in range(T):
                if weight[i, t] > 0.0:
                    target[i, t] = E[i, t] + L[i, t]
                else:
                    target[i, t] = L[i, t]
        if rank_cap < 0 and _below(target, thr_L):
            # every singular value is under the threshold: L = 0, no SVD needed
            u = np.zeros((N, 0))
            s = np.zeros(0)
            vt = np.zeros((0, T))
        else:
            u, s, vt = np.linalg.svd(target, full_matrices=False)
        k = s.size
        if rank_cap >= 0:
            for j in range(k):
                if j >= rank_cap:
                    s[j] = 0.0
        else:
            for j in range(k):
                s[j] = max(s[j] - thr_L, 0.0)
        nuc = 0.0
        for j in range(k):
            nuc += s[j]
        rank = _rank(s, zero_tol)
        r = 0
        while r < k and s[r] > 0.0:
            r += 1
        if r > 0:
            us = np.empty((N, r))
            for i in range(N):
                for j in range(r):
                    us[i, j] = u[i, j] * s[j]
            Lnew = us @ np.ascontiguousarray(vt[:r, :])
        else:
            Lnew = np.zeros((N, T))
        for i in range(N):
            for t in range(T):
                E[i, t] += L[i, t] - Lnew[i, t]
                L[i, t] = Lnew[i, t]
        loss = 0.0
        for m in range(N * T):
            loss += wf[m] * Ef[m] * Ef[m]
        obj = loss / n
        if rank_cap < 0:
            obj += lam_L * nuc
            h = 0.0
            b = 0.0
            for j in range(coef.size):
                if j < n_H:
                    h += abs(coef[j])
                else:
                    b += abs(coef[j])
            obj += lam_H * h + lam_b * b
        trace[it] = obj
        if prev <= 0.0 or (prev - obj) <= tol * abs(prev):
            return it + 1, True, nuc, rank
        prev = obj
    return max_iter, False, nuc, rank
