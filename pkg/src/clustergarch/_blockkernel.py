"""Compiled per-step evaluation for block correlation models.

Mirrors ``scores.score_block_*`` and the block log densities, working on
pre-rotated data so each step only touches K x K (and K^2 x K^2) objects.
Tested against the reference implementations for equality.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GAUSS, MVT, CLUSTER, HETERO, CANON = 0, 1, 2, 3, 4

OK, SOLVE_FAIL, EXPLODED, BAD_LAMBDA = 0, 1, 2, 3

TIE = 1e-10

SMALL_FLOPS = 30000


@njit(cache=True)
def _mm(a, b):
    # BLAS call overhead dominates for the K = 2..4 products
    if a.shape[0] * a.shape[1] * b.shape[1] > SMALL_FLOPS:
        return np.ascontiguousarray(a) @ np.ascontiguousarray(b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for l in range(a.shape[1]):
            ail = a[i, l]
            if ail != 0.0:
                for j in range(b.shape[1]):
                    out[i, j] += ail * b[l, j]
    return out


@njit(cache=True)
def _mv(a, x):
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        s = 0.0
        for l in range(a.shape[1]):
            s += a[i, l] * x[l]
        out[i] = s
    return out


@njit(cache=True)
def _divided_exp(w):
    k = w.size
    out = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            gap = w[a] - w[b]
            if abs(gap) < TIE * max(1.0, abs(w[a])):
                out[a, b] = math.exp(w[a])
            else:
                out[a, b] = (math.exp(w[a]) - math.exp(w[b])) / gap
    return out


@njit(cache=True)
def _exp_diag_and_jac(w, v):
    k = w.size
    delta = _divided_exp(w)
    diag = np.zeros(k)
    jac = np.zeros((k, k))
    for i in range(k):
        s = 0.0
        for a in range(k):
            s += v[i, a] * v[i, a] * math.exp(w[a])
        diag[i] = s
    for i in range(k):
        for j in range(i, k):
            s = 0.0
            for a in range(k):
                via = v[i, a] * v[j, a]
                for b in range(k):
                    s += via * v[i, b] * v[j, b] * delta[a, b]
            jac[i, j] = s
            jac[j, i] = s
    return diag, jac


@njit(cache=True)
def _residual(a_tilde, y, cdiag, sizes, log_n):
    k = y.size
    m = a_tilde.copy()
    for i in range(k):
        m[i, i] += y[i]
    w, v = np.linalg.eigh(m)
    diag, jac = _exp_diag_and_jac(w, v)
    f = np.empty(k)
    for i in range(k):
        within = (sizes[i] - 1.0) * math.exp(y[i] - cdiag[i])
        tot = diag[i] + within
        f[i] = math.log(tot) - log_n[i]
        for j in range(k):
            jac[i, j] /= tot
        jac[i, i] += within / tot
    return f, jac, w, v


@njit(cache=True)
def solve_core(a_tilde, cdiag, sizes, y, tol, max_iter):
    """Newton iteration (with plain fixed-point fallback) for the diagonal shift.

    Returns ``(y, eigenvalues, eigenvectors, status)`` of ``A_tilde + diag(y)``.
    """
    log_n = np.log(sizes)
    f, jac, w, v = _residual(a_tilde, y, cdiag, sizes, log_n)
    size = np.max(np.abs(f))
    for _ in range(max_iter):
        if size < tol:
            return y, w, v, OK
        step = np.linalg.solve(jac, -f)
        cand = y + step
        f2, jac2, w2, v2 = _residual(a_tilde, cand, cdiag, sizes, log_n)
        size2 = np.max(np.abs(f2))
        if not size2 < size:
            cand = y - f
            f2, jac2, w2, v2 = _residual(a_tilde, cand, cdiag, sizes, log_n)
            size2 = np.max(np.abs(f2))
        if not np.isfinite(size2):
            return y, w, v, SOLVE_FAIL
        y, f, jac, w, v, size = cand, f2, jac2, w2, v2, size2
    if size < tol:
        return y, w, v, OK
    return y, w, v, SOLVE_FAIL


@njit(cache=True)
def _lt_const(nu, m):
    return math.lgamma(0.5 * (nu + m)) - math.lgamma(0.5 * nu) - 0.5 * m * math.log((nu - 2.0) * math.pi)


@njit(cache=True)
def step_eval(eta_full, y_warm, sizes, labels, free_pos, y0, ss, dev, code, dofs, tol, max_iter):
    """Log density, score and information diagonal at one observation.

    ``eta_full`` is the full vech vector, ``y0`` the K block-average
    coordinates ``Q'z``, ``ss`` the within-block sums of squares and ``dev``
    the within-block deviations ``z - block mean`` (only used by Hetero-t).
    Returns ``(loglik, grad, scale, y, rho, status)``.
    """
    k = sizes.size
    kk = k * k
    d = free_pos.size
    # condensed matrix and A_tilde
    ct = np.zeros((k, k))
    pos = 0
    for c in range(k):
        for r in range(c, k):
            ct[r, c] = eta_full[pos]
            ct[c, r] = eta_full[pos]
            pos += 1
    a_t = np.empty((k, k))
    cdiag = np.empty(k)
    for r in range(k):
        cdiag[r] = ct[r, r]
        for c in range(k):
            if r == c:
                a_t[r, c] = ct[r, r] * (sizes[r] - 1.0)
            else:
                a_t[r, c] = ct[r, c] * math.sqrt(sizes[r] * sizes[c])
    y, w, v, status = solve_core(a_t, cdiag, sizes, y_warm.copy(), tol, max_iter)
    grad = np.zeros(d)
    scale = np.zeros(d)
    rho = np.zeros((k, k))
    if status != OK:
        return 0.0, grad, scale, y, rho, status
    multi = sizes > 1.5
    lam = np.ones(k)
    for i in range(k):
        if multi[i]:
            lam[i] = math.exp(y[i] - cdiag[i])
    ew = np.exp(w)
    a = _mm(v * ew, v.T)
    a_inv = _mm(v * np.exp(-w), v.T)
    a_ih = _mm(v * np.exp(-0.5 * w), v.T)
    for r in range(k):
        for c in range(k):
            if r == c:
                rho[r, r] = 1.0 - lam[r] if multi[r] else 1.0
            else:
                rho[r, c] = a[r, c] / math.sqrt(sizes[r] * sizes[c])
    logdet = 0.0
    for i in range(k):
        logdet += w[i]
        if multi[i]:
            logdet += (sizes[i] - 1.0) * math.log(lam[i])
    x0 = _mv(a_ih, y0)
    m = np.ones(k)
    inv_lam = np.zeros(k)
    within = np.zeros(k)
    for i in range(k):
        if multi[i]:
            m[i] = sizes[i] - 1.0
            inv_lam[i] = 1.0 / lam[i]
            within[i] = ss[i] / lam[i]
    n_tot = 0.0
    for i in range(k):
        n_tot += sizes[i]

    # per-distribution log density, K^2 score core and information pieces
    grad_a = np.zeros(kk)
    svec = np.zeros(k)
    big_xi = np.zeros(k)
    theta = np.zeros(k)
    upsilon = np.zeros(kk)
    use_omega = code == CLUSTER or code == HETERO
    phi = 1.0
    quad0 = 0.0
    for i in range(k):
        quad0 += x0[i] * x0[i]
    ll = -0.5 * logdet
    if code == GAUSS or code == MVT:
        quad = quad0
        for i in range(k):
            quad += within[i]
        if code == GAUSS:
            wt = 1.0
            phi = 1.0
            ll += -0.5 * n_tot * math.log(2.0 * math.pi) - 0.5 * quad
        else:
            nu = dofs[0]
            wt = (nu + n_tot) / (nu - 2.0 + quad)
            phi = (nu + n_tot) / (nu + n_tot + 2.0)
            ll += _lt_const(nu, n_tot) - 0.5 * (nu + n_tot) * math.log1p(quad / (nu - 2.0))
        for i in range(k):
            if multi[i]:
                svec[i] = inv_lam[i] * (1.0 - wt * within[i] / m[i])
                big_xi[i] = inv_lam[i] * inv_lam[i] / m[i]
        outer_w = wt
    elif code == CANON:
        nu0 = dofs[0]
        outer_w = (nu0 + k) / (nu0 - 2.0 + quad0)
        phi = (nu0 + k) / (nu0 + k + 2.0)
        ll += _lt_const(nu0, k) - 0.5 * (nu0 + k) * math.log1p(quad0 / (nu0 - 2.0))
        for i in range(k):
            if multi[i]:
                nu = dofs[i + 1]
                wk = (nu + m[i]) / (nu - 2.0 + within[i])
                phk = (nu + m[i]) / (nu + m[i] + 2.0)
                ll += _lt_const(nu, m[i]) - 0.5 * (nu + m[i]) * math.log1p(within[i] / (nu - 2.0))
                svec[i] = inv_lam[i] * (1.0 - wk * within[i] / m[i])
                big_xi[i] = (phk - 1.0) * inv_lam[i] ** 2 + 2.0 * phk * inv_lam[i] ** 2 / m[i]
    elif code == CLUSTER:
        coef = np.zeros(k)
        for i in range(k):
            nu = dofs[i]
            q = x0[i] * x0[i] + within[i]
            wk = (nu + sizes[i]) / (nu - 2.0 + q)
            ll += _lt_const(nu, sizes[i]) - 0.5 * (nu + sizes[i]) * math.log1p(q / (nu - 2.0))
            coef[i] = wk * x0[i]
            phk = (nu + sizes[i]) / (nu + sizes[i] + 2.0)
            psk = phk * nu / (nu - 2.0)
            if multi[i]:
                svec[i] = inv_lam[i] * (1.0 - wk * within[i] / m[i])
                big_xi[i] = (phk - 1.0) * inv_lam[i] ** 2 + 2.0 * phk * inv_lam[i] ** 2 / m[i]
            theta[i] = inv_lam[i] * (1.0 - phk)
            for b in range(k):
                upsilon[i + b * k] = psk
            upsilon[i + i * k] += 3.0 * phk - psk - 2.0
        for b in range(k):
            for aa in range(k):
                grad_a[aa + b * k] = coef[aa] * x0[b]
    else:  # HETERO
        coef = np.zeros(k)
        proj = np.zeros(k)
        phib = np.zeros(k)
        psib = np.zeros(k)
        for j in range(dev.size):
            g = labels[j]
            nu = dofs[j]
            root = math.sqrt(sizes[g])
            cent = dev[j] / math.sqrt(lam[g])
            u = x0[g] / root + cent
            wu = (nu + 1.0) / (nu - 2.0 + u * u) * u
            ll += _lt_const(nu, 1.0) - 0.5 * (nu + 1.0) * math.log1p(u * u / (nu - 2.0))
            coef[g] += wu / root
            proj[g] += wu * cent
            ph = (nu + 1.0) / (nu + 3.0)
            phib[g] += ph / sizes[g]
            psib[g] += ph * nu / (nu - 2.0) / sizes[g]
        for i in range(k):
            if multi[i]:
                svec[i] = inv_lam[i] * (1.0 - proj[i] / m[i])
                big_xi[i] = inv_lam[i] ** 2 / sizes[i] * (3.0 * phib[i] - 1.0 + (psib[i] + 1.0) / m[i])
            theta[i] = inv_lam[i] / sizes[i] * (psib[i] + 2.0 - 3.0 * phib[i])
            for b in range(k):
                upsilon[i + b * k] = psib[i]
            upsilon[i + i * k] += (3.0 * phib[i] - 2.0 - psib[i]) / sizes[i]
        for b in range(k):
            for aa in range(k):
                grad_a[aa + b * k] = coef[aa] * x0[b]

    # Kronecker eigenbasis and derivative of A w.r.t. eta
    vv = np.empty((kk, kk))
    for a1 in range(k):
        for b1 in range(k):
            for a2 in range(k):
                for b2 in range(k):
                    # column-major vec: index a + b*k
                    vv[a1 + b1 * k, a2 + b2 * k] = v[a1, a2] * v[b1, b2]
    delta = _divided_exp(w)
    dvec = np.empty(kk)
    for a2 in range(k):
        for b2 in range(k):
            dvec[a2 + b2 * k] = delta[a2, b2]
    # columns of Lambda_n(x)D_K restricted to free coordinates
    dmat = np.zeros((kk, d))
    vr = np.empty(k * (k + 1) // 2, dtype=np.int64)
    vc = np.empty(k * (k + 1) // 2, dtype=np.int64)
    pos = 0
    for c in range(k):
        for r in range(c, k):
            vr[pos] = r
            vc[pos] = c
            pos += 1
    for j in range(d):
        p = free_pos[j]
        r = vr[p]
        c = vc[p]
        sc = math.sqrt(sizes[r] * sizes[c])
        dmat[r + c * k, j] += sc
        if r != c:
            dmat[c + r * k, j] += sc
    # Gamma_A = vv diag(delta) vv'
    gam = _mm(vv * dvec, vv.T)
    gd = np.empty((k, kk))
    phim = np.zeros((k, k))
    for i in range(k):
        gd[i, :] = gam[i + i * k, :]
        phim[i, i] = lam[i] * (sizes[i] - 1.0)
    inner = phim.copy()
    for i in range(k):
        for j in range(k):
            inner[i, j] += gd[i, j + j * k]
    gdd = _mm(gd, dmat)
    corr = np.linalg.solve(inner, gdd)
    pi = _mm(gam, dmat) - _mm(gd.T, corr)

    # tilde basis: pt = vv' pi
    pt = _mm(vv.T, pi)
    kperm = np.empty(kk, dtype=np.int64)
    for aa in range(k):
        for b in range(k):
            kperm[aa + b * k] = b + aa * k
    vec_ainv = np.empty(kk)
    for b in range(k):
        for aa in range(k):
            vec_ainv[aa + b * k] = a_inv[aa, b]

    if use_omega:
        rt = np.exp(0.5 * w)
        om = np.empty(kk)
        for aa in range(k):
            for b in range(k):
                om[aa + b * k] = (1.0 / rt[aa]) / (rt[aa] + rt[b])
        # Omega = vv diag(om) vv'
        for aa in range(k):
            grad_a[aa + aa * k] -= 1.0
        ga_t = _mv(vv.T, grad_a)
        core = _mv(vv, om * ga_t)
        for i in range(k):
            core[i + i * k] += 0.5 * svec[i]
        grad = _mv(pi.T, core)
        opt = np.empty((kk, d))
        for p in range(kk):
            opt[p, :] = om[p] * pt[p, :]
        omega_pi = _mm(vv, opt)
        for j in range(d):
            s = 0.0
            for p in range(kk):
                s += opt[p, j] * opt[kperm[p], j]
                s += upsilon[p] * omega_pi[p, j] ** 2
            for i in range(k):
                pd = pi[i + i * k, j]
                s += 0.25 * big_xi[i] * pd * pd + theta[i] * pd * omega_pi[i + i * k, j]
            scale[j] = s
    else:
        # 1/2 A^{-1/2}(x)A^{-1/2} [W vec(x0 x0') - vec(I)] + 1/2 E_d' S
        mat = np.empty((k, k))
        for r in range(k):
            for c in range(k):
                mat[r, c] = outer_w * x0[r] * x0[c]
            mat[r, r] -= 1.0
        core_m = _mm(_mm(a_ih, mat), a_ih)
        core = np.empty(kk)
        for b in range(k):
            for aa in range(k):
                core[aa + b * k] = 0.5 * core_m[aa, b]
        for i in range(k):
            core[i + i * k] += 0.5 * svec[i]
        grad = _mv(pi.T, core)
        ainv_eig = np.empty(kk)
        for aa in range(k):
            for b in range(k):
                ainv_eig[aa + b * k] = math.exp(-w[aa] - w[b])
        va = _mv(pi.T, vec_ainv)
        canon = code == CANON
        for j in range(d):
            hsum = 0.0
            for p in range(kk):
                hsum += ainv_eig[p] * pt[p, j] * (pt[p, j] + pt[kperm[p], j])
            s = 0.25 * (phi * hsum + (phi - 1.0) * va[j] * va[j])
            xi_d = 0.0
            xx = 0.0
            for i in range(k):
                pd = pi[i + i * k, j]
                if canon:
                    xx += big_xi[i] * pd * pd
                else:
                    xx += big_xi[i] * pd * pd
                    xi_d += inv_lam[i] * pd
            if canon:
                s += 0.25 * xx
            else:
                s += 0.5 * phi * xx + 0.25 * (1.0 - phi) * (2.0 * va[j] * xi_d - xi_d * xi_d)
            scale[j] = s
    return ll, grad, scale, y, rho, OK


@njit(cache=True, nogil=True)
def block_filter(y0s, sss, devs, sizes, labels, free_pos, mu, beta, alpha, code, dofs,
                 tol, max_iter, bound, eta_dim):
    """Score-driven recursion over a sample; stops at the first failure.

    Returns ``(per_t, path, rho_path, final_state, t_stop, status)``.
    """
    t_len = y0s.shape[0]
    k = sizes.size
    d = free_pos.size
    per_t = np.zeros(t_len)
    path = np.zeros((t_len, d))
    rho_path = np.zeros((t_len, k, k))
    state = mu.copy()
    eta_full = np.zeros(eta_dim)
    y = np.zeros(k)
    prev_scale = np.ones(d)
    for t in range(t_len):
        path[t, :] = state
        for j in range(d):
            eta_full[free_pos[j]] = state[j]
        ll, grad, scale, y, rho, status = step_eval(eta_full, y, sizes, labels, free_pos, y0s[t], sss[t], devs[t],
                                                   code, dofs, tol, max_iter)
        if status != OK:
            return per_t, path, rho_path, state, t, status
        per_t[t] = ll
        rho_path[t] = rho
        for j in range(d):
            if not scale[j] >= 1e-12:
                scale[j] = prev_scale[j]
            prev_scale[j] = scale[j]
        new = np.empty(d)
        for j in range(d):
            new[j] = (1.0 - beta[j]) * mu[j] + beta[j] * state[j] + alpha[j] * grad[j] / scale[j]
            if not abs(new[j]) <= bound:
                return per_t, path, rho_path, new, t, EXPLODED
        state = new
    return per_t, path, rho_path, state, t_len, OK
