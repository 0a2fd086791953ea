"""Numba-compiled 3x3 SPD primitives and the MCMC sweep kernel.

Everything here operates on plain float64 arrays so it can be JIT-compiled.
The public API in :mod:`fibertrace.spd` and :mod:`fibertrace.sampler` wraps
these functions with validation and friendlier types.

RNG discipline: every routine that draws random numbers takes an explicit
``numpy.random.Generator`` and consumes draws in a fixed, documented order,
so a chain is bit-reproducible from its seed.
"""

import math

import numpy as np
from numba import njit

# Cholesky pivots must exceed this fraction of the trace to count as PD.
PIVOT_REL_TOL = 1e-14
# Jacobi sweeps stop once the off-diagonal Frobenius norm drops below
# this (relative to the matrix scale, floored at 1.0).
JACOBI_TOL = 1e-13
_LOG_PI = math.log(math.pi)
_LOG_2 = math.log(2.0)


@njit(cache=True)
def chol3(a, out):
    """Lower Cholesky factor of a symmetric 3x3 matrix.

    Reads the lower triangle of ``a``, writes L into ``out``. Returns False
    when any pivot falls at or below ``PIVOT_REL_TOL * trace(a)``, i.e. the
    matrix is not (numerically) positive definite.
    """
    tr = a[0, 0] + a[1, 1] + a[2, 2]
    if not np.isfinite(tr) or tr <= 0.0:
        return False
    tol = PIVOT_REL_TOL * tr

    p0 = a[0, 0]
    if p0 <= tol:
        return False
    l00 = math.sqrt(p0)
    l10 = a[1, 0] / l00
    l20 = a[2, 0] / l00

    p1 = a[1, 1] - l10 * l10
    if p1 <= tol:
        return False
    l11 = math.sqrt(p1)
    l21 = (a[2, 1] - l20 * l10) / l11

    p2 = a[2, 2] - l20 * l20 - l21 * l21
    if p2 <= tol:
        return False
    l22 = math.sqrt(p2)

    out[0, 0] = l00
    out[0, 1] = 0.0
    out[0, 2] = 0.0
    out[1, 0] = l10
    out[1, 1] = l11
    out[1, 2] = 0.0
    out[2, 0] = l20
    out[2, 1] = l21
    out[2, 2] = l22
    return True


@njit(cache=True)
def logdet_from_chol(L):
    return 2.0 * (math.log(L[0, 0]) + math.log(L[1, 1]) + math.log(L[2, 2]))


@njit(cache=True)
def inv3_from_chol(L, out):
    """Inverse of L @ L.T given the lower Cholesky factor L."""
    # invert the triangular factor
    m00 = 1.0 / L[0, 0]
    m11 = 1.0 / L[1, 1]
    m22 = 1.0 / L[2, 2]
    m10 = -L[1, 0] * m00 * m11
    m20 = (L[1, 0] * L[2, 1] - L[2, 0] * L[1, 1]) * m00 * m11 * m22
    m21 = -L[2, 1] * m11 * m22
    # out = M^T M where M = L^{-1}
    out[0, 0] = m00 * m00 + m10 * m10 + m20 * m20
    out[0, 1] = m10 * m11 + m20 * m21
    out[0, 2] = m20 * m22
    out[1, 0] = out[0, 1]
    out[1, 1] = m11 * m11 + m21 * m21
    out[1, 2] = m21 * m22
    out[2, 0] = out[0, 2]
    out[2, 1] = out[1, 2]
    out[2, 2] = m22 * m22


@njit(cache=True)
def sym_trace_prod(a, b):
    """tr(a @ b) for symmetric 3x3 a, b."""
    return (
        a[0, 0] * b[0, 0]
        + a[1, 1] * b[1, 1]
        + a[2, 2] * b[2, 2]
        + 2.0 * (a[0, 1] * b[0, 1] + a[0, 2] * b[0, 2] + a[1, 2] * b[1, 2])
    )


@njit(cache=True)
def eigh3_jacobi(a):
    """Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.

    Returns (w, v) with eigenvalues ascending and eigenvectors in the
    columns of v. Deterministic; no LAPACK branch variability.
    """
    m = np.empty((3, 3))
    v = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            m[i, j] = 0.5 * (a[i, j] + a[j, i])
            v[i, j] = 0.0
        v[i, i] = 1.0

    fro = 0.0
    for i in range(3):
        for j in range(3):
            fro += m[i, j] * m[i, j]
    tol = JACOBI_TOL * max(1.0, math.sqrt(fro))

    for _ in range(50):
        off = math.sqrt(
            2.0 * (m[0, 1] * m[0, 1] + m[0, 2] * m[0, 2] + m[1, 2] * m[1, 2])
        )
        if off < tol:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                tau = (m[q, q] - m[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c

                app = m[p, p]
                aqq = m[q, q]
                m[p, p] = app - t * apq
                m[q, q] = aqq + t * apq
                m[p, q] = 0.0
                m[q, p] = 0.0
                r = 3 - p - q  # the remaining index
                arp = m[r, p]
                arq = m[r, q]
                m[r, p] = c * arp - s * arq
                m[p, r] = m[r, p]
                m[r, q] = s * arp + c * arq
                m[q, r] = m[r, q]
                for i in range(3):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = c * vip - s * viq
                    v[i, q] = s * vip + c * viq

    w = np.empty(3)
    for i in range(3):
        w[i] = m[i, i]
    # insertion sort ascending, keeping columns aligned
    for i in range(1, 3):
        key = w[i]
        col0, col1, col2 = v[0, i], v[1, i], v[2, i]
        j = i - 1
        while j >= 0 and w[j] > key:
            w[j + 1] = w[j]
            v[0, j + 1] = v[0, j]
            v[1, j + 1] = v[1, j]
            v[2, j + 1] = v[2, j]
            j -= 1
        w[j + 1] = key
        v[0, j + 1] = col0
        v[1, j + 1] = col1
        v[2, j + 1] = col2
    return w, v


@njit(cache=True)
def canonical_sign3(vec):
    """Flip vec so its largest-magnitude component is positive (in place)."""
    idx = 0
    best = abs(vec[0])
    if abs(vec[1]) > best:
        idx = 1
        best = abs(vec[1])
    if abs(vec[2]) > best:
        idx = 2
    if vec[idx] < 0.0:
        vec[0] = -vec[0]
        vec[1] = -vec[1]
        vec[2] = -vec[2]


@njit(cache=True)
def principal_axis3(a):
    """Principal eigenvector (canonical sign) and a degeneracy flag."""
    w, v = eigh3_jacobi(a)
    vec = np.empty(3)
    vec[0] = v[0, 2]
    vec[1] = v[1, 2]
    vec[2] = v[2, 2]
    nrm = math.sqrt(vec[0] ** 2 + vec[1] ** 2 + vec[2] ** 2)
    vec /= nrm
    canonical_sign3(vec)
    degenerate = (w[2] - w[1]) < 1e-9 * w[2]
    return vec, degenerate


@njit(cache=True)
def principal_axes_batch(tensors):
    """Principal eigenvectors for a stack of (n, 3, 3) tensors."""
    n = tensors.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        vec, _ = principal_axis3(tensors[i])
        out[i, 0] = vec[0]
        out[i, 1] = vec[1]
        out[i, 2] = vec[2]
    return out


@njit(cache=True)
def lmvgamma3(a):
    """log of the trivariate gamma function at a."""
    return (
        1.5 * _LOG_PI
        + math.lgamma(a)
        + math.lgamma(a - 0.5)
        + math.lgamma(a - 1.0)
    )


@njit(cache=True)
def wishart_logpdf3(x, mean, dof):
    """Log density of the mean-parameterized 3x3 Wishart.

    ``mean`` is E[X]; the underlying scale matrix is mean/dof. Returns NaN
    when either matrix fails the PD check.
    """
    lx = np.empty((3, 3))
    lv = np.empty((3, 3))
    if not chol3(x, lx):
        return np.nan
    if not chol3(mean, lv):
        return np.nan
    ld_x = logdet_from_chol(lx)
    ld_v = logdet_from_chol(lv)
    vinv = np.empty((3, 3))
    inv3_from_chol(lv, vinv)
    # tr((mean/dof)^-1 x) = dof * tr(mean^-1 x)
    tr_term = dof * sym_trace_prod(vinv, x)
    return (
        0.5 * (dof - 4.0) * ld_x
        - 0.5 * tr_term
        - 1.5 * dof * _LOG_2
        - 0.5 * dof * (ld_v - 3.0 * math.log(dof))
        - lmvgamma3(0.5 * dof)
    )


@njit(cache=True)
def wishart_sample3(rng, mean, dof, out):
    """Draw from the mean-parameterized Wishart via Bartlett decomposition.

    Draw order (fixed for reproducibility): gamma for the (0,0) diagonal,
    then row by row a normal for each subdiagonal entry followed by the
    gamma for the diagonal. Gamma-distributed squared diagonals support
    non-integer dof. Returns False if ``mean`` fails the PD check.
    """
    scale = mean / dof
    ls = np.empty((3, 3))
    if not chol3(scale, ls):
        return False
    b = np.zeros((3, 3))
    b[0, 0] = math.sqrt(rng.gamma(0.5 * dof, 2.0))
    b[1, 0] = rng.standard_normal()
    b[1, 1] = math.sqrt(rng.gamma(0.5 * (dof - 1.0), 2.0))
    b[2, 0] = rng.standard_normal()
    b[2, 1] = rng.standard_normal()
    b[2, 2] = math.sqrt(rng.gamma(0.5 * (dof - 2.0), 2.0))
    f = ls @ b
    for i in range(3):
        for j in range(3):
            s = 0.0
            for t in range(3):
                s += f[i, t] * f[j, t]
            out[i, j] = s
    return True


@njit(cache=True)
def _parent_mean(tensors, par_indptr, par_idx, v, out):
    """Average of v's parents into out; identity when v has no parents.

    Summation runs in ascending stored order so results are bit-stable.
    Returns the parent count.
    """
    lo = par_indptr[v]
    hi = par_indptr[v + 1]
    npar = hi - lo
    if npar == 0:
        for i in range(3):
            for j in range(3):
                out[i, j] = 1.0 if i == j else 0.0
        return 0
    for i in range(3):
        for j in range(3):
            out[i, j] = 0.0
    for e in range(lo, hi):
        u = par_idx[e]
        for i in range(3):
            for j in range(3):
                out[i, j] += tensors[u, i, j]
    inv = 1.0 / npar
    for i in range(3):
        for j in range(3):
            out[i, j] *= inv
    return npar


@njit(cache=True)
def _parent_mean_swapped(tensors, par_indptr, par_idx, u, site, a_new, out):
    """Parent average of u with the tensor at ``site`` replaced by a_new."""
    lo = par_indptr[u]
    hi = par_indptr[u + 1]
    npar = hi - lo
    for i in range(3):
        for j in range(3):
            out[i, j] = 0.0
    for e in range(lo, hi):
        w = par_idx[e]
        if w == site:
            for i in range(3):
                for j in range(3):
                    out[i, j] += a_new[i, j]
        else:
            for i in range(3):
                for j in range(3):
                    out[i, j] += tensors[w, i, j]
    inv = 1.0 / npar
    for i in range(3):
        for j in range(3):
            out[i, j] *= inv
    return npar


@njit(cache=True)
def residuals_sumsq(tensors, bfeat, y, log_s0):
    """Sum over voxels and measurements of squared Eq.-style residuals."""
    n = tensors.shape[0]
    m = bfeat.shape[0]
    total = 0.0
    for v in range(n):
        a = tensors[v]
        f0 = a[0, 0]
        f1 = a[1, 1]
        f2 = a[2, 2]
        f3 = a[0, 1]
        f4 = a[0, 2]
        f5 = a[1, 2]
        for i in range(m):
            q = (
                bfeat[i, 0] * f0
                + bfeat[i, 1] * f1
                + bfeat[i, 2] * f2
                + bfeat[i, 3] * f3
                + bfeat[i, 4] * f4
                + bfeat[i, 5] * f5
            )
            r = y[v, i] - log_s0[v] + q
            total += r * r
    return total


@njit(cache=True)
def _site_log_ratio(
    tensors,
    par_indptr,
    par_idx,
    chi_indptr,
    chi_idx,
    v,
    a_cur,
    a_new,
    l_cur,
    l_new,
    bfeat,
    y,
    log_s0,
    sigma2,
    k,
    q,
):
    """Log MH acceptance ratio for replacing the tensor at v with a_new.

    Normalizing terms that cancel between numerator and denominator are
    omitted; equivalence with full log-density differences is covered by
    tests against the reference implementation.
    """
    ld_cur = logdet_from_chol(l_cur)
    ld_new = logdet_from_chol(l_new)

    # likelihood difference
    d0 = a_new[0, 0] - a_cur[0, 0]
    d1 = a_new[1, 1] - a_cur[1, 1]
    d2 = a_new[2, 2] - a_cur[2, 2]
    d3 = a_new[0, 1] - a_cur[0, 1]
    d4 = a_new[0, 2] - a_cur[0, 2]
    d5 = a_new[1, 2] - a_cur[1, 2]
    c0 = a_cur[0, 0]
    c1 = a_cur[1, 1]
    c2 = a_cur[2, 2]
    c3 = a_cur[0, 1]
    c4 = a_cur[0, 2]
    c5 = a_cur[1, 2]
    acc = 0.0
    mcount = bfeat.shape[0]
    for i in range(mcount):
        dq = (
            bfeat[i, 0] * d0
            + bfeat[i, 1] * d1
            + bfeat[i, 2] * d2
            + bfeat[i, 3] * d3
            + bfeat[i, 4] * d4
            + bfeat[i, 5] * d5
        )
        qcur = (
            bfeat[i, 0] * c0
            + bfeat[i, 1] * c1
            + bfeat[i, 2] * c2
            + bfeat[i, 3] * c3
            + bfeat[i, 4] * c4
            + bfeat[i, 5] * c5
        )
        r = y[v, i] - log_s0[v] + qcur
        acc += dq * (2.0 * r + dq)
    logr = -acc / (2.0 * sigma2)

    # own prior term (mean fixed by parents, or identity at roots)
    vbar = np.empty((3, 3))
    _parent_mean(tensors, par_indptr, par_idx, v, vbar)
    lvb = np.empty((3, 3))
    if not chol3(vbar, lvb):
        return np.nan
    vbar_inv = np.empty((3, 3))
    inv3_from_chol(lvb, vbar_inv)
    logr += 0.5 * (k - 4.0) * (ld_new - ld_cur)
    logr -= 0.5 * k * (
        sym_trace_prod(vbar_inv, a_new) - sym_trace_prod(vbar_inv, a_cur)
    )

    # children terms: their prior means shift when v moves
    ubar = np.empty((3, 3))
    ubar_new = np.empty((3, 3))
    lu = np.empty((3, 3))
    uinv = np.empty((3, 3))
    for e in range(chi_indptr[v], chi_indptr[v + 1]):
        u = chi_idx[e]
        _parent_mean(tensors, par_indptr, par_idx, u, ubar)
        _parent_mean_swapped(tensors, par_indptr, par_idx, u, v, a_new, ubar_new)
        if not chol3(ubar, lu):
            return np.nan
        ld_u = logdet_from_chol(lu)
        inv3_from_chol(lu, uinv)
        tr_old = sym_trace_prod(uinv, tensors[u])
        if not chol3(ubar_new, lu):
            return np.nan
        ld_u_new = logdet_from_chol(lu)
        inv3_from_chol(lu, uinv)
        tr_new = sym_trace_prod(uinv, tensors[u])
        logr -= 0.5 * k * ((ld_u_new - ld_u) + (tr_new - tr_old))

    # proposal correction: W(A|A',q) / W(A'|A,q)
    linv = np.empty((3, 3))
    inv3_from_chol(l_new, linv)
    tr_fwd = sym_trace_prod(linv, a_cur)
    inv3_from_chol(l_cur, linv)
    tr_rev = sym_trace_prod(linv, a_new)
    logr += (q - 2.0) * (ld_cur - ld_new)
    logr -= 0.5 * q * (tr_fwd - tr_rev)
    return logr


@njit(cache=True)
def prior_field_stats(tensors, par_indptr, par_idx):
    """Sums of logdet(A_v), tr(mean_v^-1 A_v), logdet(mean_v) over voxels.

    mean_v is the parent average (identity at roots). These are the
    sufficient statistics of the field prior as a function of the dof.
    Returns NaN entries if any matrix fails the PD check.
    """
    n = tensors.shape[0]
    s_ldx = 0.0
    s_tr = 0.0
    s_ldv = 0.0
    vbar = np.empty((3, 3))
    l = np.empty((3, 3))
    vinv = np.empty((3, 3))
    for v in range(n):
        if not chol3(tensors[v], l):
            return np.nan, np.nan, np.nan
        s_ldx += logdet_from_chol(l)
        _parent_mean(tensors, par_indptr, par_idx, v, vbar)
        if not chol3(vbar, l):
            return np.nan, np.nan, np.nan
        s_ldv += logdet_from_chol(l)
        inv3_from_chol(l, vinv)
        s_tr += sym_trace_prod(vinv, tensors[v])
    return s_ldx, s_tr, s_ldv


@njit(cache=True)
def _field_log_prior_at(k, n, s_ldx, s_tr, s_ldv):
    """Field prior log density (up to A-independent data terms) at dof k."""
    return (
        0.5 * (k - 4.0) * s_ldx
        - 0.5 * k * s_tr
        - 0.5 * k * s_ldv
        + n * (-1.5 * k * _LOG_2 + 1.5 * k * math.log(k) - lmvgamma3(0.5 * k))
    )


@njit(cache=True)
def run_sweeps(
    rng,
    n_sweeps,
    tensors,
    scal,
    par_indptr,
    par_idx,
    chi_indptr,
    chi_idx,
    order,
    random_scan,
    bfeat,
    y,
    log_s0,
    mn_half,
    k_step,
    k_lo,
    k_hi,
    accept_sites,
):
    """Advance the chain by ``n_sweeps`` full sweeps, updating state in place.

    One sweep = a Metropolis-Hastings pass over all tensor sites in ``order``
    (optionally reshuffled per sweep), then a Gibbs draw of the noise
    variance, then a log-normal random-walk update of the field dof.

    ``scal`` packs [sigma2, k, q]. Returns the number of accepted dof moves.
    """
    n = tensors.shape[0]
    sigma2 = scal[0]
    k = scal[1]
    q = scal[2]
    a_new = np.empty((3, 3))
    l_cur = np.empty((3, 3))
    l_new = np.empty((3, 3))
    visit = order.copy()
    k_accepts = 0

    for _ in range(n_sweeps):
        if random_scan:
            # Fisher-Yates using the shared stream
            for i in range(n - 1, 0, -1):
                j = int(rng.random() * (i + 1))
                if j > i:
                    j = i
                tmp = visit[i]
                visit[i] = visit[j]
                visit[j] = tmp

        for t in range(n):
            v = visit[t]
            a_cur = tensors[v]
            if not wishart_sample3(rng, a_cur, q, a_new):
                continue
            if not chol3(a_new, l_new):
                continue  # non-PD proposal: auto-reject
            if not chol3(a_cur, l_cur):
                continue
            logr = _site_log_ratio(
                tensors,
                par_indptr,
                par_idx,
                chi_indptr,
                chi_idx,
                v,
                a_cur,
                a_new,
                l_cur,
                l_new,
                bfeat,
                y,
                log_s0,
                sigma2,
                k,
                q,
            )
            if np.isnan(logr):
                continue
            if math.log(rng.random()) < logr:
                for i in range(3):
                    for j in range(3):
                        tensors[v, i, j] = a_new[i, j]
                accept_sites[v] += 1

        # Gibbs update of the noise variance
        ssr = residuals_sumsq(tensors, bfeat, y, log_s0)
        shape = mn_half + 0.01
        rate = 0.5 * ssr + 0.01
        prec = rng.gamma(shape, 1.0 / rate)
        sigma2 = 1.0 / prec

        # log-normal random walk on the field dof, flat prior on (k_lo, k_hi)
        s_ldx, s_tr, s_ldv = prior_field_stats(tensors, par_indptr, par_idx)
        z = rng.standard_normal()
        k_prop = k * math.exp(k_step * z)
        if k_lo < k_prop < k_hi:
            logr_k = (
                _field_log_prior_at(k_prop, n, s_ldx, s_tr, s_ldv)
                - _field_log_prior_at(k, n, s_ldx, s_tr, s_ldv)
                + math.log(k_prop / k)
            )
            if math.log(rng.random()) < logr_k:
                k = k_prop
                k_accepts += 1

    scal[0] = sigma2
    scal[1] = k
    scal[2] = q
    return k_accepts
