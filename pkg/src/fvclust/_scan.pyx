# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled indicator scan (same contract as ``_scan_py.scan_cluster``).

The pure-Python reference refactors two Cholesky factors for every candidate
flip.  Here the factors of the current active set are kept and each candidate
is scored from them in O(d^2):

* adding column j appends a row to each factor; the new pivot ``s`` gives
  ``log det`` increments and the new forward-solve entry;
* removing active position i uses ``det(A_{-i}) = det(A) (A^-1)_{ii}`` and
  ``xi'A^-1 xi - (A^-1 xi)_i^2 / (A^-1)_{ii}``.

Accepted flips update the factors (row append, or row deletion followed by
Givens rotations).  Candidates whose pivot is numerically degenerate are
scored by a full factorization with the diagonal-jitter retry instead.
Factors are rebuilt from scratch at the start of every call.
"""
from libc.math cimport log, exp, lgamma, sqrt, hypot
from libc.stdlib cimport malloc, free

cdef double JITTER = 1e-8
cdef double PIVOT_TOL = 1e-12


cdef inline double _betaln(double x, double y) noexcept nogil:
    return lgamma(x) + lgamma(y) - lgamma(x + y)


cdef struct Work:
    int P
    int d
    int* act          # active full-column indices, factor order
    double* LR        # P x P row-major lower factor of R[act, act]
    double* LA        # P x P row-major lower factor of (Xi + R / tau)[act, act]
    double* y         # LA^-1 xi[act]
    double* w         # A^-1 xi[act]
    double* cR
    double* cA
    double* z
    double* tmp       # P x P scratch for full factorizations
    double ldR
    double ldA
    double quad


cdef int _chol_full(double* a, double* L, int d, int P) noexcept nogil:
    """Row-major lower Cholesky of the d x d block in ``a`` (stride P) into ``L``,
    with one relative-jitter retry.  ``a`` is left untouched."""
    cdef int attempt, i, j, k
    cdef double s, jit
    for attempt in range(2):
        for j in range(d):
            jit = 0.0
            if attempt == 1:
                jit = a[j * P + j]
                jit = JITTER * (jit if jit > 0 else 1.0)
            s = a[j * P + j] + jit
            for k in range(j):
                s -= L[j * P + k] * L[j * P + k]
            if not s > 0:
                break
            L[j * P + j] = sqrt(s)
            for i in range(j + 1, d):
                s = a[i * P + j]
                for k in range(j):
                    s -= L[i * P + k] * L[j * P + k]
                L[i * P + j] = s / L[j * P + j]
        else:
            return 0
    return -1


cdef void _forward(double* L, double* b, double* out, int d, int P) noexcept nogil:
    cdef int i, k
    cdef double s
    for i in range(d):
        s = b[i]
        for k in range(i):
            s -= L[i * P + k] * out[k]
        out[i] = s / L[i * P + i]


cdef void _backward(double* L, double* b, double* out, int d, int P) noexcept nogil:
    cdef int i, k
    cdef double s
    for i in range(d - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, d):
            s -= L[k * P + i] * out[k]
        out[i] = s / L[i * P + i]


cdef double _logdet(double* L, int d, int P) noexcept nogil:
    cdef int i
    cdef double s = 0.0
    for i in range(d):
        s += log(L[i * P + i])
    return 2.0 * s


cdef void _refresh_solves(Work* W, const double[::1] xi) noexcept nogil:
    cdef int i
    cdef double q = 0.0
    for i in range(W.d):
        W.z[i] = xi[W.act[i]]
    _forward(W.LA, W.z, W.y, W.d, W.P)
    for i in range(W.d):
        q += W.y[i] * W.y[i]
    W.quad = q
    _backward(W.LA, W.y, W.w, W.d, W.P)
    W.ldR = _logdet(W.LR, W.d, W.P)
    W.ldA = _logdet(W.LA, W.d, W.P)


cdef int _factor_set(Work* W, int* act, int d, const double[:, ::1] Xi, const double[::1] xi,
                     const double[:, ::1] R, double tau) noexcept nogil:
    """Factor the given active set into W (both factors) and refresh solves."""
    cdef int i, j, P = W.P
    for i in range(d):
        W.act[i] = act[i]
    W.d = d
    for i in range(d):
        for j in range(d):
            W.tmp[i * P + j] = R[act[i], act[j]]
    if _chol_full(W.tmp, W.LR, d, P) != 0:
        return -1
    for i in range(d):
        for j in range(d):
            W.tmp[i * P + j] = Xi[act[i], act[j]] + R[act[i], act[j]] / tau
    if _chol_full(W.tmp, W.LA, d, P) != 0:
        return -1
    _refresh_solves(W, xi)
    return 0


cdef inline double _lml(int d, double tau, double ldA, double ldR, double quad) noexcept nogil:
    return -0.5 * (d * log(tau) + ldA - ldR) + 0.5 * quad


cdef int _score_full(Work* W, int j_add, int i_del, const double[:, ::1] Xi, const double[::1] xi,
                     const double[:, ::1] R, double tau, double* out) noexcept nogil:
    """Score a candidate set from scratch (jittered factorization path)."""
    cdef int i, n = 0, P = W.P, a, b
    cdef int* cand = <int*>malloc((W.d + 1) * sizeof(int))
    cdef double* L = <double*>malloc(P * P * sizeof(double))
    cdef double ldR, ldA, q = 0.0
    cdef int status = 0
    if cand == NULL or L == NULL:
        free(cand)
        free(L)
        return -1
    for i in range(W.d):
        if i != i_del:
            cand[n] = W.act[i]
            n += 1
    if j_add >= 0:
        cand[n] = j_add
        n += 1
    for a in range(n):
        for b in range(n):
            W.tmp[a * P + b] = R[cand[a], cand[b]]
    if _chol_full(W.tmp, L, n, P) != 0:
        status = -1
    else:
        ldR = _logdet(L, n, P)
        for a in range(n):
            for b in range(n):
                W.tmp[a * P + b] = Xi[cand[a], cand[b]] + R[cand[a], cand[b]] / tau
        if _chol_full(W.tmp, L, n, P) != 0:
            status = -1
        else:
            ldA = _logdet(L, n, P)
            for a in range(n):
                W.cR[a] = xi[cand[a]]
            _forward(L, W.cR, W.z, n, P)
            for a in range(n):
                q += W.z[a] * W.z[a]
            out[0] = _lml(n, tau, ldA, ldR, q)
    free(cand)
    free(L)
    return status


cdef int _score_add(Work* W, int j, const double[:, ::1] Xi, const double[::1] xi,
                    const double[:, ::1] R, double tau, double* out, double* sR, double* sA) noexcept nogil:
    """Incremental score for adding column j; returns 1 if degenerate."""
    cdef int i, d = W.d, P = W.P
    cdef double s, rjj, ajj, yn, cy = 0.0
    for i in range(d):
        W.z[i] = R[W.act[i], j]
    _forward(W.LR, W.z, W.cR, d, P)
    rjj = R[j, j]
    s = rjj
    for i in range(d):
        s -= W.cR[i] * W.cR[i]
    if not s > PIVOT_TOL * rjj:
        return 1
    sR[0] = s
    for i in range(d):
        W.z[i] = Xi[W.act[i], j] + R[W.act[i], j] / tau
    _forward(W.LA, W.z, W.cA, d, P)
    ajj = Xi[j, j] + rjj / tau
    s = ajj
    for i in range(d):
        s -= W.cA[i] * W.cA[i]
        cy += W.cA[i] * W.y[i]
    if not s > PIVOT_TOL * ajj:
        return 1
    sA[0] = s
    yn = (xi[j] - cy) / sqrt(s)
    out[0] = _lml(d + 1, tau, W.ldA + log(sA[0]), W.ldR + log(sR[0]), W.quad + yn * yn)
    return 0


cdef double _inv_diag(double* L, int pos, int d, int P, double* z) noexcept nogil:
    """(A^-1)_{pos,pos} = ||L^-1 e_pos||^2."""
    cdef int i, k
    cdef double s, acc
    z[pos] = 1.0 / L[pos * P + pos]
    acc = z[pos] * z[pos]
    for i in range(pos + 1, d):
        s = 0.0
        for k in range(pos, i):
            s -= L[i * P + k] * z[k]
        z[i] = s / L[i * P + i]
        acc += z[i] * z[i]
    return acc


cdef int _score_remove(Work* W, int pos, double tau, double* out) noexcept nogil:
    cdef double iR, iA, wq
    iR = _inv_diag(W.LR, pos, W.d, W.P, W.z)
    iA = _inv_diag(W.LA, pos, W.d, W.P, W.z)
    if not (iR > 0 and iA > 0):
        return 1
    wq = W.w[pos] * W.w[pos] / iA
    out[0] = _lml(W.d - 1, tau, W.ldA + log(iA), W.ldR + log(iR), W.quad - wq)
    return 0


cdef void _append_row(double* L, double* c, double s, int d, int P) noexcept nogil:
    cdef int i
    for i in range(d):
        L[d * P + i] = c[i]
    L[d * P + d] = sqrt(s)


cdef void _delete_row(double* L, int pos, int d, int P) noexcept nogil:
    """Cholesky factor of the matrix with row/column ``pos`` removed."""
    cdef int i, k
    cdef double a, b, r, c, s, u, v
    for i in range(pos, d - 1):
        for k in range(i + 2):
            L[i * P + k] = L[(i + 1) * P + k]
    for k in range(pos, d - 1):
        a = L[k * P + k]
        b = L[k * P + k + 1]
        r = hypot(a, b)
        c = a / r
        s = b / r
        for i in range(k, d - 1):
            u = L[i * P + k]
            v = L[i * P + k + 1]
            L[i * P + k] = c * u + s * v
            L[i * P + k + 1] = -s * u + c * v


def scan_cluster(const double[:, ::1] Xi, const double[::1] xi, const double[:, ::1] R,
                 unsigned char[::1] mask, const long[::1] positions, const long[::1] owner,
                 const unsigned char[::1] is_const, const long[::1] M, double a, double b,
                 double tau, const double[::1] uniforms, bint use_lik):
    cdef int P = mask.shape[0], nL = M.shape[0]
    cdef Py_ssize_t n = positions.shape[0], j
    cdef Work W
    cdef long* counts = <long*>malloc((nL + 1) * sizeof(long))
    cdef int* act = <int*>malloc((P + 1) * sizeof(int))
    cdef int status = 0, flips = 0, d = 0, i, pos, l, found, deg
    cdef double lp, lp_new, lik, lik_new = 0.0, cur, new, f0, f1, p1, e, sR = 0.0, sA = 0.0
    cdef unsigned char old, inc
    W.P = P
    W.act = <int*>malloc((P + 1) * sizeof(int))
    W.LR = <double*>malloc(P * P * sizeof(double))
    W.LA = <double*>malloc(P * P * sizeof(double))
    W.tmp = <double*>malloc(P * P * sizeof(double))
    W.y = <double*>malloc((P + 1) * sizeof(double))
    W.w = <double*>malloc((P + 1) * sizeof(double))
    W.cR = <double*>malloc((P + 1) * sizeof(double))
    W.cA = <double*>malloc((P + 1) * sizeof(double))
    W.z = <double*>malloc((P + 1) * sizeof(double))
    if not (counts and act and W.act and W.LR and W.LA and W.tmp and W.y and W.w and W.cR and W.cA and W.z):
        status = -2
    with nogil:
        if status == 0:
            for l in range(nL):
                counts[l] = 0
            for i in range(P):
                if mask[i]:
                    act[d] = i
                    d += 1
                    if not is_const[i]:
                        counts[owner[i]] += 1
            lp = 0.0
            for l in range(nL):
                lp += _betaln(counts[l] + a, M[l] + 1 - counts[l] + b)
            lik = 0.0
            if use_lik:
                status = _factor_set(&W, act, d, Xi, xi, R, tau)
                lik = _lml(W.d, tau, W.ldA, W.ldR, W.quad)
        if status == 0:
            for j in range(n):
                pos = <int>positions[j]
                l = owner[pos]
                old = mask[pos]
                if old:
                    lp_new = (lp - _betaln(counts[l] + a, M[l] + 1 - counts[l] + b)
                              + _betaln(counts[l] - 1 + a, M[l] + 2 - counts[l] + b))
                else:
                    lp_new = (lp - _betaln(counts[l] + a, M[l] + 1 - counts[l] + b)
                              + _betaln(counts[l] + 1 + a, M[l] - counts[l] + b))
                found = -1
                deg = 0
                if use_lik:
                    if old:
                        for i in range(W.d):
                            if W.act[i] == pos:
                                found = i
                                break
                        deg = _score_remove(&W, found, tau, &lik_new)
                        if deg:
                            status = _score_full(&W, -1, found, Xi, xi, R, tau, &lik_new)
                    else:
                        deg = _score_add(&W, pos, Xi, xi, R, tau, &lik_new, &sR, &sA)
                        if deg:
                            status = _score_full(&W, pos, -1, Xi, xi, R, tau, &lik_new)
                    if status != 0:
                        break
                cur = lp + lik
                new = lp_new + lik_new
                if old:
                    f1 = cur
                    f0 = new
                else:
                    f1 = new
                    f0 = cur
                if f1 >= f0:
                    p1 = 1.0 / (1.0 + exp(f0 - f1))
                else:
                    e = exp(f1 - f0)
                    p1 = e / (1.0 + e)
                inc = 1 if uniforms[j] < p1 else 0
                if inc == old:
                    continue
                flips += 1
                mask[pos] = inc
                lp = lp_new
                counts[l] += 1 if inc else -1
                if not use_lik:
                    continue
                lik = lik_new
                if deg:
                    d = 0
                    for i in range(W.d):
                        if i != found:
                            act[d] = W.act[i]
                            d += 1
                    if inc:
                        act[d] = pos
                        d += 1
                    status = _factor_set(&W, act, d, Xi, xi, R, tau)
                    if status != 0:
                        break
                elif inc:
                    _append_row(W.LR, W.cR, sR, W.d, P)
                    _append_row(W.LA, W.cA, sA, W.d, P)
                    W.act[W.d] = pos
                    W.d += 1
                    _refresh_solves(&W, xi)
                else:
                    _delete_row(W.LR, found, W.d, P)
                    _delete_row(W.LA, found, W.d, P)
                    for i in range(found, W.d - 1):
                        W.act[i] = W.act[i + 1]
                    W.d -= 1
                    _refresh_solves(&W, xi)
    free(counts); free(act); free(W.act); free(W.LR); free(W.LA); free(W.tmp)
    free(W.y); free(W.w); free(W.cR); free(W.cA); free(W.z)
    if status == -2:
        raise MemoryError()
    return -1 if status != 0 else flips
