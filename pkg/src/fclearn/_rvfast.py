"""Compiled (numba) engine for the constant optimiser.

Runs the same generation loop as :class:`fclearn.rvopt.RVGomea` (mixed,
univariate or full FOS; AVS, AMS, forced improvements, the 1 % termination
rule) without per-step Python overhead. Expressions are flattened to a
postfix program; subtrees without CFCs become precomputed rows.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .expr import (DENOM_FLOOR, EXP_CLAMP, OPERATORS, POW_CLAMP, VALUE_CLAMP,
                   apply_operator_tree)

OP_T = len(OPERATORS)
OP_C = OP_T + 1
OP_PRE = OP_T + 2
_CODE = {name: i for i, name in enumerate(OPERATORS)}
ADD, SUB, MUL, DIV, DIV_M, EXP_PROD, EXP, POW, POW_M, LOG_P = range(10)

_BIG = np.finfo(float).max


def compile_program(expr, points, cache=None, data_id=None):
    """Postfix ``(code, arg)`` arrays plus the precomputed-row matrix for ``expr``."""
    code, arg, rows = [], [], []

    def rec(e):
        if e.kind == "t":
            code.append(OP_T)
            arg.append(0)
        elif e.kind == "c":
            code.append(OP_C)
            arg.append(e.slot)
        elif e.n_cfc == 0:
            if cache is not None and data_id is not None:
                val = cache.get(e.key, data_id, lambda: apply_operator_tree(e, points))
            else:
                val = apply_operator_tree(e, points)
            code.append(OP_PRE)
            arg.append(len(rows))
            rows.append(val)
        else:
            for ch in e.children:
                rec(ch)
            code.append(_CODE[e.kind])
            arg.append(0)

    rec(expr)
    pre = np.array(rows, dtype=float).reshape(len(rows), len(points))
    return np.array(code, dtype=np.int64), np.array(arg, dtype=np.int64), pre


# ---------------------------------------------------------------------------
# protected scalar operators (mirror expr.OPERATOR_FUNCS)

@njit(cache=True)
def _clip(x):
    if x > VALUE_CLAMP:
        return VALUE_CLAMP
    if x < -VALUE_CLAMP:
        return -VALUE_CLAMP
    return x


@njit(cache=True)
def _sexp(x):
    if x > EXP_CLAMP:
        x = EXP_CLAMP
    elif x < -EXP_CLAMP:
        x = -EXP_CLAMP
    return np.exp(x)


@njit(cache=True)
def _pdiv(a, b):
    s = -1.0 if b < 0 else 1.0
    m = abs(b)
    if m < DENOM_FLOOR:
        m = DENOM_FLOOR
    return _clip(a / (s * m))


@njit(cache=True)
def _ppow(base, exponent):
    m = abs(base)
    if m < DENOM_FLOOR:
        m = DENOM_FLOOR
    v = _sexp(exponent * np.log(m))
    return v if v < POW_CLAMP else POW_CLAMP


@njit(cache=True)
def eval_rows(code, arg, pre, x, C, out):
    """Write the program's value for each constant row of ``C`` at each point of ``x``."""
    n = x.shape[0]
    stack = np.empty((code.shape[0], n))
    for p in range(C.shape[0]):
        sp = 0
        for k in range(code.shape[0]):
            op = code[k]
            if op == OP_T:
                stack[sp, :] = x
                sp += 1
            elif op == OP_C:
                stack[sp, :] = C[p, arg[k]]
                sp += 1
            elif op == OP_PRE:
                stack[sp, :] = pre[arg[k]]
                sp += 1
            elif op == EXP:
                a = stack[sp - 1]
                for j in range(n):
                    a[j] = _clip(_sexp(a[j]))
            elif op == LOG_P:
                a = stack[sp - 1]
                for j in range(n):
                    m = abs(a[j])
                    a[j] = np.log(m if m > DENOM_FLOOR else DENOM_FLOOR)
            else:
                sp -= 1
                a = stack[sp - 1]
                b = stack[sp]
                if op == ADD:
                    for j in range(n):
                        a[j] = _clip(a[j] + b[j])
                elif op == SUB:
                    for j in range(n):
                        a[j] = _clip(a[j] - b[j])
                elif op == MUL:
                    for j in range(n):
                        a[j] = _clip(a[j] * b[j])
                elif op == DIV:
                    for j in range(n):
                        a[j] = _pdiv(a[j], b[j])
                elif op == DIV_M:
                    for j in range(n):
                        a[j] = _pdiv(b[j], a[j])
                elif op == EXP_PROD:
                    for j in range(n):
                        a[j] = _clip(_sexp(a[j] * b[j]))
                elif op == POW:
                    for j in range(n):
                        a[j] = _ppow(a[j], b[j])
                else:
                    for j in range(n):
                        a[j] = _ppow(b[j], a[j])
        out[p, :] = stack[0]


# ---------------------------------------------------------------------------
# fitness

@njit(cache=True)
def _score(prog, U, scale, lo, hi, f, v, f_ref, v_ref, mode):
    """Training MSE into ``f`` and violation counts into ``v`` for the rows of ``U``.

    ``mode`` 0 scores every row fully. With ``mode`` 1 (accept if not worse)
    or 2 (accept if strictly better), rows compared against a feasible
    reference that they already lose to on MSE cannot be accepted; their
    constraint grid is skipped and ``v`` is set to 3.
    """
    code, arg, pre_train, pre_grid, x, grid, y, has_c, late_idx, birth_max, late_max = prog
    m = U.shape[0]
    C = np.empty_like(U)
    for p in range(m):
        for d in range(U.shape[1]):
            c = scale * np.sinh(U[p, d]) if scale > 0 else U[p, d]
            C[p, d] = min(max(c, lo), hi)
    n = x.shape[0]
    out = np.empty((m, n))
    eval_rows(code, arg, pre_train, x, C, out)
    need = np.zeros(m, dtype=np.bool_)
    for p in range(m):
        s = 0.0
        for j in range(n):
            r = out[p, j] - y[j]
            s += r * r
        s /= n
        f[p] = s if np.isfinite(s) else _BIG
        v[p] = 0
        if has_c:
            lost = mode != 0 and v_ref[p] == 0 and (
                f[p] > f_ref[p] if mode == 1 else f[p] >= f_ref[p])
            if lost:
                v[p] = 3
            else:
                need[p] = True
    rows = np.flatnonzero(need)
    if rows.shape[0] == 0:
        return
    G = np.empty((rows.shape[0], grid.shape[0]))
    eval_rows(code, arg, pre_grid, grid, C[rows], G)
    for q in range(rows.shape[0]):
        nv = 0
        b = G[q, 0]
        if b < 0.0 or b > birth_max:
            nv += 1
        if G[q, late_idx] > late_max:
            nv += 1
        for j in range(1, grid.shape[0]):
            if G[q, j] - G[q, j - 1] < 0.0:
                nv += 1
                break
        v[rows[q]] = nv


@njit(cache=True)
def _order(f, v):
    o1 = np.argsort(f, kind="mergesort")
    o2 = np.argsort(v[o1], kind="mergesort")
    return o1[o2]


@njit(cache=True)
def _better(f1, v1, f0, v0):
    return v1 < v0 or (v1 == v0 and f1 < f0)


@njit(cache=True)
def _not_worse(f1, v1, f0, v0):
    return v1 < v0 or (v1 == v0 and f1 <= f0)


@njit(cache=True)
def _terminate(hist, vhist, g, window, rate, floor):
    # g = index of the latest entry
    if hist[g] <= floor and vhist[g] == 0:
        return True
    if g < window:
        return False
    if vhist[g] < vhist[g - window]:
        return False
    old, new = hist[g - window], hist[g]
    if old == 0.0:
        return True
    return (old - new) / abs(old) < rate


@njit(cache=True)
def _cholesky(A, out):
    """Lower Cholesky factor of ``A`` into ``out``; returns False if not positive definite."""
    k = A.shape[0]
    for i in range(k):
        for j in range(k):
            out[i, j] = 0.0
    for i in range(k):
        for j in range(i + 1):
            s = A[i, j]
            for q in range(j):
                s -= out[i, q] * out[j, q]
            if i == j:
                if not s > 0.0:
                    return False
                out[i, i] = np.sqrt(s)
            else:
                out[i, j] = s / out[j, j]
    return True


@njit(cache=True)
def _regularized_cholesky(A, out, reg0):
    k = A.shape[0]
    B = A.copy()
    reg = 0.0
    while True:
        for i in range(k):
            B[i, i] = A[i, i] + reg
        if _cholesky(B, out):
            return
        reg = reg0 if reg == 0.0 else reg * 10.0


# ---------------------------------------------------------------------------
# one population run

@njit(cache=True)
def run_population(prog, n, dim, lo_u, hi_u, scale, lo, hi, budget, fos_idx, fos_ptr,
                   sel_fraction, max_stagnation, seed, ams_fraction, ams_factor,
                   avs_decrease, avs_sdr, avs_min, avs_max, cov_reg,
                   window, rate, floor):
    np.random.seed(seed)
    nf = fos_ptr.shape[0] - 1
    X = np.empty((n, dim))
    for p in range(n):
        for d in range(dim):
            X[p, d] = np.random.uniform(lo_u, hi_u)
    f = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    _score(prog, X, scale, lo, hi, f, v, f, v, 0)
    used = n
    nis = np.zeros(n, dtype=np.int64)
    max_gen = budget // n + 2
    hist = np.empty(max_gen)
    vhist = np.empty(max_gen, dtype=np.int64)
    e = _order(f, v)[0]
    hist[0] = f[e]
    vhist[0] = v[e]
    g = 0
    means = np.zeros((nf, dim))
    prev = np.zeros((nf, dim))
    covs = np.zeros((nf, dim, dim))
    mult = np.ones(nf)
    stag = np.zeros(nf, dtype=np.int64)
    have_model = False
    n_sel = max(1, int(np.floor(sel_fraction * n)))
    Lfac = np.empty((dim, dim))
    while used < budget and not _terminate(hist, vhist, g, window, rate, floor):
        # model estimation on the constrained-best selection
        order = _order(f, v)
        sel = X[order[:n_sel]]
        for j in range(nf):
            if have_model:
                for q in range(dim):
                    prev[j, q] = means[j, q]
            idx = fos_idx[fos_ptr[j]:fos_ptr[j + 1]]
            k = idx.shape[0]
            for a in range(k):
                mu = 0.0
                for r in range(n_sel):
                    mu += sel[r, idx[a]]
                means[j, a] = mu / n_sel
            for a in range(k):
                for b in range(k):
                    s = 0.0
                    for r in range(n_sel):
                        s += (sel[r, idx[a]] - means[j, a]) * (sel[r, idx[b]] - means[j, b])
                    covs[j, a, b] = s / n_sel
        has_prev = have_model
        have_model = True

        # sampling with acceptance per FOS element, whole population at once
        f0 = f.copy()
        v0 = v.copy()
        eo = _order(f, v)[0]
        ef, ev = f[eo], v[eo]
        perm = np.random.permutation(nf)
        for jj in range(nf):
            j = perm[jj]
            idx = fos_idx[fos_ptr[j]:fos_ptr[j + 1]]
            k = idx.shape[0]
            m = min(n, budget - used)
            if m <= 0:
                break
            c = mult[j]
            A = covs[j, :k, :k] * c
            Lk = Lfac[:k, :k]
            _regularized_cholesky(A, Lk, cov_reg)
            cand = X[:m].copy()
            prop = np.empty((m, k))
            for p in range(m):
                z = np.empty(k)
                for a in range(k):
                    z[a] = np.random.standard_normal()
                shift = np.random.random() < ams_fraction
                for a in range(k):
                    s = means[j, a]
                    for b in range(a + 1):
                        s += Lk[a, b] * z[b]
                    if shift and has_prev:
                        s += ams_factor * c * (means[j, a] - prev[j, a])
                    s = min(max(s, lo_u), hi_u)
                    prop[p, a] = s
                    cand[p, idx[a]] = s
            fn = np.empty(m)
            vn = np.empty(m, dtype=np.int64)
            _score(prog, cand, scale, lo, hi, fn, vn, f[:m], v[:m], 1)
            used += m
            n_beat = 0
            pmean = np.zeros(k)
            best = -1
            for p in range(m):
                if _not_worse(fn[p], vn[p], f[p], v[p]):
                    for q in range(dim):
                        X[p, q] = cand[p, q]
                    f[p] = fn[p]
                    v[p] = vn[p]
                    if _better(fn[p], vn[p], ef, ev):
                        n_beat += 1
                        for a in range(k):
                            pmean[a] += prop[p, a]
                        if best < 0 or _better(fn[p], vn[p], fn[best], vn[best]):
                            best = p
            if n_beat > 0:
                sdr = 0.0
                for a in range(k):
                    sd = np.sqrt(max(covs[j, a, a] * c, 0.0))
                    if sd > 0:
                        r = abs(pmean[a] / n_beat - means[j, a]) / sd
                        if r > sdr:
                            sdr = r
                stag[j] = 0
                c = max(c, 1.0)
                if sdr > avs_sdr:
                    c = min(c / avs_decrease, avs_max)
                ef, ev = fn[best], vn[best]
            else:
                if c <= 1.0:
                    stag[j] += 1
                if c > 1.0 or stag[j] >= max_stagnation:
                    c = max(c * avs_decrease, avs_min)
                if c < 1.0 and stag[j] < max_stagnation:
                    c = 1.0
            mult[j] = c

        # no-improvement counters and forced improvements
        n_stuck = 0
        for p in range(n):
            if _better(f[p], v[p], f0[p], v0[p]):
                nis[p] = 0
            else:
                nis[p] += 1
                if nis[p] >= max_stagnation:
                    n_stuck += 1
        if n_stuck > 0 and used < budget:
            eo = _order(f, v)[0]
            ex = X[eo].copy()
            exf, exv = f[eo], v[eo]
            who = np.empty(n_stuck, dtype=np.int64)
            q = 0
            for p in range(n):
                if nis[p] >= max_stagnation:
                    nis[p] = 0
                    if p != eo:
                        who[q] = p
                        q += 1
            who = who[:q]
            done = np.zeros(q, dtype=np.bool_)
            fperm = np.random.permutation(nf)
            for jj in range(nf):
                if q == 0:
                    break
                j = fperm[jj]
                idx = fos_idx[fos_ptr[j]:fos_ptr[j + 1]]
                active = who[~done]
                m = min(active.shape[0], budget - used)
                if m <= 0:
                    break
                active = active[:m]
                cand = X[active].copy()
                for r in range(m):
                    for a in range(idx.shape[0]):
                        cand[r, idx[a]] = ex[idx[a]]
                fn = np.empty(m)
                vn = np.empty(m, dtype=np.int64)
                _score(prog, cand, scale, lo, hi, fn, vn, f[active], v[active], 2)
                used += m
                for r in range(m):
                    p = active[r]
                    if _better(fn[r], vn[r], f[p], v[p]):
                        for d in range(dim):
                            X[p, d] = cand[r, d]
                        f[p] = fn[r]
                        v[p] = vn[r]
                        for w in range(q):
                            if who[w] == p:
                                done[w] = True
                if done.all():
                    break
            for w in range(q):
                if not done[w]:
                    p = who[w]
                    for d in range(dim):
                        X[p, d] = ex[d]
                    f[p] = exf
                    v[p] = exv
        g += 1
        e = _order(f, v)[0]
        hist[g] = f[e]
        vhist[g] = v[e]
    e = _order(f, v)[0]
    best_c = np.empty(dim)
    for d in range(dim):
        c = scale * np.sinh(X[e, d]) if scale > 0 else X[e, d]
        best_c[d] = min(max(c, lo), hi)
    return best_c, f[e], v[e], used, g, hist[:g + 1].copy()
