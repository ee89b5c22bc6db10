"""Compiled loops behind the layer features, the training gradient and the field.

Every kernel sums over features in a fixed order, independently for each
sample, so results are bit-reproducible and do not depend on batch size.
"""

import math

import numpy as np
from numba import njit

# Cody-Waite split of pi/2 (33 + 33 + 53 bits) and the fdlibm minimax
# coefficients for sin and cos on [-pi/4, pi/4].
_PIO2_1 = 1.57079632673412561417e+00
_PIO2_2 = 6.07710050630396597660e-11
_PIO2_3 = 2.02226624871116645580e-21
_INV_PIO2 = 0.636619772367581382433
_S1, _S2, _S3 = -1.66666666666666324348e-01, 8.33333333332248946124e-03, -1.98412698298579493134e-04
_S4, _S5, _S6 = 2.75573137070700676789e-06, -2.50507602534068634195e-08, 1.58969099521155010221e-10
_C1, _C2, _C3 = 4.16666666666666019037e-02, -1.38888888888741095749e-03, 2.48015872894767294178e-05
_C4, _C5, _C6 = -2.75573143513906633035e-07, 2.08757232129817482790e-09, -1.13596475577881948265e-11
# beyond this the three-term reduction loses exactness; defer to libm
_REDUCE_LIMIT = 1e5
# FMA contraction only: reassociation would undo the Cody-Waite reduction
_FM = {"contract"}


@njit(cache=True, nogil=True, fastmath=_FM)
def sincos_into(x, c, s):
    """Fill ``c`` and ``s`` with cos(x) and sin(x) for flat float arrays.

    Branch-free so LLVM vectorizes it; within 2 ulp of libm. libm's scalar
    routines dominated the feature evaluations before this.
    """
    n_el = x.size
    for i in range(n_el):
        xi = x[i]
        k = math.floor(xi * _INV_PIO2 + 0.5)
        r = ((xi - k * _PIO2_1) - k * _PIO2_2) - k * _PIO2_3
        z = r * r
        ps = _S2 + z * (_S3 + z * (_S4 + z * (_S5 + z * _S6)))
        sv = r + z * r * (_S1 + z * ps)
        pc = z * (_C1 + z * (_C2 + z * (_C3 + z * (_C4 + z * (_C5 + z * _C6)))))
        hz = 0.5 * z
        w = 1.0 - hz
        cv = w + (((1.0 - w) - hz) + z * pc)
        q = np.int64(k) & 3
        odd = (q & 1) == 1
        s0 = cv if odd else sv
        c0 = sv if odd else cv
        s[i] = -s0 if (q & 2) else s0
        c[i] = -c0 if ((q + 1) & 2) else c0
    for i in range(n_el):
        if not abs(x[i]) <= _REDUCE_LIMIT:
            c[i] = math.cos(x[i])
            s[i] = math.sin(x[i])


def cos_sin(x):
    """``(cos(x), sin(x))`` for an array of any shape."""
    x = np.ascontiguousarray(x, dtype=float)
    c = np.empty_like(x)
    s = np.empty_like(x)
    sincos_into(x.reshape(-1), c.reshape(-1), s.reshape(-1))
    return c, s


@njit(cache=True, nogil=True, fastmath=_FM)
def _block_size(N):
    # keep each (block, N) scratch table small: below malloc's mmap threshold
    # and resident in cache. Fresh large tables page-fault on every call.
    return max(1, min(16, 10_000 // max(N, 1)))


@njit(cache=True, nogil=True, fastmath=_FM)
def _block_trig(z, a_rows, d_in, alphas, betas, i0, i1, proj, c, sn):
    """cos/sin of the phases of features ``i0..i1`` for every sample.

    ``z`` is sample-minor, ``(rows, N)``; ``a_rows[:d_in]`` picks the
    pass-through rows.
    """
    N = z.shape[1]
    for b in range(i1 - i0):
        i = i0 + b
        for n in range(N):
            proj[b, n] = betas[i]
        for l in range(d_in):
            al = alphas[i, l]
            row = z[a_rows[l]]
            for n in range(N):
                proj[b, n] += al * row[n]
    nb = (i1 - i0) * N
    sincos_into(proj.reshape(-1)[:nb], c.reshape(-1)[:nb], sn.reshape(-1)[:nb])


@njit(cache=True, nogil=True, fastmath=_FM)
def layer_features(a, alphas, betas, amp, w_scale, w_translate, basis):
    """``s(a)``, ``t(a)`` and the flattened slopes ``sin(proj) @ basis``.

    ``basis`` is ``(m, q)``. Sample loops are innermost so they vectorize.
    """
    N, d_in = a.shape
    m, d_out = w_scale.shape
    q = basis.shape[1]
    aT = np.ascontiguousarray(a.T)
    rows = np.arange(d_in)
    B = _block_size(N)
    proj = np.empty((B, N))
    c = np.empty((B, N))
    sn = np.empty((B, N))
    sT = np.zeros((d_out, N))
    tT = np.zeros((d_out, N))
    slT = np.zeros((q, N))
    for i0 in range(0, m, B):
        i1 = min(i0 + B, m)
        _block_trig(aT, rows, d_in, alphas, betas, i0, i1, proj, c, sn)
        for b in range(i1 - i0):
            i = i0 + b
            for j in range(d_out):
                ws = amp * w_scale[i, j]
                wt = amp * w_translate[i, j]
                for n in range(N):
                    sT[j, n] += c[b, n] * ws
                    tT[j, n] += c[b, n] * wt
            for k in range(q):
                bk = basis[i, k]
                for n in range(N):
                    slT[k, n] += sn[b, n] * bk
    return np.ascontiguousarray(sT.T), np.ascontiguousarray(tT.T), np.ascontiguousarray(slT.T)


@njit(cache=True, nogil=True, fastmath=_FM)
def layer_backward(a, s_bar, t_bar, slope_bar, alphas, betas, amp, w_scale, w_translate, basis):
    """Adjoints of the pass-through inputs, the weights and the slope basis.

    The feature tables are recomputed blockwise rather than stored. Rows
    past ``len(slope_bar)`` carry no slope adjoint (the goal row).
    """
    N, d_in = a.shape
    m, d_out = w_scale.shape
    n_slope = slope_bar.shape[0]
    q = basis.shape[1]
    aT = np.ascontiguousarray(a.T)
    rows = np.arange(d_in)
    sbT = np.ascontiguousarray(s_bar.T)
    tbT = np.ascontiguousarray(t_bar.T)
    slbT = np.ascontiguousarray(slope_bar.T)
    a_barT = np.zeros((d_in, N))
    g_scale = np.zeros((m, d_out))
    g_translate = np.zeros((m, d_out))
    g_basis = np.zeros((m, q))
    B = _block_size(N)
    proj = np.empty((B, N))
    c = np.empty((B, N))
    sn = np.empty((B, N))
    cb = np.empty(N)
    pb = np.empty(N)
    for i0 in range(0, m, B):
        i1 = min(i0 + B, m)
        _block_trig(aT, rows, d_in, alphas, betas, i0, i1, proj, c, sn)
        for b in range(i1 - i0):
            i = i0 + b
            cb[:] = 0.0
            for j in range(d_out):
                ws = w_scale[i, j]
                wt = w_translate[i, j]
                gs = 0.0
                gt = 0.0
                for n in range(N):
                    cb[n] += sbT[j, n] * ws + tbT[j, n] * wt
                    gs += c[b, n] * sbT[j, n]
                    gt += c[b, n] * tbT[j, n]
                g_scale[i, j] = amp * gs
                g_translate[i, j] = amp * gt
            for n in range(N):
                pb[n] = -sn[b, n] * amp * cb[n]
            for k in range(q):
                bk = basis[i, k]
                gb = 0.0
                for n in range(n_slope):
                    pb[n] += c[b, n] * slbT[k, n] * bk
                    gb += sn[b, n] * slbT[k, n]
                g_basis[i, k] = gb
            for l in range(d_in):
                al = alphas[i, l]
                for n in range(N):
                    a_barT[l, n] += pb[n] * al
    return np.ascontiguousarray(a_barT.T), g_scale, g_translate, g_basis


@njit(cache=True, nogil=True, fastmath=_FM)
def layer_eval(a, alphas, betas, amp, w_scale, w_translate):
    """``s``, ``t`` and their derivatives ``(N, d_out, d_in)`` with respect to ``a``."""
    N, d_in = a.shape
    m, d_out = w_scale.shape
    proj = np.empty((N, m))
    for n in range(N):
        for i in range(m):
            p = betas[i]
            for l in range(d_in):
                p += alphas[i, l] * a[n, l]
            proj[n, i] = p
    c = np.empty((N, m))
    sn = np.empty((N, m))
    sincos_into(proj.reshape(-1), c.reshape(-1), sn.reshape(-1))
    s = np.zeros((N, d_out))
    t = np.zeros((N, d_out))
    ds = np.zeros((N, d_out, d_in))
    dt = np.zeros((N, d_out, d_in))
    for n in range(N):
        for i in range(m):
            phi = amp * c[n, i]
            dphi = -amp * sn[n, i]
            for j in range(d_out):
                ws = w_scale[i, j]
                wt = w_translate[i, j]
                s[n, j] += phi * ws
                t[n, j] += phi * wt
                for l in range(d_in):
                    g = dphi * alphas[i, l]
                    ds[n, j, l] += g * ws
                    dt[n, j, l] += g * wt
    return s, t, ds, dt


@njit(cache=True, nogil=True, fastmath=_FM)
def potential_pullback(x, a_idx, b_idx, d_in, d_out, alphas, betas, amp, w_scale,
                       w_translate, goal_y, quadratic, radius):
    """Whole-model field ``J(x)^-1 v(psi(x))`` for a batch.

    Layer arrays are padded to ``n`` columns; ``d_in[k]``/``d_out[k]`` give
    the live widths. ``v`` is the negative potential gradient, zeroed where
    the latent distance is ``<= radius``. Returns ``(f, distance)``.
    Loops run layer-major with the sample index innermost so every
    accumulation vectorizes across samples.
    """
    N, n = x.shape
    K, m = betas.shape
    z = np.ascontiguousarray(x.T)  # (n, N)
    B = _block_size(N)
    proj = np.empty((B, N))
    c = np.empty((B, N))
    sn = np.empty((B, N))
    e = np.empty((K, n, N))
    bs = np.empty((K, n, N))
    ds = np.zeros((K, n, n, N))
    dt = np.zeros((K, n, n, N))
    st = np.zeros((n, N))
    tt = np.zeros((n, N))
    for k in range(K):
        di = d_in[k]
        do = d_out[k]
        st[:] = 0.0
        tt[:] = 0.0
        for i0 in range(0, m, B):
            i1 = min(i0 + B, m)
            _block_trig(z, a_idx[k], di, alphas[k], betas[k], i0, i1, proj, c, sn)
            for b in range(i1 - i0):
                i = i0 + b
                for j in range(do):
                    ws = w_scale[k, i, j]
                    wt = w_translate[k, i, j]
                    srow = st[j]
                    trow = tt[j]
                    for p in range(N):
                        srow[p] += c[b, p] * ws
                        trow[p] += c[b, p] * wt
                    for l in range(di):
                        g = -amp * alphas[k, i, l]
                        gs = g * ws
                        gt = g * wt
                        gsum = ds[k, j, l]
                        tsum = dt[k, j, l]
                        for p in range(N):
                            gsum[p] += sn[b, p] * gs
                            tsum[p] += sn[b, p] * gt
        for j in range(do):
            row = z[b_idx[k, j]]
            for p in range(N):
                ej = math.exp(amp * st[j, p])
                bs[k, j, p] = row[p]
                e[k, j, p] = ej
                row[p] = row[p] * ej + amp * tt[j, p]
    f = np.zeros((N, n))
    dist = np.empty(N)
    u = np.empty(n)
    for p in range(N):
        r2 = 0.0
        for j in range(n):
            r2 += (z[j, p] - goal_y[j]) ** 2
        r = math.sqrt(r2)
        dist[p] = r
        if r <= radius:
            continue
        scale = 1.0 if quadratic else 1.0 / r
        for j in range(n):
            u[j] = -(z[j, p] - goal_y[j]) * scale
        for k in range(K - 1, -1, -1):
            di = d_in[k]
            for j in range(d_out[k]):
                sig = 0.0
                tau = 0.0
                for l in range(di):
                    ua = u[a_idx[k, l]]
                    sig += ds[k, j, l, p] * ua
                    tau += dt[k, j, l, p] * ua
                jb = b_idx[k, j]
                u[jb] = (u[jb] - tau) / e[k, j, p] - bs[k, j, p] * sig
        for j in range(n):
            f[p, j] = u[j]
    return f, dist
