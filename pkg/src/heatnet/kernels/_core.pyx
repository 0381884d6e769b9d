# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled evaluation kernels: constraint/Jacobian/Hessian fill for the
transcribed horizon problems, thermal state-matrix assembly, and the
interior-point iteration of the QP subproblem (LAPACK Cholesky via scipy's
cython bindings). Mirrors ``_pure`` exactly up to rounding."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm, dgemv
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

cnp.import_array()


# -- horizon-problem constraint and Jacobian fill ----------------------------

def fill_constraints(cs, params, double[::1] x, double[::1] out_c,
                     double[:, ::1] out_J):
    cdef int N = cs.N, S = cs.S, R = cs.R
    cdef int ne = cs.ne, nv = cs.nv, nth = cs.nth, ntn = cs.ntn
    cdef int nnu = cs.nnu, npin = cs.npin, nb = cs.nb
    cdef int o_th = 0, o_m = nth, o_P = nth + ne, o_b = nth + ne + nv
    cdef int o_tn = o_b + nb, o_T = o_tn + ntn, o_soe = o_T + nnu
    cdef int r_mass = ne, r_pin = ne + nv, r_mix = ne + nv + npin
    cdef int r_T = r_mix + ntn, r_soe = r_T + nnu
    cdef double eps = cs.smooth_eps, dt = cs.dt, cp = cs.cp, mix_eps = cs.mix_eps
    cdef bint has_slack = cs.has_slack

    cdef int[::1] tails = cs.tails, heads = cs.heads
    cdef int[::1] user_pos = cs.user_pos, nonuser_pos = cs.nonuser_pos
    cdef double[::1] mu = cs.mu, zeta_fix = cs.zeta_fix
    cdef double[::1] c1 = cs.c1, c2 = cs.c2
    cdef int[::1] in_ptr = cs.in_ptr, in_edge = cs.in_edge
    cdef int[::1] tn_pos = cs.tn_pos, tn_node = cs.tn_node
    cdef int[::1] node_bvar = cs.node_bvar
    cdef int[::1] pin_node = cs.pin_node
    cdef unsigned char[::1] pin_supply = cs.pin_supply
    cdef int[::1] user_edge = cs.user_edge, user_tail = cs.user_tail
    cdef double[::1] user_tsetr = cs.user_tsetr
    cdef int[::1] nonuser_edge_local = cs.nonuser_edge_local

    cdef double[:, ::1] pin_val = params.pin_val
    cdef double[:, ::1] fixed_flow = params.fixed_flow
    cdef double[:, ::1] w_pass = params.w_pass
    cdef double[:, ::1] anchor = params.anchor
    # zero-width 2D arrays are rejected by contiguous memoryviews
    qout_arr = params.qout if params.qout.size else np.zeros((N, 1))
    cdef double[:, ::1] qout = qout_arr
    cdef double[::1] tamb = params.tamb
    cdef double[::1] T_init = params.T_init
    cdef double[::1] soe_init = params.soe_init

    cdef int n_cols = out_J.shape[1]
    memset(&out_J[0, 0], 0, out_J.shape[0] * n_cols * sizeof(double))

    cdef double slack = x[N * S] if has_slack else 0.0
    cdef int k, e, v, t, r, u, p, i, xo, ro, row
    cdef double m_e, s_e, zeta, phi, th_u, diag, src, mj, lam_, tn_t, wv

    for k in range(N):
        xo = k * S
        ro = k * R

        # pressure-drop rows
        for e in range(ne):
            m_e = x[xo + o_m + e]
            s_e = sqrt(m_e * m_e + eps * eps)
            u = user_pos[e]
            if u >= 0:
                phi = x[xo + o_th + u]
                zeta = mu[e] * phi * phi
                out_J[ro + e, xo + o_th + u] = -2.0 * mu[e] * phi * m_e * s_e
            else:
                zeta = zeta_fix[e]
            out_c[ro + e] = x[xo + o_P + tails[e]] - x[xo + o_P + heads[e]] - zeta * m_e * s_e
            out_J[ro + e, xo + o_P + tails[e]] += 1.0
            out_J[ro + e, xo + o_P + heads[e]] += -1.0
            out_J[ro + e, xo + o_m + e] = -zeta * (s_e + m_e * m_e / s_e)

        # mass balance rows
        for v in range(nv):
            out_c[ro + r_mass + v] = -fixed_flow[k, v]
        for e in range(ne):
            out_c[ro + r_mass + tails[e]] += x[xo + o_m + e]
            out_c[ro + r_mass + heads[e]] -= x[xo + o_m + e]
            out_J[ro + r_mass + tails[e], xo + o_m + e] += 1.0
            out_J[ro + r_mass + heads[e], xo + o_m + e] += -1.0
        for v in range(nv):
            i = node_bvar[v]
            if i >= 0:
                out_c[ro + r_mass + v] -= x[xo + o_b + i]
                out_J[ro + r_mass + v, xo + o_b + i] = -1.0

        # pressure pins
        for p in range(npin):
            row = ro + r_pin + p
            out_c[row] = x[xo + o_P + pin_node[p]] - pin_val[k, p]
            out_J[row, xo + o_P + pin_node[p]] = 1.0
            if has_slack and pin_supply[p]:
                out_c[row] -= slack
                out_J[row, N * S] = -1.0

        # node mixing rows
        for t in range(ntn):
            v = tn_node[t]
            row = ro + r_mix + t
            wv = w_pass[k, v] + mix_eps
            tn_t = x[xo + o_tn + t]
            out_c[row] = wv * (tn_t - anchor[k, v])
            diag = wv
            for p in range(in_ptr[v], in_ptr[v + 1]):
                e = in_edge[p]
                m_e = x[xo + o_m + e]
                if nonuser_pos[e] >= 0:
                    src = x[xo + o_T + nonuser_pos[e]]
                    out_J[row, xo + o_T + nonuser_pos[e]] += -m_e
                else:
                    src = user_tsetr[user_pos[e]]
                out_c[row] += m_e * (tn_t - src)
                diag += m_e
                out_J[row, xo + o_m + e] += tn_t - src
            out_J[row, xo + o_tn + t] = diag

        # pipe temperature rows (implicit Euler)
        for r in range(nnu):
            e = nonuser_edge_local[r]
            row = ro + r_T + r
            mj = x[xo + o_m + e]
            t = tn_pos[tails[e]]
            tn_t = x[xo + o_tn + t]
            lam_ = c1[e] * mj + c2[e]
            if k == 0:
                src = T_init[r]
            else:
                src = x[xo - S + o_T + r]
                out_J[row, xo - S + o_T + r] = -1.0
            out_c[row] = x[xo + o_T + r] * (1.0 + dt * lam_) - src - dt * (
                c1[e] * mj * tn_t + c2[e] * tamb[k])
            out_J[row, xo + o_T + r] = 1.0 + dt * lam_
            out_J[row, xo + o_m + e] = dt * c1[e] * (x[xo + o_T + r] - tn_t)
            out_J[row, xo + o_tn + t] += -dt * c1[e] * mj

        # state-of-energy rows
        for u in range(nth):
            row = ro + r_soe + u
            e = user_edge[u]
            mj = x[xo + o_m + e]
            t = tn_pos[user_tail[u]]
            tn_t = x[xo + o_tn + t]
            if k == 0:
                src = soe_init[u]
            else:
                src = x[xo - S + o_soe + u]
                out_J[row, xo - S + o_soe + u] = -1.0
            out_c[row] = x[xo + o_soe + u] - src - dt * (
                cp * mj * (tn_t - user_tsetr[u]) - qout[k, u])
            out_J[row, xo + o_soe + u] = 1.0
            out_J[row, xo + o_m + e] = -dt * cp * (tn_t - user_tsetr[u])
            out_J[row, xo + o_tn + t] += -dt * cp * mj


def fill_lagrangian_hessian(cs, params, double[::1] x, double[::1] w,
                            double[:, ::1] out_H):
    cdef int N = cs.N, S = cs.S, R = cs.R
    cdef int ne = cs.ne, nv = cs.nv, nth = cs.nth, ntn = cs.ntn
    cdef int nnu = cs.nnu, npin = cs.npin, nb = cs.nb
    cdef int o_th = 0, o_m = nth
    cdef int o_tn = nth + ne + nv + nb, o_T = o_tn + ntn
    cdef int r_mix = ne + nv + npin, r_T = r_mix + ntn, r_soe = r_T + nnu
    cdef double eps = cs.smooth_eps, dt = cs.dt, cp = cs.cp

    cdef int[::1] tails = cs.tails
    cdef int[::1] user_pos = cs.user_pos, nonuser_pos = cs.nonuser_pos
    cdef double[::1] mu = cs.mu, zeta_fix = cs.zeta_fix, c1 = cs.c1
    cdef int[::1] in_ptr = cs.in_ptr, in_edge = cs.in_edge
    cdef int[::1] tn_pos = cs.tn_pos, tn_node = cs.tn_node
    cdef int[::1] user_edge = cs.user_edge, user_tail = cs.user_tail
    cdef int[::1] nonuser_edge_local = cs.nonuser_edge_local

    cdef int n_cols = out_H.shape[1]
    memset(&out_H[0, 0], 0, out_H.shape[0] * n_cols * sizeof(double))

    cdef int k, e, v, t, r, u, p, xo, ro, a, b
    cdef double m_e, s_e, q, qp_, qpp, wr, phi, zeta, val

    for k in range(N):
        xo = k * S
        ro = k * R
        for e in range(ne):
            wr = w[ro + e]
            if wr == 0.0:
                continue
            m_e = x[xo + o_m + e]
            s_e = sqrt(m_e * m_e + eps * eps)
            q = m_e * s_e
            qp_ = (2.0 * m_e * m_e + eps * eps) / s_e
            qpp = m_e * (2.0 * m_e * m_e + 3.0 * eps * eps) / (s_e * s_e * s_e)
            u = user_pos[e]
            if u >= 0:
                phi = x[xo + o_th + u]
                zeta = mu[e] * phi * phi
                a = xo + o_th + u
                out_H[a, a] += -wr * 2.0 * mu[e] * q
                b = xo + o_m + e
                val = -wr * 2.0 * mu[e] * phi * qp_
                out_H[a, b] += val
                out_H[b, a] += val
            else:
                zeta = zeta_fix[e]
            a = xo + o_m + e
            out_H[a, a] += -wr * zeta * qpp

        for t in range(ntn):
            v = tn_node[t]
            wr = w[ro + r_mix + t]
            if wr == 0.0:
                continue
            for p in range(in_ptr[v], in_ptr[v + 1]):
                e = in_edge[p]
                a = xo + o_m + e
                b = xo + o_tn + t
                out_H[a, b] += wr
                out_H[b, a] += wr
                if nonuser_pos[e] >= 0:
                    b = xo + o_T + nonuser_pos[e]
                    out_H[a, b] += -wr
                    out_H[b, a] += -wr

        for r in range(nnu):
            wr = w[ro + r_T + r]
            if wr == 0.0:
                continue
            e = nonuser_edge_local[r]
            a = xo + o_m + e
            b = xo + o_T + r
            val = wr * dt * c1[e]
            out_H[a, b] += val
            out_H[b, a] += val
            b = xo + o_tn + tn_pos[tails[e]]
            out_H[a, b] += -val
            out_H[b, a] += -val

        for u in range(nth):
            wr = w[ro + r_soe + u]
            if wr == 0.0:
                continue
            a = xo + o_m + user_edge[u]
            b = xo + o_tn + tn_pos[user_tail[u]]
            val = -wr * dt * cp
            out_H[a, b] += val
            out_H[b, a] += val


# -- thermal state-matrix assembly -------------------------------------------

def thermal_ab(int[::1] tails, int[::1] heads, unsigned char[::1] is_user,
               int[::1] node_in_ptr, int[::1] node_in_edge,
               double[::1] c1, double[::1] c2, double[::1] flows,
               int plant_root, int[::1] nonuser_pos, double mix_eps):
    cdef int ne = tails.shape[0]
    cdef int n = 0
    cdef int j, r, p, i, tail
    for j in range(ne):
        if nonuser_pos[j] >= 0:
            n += 1
    A_np = np.zeros((n, n))
    B_np = np.zeros((n, 3))
    cdef double[:, ::1] A = A_np
    cdef double[:, ::1] B = B_np
    cdef double m_tot, wv
    for j in range(ne):
        r = nonuser_pos[j]
        if r < 0:
            continue
        A[r, r] -= c1[j] * flows[j] + c2[j]
        B[r, 2] += c2[j]
        tail = tails[j]
        if tail == plant_root:
            B[r, 0] += c1[j] * flows[j]
            continue
        m_tot = mix_eps
        for p in range(node_in_ptr[tail], node_in_ptr[tail + 1]):
            m_tot += flows[node_in_edge[p]]
        for p in range(node_in_ptr[tail], node_in_ptr[tail + 1]):
            i = node_in_edge[p]
            wv = c1[j] * flows[j] * flows[i] / m_tot
            if is_user[i]:
                B[r, 1] += wv
            else:
                A[r, nonuser_pos[i]] += wv
    return A_np, B_np


# -- interior-point core ------------------------------------------------------

cdef double _vmax_abs(double[::1] v) nogil:
    cdef double out = 0.0
    cdef int i
    for i in range(v.shape[0]):
        if fabs(v[i]) > out:
            out = fabs(v[i])
    return out


def ip_qp_core(double[:, ::1] Bf, double[::1] gf, double[:, ::1] Jf,
               double[::1] cf, double[::1] lbs, double[::1] ubs,
               hlb_arr, hub_arr,
               double[::1] d, double[::1] sp, double[::1] sm,
               double[::1] y, double[::1] zl, double[::1] zu,
               double rho, double tol, int max_iter, double dual_reg):
    cdef unsigned char[::1] hlb = np.ascontiguousarray(hlb_arr).view(np.uint8)
    cdef unsigned char[::1] hub = np.ascontiguousarray(hub_arr).view(np.uint8)
    cdef int nf = gf.shape[0], m = cf.shape[0]
    cdef int i, j, it, info, attempt
    cdef double g_sc = 1.0, c_sc = 1.0, tau = 0.995
    cdef double tot, mu, err, best_err, ridge, smax, sridge
    cdef double mu_aff, sigma, mu_floor, ap, ad, val
    cdef int since_best = 0, n_compl = 2 * m

    for i in range(nf):
        if fabs(gf[i]) > g_sc:
            g_sc = fabs(gf[i])
        if 1e-2 * fabs(Bf[i, i]) > g_sc:
            g_sc = 1e-2 * fabs(Bf[i, i])
        if hlb[i]:
            n_compl += 1
        if hub[i]:
            n_compl += 1
    for j in range(m):
        if fabs(cf[j]) > c_sc:
            c_sc = fabs(cf[j])

    work = np.empty((14, max(nf, m)))
    cdef double[:, ::1] W = work
    H_np = np.empty((nf, nf))
    Hb_np = np.empty((nf, nf))
    X_np = np.empty((m, nf))  # row i is column i of H^-1 J^T in LAPACK view
    S_np = np.empty((m, m))
    Sb_np = np.empty((m, m))
    cdef double[:, ::1] H = H_np
    cdef double[:, ::1] Hb = Hb_np
    cdef double[:, ::1] X = X_np
    cdef double[:, ::1] Smat = S_np
    cdef double[:, ::1] Sb = Sb_np

    cdef double[::1] wp = W[0, :m], wm = W[1, :m]
    cdef double[::1] r_d = W[2, :nf], r_p = W[3, :m]
    cdef double[::1] dl = W[4, :nf], du = W[5, :nf]
    cdef double[::1] dd = W[6, :nf], dy = W[7, :m]
    cdef double[::1] dzl = W[8, :nf], dzu = W[9, :nf]
    cdef double[::1] dsp = W[10, :m], dsm = W[11, :m]
    cdef double[::1] t_v = W[12, :nf], rhs2 = W[13, :m]
    add_np = np.empty((6, max(nf, m)))
    cdef double[:, ::1] ADD = add_np
    cdef double[::1] add_d = ADD[0, :nf], add_y = ADD[1, :m]
    cdef double[::1] add_zl = ADD[2, :nf], add_zu = ADD[3, :nf]
    cdef double[::1] add_sp = ADD[4, :m], add_sm = ADD[5, :m]

    cdef double one = 1.0, zero = 0.0, neg1 = -1.0
    cdef int inc = 1, nrhs

    it = 0
    best_err = 1e300
    for it in range(1, max_iter + 1):
        # clip multipliers strictly inside the l1-dual box
        for j in range(m):
            val = rho * (1.0 - 1e-12)
            if y[j] > val:
                y[j] = val
            elif y[j] < -val:
                y[j] = -val
            wp[j] = rho + y[j]
            wm[j] = rho - y[j]

        # r_d = Bf d + gf + Jf^T y - zl + zu   (C-order buffers as F-views)
        for i in range(nf):
            r_d[i] = gf[i] - zl[i] + zu[i]
        dgemv("N", &nf, &nf, &one, &Bf[0, 0], &nf, &d[0], &inc, &one, &r_d[0], &inc)
        dgemv("N", &nf, &m, &one, &Jf[0, 0], &nf, &y[0], &inc, &one, &r_d[0], &inc)
        # r_p = Jf d + sp - sm + cf
        for j in range(m):
            r_p[j] = sp[j] - sm[j] + cf[j]
        dgemv("T", &nf, &m, &one, &Jf[0, 0], &nf, &d[0], &inc, &one, &r_p[0], &inc)

        tot = 0.0
        for j in range(m):
            tot += sp[j] * wp[j] + sm[j] * wm[j]
        for i in range(nf):
            if hlb[i]:
                tot += (d[i] - lbs[i]) * zl[i]
            if hub[i]:
                tot += (ubs[i] - d[i]) * zu[i]
        mu = tot / n_compl if n_compl > 0 else 0.0

        err = _vmax_abs(r_d) / g_sc
        val = _vmax_abs(r_p) / c_sc
        if val > err:
            err = val
        val = mu / (g_sc if g_sc > c_sc else c_sc)
        if val > err:
            err = val
        if err <= tol:
            break
        if err < 0.7 * best_err:
            best_err = err
            since_best = 0
        else:
            since_best += 1
            if since_best >= 10:
                break

        for i in range(nf):
            dl[i] = (d[i] - lbs[i]) if hlb[i] else 1.0
            if dl[i] < 1e-16:
                dl[i] = 1e-16
            du[i] = (ubs[i] - d[i]) if hub[i] else 1.0
            if du[i] < 1e-16:
                du[i] = 1e-16

        # H = Bf + diag(D_d) with escalating ridge until it factors
        ridge = 1e-12
        for attempt in range(40):
            memcpy(&Hb[0, 0], &Bf[0, 0], nf * nf * sizeof(double))
            for i in range(nf):
                val = ridge
                if hlb[i]:
                    val += zl[i] / dl[i]
                if hub[i]:
                    val += zu[i] / du[i]
                Hb[i, i] += val
            memcpy(&H[0, 0], &Hb[0, 0], nf * nf * sizeof(double))
            dpotrf("L", &nf, &H[0, 0], &nf, &info)
            if info == 0:
                break
            ridge = ridge * 100.0 if ridge * 100.0 > 1e-10 else 1e-10
        if info != 0:
            raise RuntimeError("QP Hessian factorization failed")

        # X = H^-1 J^T: J's C-buffer is J^T in the LAPACK view
        memcpy(&X[0, 0], &Jf[0, 0], m * nf * sizeof(double))
        nrhs = m
        dpotrs("L", &nf, &nrhs, &H[0, 0], &nf, &X[0, 0], &nf, &info)
        # S = J X + diag(D_s)
        dgemm("T", "N", &m, &m, &nf, &one, &Jf[0, 0], &nf, &X[0, 0], &nf,
              &zero, &Smat[0, 0], &m)
        smax = 1.0
        for j in range(m):
            val = sp[j] / wp[j] + sm[j] / wm[j] + dual_reg
            Smat[j, j] += val
            for i in range(j):
                val = 0.5 * (Smat[i, j] + Smat[j, i])
                Smat[i, j] = val
                Smat[j, i] = val
        for j in range(m):
            for i in range(m):
                if fabs(Smat[i, j]) > smax:
                    smax = fabs(Smat[i, j])
        sridge = 0.0
        for attempt in range(40):
            memcpy(&Sb[0, 0], &Smat[0, 0], m * m * sizeof(double))
            if sridge > 0.0:
                for j in range(m):
                    Sb[j, j] += sridge
            dpotrf("L", &m, &Sb[0, 0], &m, &info)
            if info == 0:
                break
            sridge = sridge * 100.0 if sridge * 100.0 > 1e-12 * smax else 1e-12 * smax
            if sridge > 1e6:
                raise RuntimeError("QP Schur factorization failed")
        if info != 0:
            raise RuntimeError("QP Schur factorization failed")

        mu_floor = 0.05 * tol * (g_sc if g_sc > c_sc else c_sc)
        # predictor (sig = 0), then corrector with centering
        sigma = 0.0
        for attempt in range(2):
            val = 0.0 if attempt == 0 else (sigma * mu if sigma * mu > mu_floor else mu_floor)
            _newton(nf, m, val, hlb, hub, d, sp, sm, y, zl, zu, lbs, ubs,
                    dl, du, wp, wm, r_d, r_p, H, Sb, X, Jf,
                    dd, dy, dzl, dzu, dsp, dsm, t_v, rhs2)
            ap, ad = _max_steps(nf, m, tau, hlb, hub, dl, du, sp, sm, zl, zu,
                                wp, wm, dd, dy, dzl, dzu, dsp, dsm)
            if attempt == 0:
                # Mehrotra centering from the affine trial point
                tot = 0.0
                for j in range(m):
                    add_sp[j] = sp[j] + ap * dsp[j]
                    add_sm[j] = sm[j] + ap * dsm[j]
                    add_y[j] = y[j] + ad * dy[j]
                    tot += add_sp[j] * (rho + add_y[j]) + add_sm[j] * (rho - add_y[j])
                for i in range(nf):
                    if hlb[i]:
                        tot += (d[i] + ap * dd[i] - lbs[i]) * (zl[i] + ad * dzl[i])
                    if hub[i]:
                        tot += (ubs[i] - d[i] - ap * dd[i]) * (zu[i] + ad * dzu[i])
                mu_aff = tot / n_compl if n_compl > 0 else 0.0
                sigma = (mu_aff / mu) ** 3 if mu > 1e-300 else 0.1
                if sigma < 1e-6:
                    sigma = 1e-6
                elif sigma > 0.9:
                    sigma = 0.9
        for i in range(nf):
            d[i] += ap * dd[i]
            zl[i] += ad * dzl[i]
            zu[i] += ad * dzu[i]
        for j in range(m):
            y[j] += ad * dy[j]
            sp[j] += ap * dsp[j]
            sm[j] += ap * dsm[j]
    return it


cdef void _newton(int nf, int m, double sig_mu,
                  unsigned char[::1] hlb, unsigned char[::1] hub,
                  double[::1] d, double[::1] sp, double[::1] sm,
                  double[::1] y, double[::1] zl, double[::1] zu,
                  double[::1] lbs, double[::1] ubs,
                  double[::1] dl, double[::1] du,
                  double[::1] wp, double[::1] wm,
                  double[::1] r_d, double[::1] r_p,
                  double[:, ::1] H, double[:, ::1] Sb, double[:, ::1] X,
                  double[:, ::1] Jf,
                  double[::1] dd, double[::1] dy,
                  double[::1] dzl, double[::1] dzu,
                  double[::1] dsp, double[::1] dsm,
                  double[::1] t_v, double[::1] rhs2):
    cdef int i, j, info, one_i = 1
    cdef double one = 1.0, neg1 = -1.0
    cdef double r_zl, r_zu, r_wp, r_wm
    # rhs1 (in t_v) and per-variable complementarity eliminations
    for i in range(nf):
        t_v[i] = -r_d[i]
        if hlb[i]:
            r_zl = (d[i] - lbs[i]) * zl[i] - sig_mu
            t_v[i] -= r_zl / dl[i]
            dzl[i] = r_zl  # stash for later
        else:
            dzl[i] = 0.0
        if hub[i]:
            r_zu = (ubs[i] - d[i]) * zu[i] - sig_mu
            t_v[i] += r_zu / du[i]
            dzu[i] = r_zu
        else:
            dzu[i] = 0.0
    for j in range(m):
        r_wp = sp[j] * wp[j] - sig_mu
        r_wm = sm[j] * wm[j] - sig_mu
        rhs2[j] = -r_p[j] + r_wp / wp[j] - r_wm / wm[j]
        dsp[j] = r_wp
        dsm[j] = r_wm
    dpotrs("L", &nf, &one_i, &H[0, 0], &nf, &t_v[0], &nf, &info)
    # dy = Sb^-1 (J t - rhs2)
    for j in range(m):
        dy[j] = -rhs2[j]
    dgemv("T", &nf, &m, &one, &Jf[0, 0], &nf, &t_v[0], &one_i, &one, &dy[0], &one_i)
    dpotrs("L", &m, &one_i, &Sb[0, 0], &m, &dy[0], &m, &info)
    # dd = t - X^T(view) dy  (X holds H^-1 J^T column-wise in LAPACK view)
    for i in range(nf):
        dd[i] = t_v[i]
    dgemv("N", &nf, &m, &neg1, &X[0, 0], &nf, &dy[0], &one_i, &one, &dd[0], &one_i)
    for i in range(nf):
        if hlb[i]:
            dzl[i] = -(dzl[i] + zl[i] * dd[i]) / dl[i]
        if hub[i]:
            dzu[i] = -(dzu[i] - zu[i] * dd[i]) / du[i]
    for j in range(m):
        dsp[j] = -(dsp[j] + sp[j] * dy[j]) / wp[j]
        dsm[j] = -(dsm[j] - sm[j] * dy[j]) / wm[j]


cdef tuple _max_steps(int nf, int m, double tau,
                      unsigned char[::1] hlb, unsigned char[::1] hub,
                      double[::1] dl, double[::1] du,
                      double[::1] sp, double[::1] sm,
                      double[::1] zl, double[::1] zu,
                      double[::1] wp, double[::1] wm,
                      double[::1] dd, double[::1] dy,
                      double[::1] dzl, double[::1] dzu,
                      double[::1] dsp, double[::1] dsm):
    cdef double ap = 1.0 / tau, ad = 1.0 / tau, r
    cdef int i, j
    for i in range(nf):
        if hlb[i]:
            if dd[i] < 0.0:
                r = -dl[i] / dd[i]
                if r < ap:
                    ap = r
            if dzl[i] < 0.0:
                r = -zl[i] / dzl[i]
                if r < ad:
                    ad = r
        if hub[i]:
            if dd[i] > 0.0:
                r = du[i] / dd[i]
                if r < ap:
                    ap = r
            if dzu[i] < 0.0:
                r = -zu[i] / dzu[i]
                if r < ad:
                    ad = r
    for j in range(m):
        if dsp[j] < 0.0:
            r = -sp[j] / dsp[j]
            if r < ap:
                ap = r
        if dsm[j] < 0.0:
            r = -sm[j] / dsm[j]
            if r < ap:
                ap = r
        if dy[j] < 0.0:
            r = -wp[j] / dy[j]
            if r < ad:
                ad = r
        elif dy[j] > 0.0:
            r = wm[j] / dy[j]
            if r < ad:
                ad = r
    ap = tau * ap
    ad = tau * ad
    if ap > 1.0:
        ap = 1.0
    if ad > 1.0:
        ad = 1.0
    return ap, ad
