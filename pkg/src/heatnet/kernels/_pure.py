"""Numpy reference implementation of the evaluation kernels.

``fill_constraints`` evaluates the transcribed horizon problem's equality
constraints and dense Jacobian for a compiled submodel (see
``heatnet.ocp.CompiledSub`` for the layout contract); ``ip_qp_core`` runs
the interior-point iteration of the solver's QP subproblem on the reduced
arrays. The implementations vectorize within each constraint family and
loop only over stages or interior-point iterations.
"""

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class _Index:
    """Stage-invariant gather/scatter indices, built once per submodel."""

    def __init__(self, cs):
        ne, nv, nth, ntn, nnu = cs.ne, cs.nv, cs.nth, cs.ntn, cs.nnu
        self.user_rows = np.flatnonzero(cs.user_pos >= 0)
        self.user_cols_th = cs.user_pos[self.user_rows].astype(np.intp)

        # mixing pairs: one entry per (tn-node, local in-edge)
        pr_tn, pr_edge, pr_srcpos, pr_tsetr = [], [], [], []
        for t in range(ntn):
            v = int(cs.tn_node[t])
            for p in range(cs.in_ptr[v], cs.in_ptr[v + 1]):
                i = int(cs.in_edge[p])
                pr_tn.append(t)
                pr_edge.append(i)
                if cs.nonuser_pos[i] >= 0:
                    pr_srcpos.append(int(cs.nonuser_pos[i]))
                    pr_tsetr.append(0.0)
                else:
                    pr_srcpos.append(-1)
                    pr_tsetr.append(float(cs.user_tsetr[cs.user_pos[i]]))
        self.pr_tn = np.array(pr_tn, dtype=np.intp)
        self.pr_edge = np.array(pr_edge, dtype=np.intp)
        self.pr_srcpos = np.array(pr_srcpos, dtype=np.intp)
        self.pr_tsetr = np.array(pr_tsetr)
        self.pr_is_pipe = self.pr_srcpos >= 0

        self.nonuser_edge = np.flatnonzero(cs.nonuser_pos >= 0).astype(np.intp)
        self.nonuser_tail_tn = cs.tn_pos[cs.tails[self.nonuser_edge]].astype(np.intp)
        self.user_edge = cs.user_edge.astype(np.intp)
        self.user_tail_tn = cs.tn_pos[cs.user_tail].astype(np.intp)
        self.bvar_nodes = np.flatnonzero(cs.node_bvar >= 0).astype(np.intp)
        self.bvar_idx = cs.node_bvar[self.bvar_nodes].astype(np.intp)
        self.supply_pins = np.flatnonzero(cs.pin_supply).astype(np.intp)


def fill_constraints(cs, params, x, out_c, out_J):
    """Evaluate constraints and Jacobian at the physical point ``x``."""
    idx = getattr(cs, "_pure_index", None)
    if idx is None:
        idx = _Index(cs)
        cs._pure_index = idx

    N, S, R = cs.N, cs.S, cs.R
    ne, nv, nth, ntn, nnu, npin = cs.ne, cs.nv, cs.nth, cs.ntn, cs.nnu, cs.npin
    o_th, o_m, o_P, o_b = 0, nth, nth + ne, nth + ne + nv
    o_tn = o_b + cs.nb
    o_T = o_tn + ntn
    o_soe = o_T + nnu
    r_drop, r_mass, r_pin = 0, ne, ne + nv
    r_mix = r_pin + npin
    r_T = r_mix + ntn
    r_soe = r_T + nnu
    eps = cs.smooth_eps
    dt, cp, mix_eps = cs.dt, cs.cp, cs.mix_eps

    out_J[:, :] = 0.0
    slack = x[N * S] if cs.has_slack else 0.0

    for k in range(N):
        xo, ro = k * S, k * R
        th = x[xo + o_th:xo + o_th + nth]
        m = x[xo + o_m:xo + o_m + ne]
        P = x[xo + o_P:xo + o_P + nv]
        tn = x[xo + o_tn:xo + o_tn + ntn]
        T = x[xo + o_T:xo + o_T + nnu]
        soe = x[xo + o_soe:xo + o_soe + nth]

        # pressure drop: (Lam^T P)_e - zeta*m*sqrt(m^2+eps^2) = 0 with the
        # valve resistance parameterized as zeta = mu*phi^2, phi = 1/theta-1
        # (polynomial in the decision variable, unlike theta itself)
        zeta = cs.zeta_fix.copy()
        if nth:
            phi = th  # the theta block stores phi
            zeta[idx.user_rows] = cs.mu[idx.user_rows] * phi[idx.user_cols_th] ** 2
        s = np.sqrt(m * m + eps * eps)
        out_c[ro:ro + ne] = P[cs.tails] - P[cs.heads] - zeta * m * s
        rows = np.arange(ro, ro + ne)
        out_J[rows, xo + o_P + cs.tails] += 1.0
        out_J[rows, xo + o_P + cs.heads] += -1.0
        out_J[rows, xo + o_m + np.arange(ne)] = -zeta * (s + m * m / s)
        if nth:
            out_J[ro + idx.user_rows, xo + o_th + idx.user_cols_th] = (
                -2.0 * cs.mu[idx.user_rows] * phi[idx.user_cols_th]
                * m[idx.user_rows] * s[idx.user_rows]
            )

        # mass balance: (Lam m)_v - b_v - fixed_flow = 0
        bal = np.bincount(cs.tails, weights=m, minlength=nv) - np.bincount(
            cs.heads, weights=m, minlength=nv
        )
        bal -= params.fixed_flow[k]
        if cs.nb:
            bvals = x[xo + o_b:xo + o_b + cs.nb]
            bal[idx.bvar_nodes] -= bvals[idx.bvar_idx]
            out_J[ro + r_mass + idx.bvar_nodes, xo + o_b + idx.bvar_idx] = -1.0
        out_c[ro + r_mass:ro + r_mass + nv] = bal
        out_J[ro + r_mass + cs.tails, xo + o_m + np.arange(ne)] += 1.0
        out_J[ro + r_mass + cs.heads, xo + o_m + np.arange(ne)] += -1.0

        # pressure pins: P_v - pin (- slack on supply-side pins)
        if npin:
            pv = P[cs.pin_node] - params.pin_val[k]
            if cs.has_slack and idx.supply_pins.size:
                pv[idx.supply_pins] -= slack
                out_J[ro + r_pin + idx.supply_pins, N * S] = -1.0
            out_c[ro + r_pin:ro + r_pin + npin] = pv
            out_J[ro + r_pin + np.arange(npin), xo + o_P + cs.pin_node] = 1.0

        # node mixing: (sum m_in + w + eps)*Tn - sum m_in*T_src - (w+eps)*anchor
        w = params.w_pass[k][cs.tn_node] + mix_eps
        anchor = params.anchor[k][cs.tn_node]
        cmix = w * (tn - anchor)
        diag = w.copy()
        m_pair = m[idx.pr_edge]
        t_src = np.where(
            idx.pr_is_pipe, T[np.maximum(idx.pr_srcpos, 0)], idx.pr_tsetr
        )
        np.add.at(cmix, idx.pr_tn, m_pair * (tn[idx.pr_tn] - t_src))
        np.add.at(diag, idx.pr_tn, m_pair)
        out_c[ro + r_mix:ro + r_mix + ntn] = cmix
        out_J[ro + r_mix + np.arange(ntn), xo + o_tn + np.arange(ntn)] = diag
        np.add.at(
            out_J,
            (ro + r_mix + idx.pr_tn, xo + o_m + idx.pr_edge),
            tn[idx.pr_tn] - t_src,
        )
        pipe = idx.pr_is_pipe
        np.add.at(
            out_J,
            (ro + r_mix + idx.pr_tn[pipe], xo + o_T + idx.pr_srcpos[pipe]),
            -m_pair[pipe],
        )

        # pipe temperature, implicit Euler over [t_k, t_k+1]
        j = idx.nonuser_edge
        mj = m[j]
        c1j, c2j = cs.c1[j], cs.c2[j]
        tn_tail = tn[idx.nonuser_tail_tn]
        T_prev = params.T_init if k == 0 else x[xo - S + o_T:xo - S + o_T + nnu]
        lam = c1j * mj + c2j
        out_c[ro + r_T:ro + r_T + nnu] = (
            T * (1.0 + dt * lam) - T_prev - dt * (c1j * mj * tn_tail + c2j * params.tamb[k])
        )
        rws = ro + r_T + np.arange(nnu)
        out_J[rws, xo + o_T + np.arange(nnu)] = 1.0 + dt * lam
        out_J[rws, xo + o_m + j] = dt * c1j * (T - tn_tail)
        np.add.at(out_J, (rws, xo + o_tn + idx.nonuser_tail_tn), -dt * c1j * mj)
        if k > 0:
            out_J[rws, xo - S + o_T + np.arange(nnu)] = -1.0

        # state of energy, explicit Euler with heat at the stage's end state
        if nth:
            ue = idx.user_edge
            mu_ = m[ue]
            tn_u = tn[idx.user_tail_tn]
            qp = cp * mu_ * (tn_u - cs.user_tsetr)
            soe_prev = params.soe_init if k == 0 else x[xo - S + o_soe:xo - S + o_soe + nth]
            out_c[ro + r_soe:ro + r_soe + nth] = soe - soe_prev - dt * (qp - params.qout[k])
            rws = ro + r_soe + np.arange(nth)
            out_J[rws, xo + o_soe + np.arange(nth)] = 1.0
            out_J[rws, xo + o_m + ue] = -dt * cp * (tn_u - cs.user_tsetr)
            np.add.at(out_J, (rws, xo + o_tn + idx.user_tail_tn), -dt * cp * mu_)
            if k > 0:
                out_J[rws, xo - S + o_soe + np.arange(nth)] = -1.0


def fill_lagrangian_hessian(cs, params, x, w, out_H):
    """Accumulate sum_r w_r * hess(c_r) at the physical point ``x``.

    ``w`` carries the (row-scaled) multipliers. Every constraint is either
    linear, bilinear, or polynomial in the valve position, so the entries
    are closed-form. The objective's diagonal is added by the caller.
    """
    idx = getattr(cs, "_pure_index", None)
    if idx is None:
        idx = _Index(cs)
        cs._pure_index = idx
    N, S, R = cs.N, cs.S, cs.R
    ne, nv, nth, ntn, nnu, npin = cs.ne, cs.nv, cs.nth, cs.ntn, cs.nnu, cs.npin
    o_th, o_m = 0, nth
    o_tn = nth + ne + nv + cs.nb
    o_T = o_tn + ntn
    eps = cs.smooth_eps
    dt, cp = cs.dt, cs.cp
    r_mix = ne + nv + npin
    r_T = r_mix + ntn
    r_soe = r_T + nnu

    out_H[:, :] = 0.0

    def add(i, j, v):
        out_H[i, j] += v
        if i != j:
            out_H[j, i] += v

    for k in range(N):
        xo, ro = k * S, k * R
        th = x[xo + o_th:xo + o_th + nth]
        m = x[xo + o_m:xo + o_m + ne]

        # pressure-drop rows: q(m) = m*sqrt(m^2+eps^2), zeta = mu*phi^2
        s = np.sqrt(m * m + eps * eps)
        q = m * s
        qp = (2.0 * m * m + eps * eps) / s
        qpp = m * (2.0 * m * m + 3.0 * eps * eps) / s**3
        for e in range(ne):
            wr = w[ro + e]
            if wr == 0.0:
                continue
            u = cs.user_pos[e]
            if u >= 0:
                phi = th[u]
                zeta = cs.mu[e] * phi * phi
                add(xo + o_th + u, xo + o_th + u, -wr * 2.0 * cs.mu[e] * q[e])
                add(xo + o_th + u, xo + o_m + e, -wr * 2.0 * cs.mu[e] * phi * qp[e])
            else:
                zeta = cs.zeta_fix[e]
            add(xo + o_m + e, xo + o_m + e, -wr * zeta * qpp[e])

        # mixing rows: bilinear m*Tn and m*T_src
        for p in range(idx.pr_tn.size):
            t = idx.pr_tn[p]
            e = idx.pr_edge[p]
            wr = w[ro + r_mix + t]
            if wr == 0.0:
                continue
            add(xo + o_m + e, xo + o_tn + t, wr)
            if idx.pr_srcpos[p] >= 0:
                add(xo + o_m + e, xo + o_T + idx.pr_srcpos[p], -wr)

        # pipe-temperature rows: bilinear m*T and m*Tn
        for r in range(nnu):
            wr = w[ro + r_T + r]
            if wr == 0.0:
                continue
            e = idx.nonuser_edge[r]
            add(xo + o_m + e, xo + o_T + r, wr * dt * cs.c1[e])
            add(xo + o_m + e, xo + o_tn + idx.nonuser_tail_tn[r], -wr * dt * cs.c1[e])

        # state-of-energy rows: bilinear m_u*Tn
        for u in range(nth):
            wr = w[ro + r_soe + u]
            if wr == 0.0:
                continue
            e = idx.user_edge[u]
            add(xo + o_m + e, xo + o_tn + idx.user_tail_tn[u], -wr * dt * cp)


def ip_qp_core(Bf, gf, Jf, cf, lbs, ubs, has_lb, has_ub,
               d, sp, sm, y, zl, zu, rho, tol, max_iter, dual_reg):
    """Mehrotra predictor-corrector iteration on the reduced elastic QP.

    Mutates (d, sp, sm, y, zl, zu) in place and returns the iteration
    count. The caller owns problem reduction, warm starts and result
    packaging.
    """
    nf, m = gf.size, cf.size
    g_sc = max(1.0, float(np.abs(gf).max(initial=0.0)),
               1e-2 * float(np.abs(np.diag(Bf)).max(initial=0.0)))
    c_sc = max(1.0, float(np.abs(cf).max(initial=0.0)))
    tau = 0.995
    idx_lb = np.flatnonzero(has_lb)
    idx_ub = np.flatnonzero(has_ub)
    n_compl = 2 * m + idx_lb.size + idx_ub.size

    def compl_avg(d_, sp_, sm_, y_, zl_, zu_):
        tot = float(sp_ @ (rho + y_)) + float(sm_ @ (rho - y_))
        if idx_lb.size:
            tot += float((d_ - lbs)[idx_lb] @ zl_[idx_lb])
        if idx_ub.size:
            tot += float((ubs - d_)[idx_ub] @ zu_[idx_ub])
        return tot / n_compl if n_compl else 0.0

    it = 0
    best_err = np.inf
    since_best = 0
    for it in range(1, max_iter + 1):
        np.clip(y, -rho * (1.0 - 1e-12), rho * (1.0 - 1e-12), out=y)
        wp = rho + y
        wm = rho - y
        r_d = Bf @ d + gf + Jf.T @ y - zl + zu
        r_p = Jf @ d + sp - sm + cf
        mu = compl_avg(d, sp, sm, y, zl, zu)
        err = max(float(np.abs(r_d).max(initial=0.0)) / g_sc,
                  float(np.abs(r_p).max(initial=0.0)) / c_sc,
                  mu / max(g_sc, c_sc))
        if err <= tol:
            break
        if err < 0.7 * best_err:
            best_err = err
            since_best = 0
        else:
            since_best += 1
            if since_best >= 10:
                break  # numerically saturated; return the best-effort point

        dl = np.maximum(np.where(has_lb, d - lbs, 1.0), 1e-16)
        du = np.maximum(np.where(has_ub, ubs - d, 1.0), 1e-16)
        D_d = np.where(has_lb, zl / dl, 0.0) + np.where(has_ub, zu / du, 0.0)
        D_s = sp / wp + sm / wm + dual_reg

        H = Bf + np.diag(D_d)
        ridge = 1e-12
        while True:
            try:
                Hc = cho_factor(H + ridge * np.eye(nf), lower=True, check_finite=False)
                break
            except LinAlgError:
                ridge = max(ridge * 100.0, 1e-10)
                if ridge > 1.0:
                    raise
        HiJt = cho_solve(Hc, Jf.T, check_finite=False)
        S = Jf @ HiJt + np.diag(D_s)
        S = 0.5 * (S + S.T)
        sridge = 0.0
        while True:
            try:
                Sc = cho_factor(S + (sridge * np.eye(m) if sridge else 0.0),
                                lower=True, check_finite=False)
                break
            except LinAlgError:
                sridge = max(sridge * 100.0, 1e-12 * max(1.0, float(np.abs(S).max())))
                if sridge > 1e6:
                    raise

        def newton(sig_mu):
            r_zl = np.where(has_lb, (d - lbs) * zl - sig_mu, 0.0)
            r_zu = np.where(has_ub, (ubs - d) * zu - sig_mu, 0.0)
            r_wp = sp * wp - sig_mu
            r_wm = sm * wm - sig_mu
            rhs1 = -(r_d + np.where(has_lb, r_zl / dl, 0.0)
                     - np.where(has_ub, r_zu / du, 0.0))
            rhs2 = -r_p + r_wp / wp - r_wm / wm
            t = cho_solve(Hc, rhs1, check_finite=False)
            dy = cho_solve(Sc, Jf @ t - rhs2, check_finite=False)
            dd = t - HiJt @ dy
            dzl = np.where(has_lb, -(r_zl + zl * dd) / dl, 0.0)
            dzu = np.where(has_ub, -(r_zu - zu * dd) / du, 0.0)
            dsp = -(r_wp + sp * dy) / wp
            dsm = -(r_wm - sm * dy) / wm
            return dd, dy, dzl, dzu, dsp, dsm

        def ratio(v, dv):
            msk = dv < 0
            if not msk.any():
                return 1.0
            q = v[msk] / dv[msk]
            return float(-q.max())

        def max_steps(dd, dy, dzl, dzu, dsp, dsm):
            ap = min(
                ratio(dl, np.where(has_lb, dd, 0.0)),
                ratio(du, np.where(has_ub, -dd, 0.0)),
                ratio(sp, dsp), ratio(sm, dsm), 1.0 / tau,
            )
            ad = min(
                ratio(np.where(has_lb, zl, 1.0), np.where(has_lb, dzl, 0.0)),
                ratio(np.where(has_ub, zu, 1.0), np.where(has_ub, dzu, 0.0)),
                ratio(wp, dy), ratio(wm, -dy), 1.0 / tau,
            )
            return min(1.0, tau * ap), min(1.0, tau * ad)

        # centering target floored at the termination scale: bound slacks
        # must not underflow before the dual residual converges
        aff = newton(0.0)
        ap, ad = max_steps(*aff)
        mu_aff = compl_avg(d + ap * aff[0], sp + ap * aff[4], sm + ap * aff[5],
                           y + ad * aff[1], zl + ad * aff[2], zu + ad * aff[3])
        sigma = (mu_aff / max(mu, 1e-300)) ** 3 if mu > 0 else 0.1
        sigma = min(max(sigma, 1e-6), 0.9)
        mu_floor = 0.05 * tol * max(g_sc, c_sc)
        step = newton(max(sigma * mu, mu_floor))
        ap, ad = max_steps(*step)
        d += ap * step[0]
        y += ad * step[1]
        zl += ad * step[2]
        zu += ad * step[3]
        sp += ap * step[4]
        sm += ap * step[5]
    return it


def thermal_ab(tails, heads, is_user, node_in_ptr, node_in_edge, c1, c2,
               flows, plant_root, nonuser_pos, mix_eps):
    """Assemble dense (A, B) for the non-user pipe dynamics.

    ``nonuser_pos[j]`` is the row of edge j in the state vector, or -1 for
    user edges. B columns scale [T0, TsetR, Tamb].
    """
    n = int((nonuser_pos >= 0).sum())
    A = np.zeros((n, n))
    B = np.zeros((n, 3))
    ne = tails.shape[0]
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
            w = c1[j] * flows[j] * flows[i] / m_tot
            if is_user[i]:
                B[r, 1] += w
            else:
                A[r, nonuser_pos[i]] += w
    return A, B
