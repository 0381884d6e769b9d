"""Dense SQP solver for equality-constrained problems with variable bounds.

    minimize    f(x)
    subject to  c(x) = 0,   lb <= x <= ub

The QP subproblems carry elastic slacks on the linearized equalities with
an l1 penalty, so they are always feasible and double as the restoration
phase; the same penalty weighs the l1 merit function used by the line
search. The Lagrangian Hessian is approximated with Powell-damped BFGS.
All linear algebra is dense, which is the right trade at the problem sizes
this package produces (hundreds of variables).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import kernels

__all__ = ["NlpProblem", "SqpOptions", "SqpResult", "solve_sqp", "solve_ip_qp"]


@dataclass
class NlpProblem:
    """Callback-based NLP definition.

    eval_f(x) -> (f, grad)        objective and its gradient
    eval_c(x) -> (c, J)           constraint values and dense Jacobian (m, n)
    eval_h(x, y) -> H             exact Lagrangian Hessian (optional); when
                                  provided, the SQP runs Newton steps with
                                  Levenberg regularization instead of BFGS
    """

    n: int
    m: int
    lb: np.ndarray
    ub: np.ndarray
    eval_f: callable
    eval_c: callable
    eval_h: callable = None
    hess_block: int = 0  # block size of the (block-diagonal) exact Hessian

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bound shapes do not match n")
        if np.any(self.lb > self.ub + 1e-15):
            bad = int(np.argmax(self.lb - self.ub))
            raise ValueError(f"lb > ub at index {bad}")


@dataclass
class SqpOptions:
    max_iter: int = 120
    tol_kkt: float = 1e-6
    tol_con: float = 1e-8
    qp_tol: float = 1e-10
    qp_max_iter: int = 60
    penalty0: float = 10.0
    penalty_max: float = 1e7
    stall_iters: int = 10
    trace: object = None  # optional per-iteration diagnostic callback
    # accept an already-feasible warm start whose stationarity is no worse
    # than this, without taking any step (keeps repeated nearby solves
    # bitwise stable inside coordination loops)
    kkt_accept: float = 0.0


@dataclass
class SqpResult:
    x: np.ndarray
    y: np.ndarray
    f: float
    c_norm: float
    kkt: float
    status: str  # optimal | near_optimal | max_iter | infeasible | stalled
    iterations: int
    hessian: np.ndarray = None
    penalty: float = 10.0
    qp_duals: tuple = None

    @property
    def success(self) -> bool:
        return self.status == "optimal"

    @property
    def usable(self) -> bool:
        """Feasible point good enough to act on (receding-horizon use)."""
        return self.status in ("optimal", "near_optimal")


@dataclass
class _QpResult:
    d: np.ndarray
    y: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    slack_l1: float
    iterations: int
    converged: bool


def solve_ip_qp(B, g, J, c, lb, ub, rho, tol=1e-11, max_iter=60,
                dual_reg=1e-10, warm=None) -> _QpResult:
    """Primal-dual interior-point solve of the elastic QP subproblem.

        min  0.5 d'Bd + g'd + rho*sum(sp + sm)
        s.t. J d + sp - sm = -c,  lb <= d <= ub,  sp, sm >= 0

    The elastic slacks make the subproblem unconditionally feasible and
    bound the equality multipliers to [-rho, rho]. ``dual_reg`` only
    conditions the Schur complement (nearly dependent rows appear at
    vanishing network flows); it does not shift the QP solution.
    Zero-width boxes (fixed variables) are eliminated before the
    iteration.
    """
    n, m = g.size, c.size
    fix = (ub - lb) < 1e-11
    d_full = np.zeros(n)
    d_full[fix] = 0.5 * (lb[fix] + ub[fix])
    free = ~fix
    nf = int(free.sum())
    if nf == 0:
        r = c + J @ d_full
        return _QpResult(d_full, np.zeros(m), np.zeros(n), np.zeros(n),
                         float(np.abs(r).sum()), 0, True)
    m_real = m
    if m == 0:
        # pad with a null row: keeps the factorization shapes legal and is
        # exactly neutral (zero row, zero violation, multiplier stays 0)
        J = np.zeros((1, n))
        c = np.zeros(1)
        m = 1
        if warm is not None:
            warm = None

    Bf = np.ascontiguousarray(B[np.ix_(free, free)])
    gf = g[free] + B[np.ix_(free, fix)] @ d_full[fix]
    Jf = np.ascontiguousarray(J[:, free])
    cf = c + J[:, fix] @ d_full[fix]
    lbf, ubf = lb[free], ub[free]
    has_lb = np.isfinite(lbf)
    has_ub = np.isfinite(ubf)
    # sanitized copies keep inf*0 products out of masked arithmetic
    lbs = np.where(has_lb, lbf, 0.0)
    ubs = np.where(has_ub, ubf, 0.0)

    # strictly interior start
    width = np.where(has_lb & has_ub, ubf - lbf, np.inf)
    off = 0.1 * np.minimum(1.0, width)
    d = np.zeros(nf)
    d = np.where(has_lb, np.maximum(d, lbf + off), d)
    d = np.where(has_ub, np.minimum(d, ubf - off), d)
    d = np.ascontiguousarray(d)
    cs = np.maximum(1.0, np.abs(cf))
    sp = cs.copy()
    sm = cs.copy()
    # warm duals shorten the centering path on repeated nearby subproblems
    if warm is not None and warm[0].shape == (m,) and warm[1].shape[0] == n:
        y = np.clip(warm[0], -0.9 * rho, 0.9 * rho).copy()
        zl = np.where(has_lb, np.maximum(warm[1][free], 1e-6), 0.0)
        zu = np.where(has_ub, np.maximum(warm[2][free], 1e-6), 0.0)
    else:
        y = np.zeros(m)
        zl = np.where(has_lb, 1.0, 0.0)
        zu = np.where(has_ub, 1.0, 0.0)

    it = kernels.ip_qp_core(Bf, gf, Jf, cf, lbs, ubs, has_lb, has_ub,
                            d, sp, sm, y, zl, zu,
                            float(rho), float(tol), int(max_iter), float(dual_reg))

    g_sc = max(1.0, float(np.abs(gf).max(initial=0.0)),
               1e-2 * float(np.abs(np.diag(Bf)).max(initial=0.0)))
    c_sc = max(1.0, float(np.abs(cf).max(initial=0.0)))
    d_full[free] = d
    zl_full = np.zeros(n)
    zu_full = np.zeros(n)
    zl_full[free] = zl
    zu_full[free] = zu
    r_fin = cf + Jf @ d
    slack_l1 = float(np.abs(r_fin).sum())
    r_d = Bf @ d + gf + Jf.T @ y - zl + zu
    converged = bool(
        np.abs(r_d).max(initial=0.0) <= 100 * tol * g_sc
        and np.abs(r_fin + sp - sm).max(initial=0.0) <= 100 * tol * c_sc
    )
    if m_real == 0:
        y = np.zeros(0)
        slack_l1 = 0.0
    return _QpResult(d_full, y, zl_full, zu_full, slack_l1, it, converged)


def _min_norm_step(J, rhs):
    """Least-norm solution of J d = rhs via regularized normal equations."""
    m = J.shape[0]
    JJt = J @ J.T
    delta = 1e-10 * max(1.0, float(np.trace(JJt)) / max(m, 1))
    try:
        w = np.linalg.solve(JJt + delta * np.eye(m), rhs)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(JJt, rhs, rcond=None)[0]
    return J.T @ w


def _feasibility_polish(problem, x, c, J, tol, max_steps=8):
    """Min-norm constraint Newton with an l2 line search.

    Moves (nearly) orthogonally to the constraint null space, so the
    objective barely changes; used when the penalty line search cannot
    close the last digits of feasibility on ill-conditioned rows.
    """
    f = g = None
    for _ in range(max_steps):
        cn = float(np.abs(c).max(initial=0.0))
        if cn <= tol:
            break
        d = _min_norm_step(J, -c)
        if not np.all(np.isfinite(d)):
            break
        alpha, improved = 1.0, False
        n0 = float(c @ c)
        for _ in range(20):
            x_t = np.clip(x + alpha * d, problem.lb, problem.ub)
            c_t, J_t = problem.eval_c(x_t)
            if float(c_t @ c_t) < (1.0 - 1e-4 * alpha) * n0:
                x, c, J = x_t, c_t, J_t
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
    return x, c, J


def _convexify(H, block=None):
    """Positive-definite model Hessian via eigenvalue magnitude flooring.

    The exact Lagrangian Hessian of a network problem is indefinite through
    its bilinear couplings (+-w eigenpairs with zero diagonal); replacing
    each eigenvalue by max(|lambda|, delta) keeps the curvature scale in
    those planes without inflating flat directions. The Hessian is
    block-diagonal per stage (no cross-stage second derivatives), so the
    modification runs per block when the block size is known.
    """
    n = H.shape[0]
    scale = max(1.0, float(np.abs(H).max()))
    delta = 1e-8 * scale
    B = np.zeros_like(H)
    if block is None or block <= 0:
        spans = [(0, n)]
    else:
        spans = [(i, min(i + block, n)) for i in range(0, n, block)]
    for a, b in spans:
        sub = H[a:b, a:b]
        if b - a == 1:
            B[a, a] = max(abs(float(sub[0, 0])), delta)
            continue
        w, V = np.linalg.eigh(0.5 * (sub + sub.T))
        w = np.maximum(np.abs(w), delta)
        B[a:b, a:b] = (V * w) @ V.T
    return 0.5 * (B + B.T), 0.0


def _projected_stationarity(g_lag, x, lb, ub):
    """Projected-gradient KKT residual ||x - P(x - gradL)||_inf.

    Robust to iterates that approach bounds asymptotically, where explicit
    active-set detection would misclassify them.
    """
    step = np.clip(x - g_lag, lb, ub) - x
    return float(np.abs(step).max(initial=0.0))


def _kkt_scale(y):
    """Average-multiplier normalization of the stationarity residual."""
    if y.size == 0:
        return 1.0
    return max(1.0, float(np.abs(y).mean()) / 100.0)


def _refit_multipliers(g, J, x, lb, ub):
    """Damped least-squares multipliers over the strictly free variables.

    The working multipliers from the QP can be noisy near degenerate
    corners (parallel paths at zero flow); any multiplier vector certifies
    a KKT point, so convergence is judged against the best-fitting one.
    """
    atol = 1e-6 * (1.0 + np.abs(x))
    free = (x > lb + atol) & (x < ub - atol)
    if not free.any() or J.shape[0] == 0:
        return None
    A = J[:, free]
    M = A @ A.T
    lam = 1e-8 * max(1.0, float(np.trace(M)) / max(M.shape[0], 1))
    try:
        return np.linalg.solve(M + lam * np.eye(M.shape[0]), -(A @ g[free]))
    except np.linalg.LinAlgError:
        return None


def solve_sqp(
    problem: NlpProblem,
    x0: np.ndarray,
    options: SqpOptions | None = None,
    y0: np.ndarray | None = None,
    hessian0: np.ndarray | None = None,
    penalty0: float | None = None,
    qp_warm0: tuple | None = None,
) -> SqpResult:
    """SQP iteration with damped BFGS and an l1 merit line search.

    ``y0``/``hessian0``/``penalty0`` warm-start the multipliers, the BFGS
    matrix and the penalty from a previous solve of a nearby problem.
    """
    opt = options or SqpOptions()
    n, m = problem.n, problem.m
    lb, ub = problem.lb, problem.ub
    x = np.clip(np.asarray(x0, dtype=float), lb, ub)
    B = np.eye(n) if hessian0 is None else hessian0.copy()
    rho = opt.penalty0 if penalty0 is None else float(penalty0)

    f, g = problem.eval_f(x)
    c, J = problem.eval_c(x)
    if y0 is None:
        y = np.zeros(m)
        if m:
            # damped least-squares multipliers size the l1 penalty from the
            # start; the damping keeps near-dependent rows from exploding it
            JJt = J @ J.T
            lam = 1e-4 * max(1.0, float(np.trace(JJt)) / m)
            try:
                y = np.linalg.solve(JJt + lam * np.eye(m), -(J @ g))
            except np.linalg.LinAlgError:
                y = np.zeros(m)
            if not np.all(np.isfinite(y)):
                y = np.zeros(m)
            rho = max(rho, 1.5 * float(np.abs(y).max(initial=0.0)) + 1.0)
    else:
        y = np.asarray(y0, dtype=float).copy()
    best_cnorm = float(np.abs(c).max(initial=0.0))
    stall = 0
    n_reject = 0
    sigma = 1.0
    kkt_best = np.inf
    kkt_flat = 0
    prev_step = np.inf
    last_slack_active = False
    qp_warm = qp_warm0
    status = "max_iter"
    it = 0

    exact_hess = problem.eval_h is not None
    lev = 0.0

    def kkt_test(g_, J_, c_norm_, y_):
        g_lag_ = g_ + J_.T @ y_ if m else g_.copy()
        kkt_ = _projected_stationarity(g_lag_, x, lb, ub) / _kkt_scale(y_)
        if c_norm_ > opt.tol_con or kkt_ <= opt.tol_kkt:
            return kkt_, y_
        y_ls = _refit_multipliers(g_, J_, x, lb, ub)
        if y_ls is None:
            return kkt_, y_
        kkt_ls = _projected_stationarity(g_ + J_.T @ y_ls, x, lb, ub) / _kkt_scale(y_ls)
        return (kkt_ls, y_ls) if kkt_ls < kkt_ else (kkt_, y_)

    for it in range(1, opt.max_iter + 1):
        c_norm = float(np.abs(c).max(initial=0.0))
        kkt, y = kkt_test(g, J, c_norm, y)
        if c_norm <= opt.tol_con and kkt <= opt.tol_kkt:
            status = "optimal"
            break
        if (it == 1 and opt.kkt_accept > 0.0 and kkt <= opt.kkt_accept
                and c_norm <= max(opt.tol_con, 1e-6)):
            status = "near_optimal"
            break
        # plateau: feasible, stationarity stopped moving AND the iterates
        # themselves stagnate (degenerate corners where no valid multiplier
        # certificate exists); the point is returned as the best found
        if c_norm <= opt.tol_con and prev_step <= 1e-5 * (1.0 + float(np.abs(x).max())):
            if kkt < 0.67 * kkt_best:
                kkt_best = kkt
                kkt_flat = 0
            else:
                kkt_flat += 1
            if kkt_flat >= 6:
                status = "near_optimal"
                break
        else:
            kkt_flat = 0

        if exact_hess:
            H = problem.eval_h(x, y)
            B, lev = _convexify(H, problem.hess_block or None)

        qp = solve_ip_qp(B, g, J, c, lb - x, ub - x, rho,
                         tol=opt.qp_tol, max_iter=opt.qp_max_iter, warm=qp_warm)
        # escalate the elastic penalty while that actually reduces the
        # elastic violation, or when the duals saturate without any slack
        # (with active slack, saturation is just the l1 subgradient)
        slack_tol = 1e-7 * max(1.0, c_norm)
        last_slack_active = False
        n_escal = 0
        while rho < opt.penalty_max and n_escal < 5:
            saturated = float(np.abs(qp.y).max(initial=0.0)) > 0.95 * rho
            if qp.slack_l1 <= slack_tol and not saturated:
                break
            qp2 = solve_ip_qp(B, g, J, c, lb - x, ub - x, rho * 10.0,
                              tol=opt.qp_tol, max_iter=opt.qp_max_iter)
            n_escal += 1
            if qp.slack_l1 > slack_tol and qp2.slack_l1 > 0.9 * qp.slack_l1:
                # higher penalty is not buying feasibility: locally elastic
                if qp2.slack_l1 < qp.slack_l1:
                    rho, qp = rho * 10.0, qp2
                break
            rho, qp = rho * 10.0, qp2
        d, y_qp = qp.d, qp.y
        qp_warm = (qp.y, qp.zl, qp.zu)
        last_slack_active = qp.slack_l1 > slack_tol
        if (qp.slack_l1 > 1e-4 * max(1.0, c_norm)
                and c_norm > 100.0 * opt.tol_con
                and float(np.abs(d).max(initial=0.0)) <= 1e-9 * max(1.0, float(np.abs(x).max()))):
            # the elastic QP cannot reduce the linearized violation: locally
            # infeasible stationary point
            status = "infeasible"
            break

        if float(np.abs(d).max(initial=0.0)) <= 1e-10 and qp.slack_l1 <= 1e-5:
            # converged in the QP sense; polish the last digits of
            # feasibility, refresh multipliers and re-test
            if m and c_norm > opt.tol_con:
                x, c, J = _feasibility_polish(problem, x, c, J, 0.25 * opt.tol_con)
                f, g = problem.eval_f(x)
                c_norm = float(np.abs(c).max(initial=0.0))
            kkt, y = kkt_test(g, J, c_norm, y_qp)
            if c_norm <= opt.tol_con and kkt <= opt.tol_kkt:
                status = "optimal"
                break
            if c_norm <= opt.tol_con:
                status = "near_optimal"
                break

        # keep the QP's elastic penalty tracking the multipliers, with decay
        # after transient spikes (traversals of the depressurized region)
        rho_target = 1.2 * float(np.abs(y_qp).max(initial=0.0)) + 0.1
        rho = rho_target if rho > 10.0 * rho_target else max(rho, rho_target)

        # augmented-Lagrangian merit line search: the multiplier term cancels
        # the first-order constraint excitation, so sigma only needs to match
        # constraint curvature, not multiplier magnitude
        Jd = J @ d if m else np.zeros(0)
        cJd = float(c @ Jd)
        gd = float(g @ d)
        yJd = float(y_qp @ Jd)
        c2 = float(c @ c)
        dBd = float(d @ (B @ d))
        if c2 > 1e-30:
            # sigma large enough that the merit's slope covers the curvature
            # term: D(sigma) = gd + yJd + sigma*cJd <= -dBd/2 with cJd = -c2
            sig_need = (gd + yJd + 0.5 * dBd) / c2
            if sigma < sig_need:
                sigma = 1.5 * max(sig_need, 0.0) + 1e-3
            elif sigma > 100.0 * max(sig_need, 1e-3):
                sigma = 10.0 * max(sig_need, 1e-3)
        phi0 = f + float(y_qp @ c) + 0.5 * sigma * c2
        Ddir = gd + yJd + sigma * cJd
        theta0 = float(np.abs(c).max(initial=0.0))
        theta_cap = 2.0 * theta0 + 100.0 * opt.tol_con
        alpha = 1.0
        f_t, g_t, c_t, J_t = f, g, c, J
        accepted = False
        soc_tried = False

        def phi_of(f_v, c_v):
            return f_v + float(y_qp @ c_v) + 0.5 * sigma * float(c_v @ c_v)

        def acceptable(f_v, c_v, a):
            # Armijo on the merit plus a hard cap on violation growth; the
            # multiplier term alone must never buy unbounded infeasibility
            phi_t = phi_of(f_v, c_v)
            if not np.isfinite(phi_t):
                return False
            if float(np.abs(c_v).max(initial=0.0)) > theta_cap:
                return False
            return phi_t <= phi0 + 1e-4 * a * min(Ddir, 0.0) + 1e-14 * abs(phi0)

        for _ in range(30):
            x_t = np.clip(x + alpha * d, lb, ub)
            f_t, g_t = problem.eval_f(x_t)
            c_t, J_t = problem.eval_c(x_t)
            if acceptable(f_t, c_t, alpha):
                accepted = True
                break
            if alpha == 1.0 and not soc_tried and m:
                # second-order correction against the Maratos effect
                soc_tried = True
                d_soc = _min_norm_step(J, -c_t)
                x_s = np.clip(x + d + d_soc, lb, ub)
                f_s, g_s = problem.eval_f(x_s)
                c_s, J_s = problem.eval_c(x_s)
                if acceptable(f_s, c_s, 1.0):
                    x_t, f_t, g_t, c_t, J_t = x_s, f_s, g_s, c_s, J_s
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            x_t = np.clip(x + 1e-8 * d, lb, ub)
            f_t, g_t = problem.eval_f(x_t)
            c_t, J_t = problem.eval_c(x_t)
            n_reject += 1
        else:
            n_reject = 0 if alpha > 1e-3 else n_reject + 1
        if n_reject >= 3 and not exact_hess:
            # repeated rejections: the curvature model went bad, restart it
            B = np.diag(np.maximum(np.diag(B), 1e-4))
            n_reject = 0

        if not exact_hess:
            # Powell-damped BFGS on the equality Lagrangian
            s = x_t - x
            if m:
                dL = (g_t + J_t.T @ y_qp) - (g + J.T @ y_qp)
            else:
                dL = g_t - g
            sBs = float(s @ (B @ s))
            sy = float(s @ dL)
            if (np.isfinite(sy) and np.isfinite(sBs)
                    and float(np.abs(s).max(initial=0.0)) > 1e-14 and sBs > 1e-14):
                if sy < 0.2 * sBs:
                    theta = 0.8 * sBs / (sBs - sy)
                    dL = theta * dL + (1.0 - theta) * (B @ s)
                    sy = float(s @ dL)
                if sy > 1e-14:
                    Bs = B @ s
                    B = B - np.outer(Bs, Bs) / sBs + np.outer(dL, dL) / sy
                    B = 0.5 * (B + B.T)

        prev_step = float(np.abs(x_t - x).max(initial=0.0))
        if opt.trace is not None:
            opt.trace(dict(it=it, c=float(np.abs(c_t).max(initial=0.0)), f=f_t,
                           alpha=alpha, accepted=accepted, rho=rho, sigma=sigma,
                           qpit=qp.iterations, qpconv=qp.converged,
                           slack=qp.slack_l1, dmax=float(np.abs(d).max(initial=0.0)),
                           ymax=float(np.abs(y_qp).max(initial=0.0))))
        x, f, g, c, J, y = x_t, f_t, g_t, c_t, J_t, y_qp
        cn = float(np.abs(c).max(initial=0.0))
        if m and cn > opt.tol_con and (alpha <= 0.1 or stall >= 2):
            # the penalty search is fighting ill-conditioned rows; close the
            # remaining feasibility gap along min-norm Newton directions
            x, c, J = _feasibility_polish(problem, x, c, J, 0.25 * opt.tol_con)
            f, g = problem.eval_f(x)
            cn = float(np.abs(c).max(initial=0.0))
        if cn < 0.9 * best_cnorm:
            best_cnorm = min(cn, best_cnorm)
            stall = 0
        else:
            stall += 1
        if stall >= opt.stall_iters and cn > max(opt.tol_con, 1e-7):
            status = "infeasible" if qp.slack_l1 > 1e-7 else "stalled"
            break

    c_norm = float(np.abs(c).max(initial=0.0))
    kkt, y = kkt_test(g, J, c_norm, y)
    if status == "max_iter" and c_norm <= opt.tol_con and kkt <= opt.tol_kkt:
        status = "optimal"
    # an exhausted budget only means infeasibility when the last QP still
    # had to buy elastic slack to satisfy its own linearization
    if (status in ("max_iter", "stalled") and last_slack_active
            and c_norm > max(100 * opt.tol_con, 1e-6)):
        status = "infeasible"
    return SqpResult(x=x, y=y, f=f, c_norm=c_norm, kkt=kkt, status=status,
                     iterations=it, hessian=B, penalty=rho, qp_duals=qp_warm)
