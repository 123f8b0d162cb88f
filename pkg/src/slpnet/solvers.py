"""Optimization-based reference solvers and complexity-count models.

All solvers are deterministic log-barrier path-following methods: outer stages shrink
the barrier weight mu by a fixed factor and stop once mu * n_constraints < eps (the
standard suboptimality certificate); each stage is minimized by damped Newton with
backtracking that treats points outside the barrier domain as +inf.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .barriers import INFEASIBLE
from .model import apply_swap, apply_swap_t, unstack

RELAXED = "relaxed"
STRICT = "strict"
ROBUST = "robust"


@dataclass(frozen=True)
class SolverOptions:
    eps: float = 1e-6
    barrier_decrease: float = 0.1
    max_outer: int = 24
    max_backtracks: int = 60
    newton_tol: float = 1e-11
    newton_max_iter: int = 80
    mu0: float = 1.0
    start_margin: float = 1.5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.barrier_decrease < 1:
            raise ValueError("barrier decrease factor must be in (0,1)")


@dataclass
class SolveReport:
    status: str  # converged | max_iter | infeasible
    kind: str
    precoder: np.ndarray | None
    power: float
    residuals: np.ndarray | None
    iterations: int
    wall_time: float
    stage_objectives: list = field(default_factory=list)
    precoder_w2: np.ndarray | None = None

    @property
    def converged(self):
        return self.status == "converged"


def transmit_power(precoder):
    """Squared Euclidean norm; complex inputs use |.|^2 entrywise."""
    p = np.asarray(precoder)
    if np.iscomplexobj(p):
        return float(np.sum(np.abs(p) ** 2))
    return float(np.sum(p * p))


def _damped_newton(x0, value, grad_hess, tol, max_iter, max_backtracks):
    x = np.asarray(x0, dtype=float)
    iters = 0
    for _ in range(max_iter):
        g, h = grad_hess(x)
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            reg = 1e-10 * max(1.0, float(np.trace(h)) / h.shape[0])
            step = np.linalg.solve(h + reg * np.eye(h.shape[0]), -g)
        decrement = float(-g @ step)
        iters += 1
        if decrement / 2.0 <= tol:
            break
        f0 = value(x)
        t = 1.0
        moved = False
        for _ in range(max_backtracks):
            xn = x + t * step
            fn = value(xn)
            if math.isfinite(fn) and fn <= f0 - 1e-4 * t * decrement:
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        x = xn
    return x, iters


def _outer_stages(x0, objective, make_value, make_grad_hess, n_constraints, opts):
    """Path-following loop returning (x, stage objective trace, total Newton iters, status)."""
    x = np.asarray(x0, dtype=float)
    mu = opts.mu0
    trace = []
    total = 0
    status = "converged"
    for stage in range(opts.max_outer):
        x, it = _damped_newton(
            x, make_value(mu), make_grad_hess(mu), opts.newton_tol, opts.newton_max_iter,
            opts.max_backtracks,
        )
        total += it
        trace.append(float(objective(x)))
        if mu * n_constraints < opts.eps:
            break
        mu *= opts.barrier_decrease
    else:
        status = "max_iter"
    return x, trace, total, status


def _max_min_slack_start(w0, slack_fn, slack_rows, iters=800):
    """Subgradient ascent on the minimum slack; fallback interior-point finder."""
    w = np.asarray(w0, dtype=float).copy()
    best_w, best_val = w.copy(), float(np.min(slack_fn(w)))
    scale = max(1.0, float(np.linalg.norm(w)))
    for t in range(iters):
        s = slack_fn(w)
        i = int(np.argmin(s))
        if s[i] > 1e-9 * scale:
            return w
        g = slack_rows(w, i)
        ng = np.linalg.norm(g)
        if ng == 0:
            break
        w = w + (scale / math.sqrt(t + 1.0)) * g / ng
        val = float(np.min(slack_fn(w)))
        if val > best_val:
            best_val, best_w = val, w.copy()
    return best_w if best_val > 0 else None


def _strict_equality_point(instance, margin):
    """w with Lambda_i^T w = margin*g_i and Lambda_i^T Pi w = 0 (least squares)."""
    lam = instance.lambdas
    rows = np.vstack([lam, apply_swap_t(lam)])
    rhs = np.concatenate([margin * instance.target_amps, np.zeros(instance.n_users)])
    w, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    return w


def _relaxed_rows(instance):
    lam = instance.lambdas
    tan_phi = instance.tan_phi
    d = apply_swap_t(lam)  # row i gives Lambda_i^T Pi w
    rows = np.vstack([tan_phi * lam - d, tan_phi * lam + d])
    rhs = np.concatenate([instance.target_amps, instance.target_amps]) * tan_phi
    return rows, rhs


def _linear_barrier_funcs(rows, rhs):
    def value(mu):
        def f(x):
            s = rows @ x - rhs
            if np.any(s <= 0):
                return INFEASIBLE
            return float(x @ x - mu * np.sum(np.log(s)))

        return f

    def grad_hess(mu):
        def gh(x):
            s = rows @ x - rhs
            inv = 1.0 / s
            g = 2.0 * x - mu * rows.T @ inv
            h = 2.0 * np.eye(x.size) + mu * (rows.T * inv**2) @ rows
            return g, h

        return gh

    return value, grad_hess


def _solve_relaxed(instance, opts):
    rows, rhs = _relaxed_rows(instance)
    w0 = _strict_equality_point(instance, opts.start_margin)
    if np.min(rows @ w0 - rhs) <= 0:
        w0 = _max_min_slack_start(
            w0, lambda w: rows @ w - rhs, lambda w, i: rows[i]
        )
        if w0 is None:
            return None
    value, grad_hess = _linear_barrier_funcs(rows, rhs)
    return _outer_stages(
        w0, lambda w: float(w @ w), value, grad_hess, rows.shape[0], opts
    )


def _solve_strict(instance, opts):
    lam = instance.lambdas
    eq_rows = apply_swap_t(lam)
    # exact equality satisfaction through the null space of the phase constraints
    _, sing, vt = np.linalg.svd(eq_rows)
    rank = int(np.sum(sing > 1e-12 * max(1.0, sing[0] if sing.size else 1.0)))
    basis = vt[rank:].T
    if basis.shape[1] == 0:
        return None
    rows = lam @ basis
    rhs = instance.target_amps.copy()
    z0, *_ = np.linalg.lstsq(rows, opts.start_margin * rhs, rcond=None)
    if np.min(rows @ z0 - rhs) <= 0:
        z0 = _max_min_slack_start(z0, lambda z: rows @ z - rhs, lambda z, i: rows[i])
        if z0 is None:
            return None
    value, grad_hess = _linear_barrier_funcs(rows, rhs)
    out = _outer_stages(
        z0, lambda z: float(z @ z), value, grad_hess, rows.shape[0], opts
    )
    z, trace, iters, status = out
    return basis @ z, trace, iters, status


def _robust_slacks(instance, err_bound, w2):
    """Worst-case constraint slacks, (K, 2): positive iff satisfied."""
    lam = instance.lambdas
    tan_phi = instance.tan_phi
    pw = apply_swap(w2)
    nw = float(np.linalg.norm(w2))
    sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
    out = np.empty((instance.n_users, 2))
    for col, sign in enumerate((-1.0, 1.0)):
        qw = pw + sign * tan_phi * w2
        out[:, col] = (
            -instance.target_amps * tan_phi - lam @ qw - err_bound * sec_phi * nw
        )
    return out


def _solve_robust(instance, err_bound, opts):
    lam = instance.lambdas
    tan_phi = instance.tan_phi
    sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
    # a_{i,q}^T w2 with a_{i,q} = Q_q^T Lambda_i; slack = -g tan(phi) - a^T w2 - err*sec(phi)*||w2||
    a1 = apply_swap_t(lam) - tan_phi * lam
    a2 = apply_swap_t(lam) + tan_phi * lam
    rows = np.vstack([a1, a2])
    caps = np.concatenate([instance.target_amps, instance.target_amps]) * tan_phi

    def slacks(w):
        return -caps - rows @ w - err_bound * sec_phi * np.linalg.norm(w)

    w1_eq = _strict_equality_point(instance, 1.0)
    base = apply_swap(w1_eq)  # w2 = Pi w1
    alpha = -(rows @ base) - err_bound * sec_phi * np.linalg.norm(base)
    if np.all(alpha > 0):
        t = opts.start_margin * float(np.max(caps / alpha))
        w0 = t * base
    else:
        w0 = _max_min_slack_start(
            base,
            slacks,
            lambda w, i: -rows[i] - err_bound * sec_phi * w / max(np.linalg.norm(w), 1e-12),
        )
        if w0 is None:
            return None

    def value(mu):
        def f(w):
            s = slacks(w)
            if np.any(s <= 0):
                return INFEASIBLE
            return float(w @ w - mu * np.sum(np.log(s)))

        return f

    def grad_hess(mu):
        def gh(w):
            nw = float(np.linalg.norm(w))
            w_hat = w / nw
            s = slacks(w)
            grads = -rows - err_bound * sec_phi * w_hat  # row per constraint
            inv = 1.0 / s
            g = 2.0 * w - mu * grads.T @ inv
            curv = err_bound * sec_phi / nw * (np.eye(w.size) - np.outer(w_hat, w_hat))
            h = (
                2.0 * np.eye(w.size)
                + mu * (grads.T * inv**2) @ grads
                + mu * float(np.sum(inv)) * curv
            )
            return g, h

        return gh

    return _outer_stages(
        w0, lambda w: float(w @ w), value, grad_hess, rows.shape[0], opts
    )


def constraint_residuals(kind, instance, precoder, err_bound=0.0):
    """Per-user slacks (RHS - LHS); nonnegative iff the constraint is satisfied.

    relaxed -> (K,); strict and robust -> (K, 2) with the equality / second branch in
    column 1 (strict equality reported as -|Lambda^T Pi w|). The robust kind expects
    the w2-form precoder.
    """
    lam = instance.lambdas
    w = np.asarray(precoder, dtype=float)
    tan_phi = instance.tan_phi
    if kind == RELAXED:
        return (lam @ w - instance.target_amps) * tan_phi - np.abs(apply_swap_t(lam) @ w)
    if kind == STRICT:
        ineq = lam @ w - instance.target_amps
        eq = -np.abs(apply_swap_t(lam) @ w)
        return np.stack([ineq, eq], axis=1)
    if kind == ROBUST:
        return _robust_slacks(instance, err_bound, w)
    raise ValueError(f"unknown SLP kind {kind!r}")


def solve_slp(kind, instance, options=None, err_bound=0.0):
    """Barrier-method SLP solve; kind in {relaxed, strict, robust}.

    Robust solves run in the w2 coordinates; the report carries both w2 and the
    mapped w1 = Pi^T w2.
    """
    opts = options or SolverOptions()
    start = time.perf_counter()
    if kind == RELAXED:
        out = _solve_relaxed(instance, opts)
    elif kind == STRICT:
        out = _solve_strict(instance, opts)
    elif kind == ROBUST:
        out = _solve_robust(instance, err_bound, opts)
    else:
        raise ValueError(f"unknown SLP kind {kind!r}")
    elapsed = time.perf_counter() - start
    if out is None:
        return SolveReport("infeasible", kind, None, math.nan, None, 0, elapsed)
    x, trace, iters, status = out
    if kind == ROBUST:
        w2 = x
        w1 = apply_swap_t(w2)
        res = constraint_residuals(kind, instance, w2, err_bound)
        report = SolveReport(
            status, kind, w1, transmit_power(w2), res, iters, elapsed, trace, precoder_w2=w2
        )
    else:
        res = constraint_residuals(kind, instance, x, err_bound)
        report = SolveReport(status, kind, x, transmit_power(x), res, iters, elapsed, trace)
    if report.status == "converged" and float(np.min(report.residuals)) < -1e-6:
        report.status = "max_iter"
    return report


def _phase_fixed_basis(s_row):
    """Orthonormal basis of the hyperplane s_row^T u = 0."""
    _, _, vt = np.linalg.svd(s_row.reshape(1, -1))
    return vt[1:].T


def solve_blp(channels, targets, noise_power, options=None):
    """Conventional per-user power minimization under SINR constraints.

    Second-order-cone barrier Newton over per-user precoders with the signal phase
    fixed (Im(h_i^T w_i) = 0 eliminated through per-user null-space bases). Requires
    N_t >= K; otherwise reports infeasible, as does a rank-deficient channel.
    """
    opts = options or SolverOptions()
    start = time.perf_counter()
    h = np.asarray(channels, dtype=complex)
    n_users, n_t = h.shape
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (n_users,))
    if np.any(targets <= 0) or noise_power <= 0:
        raise ValueError("targets and noise power must be positive")
    if n_users > n_t:
        return SolveReport(
            "infeasible", "blp", None, math.nan, None, 0, time.perf_counter() - start
        )

    r_vecs = np.hstack([h.real, -h.imag])  # Re(h_i^T w_k) = r_i . u_k
    s_vecs = np.hstack([h.imag, h.real])  # Im(h_i^T w_k) = s_i . u_k
    bases = [_phase_fixed_basis(s_vecs[i]) for i in range(n_users)]
    dim = 2 * n_t - 1
    r_eff = np.empty((n_users, n_users, dim))
    s_eff = np.empty((n_users, n_users, dim))
    for i in range(n_users):
        for k in range(n_users):
            r_eff[i, k] = bases[k].T @ r_vecs[i]
            s_eff[i, k] = bases[k].T @ s_vecs[i]

    gram = h @ h.conj().T
    try:
        sol = np.linalg.solve(gram, np.diag(opts.start_margin * np.sqrt(targets * noise_power)))
    except np.linalg.LinAlgError:
        return SolveReport(
            "infeasible", "blp", None, math.nan, None, 0, time.perf_counter() - start
        )
    w_zf = h.conj().T @ sol  # columns are user precoders, h_i^T w_k = delta_ik d_i
    z0 = np.concatenate(
        [bases[k].T @ np.concatenate([w_zf[:, k].real, w_zf[:, k].imag]) for k in range(n_users)]
    )

    def blocks(z):
        return z.reshape(n_users, dim)

    def slack_all(z):
        zb = blocks(z)
        sig = np.einsum("ikd,kd->ik", r_eff, zb)  # Re(h_i^T w_k)
        img = np.einsum("ikd,kd->ik", s_eff, zb)
        inter = sig**2 + img**2
        own = np.diagonal(inter).copy()
        total = inter.sum(axis=1) - own
        return np.diagonal(sig) ** 2 / targets - total - noise_power, sig, img

    def value(mu):
        def f(z):
            s, _, _ = slack_all(z)
            if np.any(s <= 0):
                return INFEASIBLE
            return float(z @ z - mu * np.sum(np.log(s)))

        return f

    def grad_hess(mu):
        def gh(z):
            s, sig, img = slack_all(z)
            inv = 1.0 / s
            n = z.size
            g = 2.0 * z.copy()
            hess = 2.0 * np.eye(n)
            for i in range(n_users):
                grad_s = np.zeros(n)
                curv = np.zeros((n, n))
                for k in range(n_users):
                    a, b = k * dim, (k + 1) * dim
                    if k == i:
                        grad_s[a:b] = (2.0 / targets[i]) * sig[i, i] * r_eff[i, i]
                        curv[a:b, a:b] = (2.0 / targets[i]) * np.outer(r_eff[i, i], r_eff[i, i])
                    else:
                        grad_s[a:b] = -2.0 * (sig[i, k] * r_eff[i, k] + img[i, k] * s_eff[i, k])
                        curv[a:b, a:b] = -2.0 * (
                            np.outer(r_eff[i, k], r_eff[i, k])
                            + np.outer(s_eff[i, k], s_eff[i, k])
                        )
                g -= mu * inv[i] * grad_s
                hess += mu * (inv[i] ** 2 * np.outer(grad_s, grad_s) - inv[i] * curv)
            return g, hess

        return gh

    if np.min(slack_all(z0)[0]) <= 0:
        return SolveReport(
            "infeasible", "blp", None, math.nan, None, 0, time.perf_counter() - start
        )
    z, trace, iters, status = _outer_stages(
        z0, lambda z: float(z @ z), value, grad_hess, n_users, opts
    )
    zb = blocks(z)
    w = np.empty((n_users, n_t), dtype=complex)
    for k in range(n_users):
        u = bases[k] @ zb[k]
        w[k] = u[:n_t] + 1j * u[n_t:]
    sinr = _blp_sinr(h, w, targets, noise_power)
    report = SolveReport(
        status, "blp", w, transmit_power(w), sinr - targets, iters,
        time.perf_counter() - start, trace,
    )
    if report.status == "converged" and float(np.min(report.residuals)) < -1e-6:
        report.status = "max_iter"
    return report


def _blp_sinr(h, w, targets, noise_power):
    gains = np.abs(h @ w.T) ** 2  # gains[i, k] = |h_i^T w_k|^2
    own = np.diagonal(gains)
    inter = gains.sum(axis=1) - own
    return own / (inter + noise_power)


# Operation-count models: closed-form real-arithmetic counts per scheme, with the
# asymptotic order exponent for the symmetric case n = N_t = K.
COMPLEXITY_ORDERS = {
    "blp": 6.5,
    "slp": 6.5,
    "slp_dnet": 3.0,
    "slp_dnet_strict": 3.0,
    "robust_blp": 7.5,
    "robust_slp": 6.5,
    "robust_slp_dnet": 3.0,
}


def complexity_count(scheme, n_t, k, eps=0.01):
    """Closed-form operation count for a scheme at problem size (N_t, K)."""
    if n_t < 1 or k < 1:
        raise ValueError("n_t and k must be >= 1")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0,1)")
    if scheme not in COMPLEXITY_ORDERS:
        raise ValueError(f"unknown scheme {scheme!r}")
    m = 2 * n_t * k
    d = 2 * n_t + 1
    log_term = math.log(1.0 / eps)
    if scheme == "blp":
        return math.sqrt(4 * n_t + k + 2) * (m * d + m * d**2 + m * (k + 1) ** 2 + m**3) * log_term
    if scheme == "slp":
        return math.sqrt(d) * (m * d + m * d**2 + m**3) * log_term
    if scheme == "slp_dnet":
        return 4 * k**2 * n_t + 42 * k**2 + 48 * k * n_t + 512 * k + 2
    if scheme == "slp_dnet_strict":
        return 4 * k**2 * n_t + 39 * k**2 + 46 * k * n_t + 512 * k + 2
    if scheme == "robust_blp":
        return math.sqrt(2 * k * d) * (m * k * d**3 + m**2 * k * d**2 + m**3) * log_term
    if scheme == "robust_slp":
        return math.sqrt(2 * d) * (2 * m * k * d**2 + m**3) * log_term
    return 16 * k * n_t**2 + 42 * k**2 + 48 * k * n_t + 512 * k
