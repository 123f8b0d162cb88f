"""Closed-form log-barrier proximity operators with analytic derivatives.

Three barrier families share one mechanism: the prox displacement is rank-one along a
constraint coordinate, the new coordinate solves a low-degree polynomial in closed
form, and the Jacobian / step-size / multiplier derivatives follow by implicit
differentiation of that polynomial. All functions are pure and reentrant.

Kinds:
  - hyperslab: two-sided barrier -ln(b-u)-ln(u-a) on u = d^T w (relaxed phase rotation)
  - strict:    one-sided barrier -ln(Lambda^T w - g) (exact phase alignment)
  - ball:      radial barrier -ln(c - X^2) on the combined squared worst-case
               constraint coordinate X (CSI uncertainty ball)
"""

import math
from dataclasses import dataclass

import numpy as np

from .model import apply_swap, apply_swap_t

INFEASIBLE = math.inf

HYPERSLAB = "hyperslab"
STRICT = "strict"
BALL = "ball"


class CubicDegenerateError(ValueError):
    """Leading cubic coefficient is zero."""


def _cbrt(x):
    return math.copysign(abs(x) ** (1.0 / 3.0), x)


class InteriorRootError(RuntimeError):
    """No cubic root strictly inside the barrier domain; carries all real roots."""

    def __init__(self, message, roots):
        super().__init__(message)
        self.roots = np.asarray(roots)


def solve_cubic_real(c3, c2, c1, c0):
    """Real roots of c3 x^3 + c2 x^2 + c1 x + c0 = 0, sorted ascending.

    Cardano (trigonometric branch for three real roots), then two Newton polish
    steps per root. Complex-pair roots are omitted; coincident roots are returned
    once each.
    """
    if c3 == 0:
        raise CubicDegenerateError("leading coefficient is zero")
    a = c2 / c3
    b = c1 / c3
    c = c0 / c3
    # depressed form t^3 + p t + q with x = t - a/3
    p = b - a * a / 3.0
    q = 2.0 * a**3 / 27.0 - a * b / 3.0 + c
    shift = a / 3.0
    scale = max(1.0, abs(p)) ** 1.5
    if abs(p) < 1e-14 * max(1.0, abs(a)) ** 2 and abs(q) < 1e-14 * max(1.0, abs(a)) ** 3:
        ts = [0.0]  # triple root
    else:
        disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
        if disc > 1e-14 * scale**2:
            s = math.sqrt(disc)
            ts = [_cbrt(-q / 2.0 + s) + _cbrt(-q / 2.0 - s)]
        elif disc < -1e-14 * scale**2:
            r = math.sqrt(-p / 3.0)
            arg = min(1.0, max(-1.0, 3.0 * q / (2.0 * p * r)))
            theta = math.acos(arg)
            ts = [2.0 * r * math.cos((theta - 2.0 * math.pi * k) / 3.0) for k in range(3)]
        else:
            # discriminant numerically zero: one simple and one double root
            ts = [3.0 * q / p, -3.0 * q / (2.0 * p)]
    roots = []
    for t in ts:
        x = t - shift
        for _ in range(2):  # Newton polish against the original coefficients
            f = ((c3 * x + c2) * x + c1) * x + c0
            df = (3.0 * c3 * x + 2.0 * c2) * x + c1
            if df != 0.0:
                x -= f / df
        roots.append(x)
    roots.sort()
    deduped = [roots[0]]
    for r in roots[1:]:
        if abs(r - deduped[-1]) > 1e-9 * max(1.0, abs(r)):
            deduped.append(r)
    return np.array(deduped)


@dataclass(frozen=True)
class HyperslabBounds:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("hyperslab requires a < b")


def hyperslab_bounds(lam, w_ref, target, noise_power, phase_margin):
    """Symmetric slab bounds at the reference iterate: b = (Lambda^T w - g) tan(phi).

    Returns None when b <= 0 (the reference point violates the real-part margin, so
    no feasible slab exists there).
    """
    if target <= 0 or noise_power <= 0:
        raise ValueError("target SINR and noise power must be positive")
    lam = np.asarray(lam, dtype=float)
    b = (float(lam @ np.asarray(w_ref, dtype=float)) - math.sqrt(target * noise_power)) * math.tan(
        phase_margin
    )
    if b <= 0:
        return None
    return HyperslabBounds(-b, b)


@dataclass
class ProxEval:
    """Prox output with its Jacobian and step-size/multiplier derivatives."""

    w_out: np.ndarray
    jac: np.ndarray
    d_mu: np.ndarray
    d_gamma: np.ndarray
    root: float


def _cubic_val(coeffs, x):
    c3, c2, c1, c0 = coeffs
    return ((c3 * x + c2) * x + c1) * x + c0


def _bisect_root(coeffs, lo, hi):
    """Bisection for the bracketed interior root (F(lo) > 0 > F(hi))."""
    flo = _cubic_val(coeffs, lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm = _cubic_val(coeffs, mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _interior_root(coeffs, lo, hi, what, bracketed=False):
    roots = solve_cubic_real(*coeffs)
    inside = roots[(roots > lo) & (roots < hi)]
    if inside.size == 0:
        # Cardano's absolute error can exceed a very narrow domain; the barrier
        # guarantees a sign change across it, so fall back to bisection
        if bracketed and _cubic_val(coeffs, lo) > 0 > _cubic_val(coeffs, hi):
            return _bisect_root(coeffs, lo, hi)
        raise InteriorRootError(
            f"expected one {what} root in ({lo:.6g}, {hi:.6g}), got none", roots
        )
    if inside.size > 1:
        # roundoff can push a neighboring root across a tiny domain; the prox
        # minimizer is the root where the cubic is decreasing
        c3, c2, c1, _ = coeffs
        slope = (3.0 * c3 * inside + 2.0 * c2) * inside + c1
        inside = inside[np.argsort(slope)][:1]
    return float(inside[0])


def prox_hyperslab(w_in, lam, bounds, gamma, mu, literal_form=False):
    """Prox of the weighted two-sided slab barrier; displacement along d only.

    d = Pi^T Lambda so the barrier, its cubic, and the prox act on one coordinate
    u = Lambda^T Pi w. literal_form=True instead uses d = Lambda (the published
    variant, kept for comparison runs).
    """
    if gamma <= 0 or mu < 0:
        raise ValueError("gamma must be positive and mu nonnegative")
    w_in = np.asarray(w_in, dtype=float)
    lam = np.asarray(lam, dtype=float)
    a, b = bounds.a, bounds.b
    d = lam if literal_form else apply_swap_t(lam)
    nd2 = float(d @ d)
    t0 = float(d @ w_in)
    cpen = gamma * mu * nd2
    if cpen == 0.0:
        x = t0
        upsilon = (t0 - a) * (t0 - b)
        w_out = w_in.copy()
    else:
        coeffs = (
            1.0,
            -(a + b + t0),
            a * b + t0 * (a + b) - 2.0 * cpen,
            -a * b * t0 + cpen * (a + b),
        )
        x = _interior_root(coeffs, a, b, "slab-interior", bracketed=True)
        upsilon = 3.0 * x * x - 2.0 * (a + b + t0) * x + a * b + t0 * (a + b) - 2.0 * cpen
        w_out = w_in + ((x - t0) / nd2) * d
    jfac = (b - x) * (a - x) / upsilon - 1.0
    dfac = -(a + b - 2.0 * x) / upsilon
    n = w_in.shape[0]
    jac = np.eye(n) + (jfac / nd2) * np.outer(d, d)
    return ProxEval(w_out, jac, gamma * dfac * d, mu * dfac * d, x)


def prox_strict(w_in, lam, target_amp, gamma, mu):
    """Prox of the weighted affine barrier -ln(Lambda^T w - g).

    Closed form: the slack quadratic's interior root, s_out = (s + sqrt(s^2 +
    4*gamma*mu*||Lambda||^2))/2, displacing w along Lambda.
    """
    if gamma <= 0 or mu < 0:
        raise ValueError("gamma must be positive and mu nonnegative")
    w_in = np.asarray(w_in, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nd2 = float(lam @ lam)
    t0 = float(lam @ w_in)
    s = t0 - target_amp
    r = math.sqrt(s * s + 4.0 * gamma * mu * nd2)
    w_out = w_in + ((r - s) / (2.0 * nd2)) * lam
    n = w_in.shape[0]
    jac = np.eye(n) + ((s / r - 1.0) / 2.0 / nd2) * np.outer(lam, lam)
    d_mu = (gamma / r) * lam
    d_gamma = (mu / r) * lam
    return ProxEval(w_out, jac, d_mu, d_gamma, t0 + (r - s) / 2.0)


def _ball_cap(target_amp, tan_phi):
    # squared-and-summed bound of the two worst-case constraints
    return 2.0 * target_amp**2 * tan_phi**2


def ball_coordinate(w, lam, target_amp, tan_phi, err_bound):
    """Combined-constraint coordinate X(w) for the uncertainty-ball barrier."""
    w = np.asarray(w, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return (err_bound**2 - float(lam @ lam)) * float(np.linalg.norm(w)) + 4.0 * float(
        lam @ w
    ) * tan_phi * target_amp


def prox_ball(w_in, lam, target_amp, tan_phi, err_bound, gamma, mu):
    """Prox of the radial barrier -ln(c - X^2), c = 2*Gamma*v0*tan^2(phi).

    X is positively homogeneous in w, so the prox is the scalar prox of the
    two-sided log barrier applied to X0 = X(w_in), mapped back as the scaling
    sigma = (c - X^2)/(c - X^2 + 2*gamma*mu) of w_in. A unique root with X^2 < c
    always exists for gamma*mu > 0.
    """
    if gamma <= 0 or mu < 0:
        raise ValueError("gamma must be positive and mu nonnegative")
    w_in = np.asarray(w_in, dtype=float)
    lam = np.asarray(lam, dtype=float)
    cap = _ball_cap(target_amp, tan_phi)
    edge = math.sqrt(cap)
    nw = float(np.linalg.norm(w_in))
    x0 = ball_coordinate(w_in, lam, target_amp, tan_phi, err_bound)
    cpen = gamma * mu
    if cpen == 0.0:
        x = x0
        amp = cap - x * x
        w_out = w_in.copy()
    else:
        coeffs = (1.0, -x0, -(cap + 2.0 * cpen), cap * x0)
        x = _interior_root(coeffs, -edge, edge, "ball-interior", bracketed=True)
        # sigma = (cap - X^2)/(cap - X^2 + 2*cpen) equals X/X0 at the root; the
        # ratio form avoids cancellation when X is pinned near the domain edge
        sigma = x / x0 if x0 != 0.0 else cap / (cap + 2.0 * cpen)
        amp = 2.0 * cpen * sigma / (1.0 - sigma) if sigma < 0.5 else cap - x * x
        w_out = sigma * w_in
    upsilon = 3.0 * x * x - 2.0 * x0 * x - (cap + 2.0 * cpen)
    denom = (amp + 2.0 * cpen) ** 2
    dsig_dx = -4.0 * cpen * x / denom
    dsig_dpen = -2.0 * amp / denom
    dx_dpen = 2.0 * x / upsilon
    dsig_mu = (dsig_dx * dx_dpen + dsig_dpen) * gamma
    dsig_gamma = (dsig_dx * dx_dpen + dsig_dpen) * mu
    dx_dx0 = -amp / upsilon
    w_hat = w_in / nw if nw > 0 else np.zeros_like(w_in)
    grad_x0 = (err_bound**2 - float(lam @ lam)) * w_hat + 4.0 * tan_phi * target_amp * lam
    n = w_in.shape[0]
    jac = sigma * np.eye(n) + np.outer(w_in, (dsig_dx * dx_dx0) * grad_x0)
    return ProxEval(w_out, jac, dsig_mu * w_in, dsig_gamma * w_in, x)


def prox_eval(kind, w_in, lam, gamma, mu, bounds=None, target_amp=None, tan_phi=None,
              err_bound=0.0, literal_form=False):
    """Dispatch by barrier kind; see the per-kind functions for semantics."""
    if kind == HYPERSLAB:
        return prox_hyperslab(w_in, lam, bounds, gamma, mu, literal_form=literal_form)
    if kind == STRICT:
        return prox_strict(w_in, lam, target_amp, gamma, mu)
    if kind == BALL:
        return prox_ball(w_in, lam, target_amp, tan_phi, err_bound, gamma, mu)
    raise ValueError(f"unknown barrier kind {kind!r}")


def barrier_hyperslab(u, bounds):
    """-ln(b-u) - ln(u-a) for u strictly inside, +inf outside."""
    if not bounds.a < u < bounds.b:
        return INFEASIBLE
    return -math.log(bounds.b - u) - math.log(u - bounds.a)


def barrier_strict(v, target_amp):
    """-ln(v - g) for v > g, +inf otherwise."""
    s = v - target_amp
    if s <= 0:
        return INFEASIBLE
    return -math.log(s)


def barrier_ball(w2, lam, target_amp, tan_phi, err_bound):
    """Sum of the two worst-case norm-constraint barriers, +inf outside."""
    w2 = np.asarray(w2, dtype=float)
    lam = np.asarray(lam, dtype=float)
    pw = apply_swap(w2)
    total = 0.0
    for sign in (-1.0, 1.0):
        qw = pw + sign * tan_phi * w2
        slack = -target_amp * tan_phi - float(lam @ qw) - err_bound * float(np.linalg.norm(qw))
        if slack <= 0:
            return INFEASIBLE
        total -= math.log(slack)
    return total


def barrier_value(kind, **state):
    if kind == HYPERSLAB:
        return barrier_hyperslab(state["u"], state["bounds"])
    if kind == STRICT:
        return barrier_strict(state["v"], state["target_amp"])
    if kind == BALL:
        return barrier_ball(
            state["w2"], state["lam"], state["target_amp"], state["tan_phi"], state["err_bound"]
        )
    raise ValueError(f"unknown barrier kind {kind!r}")


def objective_grad_step(w, gamma, lam_eq):
    """Explicit gradient step on ||w||^2 + lam*1^T w: (1 - 2*gamma) w - gamma*lam."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    w = np.asarray(w, dtype=float)
    return (1.0 - 2.0 * gamma) * w - gamma * lam_eq


def forward_backward_step(w, instance, gamma, mu, lam_eq, kind=HYPERSLAB, err_bound=0.0,
                          literal_form=False):
    """One forward-backward iteration: gradient step, then each user's barrier prox.

    Slab bounds are frozen at the incoming iterate; users whose reference point is
    infeasible (no slab) are skipped. Returns (w_next, per-user snapshots after each
    prox, list of violated-user indices).
    """
    w = np.asarray(w, dtype=float)
    z = objective_grad_step(w, gamma, lam_eq)
    snapshots = np.empty((instance.n_users, w.shape[0]))
    skipped = []
    tan_phi = instance.tan_phi
    for i in range(instance.n_users):
        lam = instance.lambdas[i]
        amp = instance.target_amps[i]
        if kind == HYPERSLAB:
            bounds = hyperslab_bounds(
                lam, w, instance.targets[i], instance.noise_power, instance.modulation.phase_margin
            )
            if bounds is None:
                skipped.append(i)
            else:
                z = prox_hyperslab(z, lam, bounds, gamma, mu, literal_form=literal_form).w_out
        elif kind == STRICT:
            z = prox_strict(z, lam, amp, gamma, mu).w_out
        elif kind == BALL:
            z = prox_ball(z, lam, amp, tan_phi, err_bound, gamma, mu).w_out
        else:
            raise ValueError(f"unknown barrier kind {kind!r}")
        snapshots[i] = z
    return z, snapshots, skipped


def _fd_jacobian(fn, x, step):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((fn(x + e) - fn(x - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def _rel_err(analytic, numeric):
    return float(
        np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(analytic))))
    )


def prox_derivatives_check(kind, w_in, lam, gamma, mu, bounds=None, target_amp=None,
                           tan_phi=None, err_bound=0.0, step=None):
    """Max relative error of the analytic jac/d_mu/d_gamma vs central differences.

    At mu == 0 the mu-derivative is checked one-sided from the right.
    """
    w_in = np.asarray(w_in, dtype=float)
    kw = dict(bounds=bounds, target_amp=target_amp, tan_phi=tan_phi, err_bound=err_bound)
    ev = prox_eval(kind, w_in, lam, gamma, mu, **kw)
    h = step if step is not None else 1e-6 * max(1.0, float(np.max(np.abs(w_in))))
    jac_fd = _fd_jacobian(lambda x: prox_eval(kind, x, lam, gamma, mu, **kw).w_out, w_in, h)
    hm = 1e-6 * max(1.0, mu)
    if mu - hm < 0:
        lo = prox_eval(kind, w_in, lam, gamma, mu, **kw).w_out
        hi = prox_eval(kind, w_in, lam, gamma, mu + hm, **kw).w_out
        dmu_fd = (hi - lo) / hm
    else:
        hi = prox_eval(kind, w_in, lam, gamma, mu + hm, **kw).w_out
        lo = prox_eval(kind, w_in, lam, gamma, mu - hm, **kw).w_out
        dmu_fd = (hi - lo) / (2.0 * hm)
    hg = 1e-6 * max(1.0, gamma)
    ghi = prox_eval(kind, w_in, lam, gamma + hg, mu, **kw).w_out
    glo = prox_eval(kind, w_in, lam, gamma - hg, mu, **kw).w_out
    dgamma_fd = (ghi - glo) / (2.0 * hg)
    return max(
        _rel_err(ev.jac, jac_fd), _rel_err(ev.d_mu, dmu_fd), _rel_err(ev.d_gamma, dgamma_fd)
    )
