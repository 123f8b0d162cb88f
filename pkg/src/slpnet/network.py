"""Deep-unfolded symbol-level precoding network (SLP-DNet).

Forward structure:
  1. initial precoder: a per-instance linear solve maps learned per-user
     constraint targets (amplitude margin, phase fullness) to a precoder, the
     profile-space analog of the closed-form multiplier recovery;
  2. parameter-update blocks: each emits (mu, gamma, lambda) from the
     stacked-channel input through three small conv heads and applies one
     proximal forward-backward iteration (gradient step on the regularized power
     objective, then every user's barrier prox with bounds frozen at the block
     input);
  3. auxiliary refiner: a three-conv stack over the block's per-user prox
     snapshots emits per-user corrections to the iterate's constraint profile;
     the corrected profile is re-solved into the final precoder, which is
     feasible by construction for the relaxed and strict kinds.

Training is unsupervised on the problem Lagrangian (evaluated at the
feasibility-rescaled output), block-wise, with analytic prox derivatives as the
backward rule through the barrier layers.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .barriers import HyperslabBounds, prox_ball, prox_hyperslab, prox_strict
from .model import ModulationSpec, QPSK, apply_swap, apply_swap_t

RELAXED = "relaxed"
STRICT = "strict"
ROBUST = "robust"
KINDS = (RELAXED, STRICT, ROBUST)

PUM_CHANNELS = 20
APB_CHANNELS = 64
KERNEL = 3

CHECKPOINT_MAGIC = b"SLPN"
CHECKPOINT_VERSION = 1

# slab half-width below which a user's prox is skipped for the sample and the
# violated slack is hinged in the training loss instead
FEASIBLE_TOL = 1e-12

# phase targets stay strictly inside the cone by this factor
CONE_SHRINK = 1.0 - 1e-9


@dataclass
class InstanceBatch:
    """Batch of symbol-level problems in stacked real form."""

    lambdas: np.ndarray  # (B, K, 2N_t)
    targets: np.ndarray  # (B, K) linear SINR
    noise_power: float
    modulation: ModulationSpec
    err_bound: float = 0.0

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        if t.ndim == 1:
            t = np.repeat(t[:, None], self.lambdas.shape[1], axis=1)
        self.targets = t
        self._cache = {}

    @property
    def size(self):
        return self.lambdas.shape[0]

    @property
    def n_users(self):
        return self.lambdas.shape[1]

    @property
    def n_t(self):
        return self.lambdas.shape[2] // 2

    @property
    def tan_phi(self):
        return self.modulation.tan_phi

    @property
    def amps(self):
        return np.sqrt(self.targets * self.noise_power)

    @property
    def channel_tensor(self):
        """(B, 1, 2N_t, K) conv input: user channels as columns."""
        return self.lambdas.transpose(0, 2, 1)[:, None, :, :]

    def profile_system(self, kind):
        """Per-sample constraint-row matrix and its pseudo-inverse.

        Rows are the per-user linear functionals whose values the network
        prescribes: (Lambda_k, Pi^T Lambda_k) for relaxed/strict, the two
        worst-case slope rows (Q_q^T Lambda_k) for robust.
        """
        key = ("system", kind)
        if key not in self._cache:
            d = apply_swap_t(self.lambdas)
            if kind == ROBUST:
                rows = np.concatenate(
                    [d - self.tan_phi * self.lambdas, d + self.tan_phi * self.lambdas],
                    axis=1)
            else:
                rows = np.concatenate([self.lambdas, d], axis=1)
            pinv = np.stack([np.linalg.pinv(rows[j]) for j in range(self.size)])
            self._cache[key] = (rows, pinv)
        return self._cache[key]

    def natural_signs(self):
        """Per-user phase-branch signs of the min-norm amplitude-only solution."""
        if "signs" not in self._cache:
            d = apply_swap_t(self.lambdas)
            signs = np.empty((self.size, self.n_users))
            for j in range(self.size):
                w_amp = np.linalg.lstsq(self.lambdas[j], self.amps[j], rcond=None)[0]
                signs[j] = np.sign(d[j] @ w_amp)
            signs[signs == 0] = 1.0
            self._cache["signs"] = signs
        return self._cache["signs"]


def batch_from_tensor(data, targets, noise_power, modulation, err_bound=0.0):
    """Dataset tensor (n, 2N_t, K) plus targets -> InstanceBatch."""
    data = np.asarray(data, dtype=float)
    return InstanceBatch(
        data.transpose(0, 2, 1), targets, float(noise_power), modulation, err_bound
    )


def batch_from_instances(instances, err_bound=0.0):
    lam = np.stack([inst.lambdas for inst in instances])
    tgt = np.stack([inst.targets for inst in instances])
    first = instances[0]
    return InstanceBatch(lam, tgt, first.noise_power, first.modulation, err_bound)


@dataclass
class ForwardResult:
    w: Tensor  # (B, 2N_t) final precoder (w2-form for the robust kind)
    w_iterate: Tensor  # raw iterate after the last parameter-update block
    hinge: Tensor  # summed violated-slack penalty
    mus: list
    gammas: list
    lams: list
    snapshots: Tensor | None = None


@dataclass
class LossBreakdown:
    objective: object
    constraint: object
    regularizer: object

    @property
    def total(self):
        return self.objective + self.constraint + self.regularizer


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    learning_rate: float = 1e-3
    decay: float = 0.65
    reg_weight: float = 1e-3
    pum_iters: int = 15
    apb_iters: int = 10
    sinr_low_db: float = 0.0
    sinr_high_db: float = 45.0
    hinge_weight: float = 1.0
    loss_at_rescaled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.reg_weight < 0:
            raise ValueError("regularization weight must be nonnegative")


def _inv_softplus(y):
    return np.log(np.expm1(y))


_CLIP_SHARPNESS = 16.0


def _smooth_clip(r):
    """Smooth clamp of r to (-1, 1): exponentially close to identity inside."""
    lo = ad.softplus((r + 1.0) * (-_CLIP_SHARPNESS)) * (1.0 / _CLIP_SHARPNESS)
    hi = ad.softplus((r + (-1.0)) * _CLIP_SHARPNESS) * (1.0 / _CLIP_SHARPNESS)
    return r + lo + hi * (-1.0)


_DESCENT_BETA1 = 0.9
_DESCENT_BETA2 = 0.999


class _DescentCell:
    """Unrolled moment-normalized update for one coordinate block (tape form)."""

    def __init__(self):
        self.m = None
        self.v = None

    def step(self, x, grad, eta_i, t):
        if self.m is None:
            self.m = Tensor(np.zeros_like(grad.value))
            self.v = Tensor(np.zeros_like(grad.value))
        self.m = self.m * _DESCENT_BETA1 + grad * (1.0 - _DESCENT_BETA1)
        self.v = self.v * _DESCENT_BETA2 + ad.square(grad) * (1.0 - _DESCENT_BETA2)
        m_hat = self.m * (1.0 / (1.0 - _DESCENT_BETA1 ** (t + 1)))
        v_hat = self.v * (1.0 / (1.0 - _DESCENT_BETA2 ** (t + 1)))
        return x + m_hat * ad.reciprocal(ad.sqrt(v_hat) + 1e-12) * eta_i * (-1.0)


# -- custom layers -------------------------------------------------------------


def _prox_layer(z, mu, gamma, per_sample):
    """Per-sample barrier prox with the analytic backward rule."""
    z, mu, gamma = ad.as_tensor(z), ad.as_tensor(mu), ad.as_tensor(gamma)
    out = z.value.copy()
    evals = [None] * z.value.shape[0]
    for i in range(z.value.shape[0]):
        ev = per_sample(i, z.value[i], float(gamma.value[i]), float(mu.value[i]))
        if ev is not None:
            evals[i] = ev
            out[i] = ev.w_out

    def backward(g):
        gz = g.copy()
        gmu = np.zeros_like(mu.value)
        ggamma = np.zeros_like(gamma.value)
        for i, ev in enumerate(evals):
            if ev is None:
                continue
            gz[i] = ev.jac.T @ g[i]
            gmu[i] = ev.d_mu @ g[i]
            ggamma[i] = ev.d_gamma @ g[i]
        return gz, gmu, ggamma

    return Tensor(out, parents=(z, mu, gamma), backward=backward)


def _hyperslab_prox_layer(z, mu, gamma, w_ref, lam_rows, bvals, mask, tan_phi):
    """Slab prox including the frozen-bounds gradient path.

    The slab half-width b freezes at the block-input iterate w_ref during the
    forward; its dependence b = (Lambda^T w_ref - g) tan(phi) still carries real
    gradient, routed through dX/db = 2 b (X - t0) / Upsilon.
    """
    z, mu, gamma, w_ref = (ad.as_tensor(t) for t in (z, mu, gamma, w_ref))
    out = z.value.copy()
    evals = [None] * z.value.shape[0]
    for i in np.nonzero(mask)[0]:
        ev = prox_hyperslab(
            z.value[i], lam_rows[i], HyperslabBounds(-bvals[i], bvals[i]),
            float(gamma.value[i]), float(mu.value[i]))
        evals[i] = ev
        out[i] = ev.w_out

    def backward(g):
        gz = g.copy()
        gmu = np.zeros_like(mu.value)
        ggamma = np.zeros_like(gamma.value)
        gref = np.zeros_like(w_ref.value)
        for i, ev in enumerate(evals):
            if ev is None:
                continue
            gz[i] = ev.jac.T @ g[i]
            gmu[i] = ev.d_mu @ g[i]
            ggamma[i] = ev.d_gamma @ g[i]
            d = apply_swap_t(lam_rows[i])
            nd2 = d @ d
            t0 = d @ z.value[i]
            cpen = float(gamma.value[i]) * float(mu.value[i]) * nd2
            upsilon = 3.0 * ev.root**2 - 2.0 * t0 * ev.root - bvals[i] ** 2 - 2.0 * cpen
            dx_db = 2.0 * bvals[i] * (ev.root - t0) / upsilon
            gref[i] = (dx_db / nd2) * float(d @ g[i]) * tan_phi * lam_rows[i]
        return gz, gmu, ggamma, gref

    return Tensor(out, parents=(z, mu, gamma, w_ref), backward=backward)


def _profile_solve(pinv, *parts):
    """w = pinv @ concat(parts) per sample; parts are (B, K) tensors."""
    parts = [ad.as_tensor(p) for p in parts]
    rhs = np.concatenate([p.value for p in parts], axis=1)
    out = np.einsum("bnr,br->bn", pinv, rhs)
    k = parts[0].value.shape[1]

    def backward(g):
        grhs = np.einsum("bnr,bn->br", pinv, g)
        return tuple(grhs[:, i * k : (i + 1) * k] for i in range(len(parts)))

    return Tensor(out, parents=tuple(parts), backward=backward)


def _profile_adjoint(pinv, w):
    """Both halves of pinv^T w per sample: ((B,K), (B,K)).

    This is the profile-space gradient map: for w = pinv @ p, d||w||^2/dp =
    2 pinv^T w.
    """
    w = ad.as_tensor(w)
    y = np.einsum("bnr,bn->br", pinv, w.value)
    k = y.shape[1] // 2

    def backward_a(g):
        full = np.concatenate([g, np.zeros_like(g)], axis=1)
        return (np.einsum("bnr,br->bn", pinv, full),)

    def backward_b(g):
        full = np.concatenate([np.zeros_like(g), g], axis=1)
        return (np.einsum("bnr,br->bn", pinv, full),)

    ya = Tensor(y[:, :k].copy(), parents=(w,), backward=backward_a)
    yb = Tensor(y[:, k:].copy(), parents=(w,), backward=backward_b)
    return ya, yb


def _profile_columns(const_rows, x4, scale):
    """Per-user contraction of refiner columns: (B,K) from (B,1,2N_t,K).

    out[b,k] = scale[b,k] * unit(const_rows[b,k,:]) . x4[b,0,:,k]; the scale
    carries the target-amplitude units so the correction tracks the SINR level
    (batch norm inside the refiner strips it from the activations).
    """
    x4 = ad.as_tensor(x4)
    a = np.asarray(const_rows, dtype=float)
    norms = np.linalg.norm(a, axis=2, keepdims=True)
    a = a * (np.asarray(scale)[:, :, None] / np.maximum(norms, 1e-300))
    out = np.einsum("bkn,bnk->bk", a, x4.value[:, 0])

    def backward(g):
        gx = np.einsum("bk,bkn->bnk", g, a)[:, None, :, :]
        return (gx,)

    return Tensor(out, parents=(x4,), backward=backward)


class SlpDNet:
    """Unfolded precoding model; owns the parameter dict and batch-norm buffers."""

    def __init__(self, kind, n_t, n_users, n_blocks=2, modulation=QPSK, noise_power=1.0,
                 err_bound=0.0, seed=0, descent_steps=10):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if n_blocks < 1:
            raise ValueError("need at least one parameter-update block")
        self.kind = kind
        self.n_t = int(n_t)
        self.n_users = int(n_users)
        self.n_blocks = int(n_blocks)
        self.modulation = modulation
        self.noise_power = float(noise_power)
        self.err_bound = float(err_bound)
        self.seed = int(seed)
        self.descent_steps = int(descent_steps)
        self.params = {}
        self.bn_states = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction --------------------------------------------------------
    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def _init_params(self, rng):
        n, k = 2 * self.n_t, self.n_users
        flat = PUM_CHANNELS * n * k
        # bias the scalar heads so the blocks start near-identity (the descent
        # already lands near the constraint surface; training grows the blocks'
        # influence only where it helps)
        head_bias = {"mu": _inv_softplus(0.05), "gamma": _inv_softplus(0.005), "lam": 0.0}
        for r in range(self.n_blocks):
            for head in ("mu", "gamma", "lam"):
                pre = f"pum{r}.{head}"
                self._add(pre + ".conv.w", ad.xavier_uniform(
                    rng, (PUM_CHANNELS, 1, KERNEL, KERNEL), KERNEL * KERNEL,
                    PUM_CHANNELS * KERNEL * KERNEL))
                self._add(pre + ".conv.b", np.zeros(PUM_CHANNELS))
                self._add(pre + ".fc.w", ad.xavier_uniform(rng, (1, flat), flat, 1))
                self._add(pre + ".fc.b", np.full(1, head_bias[head]))
        ch_mid = n * k
        self._add("apb.conv1.w", ad.xavier_uniform(
            rng, (APB_CHANNELS, 1, KERNEL, KERNEL), KERNEL**2, APB_CHANNELS * KERNEL**2))
        self._add("apb.conv1.b", np.zeros(APB_CHANNELS))
        self._add("apb.bn1.gamma", np.ones(APB_CHANNELS))
        self._add("apb.bn1.beta", np.zeros(APB_CHANNELS))
        self.bn_states["apb.bn1"] = ad.BatchNormState(
            np.zeros(APB_CHANNELS), np.ones(APB_CHANNELS))
        self._add("apb.prelu1.a", np.array([0.25]))
        self._add("apb.conv2.w", ad.xavier_uniform(
            rng, (ch_mid, APB_CHANNELS, KERNEL, KERNEL), APB_CHANNELS * KERNEL**2,
            ch_mid * KERNEL**2))
        self._add("apb.conv2.b", np.zeros(ch_mid))
        self._add("apb.bn2.gamma", np.ones(ch_mid))
        self._add("apb.bn2.beta", np.zeros(ch_mid))
        self.bn_states["apb.bn2"] = ad.BatchNormState(np.zeros(ch_mid), np.ones(ch_mid))
        self._add("apb.prelu2.a", np.array([0.25]))
        self._add("apb.conv3.w", ad.xavier_uniform(
            rng, (1, ch_mid, KERNEL, KERNEL), ch_mid * KERNEL**2, KERNEL**2))
        self._add("apb.conv3.b", np.zeros(1))
        if self.kind == STRICT:
            self._add("mult.mu_raw", _inv_softplus(rng.uniform(0.05, 0.5, k)))
            self._add("mult.lam_eq", rng.uniform(0.0, 1.0, k))
        else:
            # mu1 sets the amplitude margin (optimal profiles hug the floor),
            # mu2 the phase fullness (optimal phases hug the cone edge)
            self._add("mult.mu1_raw", _inv_softplus(rng.uniform(0.05, 0.5, k)))
            self._add("mult.mu2_raw", _inv_softplus(rng.uniform(0.8, 1.5, k)))
        self._add("descent.eta_raw", np.full(self.descent_steps, _inv_softplus(0.5)))

    # -- parameter views -----------------------------------------------------
    def theta(self):
        """Layer parameters (regularized set): conv/fc/norm weights and biases."""
        return {k: v for k, v in self.params.items()
                if not k.startswith(("mult.", "descent."))}

    def multipliers(self):
        """Positive multiplier vectors (and the free-sign equality vector)."""
        if self.kind == STRICT:
            return ad.softplus(self.params["mult.mu_raw"]), self.params["mult.lam_eq"]
        return (
            ad.softplus(self.params["mult.mu1_raw"]),
            ad.softplus(self.params["mult.mu2_raw"]),
        )

    def block_param_names(self, r):
        return [k for k in self.params if k.startswith(f"pum{r}.")]

    def apb_param_names(self):
        return [k for k in self.params if k.startswith("apb.")]

    def multiplier_param_names(self):
        """Parameters trained during every phase (multipliers and descent steps)."""
        return [k for k in self.params if k.startswith(("mult.", "descent."))]

    # -- submodules -----------------------------------------------------------
    def _head(self, prefix, x_const, signed):
        p = self.params
        h = ad.conv2d(x_const, p[prefix + ".conv.w"], p[prefix + ".conv.b"], padding=1)
        h = ad.avg_pool2d(h, kernel=1, stride=1)
        h = ad.softplus(h)
        h = ad.reshape(h, (h.shape[0], -1))
        h = ad.linear(h, p[prefix + ".fc.w"], p[prefix + ".fc.b"])
        h = ad.softplus_sign(h) if signed else ad.softplus(h)
        return ad.reshape(h, (h.shape[0],))

    def apb_forward(self, x, training=False):
        """Three-conv refiner, shape preserving (B,1,2N_t,K) -> (B,1,2N_t,K)."""
        p = self.params
        h = ad.conv2d(x, p["apb.conv1.w"], p["apb.conv1.b"], padding=1)
        h = ad.batch_norm(h, p["apb.bn1.gamma"], p["apb.bn1.beta"],
                          self.bn_states["apb.bn1"], training)
        h = ad.prelu(h, p["apb.prelu1.a"])
        h = ad.conv2d(h, p["apb.conv2.w"], p["apb.conv2.b"], padding=1)
        h = ad.batch_norm(h, p["apb.bn2.gamma"], p["apb.bn2.beta"],
                          self.bn_states["apb.bn2"], training)
        h = ad.prelu(h, p["apb.prelu2.a"])
        return ad.conv2d(h, p["apb.conv3.w"], p["apb.conv3.b"], padding=1)

    # -- profile machinery ------------------------------------------------------
    def initial_precoder(self, batch):
        """Unrolled profile descent from the learned multiplier targets.

        Per-user constraint targets live in smooth coordinates (amplitude margin
        sigma through a softplus, phase fullness phi through a tanh), so every
        iterate's profile is feasible by construction; the descent runs
        RMS-normalized gradient steps with learned step sizes on the exact
        transmit power of the profile solve. The multiplier vectors provide the
        starting targets, playing the role the recovery multipliers play in the
        closed-form initialization.
        """
        _, pinv = batch.profile_system(self.kind)
        amps = batch.amps
        b, k = batch.size, batch.n_users
        zeros_bk = Tensor(np.zeros((b, k)))
        eta = ad.softplus(self.params["descent.eta_raw"])
        cone = batch.tan_phi * CONE_SHRINK
        if self.kind == ROBUST:
            # same (margin, fullness) geometry as the relaxed kind, expressed on
            # the two worst-case rows: p1 = -(v + t*u), p2 = -(v - t*u) with
            # v >= amps*tan(phi) the amplitude coordinate and |u| < slack/tan(phi)
            tp = batch.tan_phi
            floor = amps * tp
            mu1r = self.params["mult.mu1_raw"]
            mu2r = self.params["mult.mu2_raw"]
            signs = batch.natural_signs()
            sigma = ad.reshape(mu1r, (1, k)) + zeros_bk
            phi = Tensor(signs) * ad.softplus(ad.reshape(mu2r, (1, k)) + zeros_bk)
            cell_s, cell_p = _DescentCell(), _DescentCell()
            sec_phi = math.sqrt(1.0 + tp * tp)
            margin = np.zeros((b, 1))  # lagged ||w|| estimate for the error term

            def parts(v, u, margin):
                shift = Tensor(batch.err_bound * sec_phi * margin)
                return (v + u * tp) * (-1.0) + shift * (-1.0), \
                    v * (-1.0) + u * tp + shift * (-1.0)

            for i in range(self.descent_steps):
                slack = Tensor(floor) * ad.softplus(sigma)
                full = ad.tanh(phi)
                u = full * slack * (CONE_SHRINK / tp)
                p1, p2 = parts(Tensor(floor) + slack, u, margin)
                w = _profile_solve(pinv, p1, p2)
                margin = np.linalg.norm(w.value, axis=1, keepdims=True)
                y1, y2 = _profile_adjoint(pinv, w)
                gv = (y1 + y2) * (-2.0)
                gu = (y2 + y1 * (-1.0)) * (2.0 * tp)
                gs = (gv + gu * full * (CONE_SHRINK / tp)) * Tensor(floor) * ad.sigmoid(
                    sigma)
                gp = gu * slack * (ad.square(full) * (-1.0) + 1.0) * (CONE_SHRINK / tp)
                step = ad.take_scalar(eta, i)
                sigma = cell_s.step(sigma, gs, step, i)
                phi = cell_p.step(phi, gp, step, i)
            slack = Tensor(floor) * ad.softplus(sigma)
            u = ad.tanh(phi) * slack * (CONE_SHRINK / tp)
            p1, p2 = parts(Tensor(floor) + slack, u, margin)
            return _profile_solve(pinv, p1, p2)
        if self.kind == STRICT:
            mu_raw = self.params["mult.mu_raw"]
            sigma = ad.reshape(mu_raw, (1, k)) + zeros_bk
            cell = _DescentCell()
            u0 = Tensor(np.zeros((b, k)))
            for i in range(self.descent_steps):
                slack = Tensor(amps) * ad.softplus(sigma)
                w = _profile_solve(pinv, Tensor(amps) + slack, u0)
                gv, _ = _profile_adjoint(pinv, w)
                gs = gv * Tensor(amps) * ad.sigmoid(sigma) * 2.0
                step = ad.take_scalar(eta, i)
                sigma = cell.step(sigma, gs, step, i)
            return _profile_solve(
                pinv, Tensor(amps) * (ad.softplus(sigma) + 1.0), u0)
        mu1r = self.params["mult.mu1_raw"]
        mu2r = self.params["mult.mu2_raw"]
        signs = batch.natural_signs()
        sigma = ad.reshape(mu1r, (1, k)) + zeros_bk
        phi = Tensor(signs) * ad.softplus(ad.reshape(mu2r, (1, k)) + zeros_bk)
        cell_s, cell_p = _DescentCell(), _DescentCell()
        for i in range(self.descent_steps):
            slack = Tensor(amps) * ad.softplus(sigma)
            full = ad.tanh(phi)
            w = _profile_solve(pinv, Tensor(amps) + slack, full * slack * cone)
            gv, gu = _profile_adjoint(pinv, w)
            gs = (gv + gu * full * cone) * Tensor(amps) * ad.sigmoid(sigma) * 2.0
            gp = gu * slack * (ad.square(full) * (-1.0) + 1.0) * (2.0 * cone)
            step = ad.take_scalar(eta, i)
            sigma = cell_s.step(sigma, gs, step, i)
            phi = cell_p.step(phi, gp, step, i)
        slack = Tensor(amps) * ad.softplus(sigma)
        return _profile_solve(
            pinv, Tensor(amps) + slack, ad.tanh(phi) * slack * cone)

    def assemble_output(self, batch, w_iter, dv=None, du=None, training=False):
        """Map an iterate (plus per-user refiner corrections) to the final precoder.

        The iterate's constraint profile is reparameterized so the result is
        feasible by construction for the relaxed/strict kinds: amplitudes stay
        above the targets through a softplus, phases stay strictly inside the
        cone through a tanh of the iterate's cone occupancy.
        """
        _, pinv = batch.profile_system(self.kind)
        amps = batch.amps
        tan_phi = batch.tan_phi
        if self.kind == ROBUST:
            # the radial ball prox only rescales the iterate; restore its scale
            # before reading the profile off it, or the floor clips everything
            w_iter, _ = rescale_to_feasible(ROBUST, batch, w_iter)
            floor = amps * tan_phi
            v_it = ad.batched_dot(apply_swap_t(batch.lambdas), w_iter) * (-1.0)
            u_it = ad.batched_dot(batch.lambdas, w_iter)
            if dv is not None:
                v_it = v_it + dv
            if du is not None:
                u_it = u_it + du
            slack = ad.relu(v_it + Tensor(-floor))
            v_f = Tensor(floor) + slack
            half = slack * (1.0 / tan_phi)
            occupancy = u_it * ad.reciprocal(half + Tensor(1e-3 * amps))
            u_f = _smooth_clip(occupancy) * half * CONE_SHRINK
            sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
            shift = Tensor(batch.err_bound * sec_phi
                           * np.linalg.norm(w_iter.value, axis=1, keepdims=True))
            p1 = (v_f + u_f * tan_phi) * (-1.0) + shift * (-1.0)
            p2 = v_f * (-1.0) + u_f * tan_phi + shift * (-1.0)
            return _profile_solve(pinv, p1, p2)
        lam = batch.lambdas
        v_it = ad.batched_dot(lam, w_iter)
        u_it = ad.batched_dot(apply_swap_t(lam), w_iter)
        if dv is not None:
            v_it = v_it + dv
        if du is not None:
            u_it = u_it + du
        slack = ad.relu(v_it + Tensor(-amps))
        v_f = Tensor(amps) + slack
        if self.kind == STRICT:
            u_f = Tensor(np.zeros_like(amps))
        else:
            occupancy = u_it * ad.reciprocal(slack * tan_phi + Tensor(1e-3 * amps))
            u_f = _smooth_clip(occupancy) * slack * (tan_phi * CONE_SHRINK)
        return _profile_solve(pinv, v_f, u_f)

    # -- forward ---------------------------------------------------------------
    def forward(self, batch, active_blocks=None, use_apb=True, training=False):
        n_active = self.n_blocks if active_blocks is None else active_blocks
        b = batch.size
        tan_phi = batch.tan_phi
        amps = batch.amps
        w = self.initial_precoder(batch)
        hinge = Tensor(np.zeros(()))
        lam_acc = Tensor(np.zeros(b))
        x_const = Tensor(batch.channel_tensor)
        mus, gammas, lams = [], [], []
        snaps = None
        # the conv heads see only the channel, so their outputs are treated as
        # dimensionless factors: the barrier weight carries the instance's target
        # power scale (relative to the channel gain) and the unit shift its
        # amplitude scale, keeping the blocks equivariant across the SINR range
        amp_mean = amps.mean(axis=1)
        gain = np.einsum("bkn,bkn->bk", batch.lambdas, batch.lambdas).mean(axis=1)
        mu_scale = amp_mean**2 / gain
        # the sign-symmetric softplus jumps to +-ln 2 at zero, so the shift head
        # cannot start near zero on its own; damp its coupling instead
        lam_scale = 0.05 * amp_mean / np.sqrt(gain)
        for r in range(n_active):
            mu = self._head(f"pum{r}.mu", x_const, signed=False) * Tensor(mu_scale)
            gamma = self._head(f"pum{r}.gamma", x_const, signed=False)
            lam_acc = lam_acc + self._head(f"pum{r}.lam", x_const, signed=True) * Tensor(
                lam_scale)
            mus.append(mu)
            gammas.append(gamma)
            lams.append(lam_acc)
            w_ref = w  # slab bounds freeze here (lagged across the block)
            gcol = ad.reshape(gamma, (b, 1))
            z = w * (gcol * (-2.0) + 1.0) + gcol * ad.reshape(lam_acc, (b, 1)) * (-1.0)
            snaps = []
            for k in range(batch.n_users):
                lam_rows = batch.lambdas[:, k, :]
                amp_k = amps[:, k]
                if self.kind == RELAXED:
                    bvals = (np.einsum("bn,bn->b", lam_rows, w_ref.value) - amp_k) * tan_phi
                    mask = bvals > FEASIBLE_TOL
                    slack = (ad.batched_dot(lam_rows[:, None, :], w_ref)
                             * tan_phi + Tensor(-amp_k[:, None] * tan_phi))
                    hinge = hinge + ad.tsum(ad.relu(slack * (-1.0)))
                    z = _hyperslab_prox_layer(z, mu, gamma, w_ref, lam_rows, bvals,
                                              mask, tan_phi)
                elif self.kind == STRICT:

                    def step(i, zi, gi, mi, _rows=lam_rows, _a=amp_k):
                        return prox_strict(zi, _rows[i], _a[i], gi, mi)

                    z = _prox_layer(z, mu, gamma, step)
                else:

                    def step(i, zi, gi, mi, _rows=lam_rows, _a=amp_k):
                        return prox_ball(zi, _rows[i], _a[i], tan_phi, batch.err_bound, gi, mi)

                    z = _prox_layer(z, mu, gamma, step)
                snaps.append(z)
            w = z
        w_iter = w
        dv = du = None
        result_snaps = None
        if use_apb:
            stacked = ad.stack_last(snaps)  # (B, 2N_t, K)
            s4 = ad.reshape(stacked, (b, 1, 2 * batch.n_t, batch.n_users))
            refined = self.apb_forward(s4, training=training)
            result_snaps = s4
            # per-user corrections to the iterate's (amplitude, phase) profile
            # coordinates; gentle coupling so they start small vs the targets
            if self.kind == ROBUST:
                v_rows, u_rows = apply_swap_t(batch.lambdas), batch.lambdas
            else:
                v_rows, u_rows = batch.lambdas, apply_swap_t(batch.lambdas)
            dv = _profile_columns(v_rows, refined, 0.01 * amps)
            du = _profile_columns(u_rows, refined, 0.01 * amps)
        w_final = self.assemble_output(batch, w_iter, dv, du, training=training)
        return ForwardResult(w_final, w_iter, hinge, mus, gammas, lams, result_snaps)


# -- closed-form multiplier recovery ------------------------------------------


def _recover_tape(kind, multipliers, batch, scale_by_targets=False):
    lam = batch.lambdas
    tan_phi = batch.tan_phi
    amps = batch.amps if scale_by_targets else np.ones_like(batch.amps)
    if kind == RELAXED:
        mu1, mu2 = multipliers
        alpha = (mu1 + mu2) * Tensor(amps * tan_phi * 0.5)
        beta = (mu1 + mu2 * (-1.0)) * Tensor(amps * 0.5)
        return ad.batched_combine(lam, alpha) + ad.batched_combine(
            apply_swap_t(lam), beta * (-1.0))
    if kind == STRICT:
        mu, lam_eq = multipliers
        alpha = mu * Tensor(amps * 0.5)
        beta = lam_eq * Tensor(amps * 0.5)
        return ad.batched_combine(lam, alpha) + ad.batched_combine(
            apply_swap(lam), beta * (-1.0))
    if kind == ROBUST:
        mu1, mu2 = multipliers
        sec2 = 1.0 + tan_phi * tan_phi
        lam_norms = np.einsum("bkn,bkn->bk", lam, lam)
        coeff = sec2 * (batch.err_bound**2 - lam_norms)  # (B,K) constant
        a_scalar = ad.tsum((mu1 + mu2) * Tensor(coeff), axis=1) + 1.0
        if np.any(np.abs(a_scalar.value) < 1e-10):
            raise np.linalg.LinAlgError("singular multiplier-recovery scaling")
        amps_t = batch.amps * tan_phi
        q1lam = apply_swap(lam) - tan_phi * lam
        q2lam = apply_swap(lam) + tan_phi * lam
        num = ad.batched_combine(q1lam, mu1 * Tensor(amps_t)) + ad.batched_combine(
            q2lam, mu2 * Tensor(amps_t))
        inv = ad.reciprocal(ad.reshape(a_scalar, (batch.size, 1)))
        return num * inv * (-1.0)
    raise ValueError(f"unknown kind {kind!r}")


def recover_precoder(kind, multipliers, batch, scale_by_targets=False):
    """Closed-form optimal-precoder recovery from multiplier vectors (numeric).

    multipliers: (mu1, mu2) for relaxed/robust, (mu, lambda) for strict; arrays of
    shape (K,). Returns (B, 2N_t), w2-form for the robust kind.
    """
    mults = tuple(Tensor(np.asarray(m, dtype=float)) for m in multipliers)
    return _recover_tape(kind, mults, batch, scale_by_targets=scale_by_targets).value


# -- losses ---------------------------------------------------------------------


def lagrangian_loss(kind, batch, w, multipliers, theta, reg_weight):
    """Batch-mean unsupervised Lagrangian with separate components (tape form)."""
    w = ad.as_tensor(w)
    theta = [ad.as_tensor(t) for t in theta]
    amps = batch.amps
    tan_phi = batch.tan_phi
    objective = ad.tmean(ad.tsum(ad.square(w), axis=1))
    if kind == RELAXED:
        mu1, mu2 = (ad.as_tensor(m) for m in multipliers)
        u = ad.batched_dot(apply_swap_t(batch.lambdas), w)
        v = ad.batched_dot(batch.lambdas, w)
        t1 = mu1 * (u + v * (-tan_phi) + Tensor(amps))
        t2 = mu2 * (u + v * tan_phi + Tensor(-amps))
        constraint = ad.tmean(ad.tsum(t1 + t2 * (-1.0), axis=1))
    elif kind == STRICT:
        mu, lam_eq = (ad.as_tensor(m) for m in multipliers)
        u = ad.batched_dot(apply_swap_t(batch.lambdas), w)
        v = ad.batched_dot(batch.lambdas, w)
        constraint = ad.tmean(
            ad.tsum(lam_eq * u + mu * (v * (-1.0) + Tensor(amps)), axis=1))
    elif kind == ROBUST:
        mu1, mu2 = (ad.as_tensor(m) for m in multipliers)
        e2 = batch.err_bound**2
        pw = ad.swap_halves(w)
        terms = []
        for mu_t, sign in ((mu1, -1.0), (mu2, 1.0)):
            qw = pw + w * (sign * tan_phi)
            nsq = ad.reshape(ad.tsum(ad.square(qw), axis=1), (batch.size, 1))
            lin = ad.batched_dot(batch.lambdas, qw)
            gap = Tensor(amps * tan_phi) + lin * (-1.0)
            terms.append(mu_t * (nsq * e2 + ad.square(gap) * (-1.0)))
        constraint = ad.tmean(ad.tsum(terms[0] + terms[1], axis=1))
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if theta and reg_weight > 0:
        acc = ad.tsum(ad.square(ad.reshape(theta[0], (-1,))))
        for t in theta[1:]:
            acc = acc + ad.tsum(ad.square(ad.reshape(t, (-1,))))
        regularizer = acc * (reg_weight / (batch.size * len(theta)))
    else:
        regularizer = Tensor(np.zeros(()))
    return LossBreakdown(objective, constraint, regularizer)


def loss_eval(kind, batch, w, multipliers, theta=(), reg_weight=0.0):
    """Numeric LossBreakdown (floats) for plain-array inputs."""
    br = lagrangian_loss(kind, batch, w, multipliers, theta, reg_weight)
    return LossBreakdown(
        float(br.objective.value), float(br.constraint.value), float(br.regularizer.value)
    )


def rescale_to_feasible(kind, batch, w):
    """Scale each output to its smallest feasible multiple (tape-tracked).

    Samples whose direction admits no feasible scaling pass through unchanged
    (the violation hinge owns those). The scale may fall below 1 here: during
    training this evaluates the loss exactly at the direction-optimal power,
    decoupling the objective term from the raw output scale.
    """
    w = ad.as_tensor(w)
    lam = batch.lambdas
    amps = batch.amps
    tan_phi = batch.tan_phi
    wv = w.value
    if kind == RELAXED:
        u = np.einsum("bkn,bn->bk", apply_swap_t(lam), wv)
        v = np.einsum("bkn,bn->bk", lam, wv)
        denom = v * tan_phi - np.abs(u)
        need = amps * tan_phi
        grad_dir = tan_phi * lam - np.sign(u)[:, :, None] * apply_swap_t(lam)
    elif kind == STRICT:
        denom = np.einsum("bkn,bn->bk", lam, wv)
        need = amps
        grad_dir = lam
    elif kind == ROBUST:
        sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
        nw_ = np.linalg.norm(wv, axis=1, keepdims=True)
        w_hat = wv / np.maximum(nw_, 1e-300)
        parts, grads = [], []
        for sign in (-1.0, 1.0):
            qlam = apply_swap_t(lam) + sign * tan_phi * lam  # rows Q_q^T Lambda
            parts.append(-np.einsum("bkn,bn->bk", qlam, wv)
                         - batch.err_bound * sec_phi * nw_)
            grads.append(-qlam - batch.err_bound * sec_phi * w_hat[:, None, :])
        denom = np.concatenate(parts, axis=1)
        need = np.concatenate([amps, amps], axis=1) * tan_phi
        grad_dir = np.concatenate(grads, axis=1)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    ok = np.all(denom > 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(denom > 0, need / denom, -np.inf)
    pick = np.argmax(ratios, axis=1)
    rows_idx = np.arange(wv.shape[0])
    t = np.where(ok, ratios[rows_idx, pick], 1.0)
    out = t[:, None] * wv
    # dt/dw = -(need/denom^2) * grad(denom) at the active constraint
    dt_dw = np.where(
        ok[:, None],
        -(need[rows_idx, pick] / denom[rows_idx, pick] ** 2)[:, None]
        * grad_dir[rows_idx, pick],
        0.0,
    )

    def backward(g):
        return (t[:, None] * g + dt_dw * np.sum(g * wv, axis=1, keepdims=True),)

    return Tensor(out, parents=(w,), backward=backward), ok


def output_violation(kind, batch, w):
    """Summed violated constraint slacks of the final output (tape form).

    Teaches per-sample feasibility, which the averaged Lagrangian multiplier
    terms only enforce in the mean.
    """
    w = ad.as_tensor(w)
    amps = batch.amps
    tan_phi = batch.tan_phi
    if kind == RELAXED:
        u = ad.batched_dot(apply_swap_t(batch.lambdas), w)
        rhs = ad.batched_dot(batch.lambdas, w) * tan_phi + Tensor(-amps * tan_phi)
        return ad.tsum(ad.relu(u + rhs * (-1.0))) + ad.tsum(ad.relu(u * (-1.0) + rhs * (-1.0)))
    if kind == STRICT:
        u = ad.batched_dot(apply_swap_t(batch.lambdas), w)
        v = ad.batched_dot(batch.lambdas, w)
        return (ad.tsum(ad.relu(Tensor(amps) + v * (-1.0)))
                + ad.tsum(ad.relu(u)) + ad.tsum(ad.relu(u * (-1.0))))
    if kind == ROBUST:
        sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
        nw = ad.sqrt(ad.tsum(ad.square(w), axis=1, keepdims=True))
        total = None
        for sign in (-1.0, 1.0):
            qw = ad.swap_halves(w) + w * (sign * tan_phi)
            lin = ad.batched_dot(batch.lambdas, qw)
            viol = ad.relu(lin + nw * (batch.err_bound * sec_phi) + Tensor(amps * tan_phi))
            total = ad.tsum(viol) if total is None else total + ad.tsum(viol)
        return total
    raise ValueError(f"unknown kind {kind!r}")


# -- training ---------------------------------------------------------------------


def train(model, data, config, trace_path=None):
    """Block-wise unsupervised training; returns the per-step loss trace.

    Each parameter-update block trains for config.pum_iters epochs, then the
    refiner for config.apb_iters epochs; the profile multipliers train in every
    phase. The learning rate resets per phase and decays by config.decay after
    every epoch. Fully deterministic given (data, config).
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    rng = np.random.default_rng(config.seed)
    phases = []
    for r in range(model.n_blocks):
        phases.append((f"block{r}", model.block_param_names(r), r + 1, False,
                       config.pum_iters))
    phases.append(("apb", model.apb_param_names(), model.n_blocks, True, config.apb_iters))
    theta = list(model.theta().values())
    trace = []
    step = 0
    for phase_name, names, active, use_apb, n_epochs in phases:
        live = {k: model.params[k] for k in names + model.multiplier_param_names()}
        adam = ad.adam_init(live)
        lr = config.learning_rate
        for epoch in range(n_epochs):
            order = rng.permutation(n)
            sinr_db = rng.uniform(config.sinr_low_db, config.sinr_high_db, size=n)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = batch_from_tensor(
                    data[idx], 10.0 ** (sinr_db[idx] / 10.0), model.noise_power,
                    model.modulation, model.err_bound)
                for t in model.params.values():
                    t.zero_grad()
                fwd = model.forward(batch, active_blocks=active, use_apb=use_apb,
                                    training=use_apb)
                w_loss = fwd.w
                if config.loss_at_rescaled:
                    w_loss, _ = rescale_to_feasible(model.kind, batch, fwd.w)
                br = lagrangian_loss(model.kind, batch, w_loss, model.multipliers(),
                                     theta, config.reg_weight)
                penalty = fwd.hinge + output_violation(model.kind, batch, fwd.w)
                total = br.total + penalty * (config.hinge_weight / batch.size)
                if not np.isfinite(total.value):
                    raise RuntimeError(
                        f"non-finite loss in phase {phase_name}, batch starting at {start}")
                total.backward()
                ad.adam_step(live, adam, lr)
                trace.append({
                    "iteration": step, "block": phase_name, "loss": float(total.value),
                    "objective": float(br.objective.value),
                    "constraint": float(br.constraint.value),
                    "regularizer": float(br.regularizer.value),
                })
                step += 1
            lr *= config.decay
    if trace_path is not None:
        write_loss_trace(trace_path, trace)
    return trace


def write_loss_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,block,loss,objective,constraint,regularizer\n")
        for row in trace:
            fh.write(
                f"{row['iteration']},{row['block']},{row['loss']!r},"
                f"{row['objective']!r},{row['constraint']!r},{row['regularizer']!r}\n")


# -- inference ----------------------------------------------------------------------


@dataclass
class InferenceReport:
    w: np.ndarray  # (B, 2N_t) network output (w2-form for robust)
    w_scaled: np.ndarray
    scale: np.ndarray
    direction_ok: np.ndarray
    residuals: np.ndarray
    residuals_scaled: np.ndarray

    @property
    def power_raw(self):
        return np.sum(self.w**2, axis=1)

    @property
    def power_scaled(self):
        return np.sum(self.w_scaled**2, axis=1)


def batch_residuals(kind, batch, w):
    """Vectorized per-user constraint slacks for a batch of precoders (B, 2N_t)."""
    w = np.asarray(w, dtype=float)
    lam = batch.lambdas
    amps = batch.amps
    tan_phi = batch.tan_phi
    v = np.einsum("bkn,bn->bk", lam, w)
    u = np.einsum("bkn,bn->bk", apply_swap_t(lam), w)
    if kind == RELAXED:
        return (v - amps) * tan_phi - np.abs(u)
    if kind == STRICT:
        return np.stack([v - amps, -np.abs(u)], axis=2)
    if kind == ROBUST:
        sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
        nw = np.linalg.norm(w, axis=1, keepdims=True)
        out = []
        for sign in (-1.0, 1.0):
            qw = apply_swap(w) + sign * tan_phi * w
            lin = np.einsum("bkn,bn->bk", lam, qw)
            out.append(-amps * tan_phi - lin - batch.err_bound * sec_phi * nw)
        return np.stack(out, axis=2)
    raise ValueError(f"unknown kind {kind!r}")


def _rescale_factors(kind, batch, w):
    """Smallest per-sample factor >= 1 restoring feasibility along the ray."""
    lam = batch.lambdas
    amps = batch.amps
    tan_phi = batch.tan_phi
    v = np.einsum("bkn,bn->bk", lam, w)
    u = np.einsum("bkn,bn->bk", apply_swap_t(lam), w)
    if kind == RELAXED:
        denom = v * tan_phi - np.abs(u)
        need = amps * tan_phi
    elif kind == STRICT:
        denom = v
        need = amps
    elif kind == ROBUST:
        sec_phi = math.sqrt(1.0 + tan_phi * tan_phi)
        nw = np.linalg.norm(w, axis=1, keepdims=True)
        denoms = []
        for sign in (-1.0, 1.0):
            qw = apply_swap(w) + sign * tan_phi * w  # Q_q w
            denoms.append(-np.einsum("bkn,bn->bk", lam, qw) - batch.err_bound * sec_phi * nw)
        denom = np.concatenate(denoms, axis=1)
        need = np.concatenate([amps, amps], axis=1) * tan_phi
    else:
        raise ValueError(f"unknown kind {kind!r}")
    ok = np.all(denom > 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.max(np.where(denom > 0, need / denom, np.inf), axis=1)
    return np.where(ok, np.maximum(t, 1.0), 1.0), ok


def infer(model, batch, rescale=False):
    """Feed-forward pass; reports raw and (optionally) feasibility-rescaled outputs.

    The rescale multiplies each output by the smallest factor >= 1 restoring all
    slacks, where the output direction admits one; direction_ok marks samples where
    it does. With rescale=False the scaled fields mirror the raw output.
    """
    fwd = model.forward(batch, training=False)
    w = fwd.w.value
    residuals = batch_residuals(model.kind, batch, w)
    if rescale:
        scale, ok = _rescale_factors(model.kind, batch, w)
        w_scaled = w * scale[:, None]
    else:
        scale = np.ones(batch.size)
        _, ok = _rescale_factors(model.kind, batch, w)
        w_scaled = w.copy()
    return InferenceReport(
        w, w_scaled, scale, ok, residuals, batch_residuals(model.kind, batch, w_scaled)
    )


# -- checkpoint I/O --------------------------------------------------------------------


def _ckpt_entries(model):
    for name, tensor in model.params.items():
        yield name, tensor.value
    for name, state in model.bn_states.items():
        yield name + ".running_mean", state.running_mean
        yield name + ".running_var", state.running_var


def save_checkpoint(model, path):
    """Versioned binary checkpoint: header, then (name, shape, float64 payload) blocks."""
    entries = list(_ckpt_entries(model))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        kind_b = model.kind.encode()
        fh.write(struct.pack("<IH", CHECKPOINT_VERSION, len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack(
            "<IIIIIdd", model.n_t, model.n_users, model.n_blocks, model.descent_steps,
            model.modulation.order, model.noise_power, model.err_bound))
        fh.write(struct.pack("<I", len(entries)))
        for name, value in entries:
            nb = name.encode()
            arr = np.ascontiguousarray(value, dtype="<f8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        version, kind_len = struct.unpack("<IH", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        kind = fh.read(kind_len).decode()
        n_t, n_users, n_blocks, steps, order, noise, err = struct.unpack(
            "<IIIIIdd", fh.read(36))
        model = SlpDNet(kind, n_t, n_users, n_blocks, ModulationSpec(order), noise, err,
                        descent_steps=steps)
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape).copy()
            if name.endswith(".running_mean"):
                model.bn_states[name[: -len(".running_mean")]].running_mean = arr
            elif name.endswith(".running_var"):
                model.bn_states[name[: -len(".running_var")]].running_var = arr
            else:
                model.params[name].value = arr
    return model
