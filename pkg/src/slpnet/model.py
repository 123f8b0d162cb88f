"""System model: PSK channels, complex<->real stacking, CSI errors, dataset pipeline.

Everything here is pure given (inputs, seed); generators never share state, so all
functions are safe to call concurrently.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"SLPD"
DATASET_VERSION = 1

# tolerance below which a symbol-tuple rotation sum counts as degenerate (all
# rotated channels vanish and the precoding problem has no solution)
DEGENERATE_ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class ModulationSpec:
    """M-PSK constellation and its constructive-interference half-angle (pi/M)."""

    order: int
    phase_margin: float = 0.0

    def __post_init__(self):
        if self.order < 2:
            raise ValueError(f"PSK order must be >= 2, got {self.order}")
        margin = np.pi / self.order
        if self.phase_margin == 0.0:
            object.__setattr__(self, "phase_margin", margin)
        elif abs(self.phase_margin - margin) > 1e-12:
            raise ValueError("phase_margin must equal pi/order")

    @property
    def tan_phi(self):
        return float(np.tan(self.phase_margin))

    def symbols(self):
        """The M unit-modulus constellation points exp(2j*pi*k/M)."""
        k = np.arange(self.order)
        return np.exp(2j * np.pi * k / self.order)


QPSK = ModulationSpec(4)


def swap_operator(n_t):
    """The 2N_t x 2N_t block operator mapping [x; y] -> [-y; x].

    Satisfies Pi @ Pi == -I and Pi.T @ Pi == I (asserted on construction); it sends
    the stacked precoder w1 = [w_R; -w_I] to w2 = [w_I; w_R].
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    eye = np.eye(n_t)
    zero = np.zeros((n_t, n_t))
    pi = np.block([[zero, -eye], [eye, zero]])
    assert np.array_equal(pi @ pi, -np.eye(2 * n_t))
    assert np.array_equal(pi.T @ pi, np.eye(2 * n_t))
    return pi


def apply_swap(vec):
    """Pi @ vec without forming the matrix; works on (..., 2N_t) arrays."""
    vec = np.asarray(vec)
    n_t = vec.shape[-1] // 2
    return np.concatenate([-vec[..., n_t:], vec[..., :n_t]], axis=-1)


def apply_swap_t(vec):
    """Pi.T @ vec (= -Pi @ vec) on (..., 2N_t) arrays."""
    vec = np.asarray(vec)
    n_t = vec.shape[-1] // 2
    return np.concatenate([vec[..., n_t:], -vec[..., :n_t]], axis=-1)


@dataclass(frozen=True)
class ComplexChannelSet:
    """i.i.d. CN(0,1) flat-fading channel draws, shape (n, K, N_t)."""

    samples: np.ndarray
    seed: int

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] == 0:
            raise ValueError("samples must be a nonempty (n, K, N_t) array")

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def n_users(self):
        return self.samples.shape[1]

    @property
    def n_t(self):
        return self.samples.shape[2]


def gen_channels(n, n_users, n_t, seed):
    """Draw n channel matrices (K x N_t) with unit-variance complex Gaussian entries."""
    if min(n, n_users, n_t) < 1:
        raise ValueError("n, n_users and n_t must all be >= 1")
    rng = np.random.default_rng(seed)
    re = rng.standard_normal((n, n_users, n_t))
    im = rng.standard_normal((n, n_users, n_t))
    return ComplexChannelSet((re + 1j * im) / np.sqrt(2.0), int(seed))


def rotate_and_stack(h_row, symbols, user):
    """Real-stacked rotated channel [Re(h_hat); Im(h_hat)] for one user.

    h_hat multiplies the channel row by the sum of relative symbol rotations
    s_k * conj(s_i); with all symbols equal this is just K * h_row.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if np.any(np.abs(np.abs(symbols) - 1.0) > 1e-9):
        raise ValueError("PSK symbols must have unit modulus")
    rotation = np.sum(symbols * np.conj(symbols[user]))
    h_hat = np.asarray(h_row, dtype=complex) * rotation
    return np.concatenate([h_hat.real, h_hat.imag])


def random_symbols(rng, n, n_users, modulation, reject_degenerate=True):
    """Uniform PSK symbol draws, (n, K) complex.

    Tuples whose symbol sum is (numerically) zero make every rotated channel vanish;
    those draws are rejected and redrawn unless reject_degenerate is False.
    """
    points = modulation.symbols()
    idx = rng.integers(0, modulation.order, size=(n, n_users))
    syms = points[idx]
    if reject_degenerate:
        bad = np.abs(syms.sum(axis=1)) < DEGENERATE_ROTATION_TOL
        while np.any(bad):
            idx = rng.integers(0, modulation.order, size=(int(bad.sum()), n_users))
            syms[bad] = points[idx]
            bad = np.abs(syms.sum(axis=1)) < DEGENERATE_ROTATION_TOL
    return syms


@dataclass(frozen=True)
class SlpInstance:
    """One symbol-level problem: rotated real channels, SINR targets, noise power."""

    lambdas: np.ndarray  # (K, 2N_t)
    targets: np.ndarray  # (K,) linear SINR
    noise_power: float
    modulation: ModulationSpec

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        tgt = np.atleast_1d(np.asarray(self.targets, dtype=float))
        if lam.ndim != 2 or lam.shape[0] != tgt.shape[0]:
            raise ValueError("lambdas must be (K, 2N_t) matching targets")
        if not np.all(np.isfinite(lam)):
            raise ValueError("lambdas must be finite")
        if np.any(tgt <= 0) or self.noise_power <= 0:
            raise ValueError("targets and noise power must be positive")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "targets", tgt)

    @property
    def n_users(self):
        return self.lambdas.shape[0]

    @property
    def n_t(self):
        return self.lambdas.shape[1] // 2

    @property
    def tan_phi(self):
        return self.modulation.tan_phi

    @property
    def target_amps(self):
        """Per-user sqrt(Gamma_i * v0)."""
        return np.sqrt(self.targets * self.noise_power)


def make_instance(h, symbols, targets, noise_power, modulation):
    """Build an SlpInstance from a complex channel matrix and a symbol tuple."""
    h = np.asarray(h, dtype=complex)
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (h.shape[0],))
    lambdas = np.stack([rotate_and_stack(h[i], symbols, i) for i in range(h.shape[0])])
    return SlpInstance(lambdas, targets.copy(), float(noise_power), modulation)


@dataclass(frozen=True)
class RobustExtension:
    """Norm-ball CSI uncertainty: error bound and the two slope operators."""

    err_bound: float
    q1: np.ndarray
    q2: np.ndarray

    def __post_init__(self):
        if self.err_bound < 0:
            raise ValueError("error bound must be nonnegative")


def robust_extension(n_t, modulation, err_bound):
    """Q1 = Pi - I*tan(phi), Q2 = Pi + I*tan(phi) for the robust constraints."""
    pi = swap_operator(n_t)
    eye_t = np.eye(2 * n_t) * modulation.tan_phi
    return RobustExtension(float(err_bound), pi - eye_t, pi + eye_t)


def apply_csi_error(h_bar, err_bound, seed):
    """Perturb channel rows inside the norm ball ||e||_2 <= err_bound.

    Raw errors have i.i.d. CN(0, err_bound^2) entries; draws exceeding the bound are
    rescaled onto the boundary, so most draws sit at the worst-case radius.
    """
    if err_bound < 0:
        raise ValueError("error bound must be nonnegative")
    h_bar = np.asarray(h_bar, dtype=complex)
    if err_bound == 0:
        return h_bar.copy()
    rng = np.random.default_rng(seed)
    err = (rng.standard_normal(h_bar.shape) + 1j * rng.standard_normal(h_bar.shape))
    err *= err_bound / np.sqrt(2.0)
    norms = np.linalg.norm(err, axis=-1, keepdims=True)
    scale = np.where(norms > err_bound, err_bound / np.maximum(norms, 1e-300), 1.0)
    return h_bar + err * scale


def stack_precoder(w):
    """Complex precoder -> real stacked vector [w_R; -w_I]."""
    w = np.asarray(w, dtype=complex)
    return np.concatenate([w.real, -w.imag])


def unstack(w1):
    """Real stacked vector [w_R; -w_I] -> complex precoder; inverse of stack_precoder."""
    w1 = np.asarray(w1, dtype=float)
    if w1.shape[-1] % 2 != 0:
        raise ValueError("stacked precoder must have even length")
    n_t = w1.shape[-1] // 2
    return w1[..., :n_t] - 1j * w1[..., n_t:]


def build_dataset(channels, symbols, modulation=None):
    """Per-sample real-stacked rotated channel tensors of shape (n, 2N_t, K).

    Column i of each sample is the stacked rotated channel of user i; the rotation
    step is the per-user symbol normalization of the data pipeline.
    """
    h = channels.samples if isinstance(channels, ComplexChannelSet) else np.asarray(channels)
    symbols = np.asarray(symbols, dtype=complex)
    if h.ndim != 3 or symbols.shape != h.shape[:2]:
        raise ValueError("channels (n, K, N_t) and symbols (n, K) must agree")
    n, n_users, n_t = h.shape
    out = np.empty((n, 2 * n_t, n_users))
    for j in range(n):
        for i in range(n_users):
            out[j, :, i] = rotate_and_stack(h[j, i], symbols[j], i)
    return out


def write_dataset(path, data, seed):
    """Binary dataset file: SLPD header then row-major float64 records."""
    data = np.ascontiguousarray(data, dtype="<f8")
    n, two_nt, n_users = data.shape
    header = DATASET_MAGIC + struct.pack(
        "<IQIIQ", DATASET_VERSION, n, n_users, two_nt // 2, seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_dataset(path):
    """Read a dataset file; returns (data, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file (magic {magic!r})")
        version, n, n_users, n_t, seed = struct.unpack("<IQIIQ", fh.read(28))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        payload = fh.read(n * 2 * n_t * n_users * 8)
    data = np.frombuffer(payload, dtype="<f8").reshape(n, 2 * n_t, n_users).copy()
    return data, {"version": version, "n": n, "n_users": n_users, "n_t": n_t, "seed": seed}


def export_dataset_csv(path, data):
    """CSV alternative: one sample per row, columns x_{row}_{user} in row-major order."""
    data = np.asarray(data)
    n, two_nt, n_users = data.shape
    header = [f"x_{r}_{u}" for r in range(two_nt) for u in range(n_users)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(n):
            writer.writerow([repr(float(v)) for v in data[j].ravel()])
