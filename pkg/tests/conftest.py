import numpy as np
import pytest

from slpnet import model as md


def golden_section(f, lo, hi, iters=160):
    """1-D golden-section minimization on [lo, hi]."""
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def random_instances(rng, n, n_users=4, n_t=4, sinr=10.0, noise=1.0, modulation=md.QPSK):
    """Deterministic random QPSK instances (degenerate symbol draws redrawn)."""
    channels = md.gen_channels(n, n_users, n_t, rng.integers(0, 2**32))
    symbols = md.random_symbols(rng, n, n_users, modulation)
    return [
        md.make_instance(channels.samples[j], symbols[j], sinr, noise, modulation)
        for j in range(n)
    ], channels, symbols


def duality_blp_power(h, targets, noise_power, iters=800, tol=1e-13):
    """Independent conventional-precoding optimum via uplink-downlink duality.

    Fixed point on the dual uplink powers with MMSE receive directions, then the
    exact downlink power allocation linear system.
    """
    h = np.asarray(h, dtype=complex)
    n_users, n_t = h.shape
    targets = np.broadcast_to(np.asarray(targets, float), (n_users,))
    hs = h.conj()
    lam = np.ones(n_users)
    for _ in range(iters):
        cov = noise_power * np.eye(n_t, dtype=complex)
        for k in range(n_users):
            cov += lam[k] * np.outer(hs[k], hs[k].conj())
        new = np.empty(n_users)
        for i in range(n_users):
            cov_i = cov - lam[i] * np.outer(hs[i], hs[i].conj())
            new[i] = targets[i] * noise_power / np.real(h[i] @ np.linalg.solve(cov_i, hs[i]))
        if np.max(np.abs(new - lam)) < tol:
            lam = new
            break
        lam = new
    cov = noise_power * np.eye(n_t, dtype=complex)
    for k in range(n_users):
        cov += lam[k] * np.outer(hs[k], hs[k].conj())
    dirs = np.stack([
        np.linalg.solve(cov - lam[i] * np.outer(hs[i], hs[i].conj()), hs[i])
        for i in range(n_users)
    ])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    gains = np.abs(h @ dirs.T) ** 2
    mat = -gains.copy()
    for i in range(n_users):
        mat[i, i] = gains[i, i] / targets[i]
    powers = np.linalg.solve(mat, noise_power * np.ones(n_users))
    return float(np.sum(powers))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
