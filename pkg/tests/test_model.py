import numpy as np
import pytest
from scipy import stats

from slpnet import model as md


def test_modulation_spec():
    qpsk = md.ModulationSpec(4)
    assert qpsk.phase_margin == np.pi / 4
    assert np.isclose(qpsk.tan_phi, 1.0)
    assert np.allclose(np.abs(qpsk.symbols()), 1.0)
    with pytest.raises(ValueError):
        md.ModulationSpec(1)
    with pytest.raises(ValueError):
        md.ModulationSpec(4, phase_margin=0.5)
    # any order >= 2 accepted
    assert md.ModulationSpec(3).order == 3


def test_swap_operator_properties():
    for n_t in (1, 2, 4, 7):
        pi = md.swap_operator(n_t)
        assert np.array_equal(pi @ pi, -np.eye(2 * n_t))
        assert np.array_equal(pi.T @ pi, np.eye(2 * n_t))
        v = np.random.default_rng(n_t).standard_normal(2 * n_t)
        assert np.allclose(pi @ v, md.apply_swap(v))
        assert np.allclose(pi.T @ v, md.apply_swap_t(v))
        assert np.isclose(np.linalg.norm(pi @ v), np.linalg.norm(v))


def test_gen_channels_statistics():
    chans = md.gen_channels(10_000, 4, 4, seed=7)
    flat = chans.samples.ravel()
    assert abs(np.mean(flat)) < 0.05
    assert 0.95 < np.var(flat) < 1.05
    assert 0.47 < np.var(flat.real) < 0.53
    assert 0.47 < np.var(flat.imag) < 0.53


def test_gen_channels_deterministic():
    a = md.gen_channels(50, 3, 5, seed=123)
    b = md.gen_channels(50, 3, 5, seed=123)
    assert np.array_equal(a.samples, b.samples)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_gen_channels_rejects_zero_dims():
    with pytest.raises(ValueError):
        md.gen_channels(0, 4, 4, 1)
    with pytest.raises(ValueError):
        md.gen_channels(5, 0, 4, 1)
    with pytest.raises(ValueError):
        md.gen_channels(5, 4, 0, 1)


def test_rotate_and_stack_equal_symbols():
    h = np.array([1.0 + 2.0j, -0.5 + 0.25j])
    symbols = np.full(4, np.exp(1j * 0.3))
    lam = md.rotate_and_stack(h, symbols, 1)
    expected = 4.0 * h
    assert np.allclose(lam[:2], expected.real)
    assert np.allclose(lam[2:], expected.imag)


def test_rotate_and_stack_real_channel():
    h = np.array([2.0, -1.0], dtype=complex)
    lam = md.rotate_and_stack(h, np.array([1.0 + 0j]), 0)
    assert np.allclose(lam, [2.0, -1.0, 0.0, 0.0])


def test_rotate_and_stack_matches_direct_evaluation(rng):
    qpsk = md.QPSK
    points = qpsk.symbols()
    for _ in range(50):
        h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        symbols = points[rng.integers(0, 4, size=4)]
        i = int(rng.integers(0, 4))
        lam = md.rotate_and_stack(h, symbols, i)
        phases = np.angle(symbols)
        h_hat = h * np.sum(np.exp(1j * (phases - phases[i])))
        assert np.allclose(lam, np.concatenate([h_hat.real, h_hat.imag]), atol=1e-12)


def test_rotate_and_stack_rejects_non_unit_symbols():
    with pytest.raises(ValueError):
        md.rotate_and_stack(np.ones(2, complex), np.array([1.0, 2.0 + 0j]), 0)


def test_stacking_identities(rng):
    # Re/Im of h_hat^T w computed through the stacked forms
    for _ in range(30):
        h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        w = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        lam = np.concatenate([h.real, h.imag])
        w1 = md.stack_precoder(w)
        prod = h @ w
        assert abs(prod.real - lam @ w1) < 1e-12
        assert abs(prod.imag - lam @ md.apply_swap(w1)) < 1e-12


def test_unstack_round_trip(rng):
    assert md.unstack(np.array([1.0, 0.0])) == 1.0 + 0.0j
    assert md.unstack(np.array([0.0, 1.0])) == -1.0j
    for _ in range(20):
        w = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        w1 = md.stack_precoder(w)
        assert np.allclose(md.unstack(w1), w)
        assert abs(np.linalg.norm(w) - np.linalg.norm(w1)) < 1e-15 * max(1, np.linalg.norm(w))
    with pytest.raises(ValueError):
        md.unstack(np.zeros(5))


def test_build_dataset_single_trivial():
    data = md.build_dataset(np.ones((1, 1, 1), complex), np.ones((1, 1), complex))
    assert data.shape == (1, 2, 1)
    assert np.allclose(data[0], [[1.0], [0.0]])


def test_build_dataset_order_preserved(rng):
    chans = md.gen_channels(8, 2, 3, seed=5)
    symbols = md.random_symbols(rng, 8, 2, md.QPSK)
    data = md.build_dataset(chans, symbols)
    assert data.shape == (8, 6, 2)
    for j in (0, 3, 7):
        col = md.rotate_and_stack(chans.samples[j, 1], symbols[j], 1)
        assert np.allclose(data[j, :, 1], col)


def test_dataset_file_round_trip(tmp_path, rng):
    chans = md.gen_channels(12, 4, 4, seed=9)
    symbols = md.random_symbols(rng, 12, 4, md.QPSK)
    data = md.build_dataset(chans, symbols)
    path = tmp_path / "d.slpd"
    md.write_dataset(path, data, seed=9)
    back, meta = md.read_dataset(path)
    assert np.array_equal(back, data)
    assert back.tobytes() == data.tobytes()
    assert meta == {"version": 1, "n": 12, "n_users": 4, "n_t": 4, "seed": 9}
    # determinism of the file bytes themselves
    path2 = tmp_path / "d2.slpd"
    md.write_dataset(path2, data, seed=9)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_csv_export(tmp_path, rng):
    chans = md.gen_channels(3, 2, 2, seed=1)
    symbols = md.random_symbols(rng, 3, 2, md.QPSK)
    data = md.build_dataset(chans, symbols)
    path = tmp_path / "d.csv"
    md.export_dataset_csv(path, data)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 4
    header = lines[0].split(",")
    assert header[0] == "x_0_0" and header[-1] == "x_3_1"
    row = np.array([float(v) for v in lines[1].split(",")])
    assert np.array_equal(row, data[0].ravel())


def test_random_symbols_rejects_degenerate(rng):
    symbols = md.random_symbols(rng, 2000, 4, md.QPSK)
    sums = np.abs(symbols.sum(axis=1))
    assert np.all(sums > md.DEGENERATE_ROTATION_TOL)


def test_csi_error_zero_bound():
    h = np.ones((3, 4), complex)
    out = md.apply_csi_error(h, 0.0, seed=1)
    assert np.array_equal(out, h)


def test_csi_error_bound_enforced():
    h = np.zeros((100_000 // 4, 4), complex)
    out = md.apply_csi_error(h, 1e-2, seed=3)
    norms_sq = np.sum(np.abs(out) ** 2, axis=-1)
    assert np.max(norms_sq) <= 1e-4 * (1 + 1e-12)
    with pytest.raises(ValueError):
        md.apply_csi_error(h, -1.0, seed=0)


def test_csi_error_distribution_matches_law():
    # ||e|| should follow min(||g||, bound) with g i.i.d. CN(0, bound^2) entries:
    # a censored law, so compare the interior part by KS and the boundary mass
    # (where most draws project) by proportion
    bound, n_t, n = 0.5, 4, 4000
    out = md.apply_csi_error(np.zeros((n, n_t), complex), bound, seed=11)
    observed = np.linalg.norm(out, axis=1)
    oracle_rng = np.random.default_rng(999)
    g = (oracle_rng.standard_normal((n, n_t)) + 1j * oracle_rng.standard_normal((n, n_t)))
    g *= bound / np.sqrt(2)
    expected = np.minimum(np.linalg.norm(g, axis=1), bound)
    edge = bound * (1 - 1e-9)
    obs_int, exp_int = observed[observed < edge], expected[expected < edge]
    assert stats.ks_2samp(obs_int, exp_int).pvalue > 1e-3
    assert abs(np.mean(observed >= edge) - np.mean(expected >= edge)) < 0.02


def test_instance_validation():
    lam = np.ones((2, 4))
    with pytest.raises(ValueError):
        md.SlpInstance(lam, np.array([1.0, -1.0]), 1.0, md.QPSK)
    with pytest.raises(ValueError):
        md.SlpInstance(lam, np.array([1.0, 1.0]), 0.0, md.QPSK)
    inst = md.SlpInstance(lam, np.array([4.0, 9.0]), 1.0, md.QPSK)
    assert np.allclose(inst.target_amps, [2.0, 3.0])


def test_robust_extension_operators():
    ext = md.robust_extension(3, md.QPSK, 0.1)
    pi = md.swap_operator(3)
    assert np.allclose(ext.q1, pi - np.eye(6))
    assert np.allclose(ext.q2, pi + np.eye(6))
    with pytest.raises(ValueError):
        md.robust_extension(3, md.QPSK, -0.5)
