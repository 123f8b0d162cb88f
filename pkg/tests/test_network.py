import numpy as np
import pytest

from slpnet import autodiff as ad
from slpnet import barriers as bb
from slpnet import model as md
from slpnet import network as nw
from slpnet import solvers as sv
from tests.conftest import random_instances


def _small_batch(rng, n=6, n_users=4, n_t=4, sinr=100.0, err_bound=0.0):
    channels = md.gen_channels(n, n_users, n_t, int(rng.integers(0, 2**32)))
    symbols = md.random_symbols(rng, n, n_users, md.QPSK)
    data = md.build_dataset(channels, symbols)
    return nw.batch_from_tensor(data, np.full(n, sinr), 1.0, md.QPSK, err_bound=err_bound)


# -- layer heads and refiner -----------------------------------------------------------


def test_head_outputs_positive(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=1)
    batch = _small_batch(rng)
    fwd = model.forward(batch)
    for mu, gamma in zip(fwd.mus, fwd.gammas):
        assert np.all(mu.value > 0)
        assert np.all(gamma.value > 0)


def test_apb_shape_preserved(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=1, seed=0)
    x = ad.Tensor(rng.standard_normal((2, 1, 8, 4)))
    out = model.apb_forward(x, training=False)
    assert out.shape == (2, 1, 8, 4)
    assert np.all(np.isfinite(out.value))


def test_apb_zero_weights_zero_output(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=1, seed=0)
    for name in model.apb_param_names():
        model.params[name].value = np.zeros_like(model.params[name].value)
    x = ad.Tensor(rng.standard_normal((2, 1, 8, 4)))
    out = model.apb_forward(x, training=False)
    assert np.allclose(out.value, 0.0)


def test_apb_matches_layerwise_reference(rng):
    model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=3)
    x = rng.standard_normal((3, 1, 4, 2))
    out = model.apb_forward(ad.Tensor(x), training=False).value

    def conv_ref(x, w, b):
        b_, c, h, wid = x.shape
        o = w.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        res = np.zeros((b_, o, h, wid))
        for bi in range(b_):
            for oi in range(o):
                for i in range(h):
                    for j in range(wid):
                        res[bi, oi, i, j] = np.sum(
                            xp[bi, :, i : i + 3, j : j + 3] * w[oi]) + b[oi]
        return res

    p = {k: v.value for k, v in model.params.items()}
    h = conv_ref(x, p["apb.conv1.w"], p["apb.conv1.b"])
    st = model.bn_states["apb.bn1"]
    h = (h - st.running_mean.reshape(1, -1, 1, 1)) / np.sqrt(
        st.running_var.reshape(1, -1, 1, 1) + st.eps)
    h = p["apb.bn1.gamma"].reshape(1, -1, 1, 1) * h + p["apb.bn1.beta"].reshape(1, -1, 1, 1)
    h = np.where(h >= 0, h, p["apb.prelu1.a"] * h)
    h2 = conv_ref(h, p["apb.conv2.w"], p["apb.conv2.b"])
    st = model.bn_states["apb.bn2"]
    h2 = (h2 - st.running_mean.reshape(1, -1, 1, 1)) / np.sqrt(
        st.running_var.reshape(1, -1, 1, 1) + st.eps)
    h2 = p["apb.bn2.gamma"].reshape(1, -1, 1, 1) * h2 + p["apb.bn2.beta"].reshape(1, -1, 1, 1)
    h2 = np.where(h2 >= 0, h2, p["apb.prelu2.a"] * h2)
    ref = conv_ref(h2, p["apb.conv3.w"], p["apb.conv3.b"])
    assert np.max(np.abs(out - ref)) < 1e-10


# -- block semantics --------------------------------------------------------------------


def _freeze_heads(model, mu_c, gamma_c, lam_c):
    """Zero the head weights so each head emits an exact constant."""
    for r in range(model.n_blocks):
        for head, const in (("mu", mu_c), ("gamma", gamma_c), ("lam", lam_c)):
            pre = f"pum{r}.{head}"
            model.params[pre + ".conv.w"].value *= 0.0
            model.params[pre + ".conv.b"].value *= 0.0
            model.params[pre + ".fc.w"].value *= 0.0
            if head == "lam":
                # softplus_sign(b) = sign(b) softplus(|b|)
                raw = np.log(np.expm1(abs(lam_c))) * np.sign(lam_c) if lam_c else 0.0
                model.params[pre + ".fc.b"].value = np.array([raw])
            else:
                model.params[pre + ".fc.b"].value = np.array([np.log(np.expm1(const))])


def test_blocks_replay_forward_backward_iterations(rng):
    """Blocks with frozen constant heads replay the reference iteration exactly."""
    mu_c, gamma_c, lam_c = 0.4, 0.07, 0.0
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=5)
    _freeze_heads(model, mu_c, gamma_c, lam_c)
    batch = _small_batch(rng, n=4, sinr=25.0)
    fwd = model.forward(batch, use_apb=False)
    w0 = model.initial_precoder(batch).value
    amps = batch.amps
    gain = np.einsum("bkn,bkn->bk", batch.lambdas, batch.lambdas).mean(axis=1)
    for j in range(batch.size):
        inst = md.SlpInstance(batch.lambdas[j], batch.targets[j], 1.0, md.QPSK)
        mu_eff = mu_c * amps[j].mean() ** 2 / gain[j]
        w = w0[j]
        for _ in range(2):
            w, _, _ = bb.forward_backward_step(w, inst, gamma_c, mu_eff, 0.0)
        assert np.allclose(fwd.w_iterate.value[j], w, atol=1e-12, rtol=0.0)


def test_block_mu_gamma_match_reference_scaling(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=1, seed=5)
    _freeze_heads(model, 0.3, 0.1, 0.2)
    batch = _small_batch(rng, n=3, sinr=16.0)
    fwd = model.forward(batch, use_apb=False)
    gain = np.einsum("bkn,bkn->bk", batch.lambdas, batch.lambdas).mean(axis=1)
    expect_mu = 0.3 * batch.amps.mean(axis=1) ** 2 / gain
    assert np.allclose(fwd.mus[0].value, expect_mu)
    assert np.allclose(fwd.gammas[0].value, 0.1)


def test_forward_output_feasible_by_construction(rng):
    for kind in ("relaxed", "strict"):
        model = nw.SlpDNet(kind, 4, 4, n_blocks=2, seed=2)
        batch = _small_batch(rng, n=8, sinr=200.0)
        fwd = model.forward(batch)
        res = nw.batch_residuals(kind, batch, fwd.w.value)
        if kind == "relaxed":
            assert np.min(res) > -1e-9
        else:
            assert np.min(res[:, :, 0]) > -1e-9
            assert np.max(np.abs(res[:, :, 1])) < 1e-9


def test_untrained_model_is_total(rng):
    # random-init model: finite outputs and residual report, no crash
    for kind in ("relaxed", "strict", "robust"):
        err = 0.02 if kind == "robust" else 0.0
        model = nw.SlpDNet(kind, 4, 4, n_blocks=2, seed=9, err_bound=err)
        batch = _small_batch(rng, n=5, sinr=50.0, err_bound=err)
        report = nw.infer(model, batch, rescale=False)
        assert np.all(np.isfinite(report.w))
        assert report.residuals.shape[0] == 5


def test_inference_batch_independent(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=4)
    batch1 = _small_batch(rng, n=3, sinr=40.0)
    dup = nw.InstanceBatch(
        np.concatenate([batch1.lambdas, batch1.lambdas]),
        np.concatenate([batch1.targets, batch1.targets]),
        batch1.noise_power, batch1.modulation)
    w1 = model.forward(batch1, training=False).w.value
    w2 = model.forward(dup, training=False).w.value
    assert np.allclose(w1, w2[:3], atol=1e-12)
    assert np.allclose(w1, w2[3:], atol=1e-12)


# -- recovery ---------------------------------------------------------------------------


def test_recover_relaxed_symmetric_multipliers(rng):
    batch = _small_batch(rng, n=2)
    mu = np.array([0.3, 0.7, 0.2, 0.9])
    w = nw.recover_precoder("relaxed", (mu, mu), batch)
    expected = np.einsum("bkn,k->bn", batch.lambdas, mu * batch.tan_phi)
    assert np.allclose(w, expected, atol=1e-12)


def test_recover_strict_zero_lambda(rng):
    batch = _small_batch(rng, n=2)
    mu = np.array([0.5, 0.1, 0.4, 0.8])
    w = nw.recover_precoder("strict", (mu, np.zeros(4)), batch)
    expected = np.einsum("bkn,k->bn", batch.lambdas, mu / 2.0)
    assert np.allclose(w, expected, atol=1e-12)


def test_recover_robust_matches_linear_solve(rng):
    batch = _small_batch(rng, n=3, err_bound=0.05)
    mu1 = np.array([0.2, 0.4, 0.1, 0.3])
    mu2 = np.array([0.5, 0.3, 0.6, 0.2])
    got = nw.recover_precoder("robust", (mu1, mu2), batch)
    pi = md.swap_operator(batch.n_t)
    tan_phi = batch.tan_phi
    q1 = pi - tan_phi * np.eye(8)
    q2 = pi + tan_phi * np.eye(8)
    for j in range(batch.size):
        lam = batch.lambdas[j]
        a = 1.0
        rhs = np.zeros(8)
        for k in range(4):
            norm2 = lam[k] @ lam[k]
            a += (1 + tan_phi**2) * (mu1[k] + mu2[k]) * (batch.err_bound**2 - norm2)
            rhs -= (mu1[k] * (q1 @ lam[k]) + mu2[k] * (q2 @ lam[k])) * (
                batch.amps[j, k] * tan_phi)
        expected = np.linalg.solve(a * np.eye(8), rhs)
        assert np.allclose(got[j], expected, atol=1e-10)


def test_recover_robust_singular_raises(rng):
    batch = _small_batch(rng, n=1, err_bound=0.0)
    lam = batch.lambdas
    norm2 = np.einsum("bkn,bkn->bk", lam, lam)
    # choose mu1 = mu2 = c so that A = 1 + sec^2 sum 2c (e^2 - ||L||^2) == 0
    c = 1.0 / (2.0 * (1 + batch.tan_phi**2) * norm2[0].sum())
    with pytest.raises(np.linalg.LinAlgError):
        nw.recover_precoder("robust", (np.full(4, c), np.full(4, c)), batch)


# -- losses -----------------------------------------------------------------------------


def test_loss_zero_multipliers(rng):
    batch = _small_batch(rng, n=4)
    w = rng.standard_normal((4, 8))
    br = nw.loss_eval("relaxed", batch, w, (np.zeros(4), np.zeros(4)))
    assert np.isclose(br.objective, np.mean(np.sum(w**2, axis=1)))
    assert br.constraint == 0.0
    assert br.regularizer == 0.0


def test_loss_at_origin(rng):
    # at w = 0 both split-constraint terms reduce to their target offsets:
    # sum_k (mu1_k + mu2_k) sqrt(Gamma_k v0)
    batch = _small_batch(rng, n=3)
    mu1 = np.array([0.3, 0.1, 0.7, 0.2])
    mu2 = np.array([0.4, 0.6, 0.1, 0.5])
    br = nw.loss_eval("relaxed", batch, np.zeros((3, 8)), (mu1, mu2))
    expected = np.mean(np.sum((mu1 + mu2) * batch.amps, axis=1))
    assert np.isclose(br.constraint, expected)
    assert br.objective == 0.0


def test_loss_matches_scalar_reimplementation(rng):
    batch = _small_batch(rng, n=5)
    w = rng.standard_normal((5, 8))
    mu1 = rng.uniform(0, 1, 4)
    mu2 = rng.uniform(0, 1, 4)
    theta = [rng.standard_normal((3, 3)), rng.standard_normal(7)]
    reg_w = 0.37
    br = nw.loss_eval("relaxed", batch, w, (mu1, mu2), theta, reg_w)
    tan_phi = batch.tan_phi
    total_c = 0.0
    for j in range(5):
        for k in range(4):
            lam = batch.lambdas[j, k]
            u = md.apply_swap_t(lam) @ w[j]
            v = lam @ w[j]
            g = batch.amps[j, k]
            total_c += mu1[k] * (u - v * tan_phi + g) - mu2[k] * (u + v * tan_phi - g)
    assert abs(br.constraint - total_c / 5) < 1e-10
    reg = reg_w / (5 * 2) * sum(float(np.sum(t**2)) for t in theta)
    assert abs(br.regularizer - reg) < 1e-12
    assert abs(br.objective - np.mean(np.sum(w**2, axis=1))) < 1e-10


def test_robust_loss_scalar_reimplementation(rng):
    batch = _small_batch(rng, n=4, err_bound=0.1)
    w = rng.standard_normal((4, 8))
    mu1 = rng.uniform(0, 1, 4)
    mu2 = rng.uniform(0, 1, 4)
    br = nw.loss_eval("robust", batch, w, (mu1, mu2))
    pi = md.swap_operator(4)
    tan_phi = batch.tan_phi
    e2 = batch.err_bound**2
    total = 0.0
    for j in range(4):
        for q, mu in ((pi - tan_phi * np.eye(8), mu1), (pi + tan_phi * np.eye(8), mu2)):
            qw = q @ w[j]
            for k in range(4):
                gap = batch.amps[j, k] * tan_phi - batch.lambdas[j, k] @ qw
                total += mu[k] * (e2 * (qw @ qw) - gap**2)
    assert abs(br.constraint - total / 4) < 1e-9


# -- training ---------------------------------------------------------------------------


def _tiny_data(rng, n=40, n_users=2, n_t=2):
    channels = md.gen_channels(n, n_users, n_t, 77)
    symbols = md.random_symbols(rng, n, n_users, md.QPSK)
    return md.build_dataset(channels, symbols)


def test_train_zero_learning_rate_freezes_parameters(rng):
    data = _tiny_data(rng, n=20)
    model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=0, descent_steps=4)
    with pytest.raises(ValueError):
        nw.TrainConfig(learning_rate=-1.0)
    before = {k: v.value.copy() for k, v in model.params.items()}
    # single whole-set batch and a fixed SINR so each epoch sees identical data
    cfg = nw.TrainConfig(batch_size=20, learning_rate=0.0, decay=1.0, pum_iters=3,
                         apb_iters=2, sinr_low_db=12.0, sinr_high_db=12.0, seed=1)
    trace = nw.train(model, data, cfg)
    for k, v in model.params.items():
        assert np.array_equal(before[k], v.value), k
    by_phase = {}
    for row in trace:
        by_phase.setdefault(row["block"], []).append(row["loss"])
    for losses in by_phase.values():
        assert len(set(losses)) == 1


def test_train_descends_fixed_batch(rng):
    data = _tiny_data(rng, n=30)
    model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=0, descent_steps=4)
    cfg = nw.TrainConfig(batch_size=30, learning_rate=3e-3, sinr_low_db=20.0,
                         sinr_high_db=20.0001, pum_iters=15, apb_iters=15, seed=3)
    trace = nw.train(model, data, cfg)
    losses = np.array([row["loss"] for row in trace])
    k = 5
    smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
    assert smooth[-1] < smooth[0]


def test_train_deterministic(rng):
    data = _tiny_data(rng)
    traces = []
    for _ in range(2):
        model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=0, descent_steps=4)
        cfg = nw.TrainConfig(batch_size=20, pum_iters=2, apb_iters=1, seed=5)
        traces.append(nw.train(model, data, cfg))
    assert traces[0] == traces[1]


def test_regularizer_monotone_in_weight(rng):
    data = _tiny_data(rng, n=20)
    norms = []
    for reg_w in (1e-4, 1.0):
        model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=0, descent_steps=4)
        cfg = nw.TrainConfig(batch_size=20, reg_weight=reg_w, pum_iters=6, apb_iters=4,
                             seed=2)
        nw.train(model, data, cfg)
        norms.append(sum(float(np.sum(v.value**2)) for v in model.theta().values()))
    assert norms[1] < norms[0]


def test_loss_trace_csv(tmp_path, rng):
    data = _tiny_data(rng, n=20)
    model = nw.SlpDNet("relaxed", 2, 2, n_blocks=1, seed=0, descent_steps=2)
    cfg = nw.TrainConfig(batch_size=20, pum_iters=1, apb_iters=1, seed=1)
    path = tmp_path / "trace.csv"
    trace = nw.train(model, data, cfg, trace_path=path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iteration,block,loss,objective,constraint,regularizer"
    assert len(lines) == len(trace) + 1


# -- end-to-end gradients ----------------------------------------------------------------


def _training_loss(model, batch):
    fwd = model.forward(batch, training=True)
    w_loss, _ = nw.rescale_to_feasible(model.kind, batch, fwd.w)
    br = nw.lagrangian_loss(model.kind, batch, w_loss, model.multipliers(),
                            list(model.theta().values()), 1e-3)
    pen = fwd.hinge + nw.output_violation(model.kind, batch, fwd.w)
    return br.total + pen * (1.0 / batch.size)


@pytest.mark.parametrize("kind,err", [("relaxed", 0.0), ("strict", 0.0), ("robust", 0.02)])
def test_end_to_end_gradients(kind, err, rng):
    batch = _small_batch(np.random.default_rng(11), n=4, n_users=2, n_t=2, sinr=10.0,
                         err_bound=err)
    model = nw.SlpDNet(kind, 2, 2, n_blocks=1, seed=0, err_bound=err, descent_steps=4)
    for t in model.params.values():
        t.zero_grad()
    total = _training_loss(model, batch)
    total.backward()
    idx_rng = np.random.default_rng(1)
    worst = 0.0
    for name, tensor in model.params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        flat = tensor.value.ravel()
        idxs = (range(flat.size) if flat.size <= 24
                else idx_rng.choice(flat.size, 24, replace=False))
        for i in idxs:
            h = 1e-6 * max(1.0, abs(flat[i]))
            old = flat[i]
            flat[i] = old + h
            fp = float(_training_loss(model, batch).value)
            flat[i] = old - h
            fm = float(_training_loss(model, batch).value)
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            rel = abs(fd - grad.ravel()[i]) / max(1.0, abs(fd), abs(grad.ravel()[i]))
            worst = max(worst, rel)
    assert worst < 1e-4


# -- checkpoints --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = nw.SlpDNet("relaxed", 3, 2, n_blocks=2, seed=8, descent_steps=6)
    model.bn_states["apb.bn1"].running_mean += 0.5
    path = tmp_path / "m.ckpt"
    nw.save_checkpoint(model, path)
    back = nw.load_checkpoint(path)
    assert back.kind == "relaxed" and back.n_t == 3 and back.n_users == 2
    assert back.descent_steps == 6
    for k, v in model.params.items():
        assert np.array_equal(back.params[k].value, v.value), k
    assert np.array_equal(back.bn_states["apb.bn1"].running_mean,
                          model.bn_states["apb.bn1"].running_mean)
    # byte-identical re-save
    path2 = tmp_path / "m2.ckpt"
    nw.save_checkpoint(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError):
        nw.load_checkpoint(path)


# -- inference vs the optimization baseline ------------------------------------------------


def test_infer_rescale_off_reports_raw(rng):
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=1)
    batch = _small_batch(rng, n=4, sinr=64.0)
    rep = nw.infer(model, batch, rescale=False)
    assert np.array_equal(rep.w, rep.w_scaled)
    assert np.all(rep.scale == 1.0)
    rep2 = nw.infer(model, batch, rescale=True)
    assert np.all(rep2.scale >= 1.0)
    assert np.allclose(rep2.w_scaled, rep2.w * rep2.scale[:, None])
