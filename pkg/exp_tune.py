"""Scratch experiment: training-quality probes for the unfolded net. Not shipped."""
import sys
import time

import numpy as np

from slpnet import model as md, network as nw, solvers as sv

mod = md.QPSK


def make_eval(nt=150, seeds=(777, 778)):
    tch = md.gen_channels(nt, 4, 4, seeds[0])
    tsy = md.random_symbols(np.random.default_rng(seeds[1]), nt, 4, mod)
    tdata = md.build_dataset(tch, tsy)
    evals = {}
    for gdb in (10.0, 20.0, 30.0):
        g = 10 ** (gdb / 10)
        batch = nw.batch_from_tensor(tdata, np.full(nt, g), 1.0, mod)
        popt = np.array([
            sv.solve_slp("relaxed", md.make_instance(tch.samples[j], tsy[j], g, 1.0, mod)).power
            for j in range(nt)])
        evals[gdb] = (batch, popt)
    return evals


def probe(model, evals, label, use_apb=True):
    out = []
    for gdb, (batch, popt) in evals.items():
        fwd = model.forward(batch, use_apb=use_apb)
        w = fwd.w.value
        scale, ok = nw._rescale_factors("relaxed", batch, w)
        p = np.sum((w * scale[:, None]) ** 2, axis=1)
        ratios = p[ok] / popt[ok] if ok.any() else np.array([np.nan])
        mean_ratio = np.mean(p[ok]) / np.mean(popt[ok]) if ok.any() else np.nan
        out.append(f"{gdb:.0f}dB ok={ok.mean():.2f} meanP-ratio={mean_ratio:.3f} "
                   f"med={np.median(ratios):.3f}")
    print(f"  {label}: " + " | ".join(out))


def run(tag, n=2000, pum_iters=8, apb_iters=6, seed=0, **cfg_kw):
    channels = md.gen_channels(n, 4, 4, 42)
    syms = md.random_symbols(np.random.default_rng(43), n, 4, mod)
    data = md.build_dataset(channels, syms)
    model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=seed)
    evals = make_eval()
    t0 = time.perf_counter()
    cfg = nw.TrainConfig(batch_size=200, pum_iters=pum_iters, apb_iters=apb_iters,
                         seed=seed, **cfg_kw)
    trace = nw.train(model, data, cfg)
    print(f"{tag}: {len(trace)} steps {time.perf_counter()-t0:.0f}s "
          f"loss {trace[0]['loss']:.3g} -> {trace[-1]['loss']:.3g}")
    probe(model, evals, "PUM", use_apb=False)
    probe(model, evals, "APB", use_apb=True)
    return model, evals


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "base"
    if which == "base":
        run("base")
    elif which == "hinge10":
        run("hinge10", hinge_weight=10.0)
    elif which == "untrained":
        model = nw.SlpDNet("relaxed", 4, 4, n_blocks=2, seed=0)
        evals = make_eval()
        probe(model, evals, "w0+PUM untrained", use_apb=False)
        probe(model, evals, "APB untrained", use_apb=True)
