"""Benchmark harness: experiment sweeps, timing, and CSV emission.

Every sweep is reproducible bit-for-bit from (config, seeds, checkpoints), except
the wall-time columns. dB conversion happens exactly once per grid point:
Gamma_linear = 10 ** (Gamma_dB / 10).
"""

import csv
import math
import statistics
import time

import numpy as np

from .config import as_list
from .model import ModulationSpec, gen_channels, make_instance, random_symbols
from .network import batch_from_instances, infer, load_checkpoint
from .solvers import SolverOptions, solve_blp, solve_slp

CSV_FIELDS = [
    "scheme",
    "grid_param_name",
    "grid_value",
    "mean_power_db",
    "mean_power_linear",
    "feasibility_rate",
    "mean_residual",
    "time_per_symbol_s",
    "n_samples",
    "seed",
]

SOLVER_SCHEMES = ("blp", "slp_strict", "slp_relaxed", "slp_robust")
LEARNED_SCHEMES = ("slp_dnet_relaxed", "slp_dnet_strict", "robust_slp_dnet")


class MissingCheckpointError(RuntimeError):
    def __init__(self, scheme):
        super().__init__(f"scheme {scheme!r} needs a trained checkpoint (none configured)")
        self.scheme = scheme


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(linear):
    return 10.0 * np.log10(linear)


def _solver_options(cfg):
    return SolverOptions(
        eps=cfg["solver.eps"],
        barrier_decrease=cfg["solver.barrier_decrease"],
        max_outer=cfg["solver.max_outer"],
    )


def _test_set(cfg, n, seed, n_users=None, n_t=None):
    """Deterministic (channels, symbols, modulation) evaluation set."""
    modulation = ModulationSpec(cfg["model.modulation_order"])
    n_users = n_users or cfg["model.n_users"]
    n_t = n_t or cfg["model.n_t"]
    channels = gen_channels(n, n_users, n_t, seed)
    rng = np.random.default_rng(seed + 1)
    symbols = random_symbols(rng, n, n_users, modulation)
    return channels, symbols, modulation


def _load_model(cfg, scheme):
    key = f"checkpoint.{scheme}"
    path = cfg.get(key, "")
    if not path:
        raise MissingCheckpointError(scheme)
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise MissingCheckpointError(scheme) from exc


def _row(scheme, param, value, powers, feasible, residuals, elapsed, n, seed):
    n_feasible = int(np.sum(feasible))
    rate = n_feasible / len(feasible) if len(feasible) else 0.0
    if n_feasible:
        mean_lin = float(np.mean(np.asarray(powers)[np.asarray(feasible, bool)]))
        mean_db = float(linear_to_db(mean_lin))
        mean_res = float(np.mean(np.asarray(residuals)[np.asarray(feasible, bool)]))
    else:
        mean_lin = mean_db = mean_res = None
    return {
        "scheme": scheme,
        "grid_param_name": param,
        "grid_value": value,
        "mean_power_db": mean_db,
        "mean_power_linear": mean_lin,
        "feasibility_rate": rate,
        "mean_residual": mean_res,
        "time_per_symbol_s": elapsed / max(len(feasible), 1),
        "n_samples": n,
        "seed": seed,
    }


def _run_solver_scheme(scheme, instances, opts, err_bound=0.0):
    powers, feasible, residuals = [], [], []
    start = time.perf_counter()
    for inst in instances:
        if scheme == "blp":
            h = inst.lambdas[:, : inst.n_t] + 1j * inst.lambdas[:, inst.n_t :]
            report = solve_blp(h, inst.targets, inst.noise_power, opts)
        elif scheme == "slp_strict":
            report = solve_slp("strict", inst, opts)
        elif scheme == "slp_relaxed":
            report = solve_slp("relaxed", inst, opts)
        elif scheme == "slp_robust":
            report = solve_slp("robust", inst, opts, err_bound=err_bound)
        else:
            raise ValueError(f"unknown solver scheme {scheme!r}")
        ok = report.converged
        feasible.append(ok)
        powers.append(report.power if ok else math.nan)
        residuals.append(float(np.min(report.residuals)) if ok else math.nan)
    return powers, feasible, residuals, time.perf_counter() - start


def _run_learned_scheme(model, instances, err_bound=0.0):
    batch = batch_from_instances(instances, err_bound=err_bound)
    start = time.perf_counter()
    report = infer(model, batch, rescale=True)
    elapsed = time.perf_counter() - start
    powers = report.power_scaled
    feasible = report.direction_ok
    res = report.residuals_scaled.reshape(batch.size, -1).min(axis=1)
    return list(powers), list(feasible), list(res), elapsed


def _blp_channel(scheme, inst):
    return inst.lambdas[:, : inst.n_t] + 1j * inst.lambdas[:, inst.n_t :]


def run_power_vs_sinr(cfg, schemes=None):
    """Mean transmit power per scheme over an SINR grid (fixed test set)."""
    schemes = schemes or as_list(cfg["sweep.schemes"])
    seed = cfg["seed"]
    n = cfg["sweep.samples"]
    channels, symbols, modulation = _test_set(cfg, n, seed)
    opts = _solver_options(cfg)
    models = {s: _load_model(cfg, s) for s in schemes if s in LEARNED_SCHEMES}
    rows = []
    for gamma_db in as_list(cfg["sweep.sinr_grid_db"]):
        gamma = float(db_to_linear(gamma_db))
        instances = [
            make_instance(channels.samples[j], symbols[j], gamma, cfg["model.noise_power"],
                          modulation)
            for j in range(n)
        ]
        for scheme in schemes:
            if scheme in LEARNED_SCHEMES:
                out = _run_learned_scheme(models[scheme], instances)
            else:
                out = _run_solver_scheme(scheme, instances, opts)
            rows.append(_row(scheme, "sinr_db", gamma_db, *out, n, seed))
    return _sorted_rows(rows)


def run_power_vs_errorbound(cfg, schemes=None):
    """Mean transmit power per scheme over a CSI error-bound grid at fixed SINR."""
    schemes = schemes or as_list(cfg["sweep.errorbound_schemes"])
    seed = cfg["seed"]
    n = cfg["sweep.samples"]
    channels, symbols, modulation = _test_set(cfg, n, seed)
    opts = _solver_options(cfg)
    gamma = float(db_to_linear(cfg["sweep.robust_sinr_db"]))
    instances = [
        make_instance(channels.samples[j], symbols[j], gamma, cfg["model.noise_power"],
                      modulation)
        for j in range(n)
    ]
    models = {s: _load_model(cfg, s) for s in schemes if s in LEARNED_SCHEMES}
    rows = []
    for bound_sq in as_list(cfg["sweep.errorbound_sq_grid"]):
        err = math.sqrt(bound_sq)
        for scheme in schemes:
            if scheme in LEARNED_SCHEMES:
                out = _run_learned_scheme(models[scheme], instances, err_bound=err)
            elif scheme == "slp_robust":
                out = _run_solver_scheme(scheme, instances, opts, err_bound=err)
            else:
                out = _run_solver_scheme(scheme, instances, opts)
            rows.append(_row(scheme, "errorbound_sq", bound_sq, *out, n, seed))
    return _sorted_rows(rows)


def run_timing(cfg, schemes=("blp", "slp_relaxed", "slp_dnet_relaxed")):
    """Median wall time per symbol across user counts (N_t fixed).

    Learned schemes use a freshly seeded model per size: inference cost does not
    depend on the trained values. Warmup runs are excluded from measurement.
    """
    from .network import SlpDNet

    seed = cfg["seed"]
    n = cfg["bench.timing_samples"]
    n_t = cfg["model.n_t"]
    warmup = cfg["bench.warmup"]
    opts = _solver_options(cfg)
    gamma = float(db_to_linear(cfg["sweep.robust_sinr_db"]))
    rows = []
    for n_users in as_list(cfg["bench.timing_users"]):
        channels, symbols, modulation = _test_set(cfg, n, seed, n_users=n_users)
        instances = [
            make_instance(channels.samples[j], symbols[j], gamma, cfg["model.noise_power"],
                          modulation)
            for j in range(n)
        ]
        for scheme in schemes:
            if scheme == "blp" and n_users > n_t:
                rows.append(_row(scheme, "n_users", n_users, [], [], [], 0.0, n, seed))
                continue
            if scheme in LEARNED_SCHEMES:
                kind = "robust" if scheme == "robust_slp_dnet" else scheme.split("_")[-1]
                model = SlpDNet(kind, n_t, n_users, cfg["train.blocks"], modulation,
                                cfg["model.noise_power"], seed=seed)
                batch = batch_from_instances(instances)
                for _ in range(warmup):
                    infer(model, batch)
                times = []
                for _ in range(5):
                    t0 = time.perf_counter()
                    infer(model, batch)
                    times.append((time.perf_counter() - t0) / n)
                per_symbol = statistics.median(times)
                powers = feasible = residuals = [math.nan] * 0
                rows.append(
                    _row(scheme, "n_users", n_users, [0.0] * n, [True] * n, [0.0] * n,
                         per_symbol * n, n, seed))
                continue
            for inst in instances[:warmup]:
                _run_solver_scheme(scheme, [inst], opts)
            times = []
            powers, feasible, residuals = [], [], []
            for inst in instances:
                t0 = time.perf_counter()
                p, f, r, _ = _run_solver_scheme(scheme, [inst], opts)
                times.append(time.perf_counter() - t0)
                powers += p
                feasible += f
                residuals += r
            per_symbol = statistics.median(times)
            rows.append(
                _row(scheme, "n_users", n_users, powers, feasible, residuals,
                     per_symbol * n, n, seed))
    return _sorted_rows(rows)


def _sorted_rows(rows):
    return sorted(rows, key=lambda r: (r["scheme"], float(r["grid_value"])))


def emit_csv(rows, path):
    """Write sweep rows in the fixed column schema; floats keep full precision."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, quoting=csv.QUOTE_MINIMAL)
            writer.writeheader()
            for row in rows:
                out = {}
                for key in CSV_FIELDS:
                    val = row.get(key)
                    out[key] = repr(val) if isinstance(val, float) else (
                        "" if val is None else val)
                writer.writerow(out)
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
