"""Command-line harness.

Exit codes: 0 success, 2 configuration error, 3 run produced only infeasible rows,
4 I/O failure.
"""

import argparse
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _build_parser():
    parser = argparse.ArgumentParser(prog="slpnet", description=__doc__)
    parser.add_argument("--config", help="key=value config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="output path")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="generate a channel dataset file")
    p.add_argument("--n", type=int, default=None, help="sample count (default train.samples)")
    p.add_argument("--csv", action="store_true", help="also export a CSV alongside")
    p = sub.add_parser("train", help="train an unfolded model on a dataset file")
    p.add_argument("--kind", choices=("relaxed", "strict", "robust"), default="relaxed")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--trace", default=None, help="loss trace CSV path")
    p = sub.add_parser("solve", help="solve one random instance with a baseline solver")
    p.add_argument("--kind", choices=("relaxed", "strict", "robust", "blp"), default="relaxed")
    p.add_argument("--sinr-db", type=float, default=20.0)
    p = sub.add_parser("infer", help="run a trained model over a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sinr-db", type=float, default=20.0)
    p.add_argument("--rescale", action="store_true", help="apply the feasibility rescale")
    sub.add_parser("sweep-sinr", help="power vs SINR sweep")
    sub.add_parser("sweep-errorbound", help="power vs CSI error bound sweep")
    sub.add_parser("bench-time", help="wall time per symbol across user counts")
    p = sub.add_parser("count-ops", help="closed-form operation count for a scheme")
    p.add_argument("--scheme", required=True)
    p.add_argument("--n-t", type=int, default=4)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--eps", type=float, default=0.01)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    from .config import ConfigError, load_config

    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, cfg)
    except (IOError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def _dispatch(args, cfg):
    import numpy as np

    from . import bench, model, network, solvers
    from .config import ConfigError

    seed = cfg["seed"]
    modulation = model.ModulationSpec(cfg["model.modulation_order"])
    if args.command == "gen-data":
        n = args.n or cfg["train.samples"]
        out = args.out or "dataset.slpd"
        channels = model.gen_channels(n, cfg["model.n_users"], cfg["model.n_t"], seed)
        rng = np.random.default_rng(seed + 1)
        symbols = model.random_symbols(rng, n, cfg["model.n_users"], modulation)
        data = model.build_dataset(channels, symbols)
        model.write_dataset(out, data, seed)
        if args.csv:
            model.export_dataset_csv(out + ".csv", data)
        print(f"wrote {n} samples to {out}")
        return EXIT_OK
    if args.command == "train":
        data, meta = model.read_dataset(args.data)
        net = network.SlpDNet(
            args.kind, meta["n_t"], meta["n_users"], cfg["train.blocks"], modulation,
            cfg["model.noise_power"],
            err_bound=np.sqrt(cfg["robust.err_bound_sq"]) if args.kind == "robust" else 0.0,
            seed=seed)
        tc = network.TrainConfig(
            batch_size=cfg["train.batch_size"], learning_rate=cfg["train.learning_rate"],
            decay=cfg["train.decay"], reg_weight=cfg["train.reg_weight"],
            pum_iters=cfg["train.pum_iters"], apb_iters=cfg["train.apb_iters"],
            sinr_low_db=cfg["train.sinr_low_db"], sinr_high_db=cfg["train.sinr_high_db"],
            hinge_weight=cfg["train.hinge_weight"], seed=seed)
        trace = network.train(net, data, tc, trace_path=args.trace)
        out = args.out or f"slp_dnet_{args.kind}.ckpt"
        network.save_checkpoint(net, out)
        print(f"trained {len(trace)} steps; final loss {trace[-1]['loss']:.6g}; saved {out}")
        return EXIT_OK
    if args.command == "solve":
        channels = model.gen_channels(1, cfg["model.n_users"], cfg["model.n_t"], seed)
        rng = np.random.default_rng(seed + 1)
        symbols = model.random_symbols(rng, 1, cfg["model.n_users"], modulation)[0]
        gamma = float(bench.db_to_linear(args.sinr_db))
        if args.kind == "blp":
            report = solvers.solve_blp(
                channels.samples[0], gamma, cfg["model.noise_power"],
                bench._solver_options(cfg))
        else:
            inst = model.make_instance(
                channels.samples[0], symbols, gamma, cfg["model.noise_power"], modulation)
            err = np.sqrt(cfg["robust.err_bound_sq"]) if args.kind == "robust" else 0.0
            report = solvers.solve_slp(args.kind, inst, bench._solver_options(cfg), err_bound=err)
        print(f"status={report.status} power={report.power:.6g} "
              f"iterations={report.iterations} time={report.wall_time:.4g}s")
        return EXIT_OK if report.converged else EXIT_INFEASIBLE
    if args.command == "infer":
        net = network.load_checkpoint(args.checkpoint)
        data, _ = model.read_dataset(args.data)
        gamma = float(bench.db_to_linear(args.sinr_db))
        batch = network.batch_from_tensor(
            data, np.full(data.shape[0], gamma), cfg["model.noise_power"], modulation,
            err_bound=net.err_bound)
        report = network.infer(net, batch, rescale=args.rescale)
        mean_raw = float(np.mean(report.power_raw))
        ok = report.direction_ok
        mean_scaled = float(np.mean(report.power_scaled[ok])) if np.any(ok) else float("nan")
        print(f"samples={data.shape[0]} feasible_direction={ok.mean():.3f} "
              f"mean_power_raw={mean_raw:.6g} mean_power_rescaled={mean_scaled:.6g}")
        if args.out:
            np.savetxt(args.out, np.column_stack([report.power_raw, report.power_scaled]),
                       delimiter=",", header="power_raw,power_rescaled")
        return EXIT_OK
    if args.command in ("sweep-sinr", "sweep-errorbound", "bench-time"):
        try:
            if args.command == "sweep-sinr":
                rows = bench.run_power_vs_sinr(cfg)
            elif args.command == "sweep-errorbound":
                rows = bench.run_power_vs_errorbound(cfg)
            else:
                rows = bench.run_timing(cfg)
        except bench.MissingCheckpointError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        out = args.out or f"{args.command}.csv"
        bench.emit_csv(rows, out)
        print(f"wrote {len(rows)} rows to {out}")
        rates = [r["feasibility_rate"] for r in rows]
        if rates and all(r == 0 for r in rates):
            return EXIT_INFEASIBLE
        return EXIT_OK
    if args.command == "count-ops":
        try:
            count = solvers.complexity_count(args.scheme, args.n_t, args.k, args.eps)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{args.scheme} N_t={args.n_t} K={args.k}: {count:.6g} operations "
              f"(order n^{solvers.COMPLEXITY_ORDERS[args.scheme]})")
        return EXIT_OK
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
