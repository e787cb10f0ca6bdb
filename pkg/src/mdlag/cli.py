"""Command-line surface: simulate datasets, fit models, score held-out
predictions, benchmark the fitting methods, sweep estimation bias over trial
length or signal strength, and refine a spectral fit with exact time-domain
iterations.

Every command writes its outputs under ``--out`` and prints one line per
artifact. Exit codes: 0 success, 2 invalid configuration, 3 numerical
failure, 4 refused by a resource guard. The ``MDLAG_THREADS`` environment
variable caps the threads the linear-algebra backends may use;
``--deterministic`` pins them to one so repeated runs produce bit-identical
numbers (the fits are already seeded).
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset, save_dataset
from .evaluate import leave_unit_out_r2, predict_lgo, r2_lgo
from .fit_freq import fit_frequency
from .fit_inducing import fit_inducing
from .fit_time import fit_time
from .numerics import ConfigError, NumericalError, ResourceGuardError
from .state import load_checkpoint, save_checkpoint
from .synthesis import generate_scenario, ground_truth_state, make_scenario

_METHODS = ("time", "inducing", "frequency")
_THREAD_LIMITER = None  # keeps the threadpoolctl cap alive for the process


def _cap_threads(n):
    global _THREAD_LIMITER
    from threadpoolctl import threadpool_limits

    try:
        n = int(n)
    except (TypeError, ValueError):
        raise ConfigError(f"thread cap must be an integer, got {n!r}")
    _THREAD_LIMITER = threadpool_limits(limits=max(1, n))


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate


def _scenario_overrides(args):
    over = {}
    for key in ("N", "T", "M", "snr", "route"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return over


def cmd_simulate(args):
    scenario = make_scenario(args.scenario.lower(), **_scenario_overrides(args))
    ds = generate_scenario(scenario, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = save_dataset(out / "dataset", ds)
    truth = save_checkpoint(out / "truth", ground_truth_state(ds))
    print(
        f"wrote {base}.json/.bin  "
        f"(N={ds.N}, q={ds.q}, T={ds.T}, M={ds.groups.M}, seed={ds.seed})"
    )
    print(f"wrote {truth}.json/.bin  (generating parameters)")
    return 0


# ---------------------------------------------------------------------------
# fit


def _run_fit(ds, method, p, args, seed=None, taper=None):
    common = dict(
        max_iter=args.max_iter,
        tol=args.tol,
        seed=args.seed if seed is None else seed,
    )
    if method == "time":
        return fit_time(ds, p, force=args.force, **common)
    if method == "inducing":
        return fit_inducing(ds, p, T_ind=args.inducing_points, **common)
    return fit_frequency(ds, p, taper=args.taper if taper is None else taper, **common)


def _save_fit(out, state, report, extras=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = save_checkpoint(out / "model", state)
    payload = report.to_dict()
    if extras:
        payload.update(extras)
    _write_json(out / "report.json", payload)
    return base


def cmd_fit(args):
    if args.inducing_points is not None and args.method != "inducing":
        raise ConfigError("--inducing-points applies only to --method inducing")
    if args.taper and args.method != "frequency":
        raise ConfigError("--taper applies only to --method frequency")
    if args.force and args.method != "time":
        raise ConfigError("--force applies only to --method time")
    ds = load_dataset(args.data)
    state, report = _run_fit(ds, args.method, args.latents, args)
    base = _save_fit(args.out, state, report)
    final = report.elbo[-1] if len(report.elbo) else float("nan")
    print(
        f"{args.method}: {report.n_iter} iterations "
        f"({'converged' if report.converged else 'hit max-iter'}), "
        f"bound {final:.6g}, {report.p_hat} significant latents"
    )
    print(f"wrote {base}.json/.bin and {Path(args.out) / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args):
    state = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    if tuple(ds.groups.sizes) != tuple(state.groups.sizes):
        raise ConfigError(
            f"dataset groups {ds.groups.sizes} do not match the model's "
            f"{state.groups.sizes}"
        )
    rows = []
    if args.mode == "lgo":
        if args.edge_trim is not None:
            raise ConfigError("--edge-trim applies only to --mode luo")
        if args.held_out is None:
            targets = range(state.groups.M)
        else:
            if not 0 <= args.held_out < state.groups.M:
                raise ConfigError(
                    f"--held-out must be in [0, {state.groups.M - 1}]"
                )
            targets = [args.held_out]
        sse_all = 0.0
        sst_all = 0.0
        for m in targets:
            yhat = predict_lgo(state, ds.ys, m, method=args.route)
            y = ds.ys[:, ds.groups.slice(m), :]
            sse = float(np.sum((y - yhat) ** 2))
            sst = float(np.sum((y - y.mean(axis=(0, 2), keepdims=True)) ** 2))
            rows.append({"mode": "lgo", "scope": f"group{m}", "r2": 1.0 - sse / sst})
            sse_all += sse
            sst_all += sst
        pooled = 1.0 - sse_all / sst_all
        rows.append({"mode": "lgo", "scope": "pooled", "r2": pooled})
    else:
        if args.held_out is not None:
            raise ConfigError("--held-out applies only to --mode lgo")
        if args.route is not None:
            raise ConfigError("--mode luo always predicts through the spectral route")
        pooled, per_unit = leave_unit_out_r2(state, ds.ys, edge_trim=args.edge_trim)
        rows.extend(
            {"mode": "luo", "scope": f"unit{r}", "r2": float(v)}
            for r, v in enumerate(per_unit)
        )
        rows.append({"mode": "luo", "scope": "pooled", "r2": pooled})
    outp = Path(args.out)
    outp.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(outp, ["mode", "scope", "r2"], rows)
    print(f"{args.mode} pooled R^2 = {pooled:.4f}; wrote {outp}")
    return 0


# ---------------------------------------------------------------------------
# bench

BENCH_FIELDS = (
    "grid",
    "size",
    "method",
    "seed",
    "mean_iter_ms",
    "iters_to_converge",
    "total_s",
    "r2",
)


def bench_slopes(rows):
    """Log-log slope of mean per-iteration time against problem size.

    Seeds are averaged within each size first; rows is any iterable of dicts
    with ``method``, ``size``, and ``mean_iter_ms`` keys, e.g. the raw CSV
    read back, so the summary can always be recomputed from the raw table.
    """
    out = []
    for method in sorted({str(r["method"]) for r in rows}):
        per_size = {}
        for r in rows:
            if str(r["method"]) == method:
                per_size.setdefault(int(r["size"]), []).append(float(r["mean_iter_ms"]))
        sizes = sorted(per_size)
        means = [float(np.mean(per_size[s])) for s in sizes]
        slope = float(np.polyfit(np.log(sizes), np.log(means), 1)[0])
        out.append({"method": method, "n_sizes": len(sizes), "slope": slope})
    return out


def _bench_scenario(args, size):
    if args.grid == "T":
        over = {"T": size}
        if args.N is not None:
            over["N"] = args.N
        return make_scenario("scaling_t", **over)
    over = {"M": size}
    if args.N is not None:
        over["N"] = args.N
    if args.T is not None:
        over["T"] = args.T
    return make_scenario("scaling_m", **over)


def _bench_one(args, size, method, seed):
    scenario = _bench_scenario(args, size)
    ds = generate_scenario(scenario, seed=seed)
    test = generate_scenario(scenario, seed=seed + 1000)
    state, report = _run_fit(ds, method, args.latents, args, seed=seed)
    row = {
        "grid": args.grid,
        "size": size,
        "method": method,
        "seed": seed,
        "mean_iter_ms": 1000.0 * float(np.mean(report.iter_seconds)),
        "iters_to_converge": report.n_iter,
        "total_s": float(np.sum(report.iter_seconds)),
        "r2": r2_lgo(state, test.ys),
    }
    print(
        f"  {args.grid}={size} {method} seed={seed}: "
        f"{row['mean_iter_ms']:.2f} ms/iter x {row['iters_to_converge']} "
        f"({row['total_s']:.1f} s), R^2 {row['r2']:.3f}"
    )
    return row


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    methods = [m.strip() for m in args.methods.split(",")]
    for m in methods:
        if m not in _METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {_METHODS}")
    jobs = [
        (size, method, seed)
        for size in sizes
        for method in methods
        for seed in range(args.seeds)
    ]
    if args.parallel:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor() as pool:
            rows = list(pool.map(lambda job: _bench_one(args, *job), jobs))
    else:
        rows = [_bench_one(args, *job) for job in jobs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bench_raw.csv", BENCH_FIELDS, rows)
    slopes = bench_slopes(rows)
    _write_csv(out / "bench_slopes.csv", ("method", "n_sizes", "slope"), slopes)
    _write_json(
        out / "bench_meta.json",
        {
            "grid": args.grid,
            "sizes": sizes,
            "methods": methods,
            "seeds": args.seeds,
            "max_iter": args.max_iter,
            "parallel": bool(args.parallel),
            # concurrent runs share cores, so their timings interfere
            "timing_isolated": not args.parallel,
        },
    )
    for s in slopes:
        print(f"{args.grid}-scaling slope [{s['method']}]: {s['slope']:.3f}")
    print(f"wrote {out}/bench_raw.csv, bench_slopes.csv, bench_meta.json")
    return 0


# ---------------------------------------------------------------------------
# bias-sweep

SWEEP_FIELDS = (
    "scenario",
    "grid",
    "value",
    "seed",
    "method",
    "taper",
    "latent",
    "tau_hat",
    "delay_hat",
    "nu_max",
    "p_hat",
)


def cmd_bias_sweep(args):
    if args.grid == "T":
        values = [int(v) for v in args.values.split(",")]
    else:
        values = [float(v) for v in args.values.split(",")]
    p_fit = args.latents
    if p_fit is None:
        p_fit = 8 if args.scenario == "model_selection" else 1
    tapers = [False, True] if args.taper else [False]
    methods = ["frequency"] + (["time"] if args.include_time else [])

    rows = []
    for value in values:
        over = {"T": value} if args.grid == "T" else {"snr": value}
        if args.N is not None:
            over["N"] = args.N
        scenario = make_scenario(args.scenario, **over)
        for seed in range(args.seeds):
            ds = generate_scenario(scenario, seed=seed)
            for method in methods:
                for taper in tapers:
                    if method == "time" and taper:
                        continue  # tapering is a spectral-bias mitigation
                    state, report = _run_fit(
                        ds, method, p_fit, args, seed=seed, taper=taper
                    )
                    nu_max = report.nu.max(axis=0)
                    for j in range(p_fit):
                        delay = (
                            float(state.gp.delays[j, 1])
                            if state.groups.M > 1
                            else 0.0
                        )
                        rows.append(
                            {
                                "scenario": args.scenario,
                                "grid": args.grid,
                                "value": value,
                                "seed": seed,
                                "method": method,
                                "taper": taper,
                                "latent": j,
                                "tau_hat": float(state.gp.taus[j]),
                                "delay_hat": delay,
                                "nu_max": float(nu_max[j]),
                                "p_hat": report.p_hat,
                            }
                        )
                    print(
                        f"  {args.grid}={value} seed={seed} {method}"
                        f"{' taper' if taper else ''}: "
                        f"tau {np.array2string(state.gp.taus, precision=1)}, "
                        f"p_hat={report.p_hat}"
                    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bias_sweep.csv", SWEEP_FIELDS, rows)
    print(f"wrote {out}/bias_sweep.csv ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# finetune


def cmd_finetune(args):
    state = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    if tuple(ds.groups.sizes) != tuple(state.groups.sizes):
        raise ConfigError(
            f"dataset groups {ds.groups.sizes} do not match the checkpoint's "
            f"{state.groups.sizes}"
        )
    tau0 = state.gp.taus.copy()
    delay0 = state.gp.delays.copy()
    refined, report = fit_time(
        ds,
        state.p,
        max_iter=args.iters,
        tol=args.tol,
        init_state=(state.gp, state.post),
        force=args.force,
    )
    refined.extras = {"refined_from": state.method, "iters": int(args.iters)}
    base = _save_fit(
        args.out,
        refined,
        report,
        extras={
            "delta_tau": (refined.gp.taus - tau0).tolist(),
            "delta_delay": (refined.gp.delays - delay0).tolist(),
        },
    )
    dtau = float(np.max(np.abs(refined.gp.taus - tau0)))
    print(
        f"refined a {state.method} fit with {report.n_iter} exact iterations; "
        f"max |dtau| = {dtau:.4g} ms"
    )
    print(f"wrote {base}.json/.bin and {Path(args.out) / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_fit_options(sub, with_method=True):
    if with_method:
        sub.add_argument("--method", required=True, choices=_METHODS)
        sub.add_argument("--latents", required=True, type=int,
                         help="number of latents to fit")
    sub.add_argument("--max-iter", type=int, default=5000)
    sub.add_argument("--tol", type=float, default=1e-8,
                     help="relative bound-improvement stopping threshold")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--deterministic", action="store_true",
                     help="pin linear-algebra backends to one thread")
    sub.add_argument("--force", action="store_true",
                     help="override the exact-fitter size guard")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mdlag",
        description="Multi-group delayed-latent factor models: simulate, "
        "fit, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a dataset from a named scenario")
    sim.add_argument("--scenario", required=True,
                     help="demo | scaling_t | scaling_m | model_selection")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--N", type=int, help="override trial count")
    sim.add_argument("--T", type=int, help="override time bins per trial")
    sim.add_argument("--M", type=int, help="override group count (scaling_m)")
    sim.add_argument("--snr", type=float, help="override signal-to-noise ratio")
    sim.add_argument("--route", choices=["time", "freq"],
                     help="override the latent sampler")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit a model to a dataset")
    fit.add_argument("--data", required=True, help="dataset base path")
    _add_fit_options(fit)
    fit.add_argument("--inducing-points", type=int,
                     help="grid size for --method inducing (default T/2)")
    fit.add_argument("--taper", action="store_true",
                     help="taper trials before the spectral fit")
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="score held-out predictions")
    pred.add_argument("--model", required=True, help="checkpoint base path")
    pred.add_argument("--data", required=True, help="dataset base path")
    pred.add_argument("--mode", choices=["lgo", "luo"], default="lgo",
                      help="leave-group-out or leave-unit-out")
    pred.add_argument("--held-out", type=int,
                      help="restrict lgo to one target group")
    pred.add_argument("--edge-trim", type=int,
                      help="luo: bins dropped from each trial edge")
    pred.add_argument("--route", choices=_METHODS,
                      help="override the model's own prediction route")
    pred.add_argument("--out", required=True, help="CSV path")
    pred.set_defaults(func=cmd_predict)

    bench = sub.add_parser("bench", help="time the fitting methods over a size grid")
    bench.add_argument("--grid", required=True, choices=["T", "M"])
    bench.add_argument("--sizes", required=True,
                       help="comma-separated grid, e.g. 32,64,128")
    bench.add_argument("--methods", required=True,
                       help="comma-separated subset of time,inducing,frequency")
    bench.add_argument("--seeds", type=int, default=1, help="seeds per grid point")
    bench.add_argument("--latents", type=int, default=1)
    bench.add_argument("--N", type=int, help="override trial count")
    bench.add_argument("--T", type=int, help="trial length for --grid M")
    bench.add_argument("--inducing-points", type=int)
    bench.add_argument("--max-iter", type=int, default=100)
    bench.add_argument("--tol", type=float, default=1e-8)
    bench.add_argument("--deterministic", action="store_true")
    bench.add_argument("--force", action="store_true",
                       help="let the exact method run past its size guard")
    bench.add_argument("--parallel", action="store_true",
                       help="run grid points concurrently (timings interfere)")
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=cmd_bench, taper=False, seed=0)

    sweep = sub.add_parser("bias-sweep",
                           help="sweep trial length or SNR; record kernel "
                                "estimates and latent counts")
    sweep.add_argument("--scenario", default="scaling_t",
                       choices=["scaling_t", "model_selection"])
    sweep.add_argument("--grid", default="T", choices=["T", "snr"])
    sweep.add_argument("--values", required=True, help="comma-separated grid")
    sweep.add_argument("--seeds", type=int, default=10)
    sweep.add_argument("--latents", type=int,
                       help="latents to fit (default: 1, or 8 for model_selection)")
    sweep.add_argument("--N", type=int, help="override trial count")
    sweep.add_argument("--taper", action="store_true",
                       help="also fit tapered variants for comparison")
    sweep.add_argument("--include-time", action="store_true",
                       help="add exact time-domain fits for reference")
    sweep.add_argument("--max-iter", type=int, default=5000)
    sweep.add_argument("--tol", type=float, default=1e-8)
    sweep.add_argument("--deterministic", action="store_true")
    sweep.add_argument("--force", action="store_true")
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(func=cmd_bias_sweep, inducing_points=None, seed=0)

    tune = sub.add_parser("finetune",
                          help="continue a checkpoint with exact time-domain "
                               "iterations")
    tune.add_argument("--model", required=True, help="checkpoint base path")
    tune.add_argument("--data", required=True, help="dataset base path")
    tune.add_argument("--iters", required=True, type=int)
    tune.add_argument("--tol", type=float, default=1e-8)
    tune.add_argument("--deterministic", action="store_true")
    tune.add_argument("--force", action="store_true")
    tune.add_argument("--out", required=True)
    tune.set_defaults(func=cmd_finetune)

    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if getattr(args, "deterministic", False):
            _cap_threads(1)
        elif os.environ.get("MDLAG_THREADS"):
            _cap_threads(os.environ["MDLAG_THREADS"])
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ResourceGuardError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
