"""Command-line pipeline: simulate, fit, infer, granger and report.

Each stage reads the previous stage's output directory and writes its own,
together with a ``*_manifest.json`` listing the configuration, the seeds,
library versions, stage timings and a SHA-256 digest of every output file.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure.
"""
import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, FormatError, IoError, NumericalError, ParamError
from .fit import FitResult, Hyperparams, calibrate_lambda_diag, fit, tune_lambda_cross
from .glasso import build_penalty
from .granger import GrangerConfig, granger_report
from .inference import run_inference
from .seeding import substream
from .signal import morlet_kernel, preprocess
from .simulate import (DriverConfig, PccaConfig, default_pcca_baseline, simulate_driver_dataset,
                       simulate_driver_no_coherence, simulate_pcca_dataset)
from .tensorio import (AUTO, AnalysisConfig, config_from_dict, load_config, read_dataset, read_tensor,
                       write_dataset, write_matrix_csv, write_tensor)

logger = logging.getLogger(__name__)

CONFIG_ENV = "LAGCOUPLING_CONFIG"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numba
    import scipy

    return {"lagcoupling": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _write_manifest(out, stage, outputs, config, seeds, timings, extra=None):
    doc = {
        "stage": stage,
        "config": config,
        "seeds": seeds,
        "versions": _versions(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    _write_json(Path(out) / f"{stage}_manifest.json", doc)


def _out_dir(path):
    p = Path(path)
    if not p.is_dir():
        raise IoError(f"output directory {p} does not exist")
    return p


def _csv(m, path, outputs):
    write_matrix_csv(m, path)
    outputs.append(path)


def _ldt(m, path, outputs):
    write_tensor(m, path)
    outputs.append(path)


# simulate ---------------------------------------------------------------

def cmd_simulate(args):
    out = _out_dir(args.output)
    t0 = time.perf_counter()
    if args.model in ("driver", "driver-nocoh"):
        kw = {"gamma": args.gamma, "seed": args.seed}
        if args.n_trials is not None:
            kw["n_trials"] = args.n_trials
        if args.amplitude is not None:
            kw["driver_amplitude"] = args.amplitude
        cfg = DriverConfig(**kw)
        sim = simulate_driver_dataset if args.model == "driver" else simulate_driver_no_coherence
        ds = sim(cfg, substream(args.seed, "simulate"))
    else:
        kw = {"r": args.r, "seed": args.seed}
        if args.n_trials is not None:
            kw["N"] = args.n_trials
        if args.T is not None:
            kw["T"] = args.T
        cfg = PccaConfig(**kw)
        base = default_pcca_baseline(cfg, seed=substream(args.seed, "simulate", 0))
        ds = simulate_pcca_dataset(cfg, base, substream(args.seed, "simulate", 1))
    paths = list(write_dataset(ds, out))
    _write_manifest(out, "simulate", paths, {"model": args.model, **ds.meta.get("config", {})},
                    {"root": args.seed}, {"simulate": time.perf_counter() - t0})
    print(f"wrote {ds.n_trials} trials x {ds.n_times} samples to {out}")
    return EXIT_OK


# fit --------------------------------------------------------------------

def _lambda_arg(text):
    if text == AUTO:
        return AUTO
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")
    return v


def _resolve_config(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text()) if Path(path).is_file() else None
        if doc is None:
            raise ConfigError(f"config file {path} not found")
        load_config(path)  # full validation with file context
    overrides = {
        "f0_hz": args.f0, "bandwidth_ms": args.bandwidth_ms, "decimate_factor": args.decimate,
        "d_auto": args.d_auto, "d_cross": args.d_cross, "lambda_cross": args.lambda_cross,
        "lambda_diag": args.lambda_diag, "lambda_auto": args.lambda_auto, "seed": args.seed,
        "iter_max": args.iter_max, "ths": args.ths,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(doc)


def cmd_fit(args):
    out = _out_dir(args.output)
    cfg = _resolve_config(args)
    timings = {}
    t0 = time.perf_counter()
    raw = read_dataset(args.data)
    if args.no_preprocess:
        env = raw
    else:
        env = preprocess(raw, cfg.f0_hz, cfg.bandwidth_ms, cfg.decimate_factor)
    timings["preprocess"] = time.perf_counter() - t0
    T = env.n_times
    cfg.check_times(T)

    lambda_diag = cfg.lambda_diag
    if lambda_diag == AUTO:
        t0 = time.perf_counter()
        if args.no_preprocess:
            raise ConfigError("lambda_diag 'auto' needs the filter, so it cannot be combined with --no-preprocess")
        kernel = morlet_kernel(cfg.f0_hz, cfg.bandwidth_ms, raw.sample_rate_hz)
        lambda_diag = calibrate_lambda_diag(env, kernel, step=cfg.decimate_factor)
        timings["calibrate_lambda_diag"] = time.perf_counter() - t0
    seeds = {"root": cfg.seed}
    hp = Hyperparams(build_penalty(T, 1.0, cfg.lambda_auto, lambda_diag, cfg.d_cross, cfg.d_auto),
                     iter_max=cfg.iter_max, ths=cfg.ths, seed=cfg.seed)
    tuning = None
    lambda_cross = cfg.lambda_cross
    if lambda_cross == AUTO:
        t0 = time.perf_counter()
        lambda_cross, tuning = tune_lambda_cross(
            env, hp, grid=cfg.lambda_cross_grid, max_false=cfg.max_false,
            rng=substream(cfg.seed, "tuning"), alpha_bh=cfg.alpha_bh,
            n_bootstrap=cfg.n_tune_bootstrap, return_details=True)
        timings["tune_lambda_cross"] = time.perf_counter() - t0
        seeds["tuning"] = "substream(root, 'tuning')"
    hp = hp.with_lambda_cross(lambda_cross)

    t0 = time.perf_counter()
    res = fit(env, hp)
    timings["fit"] = time.perf_counter() - t0

    outputs = list(write_dataset(env, out, stem="envelopes"))
    _ldt(res.omega, out / "omega.ldt", outputs)
    _ldt(res.sigma_bar, out / "sigma_bar.ldt", outputs)
    _ldt(res.sigma, out / "sigma.ldt", outputs)
    for k in range(2):
        _ldt(res.weights[k], out / f"weights_region{k + 1}.ldt", outputs)
        _ldt(res.loadings[k], out / f"loadings_region{k + 1}.ldt", outputs)
        _csv(res.loadings[k], out / f"loadings_region{k + 1}.csv", outputs)
    _csv(res.omega_cross, out / "omega12.csv", outputs)
    _csv(res.sigma_bar, out / "sigma_bar.csv", outputs)
    resolved = cfg.to_dict()
    resolved.update(lambda_cross=lambda_cross, lambda_diag=lambda_diag)
    _write_manifest(out, "fit", outputs, resolved, seeds, timings, {
        "converged": res.converged, "iterations": res.iterations,
        "objective_trace": res.objective_trace, "tuning": tuning,
    })
    state = "converged" if res.converged else "did not converge"
    print(f"fit {state} after {res.iterations} iterations; lambda_cross={lambda_cross:.4g}, "
          f"lambda_diag={lambda_diag:.4g}")
    return EXIT_OK


def _load_fit(fit_dir):
    fit_dir = Path(fit_dir)
    man = _read_json(fit_dir / "fit_manifest.json")
    c = config_from_dict({k: v for k, v in man["config"].items()})
    env = read_dataset(fit_dir, stem="envelopes")
    T = env.n_times
    pen = build_penalty(T, c.lambda_cross, c.lambda_auto, c.lambda_diag, c.d_cross, c.d_auto)
    hp = Hyperparams(pen, iter_max=c.iter_max, ths=c.ths, seed=c.seed)
    w = [read_tensor(fit_dir / f"weights_region{k}.ldt") for k in (1, 2)]
    b = [read_tensor(fit_dir / f"loadings_region{k}.ldt") for k in (1, 2)]
    res = FitResult(w, b, read_tensor(fit_dir / "omega.ldt"), read_tensor(fit_dir / "sigma_bar.ldt"),
                    man.get("objective_trace", []), man["converged"], man["iterations"], pen,
                    read_tensor(fit_dir / "sigma.ldt"))
    return c, env, hp, res


# infer ------------------------------------------------------------------

def cmd_infer(args):
    out = _out_dir(args.output)
    c, env, hp, res = _load_fit(args.fit)
    alpha = c.alpha_bh if args.alpha_bh is None else args.alpha_bh
    B = c.n_bootstrap if args.bootstrap is None else args.bootstrap
    if not 0 < alpha < 1:
        raise ConfigError("alpha_bh must lie in (0, 1)")
    if B < 2:
        raise ConfigError("need at least two bootstrap replicates")
    t0 = time.perf_counter()
    rep = run_inference(env, hp, n_bootstrap=B, alpha_bh=alpha, rng=substream(c.seed, "bootstrap"),
                        fit_result=res, threads=args.threads)
    timings = {"infer": time.perf_counter() - t0}
    T = env.n_times
    outputs = []
    _csv(rep.omega_tilde[:T, T:], out / "omega_tilde12.csv", outputs)
    # out-of-band cells are not tested: p-value 1, variance 0
    _csv(np.where(rep.band, rep.pvals, 1.0), out / "pvals.csv", outputs)
    _csv(np.where(rep.band, rep.var_map, 0.0), out / "var_map.csv", outputs)
    _csv(rep.rejected.astype(float), out / "rejected.csv", outputs)
    _ldt(rep.replicates, out / "replicates.ldt", outputs)
    dt_ms = 1000.0 / env.sample_rate_hz
    table = []
    for i, cl in enumerate(rep.clusters):
        cells = np.asarray(cl.cells)
        table.append({
            "id": i + 1, "size": cl.size, "statistic": cl.statistic, "pvalue": cl.pvalue,
            "t_ms": [float(cells[:, 0].min() * dt_ms), float(cells[:, 0].max() * dt_ms)],
            "s_ms": [float(cells[:, 1].min() * dt_ms), float(cells[:, 1].max() * dt_ms)],
            "mean_lag_ms": float((cells[:, 1] - cells[:, 0]).mean() * dt_ms),
            "cells": [list(x) for x in cl.cells],
        })
    path = out / "clusters.json"
    _write_json(path, {"bh_threshold": rep.bh_threshold, "alpha_bh": alpha, "n_bootstrap": B,
                       "n_rejected": int(rep.rejected.sum()), "clusters": table})
    outputs.append(path)
    _write_manifest(out, "infer", outputs, {"alpha_bh": alpha, "n_bootstrap": B, "fit": str(args.fit)},
                    {"root": c.seed, "bootstrap": "substream(root, 'bootstrap')"}, timings)
    print(f"{int(rep.rejected.sum())} rejected cells in {len(rep.clusters)} clusters")
    return EXIT_OK


# granger ----------------------------------------------------------------

def cmd_granger(args):
    out = _out_dir(args.output)
    c, env, hp, res = _load_fit(args.fit)
    fs = env.sample_rate_hz
    window_ms = c.window_ms if args.window_ms is None else args.window_ms
    tau1_ms = c.tau1_ms if args.tau1_ms is None else args.tau1_ms
    tau2_ms = c.tau2_ms if args.tau2_ms is None else args.tau2_ms
    n_perm = c.n_perm if args.n_perm is None else args.n_perm
    window = max(1, int(round(window_ms * fs / 1000.0)))
    tau1 = max(1, math.ceil(tau1_ms * fs / 1000.0 - 1e-9))
    tau2 = max(tau1, math.floor(tau2_ms * fs / 1000.0 + 1e-9))
    d_auto = c.d_auto if args.d_auto is None else args.d_auto
    d_cross = c.d_cross if args.d_cross is None else args.d_cross
    gcfg = GrangerConfig(window_samples=window, d_auto=d_auto, d_cross=max(d_cross, tau2),
                         tau1=tau1, tau2=tau2, n_perm=n_perm, seed=c.seed,
                         use_desparsified=args.desparsified, refit=args.refit)
    t0 = time.perf_counter()
    rep = granger_report(env, hp, gcfg, fit_result=res, rng=substream(c.seed, "permutation"),
                         threads=args.threads)
    timings = {"granger": time.perf_counter() - t0}
    dt_ms = 1000.0 / fs
    table = np.column_stack([rep.times * dt_ms, rep.r2_12, rep.r2_21, rep.null_p95_12, rep.null_p95_21])
    outputs = []
    path = out / "r2.csv"
    try:
        with open(path, "w", newline="") as fh:
            fh.write("time_ms,r2_12,r2_21,null_p95_12,null_p95_21\n")
            for row in table:
                fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    outputs.append(path)
    _write_manifest(out, "granger", outputs,
                    {"window_samples": window, "tau1": tau1, "tau2": tau2, "d_auto": gcfg.d_auto,
                     "d_cross": gcfg.d_cross, "n_perm": n_perm, "band": "pointwise 95th percentile",
                     "use_desparsified": args.desparsified, "refit": args.refit},
                    {"root": c.seed, "permutation": "substream(root, 'permutation')"}, timings)
    print(f"R2 at {rep.times.size} times; {int((rep.r2_12 > rep.null_p95_12).sum())} (1->2) and "
          f"{int((rep.r2_21 > rep.null_p95_21).sum())} (2->1) above the null band")
    return EXIT_OK


# report -----------------------------------------------------------------

def _intervals(times_ms, mask):
    out = []
    start = None
    for t, m in zip(times_ms, mask):
        if m and start is None:
            start = t
        if m:
            last = t
        if not m and start is not None:
            out.append((start, last))
            start = None
    if start is not None:
        out.append((start, last))
    return out


def cmd_report(args):
    out = _out_dir(args.output)
    lines = ["lagcoupling report", ""]
    outputs = []
    copied = 0
    for d in args.inputs:
        d = Path(d)
        if not d.is_dir():
            raise IoError(f"input directory {d} does not exist")
        for src in sorted(d.glob("*.csv")):
            dst = out / f"{d.name}_{src.name}"
            dst.write_bytes(src.read_bytes())
            outputs.append(dst)
            copied += 1
        fm = d / "fit_manifest.json"
        if fm.is_file():
            m = _read_json(fm)
            state = "converged" if m["converged"] else "not converged"
            lines.append(f"fit ({d.name}): {state} after {m['iterations']} iterations, "
                         f"lambda_cross={m['config']['lambda_cross']:.4g}, "
                         f"lambda_diag={m['config']['lambda_diag']:.4g}")
        cj = d / "clusters.json"
        if cj.is_file():
            doc = _read_json(cj)
            cl = doc["clusters"]
            lines.append(f"inference ({d.name}): {doc['n_rejected']} rejected cells, {len(cl)} clusters")
            for c in sorted(cl, key=lambda c: c["pvalue"] if c["pvalue"] == c["pvalue"] else 2.0):
                lines.append(f"  cluster {c['id']}: {c['size']} cells, t {c['t_ms'][0]:.0f}-{c['t_ms'][1]:.0f} ms, "
                             f"s {c['s_ms'][0]:.0f}-{c['s_ms'][1]:.0f} ms, mean lag {c['mean_lag_ms']:+.1f} ms, "
                             f"T={c['statistic']:.2f}, p={c['pvalue']:.4g}")
        r2 = d / "r2.csv"
        if r2.is_file():
            tab = np.loadtxt(r2, delimiter=",", skiprows=1, ndmin=2)
            for name, col, band in (("1->2", 1, 3), ("2->1", 2, 4)):
                iv = _intervals(tab[:, 0], tab[:, col] > tab[:, band])
                txt = ", ".join(f"{a:.0f}-{b:.0f} ms" for a, b in iv) if iv else "none"
                lines.append(f"granger ({d.name}) R2 {name} above null band: {txt}")
    if len(lines) == 2:
        lines.append("no stage outputs found")
    lines.append("")
    lines.append(f"{copied} CSV files collected")
    path = out / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    outputs.append(path)
    _write_manifest(out, "report", outputs, {"inputs": [str(p) for p in args.inputs]}, {}, {})
    print("\n".join(lines))
    return EXIT_OK


# entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lagcoupling", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic paired dataset")
    s.add_argument("--model", choices=("driver", "driver-nocoh", "pcca"), default="driver")
    s.add_argument("--gamma", type=float, default=0.077, help="driver loading height")
    s.add_argument("--amplitude", type=float, default=None, help="driver amplitude scale")
    s.add_argument("--r", type=float, default=0.4, help="pCCA connection intensity in [0, 1)")
    s.add_argument("--T", type=int, default=None, help="pCCA time points")
    s.add_argument("--n-trials", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="preprocess, calibrate and fit")
    f.add_argument("--data", required=True, help="directory written by 'simulate' (or any LDT1 pair)")
    f.add_argument("--config", default=None, help=f"JSON config; defaults to ${CONFIG_ENV}")
    f.add_argument("--f0", type=float, default=None)
    f.add_argument("--bandwidth-ms", type=float, default=None)
    f.add_argument("--decimate", type=int, default=None)
    f.add_argument("--d-auto", type=int, default=None)
    f.add_argument("--d-cross", type=int, default=None)
    f.add_argument("--lambda-cross", type=_lambda_arg, default=None)
    f.add_argument("--lambda-diag", type=_lambda_arg, default=None)
    f.add_argument("--lambda-auto", type=float, default=None)
    f.add_argument("--iter-max", type=int, default=None)
    f.add_argument("--ths", type=float, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--no-preprocess", action="store_true", help="data are already decimated envelopes")
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("infer", help="bootstrap p-values, BH and clusters")
    i.add_argument("--fit", required=True, help="directory written by 'fit'")
    i.add_argument("--alpha-bh", type=float, default=None)
    i.add_argument("--bootstrap", type=int, default=None)
    i.add_argument("--threads", type=int, default=1)
    i.add_argument("-o", "--output", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("granger", help="partial R2 series with permutation bands")
    g.add_argument("--fit", required=True)
    g.add_argument("--window-ms", type=float, default=None)
    g.add_argument("--tau1-ms", type=float, default=None)
    g.add_argument("--tau2-ms", type=float, default=None)
    g.add_argument("--d-auto", type=int, default=None)
    g.add_argument("--d-cross", type=int, default=None)
    g.add_argument("--n-perm", type=int, default=None)
    g.add_argument("--desparsified", action="store_true", help="plug in the de-sparsified precision")
    g.add_argument("--refit", action="store_true", help="refit weights for every permutation")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_granger)

    r = sub.add_parser("report", help="collect CSVs and write a summary")
    r.add_argument("inputs", nargs="+", help="stage output directories")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ParamError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, IoError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
