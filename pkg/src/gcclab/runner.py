"""Command-line orchestration of the scenario studies.

    gcclab <rays|gcc|escape|wave|led|all> --config FILE [--output DIR] [--threads N]

Each subcommand writes its JSON/CSV payloads plus manifest.json (config
hash, versions, wall time) into the output directory. The output directory
is --output, else $GCCLAB_OUTPUT/<name>, else the config's output_dir, else
./gcclab_out/<name>. Payloads contain no timings, so reruns are
byte-identical; timings go to the manifest.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 verification failure.
"""

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from scipy.stats import qmc

from . import __version__
from . import escape as E
from .config import ConfigError, build_metric, config_hash, load_config
from .flow import (ESCAPED, TRAPPED, check_gcc, classify_rays, detect_trapped_shell,
                   gcc_seeds, integrate_half, shell_seeds)
from .halfwave import b_scale_bounds, phi_scale, unit_directions
from .integrate import StepFailure
from .metric import estimate_af
from .solver import CFLError, GridSpec, bump_data, dissipation_residual, evolve, led_experiment, write_history

__all__ = ["main", "run", "SUBCOMMANDS", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL",
           "EXIT_VERIFICATION"]

SUBCOMMANDS = ("rays", "gcc", "escape", "wave", "led", "all")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFICATION = 0, 2, 3, 4
ENV_OUTPUT = "GCCLAB_OUTPUT"
SIGNS = ("+", "-")


class VerificationFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])


def _metric(cfg):
    return build_metric(cfg.metric, cfg.damping)


# ---------------------------------------------------------------------------
# subcommands; each returns (files written, verification ok, timings)
# ---------------------------------------------------------------------------

def cmd_rays(cfg, out, threads):
    spec = cfg.rays
    metric = _metric(cfg)
    u = qmc.Halton(d=5, scramble=True, seed=cfg.rng_seed).random(spec.seeds)
    x = spec.radius * u[:, :1] ** (1.0 / 3.0) * unit_directions(u[:, 1:3])
    xi = unit_directions(u[:, 3:5])
    rows, summary = [], {}
    for sg in SIGNS:
        xs, xis = phi_scale(metric, x, xi, sg)
        cls = classify_rays(metric, sg, xs, xis, spec.R, T_max=spec.T_max, threads=threads)
        drifts = [integrate_half(metric, sg, (xs[k], xis[k]), spec.s_max).conserved_drift
                  for k in range(len(xs))]
        for k, (c, d) in enumerate(zip(cls, drifts)):
            rows.append({"sign": sg, "seed": k, "x0": xs[k, 0], "x1": xs[k, 1], "x2": xs[k, 2],
                         "xi0": xis[k, 0], "xi1": xis[k, 1], "xi2": xis[k, 2],
                         "verdict": c.verdict, "escape_param": c.escape_param,
                         "min_radius": c.min_radius, "max_radius": c.max_radius,
                         "permanence": c.permanence, "b_drift": d})
        summary[sg] = {"seeds": len(cls), "max_b_drift": float(max(drifts)),
                       **{v: sum(c.verdict == v for c in cls) for v in (ESCAPED, TRAPPED, "Undetermined")}}
    cols = ["sign", "seed", "x0", "x1", "x2", "xi0", "xi1", "xi2", "verdict", "escape_param",
            "min_radius", "max_radius", "permanence", "b_drift"]
    write_csv(out / "rays.csv", rows, cols)
    write_json(out / "rays.json", {"metric": metric.name, "params": metric.params,
                                   "spec": vars(spec), "summary": summary})
    return ["rays.csv", "rays.json"], True, {}


def _audit_seeds(metric, sg, R, count, seed, T_max, n_radii):
    """Seeds on the numerically detected trapped shell of the undamped metric, else Halton seeds."""
    shell = detect_trapped_shell(metric, sg, R, T_max=T_max, n_radii=n_radii)
    if shell is None:
        return gcc_seeds(metric, sg, R, count, seed=seed), None
    lo, hi = shell
    return shell_seeds(metric, sg, lo, hi, count, seed=seed), shell


def cmd_gcc(cfg, out, threads):
    spec = cfg.gcc
    metric = _metric(cfg)
    bare = build_metric(cfg.metric)
    rows, agg = [], {}
    ok = True
    for sg in SIGNS:
        seeds, shell = _audit_seeds(bare, sg, spec.R, spec.seeds, cfg.rng_seed, spec.T_max,
                                    spec.detect_radii)
        rep = check_gcc(metric, seeds, sg, spec.R, delta=spec.delta, T_max=spec.T_max,
                        a_threshold=spec.a_threshold, threads=threads)
        agg[sg] = dict(rep.aggregates(), detected_shell=shell)
        rows.extend(rep.rows())
        ok = ok and (rep.n_trapped == rep.n_hit or not spec.require_hit)
    cols = ["seed", "sign", "verdict", "s_escape_or_horizon", "min_radius", "max_radius",
            "max_a", "first_hit"]
    write_csv(out / "gcc_rays.csv", rows, cols)
    write_json(out / "gcc.json", {"metric": metric.name, "params": metric.params,
                                  "damping": {"kind": cfg.damping.kind, **cfg.damping.params},
                                  "spec": vars(spec), "aggregates": agg})
    return ["gcc_rays.csv", "gcc.json"], ok, {}


def build_escape(cfg, threads=1):
    """Construct all sigma-independent escape symbols for the configured scenario."""
    spec = cfg.escape
    metric = _metric(cfg)
    af = estimate_af(metric, spec.j_max, spec.samples_per_annulus, threshold=spec.af_threshold,
                     delta=spec.af_delta, envelope=spec.af_envelope, seed=cfg.rng_seed)
    R = float(spec.R) if spec.R is not None else af.R0
    bw = E.build_bootstrap(af, 1.0)
    bare = build_metric(cfg.metric)
    q1, q_in, q_out, seeds_info = {}, {}, {}, {}
    for sg in SIGNS:
        s = 1 if sg == "+" else -1
        seeds, shell = _audit_seeds(bare, sg, R, spec.trapped_seeds, cfg.rng_seed,
                                    spec.gcc_T_max, 64)
        rep = check_gcc(metric, seeds, sg, R, T_max=spec.gcc_T_max, threads=threads)
        trapped = [k for k, c in enumerate(rep.verdicts) if c.verdict == TRAPPED]
        if rep.n_hit < rep.n_trapped:
            raise E.EscapeConstructionError("GCC audit failed: a trapped seed never meets the damping",
                                            rep.aggregates())
        tx, txi = seeds[0][trapped], seeds[1][trapped]
        sym, _ = E.build_q_semibounded(metric, None, s, R, (tx, txi), spec.horizon,
                                       rho=spec.cover_rho, seed=cfg.rng_seed)
        psi = E.default_psi(metric, s, R, cover=sym, delta=spec.psi_delta, seed=cfg.rng_seed)
        q1[s] = sym
        q_in[s] = E.build_q_in(metric, s, R, psi, n_probes=spec.n_probes, h=spec.q_in_step,
                               seed=cfg.rng_seed, coarse_factor=spec.coarse_factor)
        q_out[s] = E.build_q_out(metric, s, R, bw)
        seeds_info[sg] = {"detected_shell": shell, "seeds": len(seeds[0]), "trapped": len(trapped)}
    asm = E.assemble_q(q1, q_in, q_out, spec.eps_start, 1.0, spec.lambdas[0], spec.gammas[0],
                       metric=metric, bootstrap=bw)
    return asm, af, R, seeds_info


def cmd_escape(cfg, out, threads):
    spec = cfg.escape
    t0 = time.perf_counter()
    asm, af, R, seeds_info = build_escape(cfg, threads)
    t_build = time.perf_counter() - t0
    metric = asm.metric
    _, C_b = b_scale_bounds(metric, 8.0 * R, seed=cfg.rng_seed)
    sample = E.SampleSpec(R=R, n_generic=spec.n_generic, n_char=spec.n_char, C_b=C_b,
                          seed=cfg.rng_seed)
    samples = E.sample_phase_space(metric, sample)
    cache = E.cache_components(asm.symbols, samples, threads)
    res = E.tune_escape(cache, spec.lambdas, spec.sigmas, spec.gammas, spec.eps_start,
                        spec.eps_min, spec.C_target)
    report = res.report.to_dict()
    t_eval = report.pop("seconds")
    payload = {
        "metric": metric.name, "params": metric.params,
        "damping": {"kind": cfg.damping.kind, **cfg.damping.params},
        "af": {"R0": af.R0, "j0": af.j0, "c_seq": af.c_seq, "raw": af.raw, "delta": af.delta,
               "envelope": af.envelope, "threshold": af.threshold},
        "R": R, "C_b": C_b, "seeds": seeds_info,
        "cover": {("+" if s > 0 else "-"): q.to_dict() for s, q in asm.symbols.q1.items()},
        "q_in": {("+" if s > 0 else "-"): q.to_dict() for s, q in asm.symbols.q_in.items()},
        "samples": {"n_generic": sample.n_generic, "n_char": sample.n_char,
                    "radius": 8.0 * R, "xi_range": [1.0, 8.0], "tau_bound": 8.0 * C_b},
        "passed": res.passed, "params_found": res.params, "report": report,
        "trials": len(res.trials),
    }
    write_json(out / "escape.json", payload)
    write_csv(out / "escape_trials.csv", res.trials,
              ["lambda", "sigma", "gamma", "epsilon", "c0", "validity", "passed"])
    timings = {"build_seconds": t_build, "cache_seconds": cache.seconds, "evaluate_seconds": t_eval}
    return ["escape.json", "escape_trials.csv"], res.passed, timings


def _grid(spec, metric):
    C_ell = metric.ellipticity_bounds[1]
    return GridSpec.for_metric(spec.extent, spec.n, C_ell, cfl=spec.cfl,
                               sponge_width=spec.sponge_width, sponge_strength=spec.sponge_strength)


def cmd_wave(cfg, out, threads):
    spec = cfg.wave
    metric = _metric(cfg)
    grid = _grid(spec, metric)
    data = bump_data(grid, spec.center, spec.radius)
    label = f"bump center={list(spec.center)} radius={spec.radius}"
    hist = evolve(metric, grid, data, T=spec.T, snapshot_every=spec.snapshot_every or None,
                  threads=threads, data_spec=label)
    resid, ledger = dissipation_residual(metric, hist)
    se = hist.scheme_energy
    incr = np.diff(se[:-1])
    rows = [{"t": t, "energy": e, "scheme_energy": s, "damp_power": d, "sponge_power": p}
            for t, e, s, d, p in zip(hist.times, hist.energy, se, hist.damp_power, hist.sponge_power)]
    write_csv(out / "wave.csv", rows, ["t", "energy", "scheme_energy", "damp_power", "sponge_power"])
    files = ["wave.csv", "wave.json"]
    payload = {"metric": metric.name, "params": metric.params, "grid": grid.to_dict(),
               "data": label, "T": spec.T, "dissipation_residual": resid, "ledger": ledger,
               "scheme_energy_max_increase": float(incr.max()) if len(incr) else 0.0,
               "scheme_energy_non_increasing": bool(np.all(incr <= 1e-12 * se[0])) if len(incr) else True,
               "initial_energy": float(hist.energy[0]), "final_energy": float(hist.energy[-1])}
    write_json(out / "wave.json", payload)
    if spec.write_snapshots:
        write_history(out / "wave_snapshots.bin", hist)
        files += ["wave_snapshots.bin", "wave_snapshots.bin.json"]
    return files, True, {}


def cmd_led(cfg, out, threads):
    spec = cfg.led
    results, runs = {}, []
    for run in spec.runs:
        metric = build_metric(run.metric, run.damping)
        grid = _grid(spec, metric)
        data = bump_data(grid, spec.center, spec.radius)
        rows, _ = led_experiment(metric, data, spec.T_list, grid, threads=threads, label=run.label)
        results[run.label] = rows
        runs.append({"label": run.label, "metric": run.metric.name, "params": run.metric.params,
                     "damping": {"kind": run.damping.kind, **run.damping.params},
                     "grid": grid.to_dict(), "rows": rows})
    T = sorted(spec.T_list)
    table = [dict({"T": t}, **{f"rho_{lab}": results[lab][k]["rho"] for lab in results})
             for k, t in enumerate(T)]
    write_csv(out / "led.csv", table, ["T"] + [f"rho_{lab}" for lab in results])
    checks, ok = {}, True
    if {"flat", "damped", "undamped"} <= set(results) and len(T) >= 2:
        g = {lab: results[lab][-1]["rho"] / results[lab][-2]["rho"] for lab in results}
        sep = results["undamped"][-1]["rho"] / results["damped"][-1]["rho"]
        checks = {"growth": g, "separation": sep,
                  "flat_bounded": g["flat"] <= spec.flat_growth_max,
                  "damped_bounded": g["damped"] <= spec.flat_growth_max,
                  "undamped_grows": g["undamped"] >= spec.trapped_growth_min,
                  "separated": sep >= spec.separation_min,
                  "thresholds": {"flat_growth_max": spec.flat_growth_max,
                                 "trapped_growth_min": spec.trapped_growth_min,
                                 "separation_min": spec.separation_min}}
        ok = all(checks[k] for k in ("flat_bounded", "damped_bounded", "undamped_grows", "separated"))
    write_json(out / "led.json", {"T_list": T, "runs": runs, "checks": checks})
    return ["led.csv", "led.json"], ok, {}


COMMANDS = {"rays": cmd_rays, "gcc": cmd_gcc, "escape": cmd_escape, "wave": cmd_wave, "led": cmd_led}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _output_dir(cfg, output):
    if output:
        return Path(output)
    env = os.environ.get(ENV_OUTPUT)
    if env:
        return Path(env) / cfg.name
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("gcclab_out") / cfg.name


def _manifest(out, subcommand, raw, files, wall, timings, status, threads):
    write_json(out / "manifest.json", {
        "subcommand": subcommand, "config_sha256": config_hash(raw), "files": files,
        "status": status, "threads": threads, "wall_seconds": wall, "timings": timings,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "versions": {"gcclab": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__}})


def _error(out, code, exc, stage):
    info = {"exit_code": code, "error": type(exc).__name__, "message": str(exc), "stage": stage}
    if getattr(exc, "key", None):
        info["key"] = exc.key
    if getattr(exc, "ledger", None):
        info["ledger"] = exc.ledger
    print(json.dumps(_clean(info), sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", info)
        except OSError:
            pass
    return code


def run(subcommand, config_path, output=None, threads=1):
    """Run one subcommand (or all configured ones); returns the exit code."""
    if subcommand not in SUBCOMMANDS:
        return _error(None, EXIT_CONFIG, ConfigError(f"unknown subcommand {subcommand!r}"), "cli")
    out = Path(output) if output else None
    try:
        cfg, raw = load_config(config_path)
        out = _output_dir(cfg, output)
        names = [k for k in COMMANDS if getattr(cfg, k) is not None] if subcommand == "all" else [subcommand]
        for k in names:
            if getattr(cfg, k) is None:
                raise ConfigError(f"config has no '{k}' section", k)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        return _error(out, EXIT_CONFIG, exc, "config")
    t0 = time.perf_counter()
    files, timings, failed = [], {}, []
    for k in names:
        stage = out / k if subcommand == "all" else out
        stage.mkdir(parents=True, exist_ok=True)
        t1 = time.perf_counter()
        try:
            written, ok, tm = COMMANDS[k](cfg, stage, threads)
        except ConfigError as exc:
            return _error(out, EXIT_CONFIG, exc, k)
        except (E.EscapeConstructionError, CFLError, StepFailure, FloatingPointError) as exc:
            return _error(out, EXIT_NUMERICAL, exc, k)
        prefix = f"{k}/" if subcommand == "all" else ""
        files += [prefix + f for f in written]
        timings[k] = dict(tm, seconds=time.perf_counter() - t1)
        if not ok:
            failed.append(k)
    status = "verification_failed" if failed else "ok"
    _manifest(out, subcommand, raw, files, time.perf_counter() - t0, timings, status, threads)
    if failed:
        return _error(out, EXIT_VERIFICATION, VerificationFailure(f"verification failed: {failed}"),
                      ",".join(failed))
    return EXIT_OK


def main(argv=None):
    ap = argparse.ArgumentParser(prog="gcclab", description="Escape-function and damped-wave studies")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML scenario file")
    ap.add_argument("--output", default=None, help=f"output directory (default ${ENV_OUTPUT}/<name>)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    args = ap.parse_args(argv)
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    return run(args.subcommand, args.config, args.output, args.threads)


if __name__ == "__main__":
    sys.exit(main())
