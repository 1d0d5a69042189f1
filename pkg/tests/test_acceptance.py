"""Acceptance criteria A1-A11 at their stated tolerances.

Each test records a one-line verdict printed in the terminal summary. A7, A8
and A10 run the shipped configs through the runner at full scale and take
several minutes each on one core.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from gcclab.flow import (ESCAPED, TRAPPED, UNDETERMINED, check_gcc, classify_rays, gcc_seeds,
                         integrate_full, integrate_half, reparam_match, shell_seeds,
                         verify_flow_scaling)
from gcclab.halfwave import b_both, p_symbol, phi_scale
from gcclab.metric import scale_metric
from gcclab.runner import EXIT_OK, run

from conftest import all_metrics, rand_points

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def detail(record_property, text):
    record_property("detail", text)


def load_json(path):
    return json.loads(Path(path).read_text())


def test_A1_flat_flow_exact(flat, record_property):
    x, xi = rand_points(100, 11, radius=10.0)
    s = np.linspace(0.0, 100.0, 1001)
    worst = 0.0
    for sg, v in (("+", -1.0), ("-", 1.0)):
        for k in range(100):
            y = integrate_half(flat, sg, (x[k], xi[k]), 100.0).at(s)
            line = x[k] + v * s[:, None] * xi[k] / np.linalg.norm(xi[k])
            worst = max(worst, np.max(np.abs(y[:, :3] - line)), np.max(np.abs(y[:, 3:] - xi[k])))
    ok = worst <= 1e-8
    detail(record_property, f"max deviation {worst:.2e} (<= 1e-8, 100 seeds x 2 branches)")
    assert ok


def test_A2_conservation(shell, cross, record_property):
    worst = {}
    for m in (shell, cross):
        x, xi = rand_points(100, 12, radius=8.0)
        half = full = 0.0
        for k in range(100):
            for sg in ("+", "-"):
                half = max(half, integrate_half(m, sg, (x[k], xi[k]), 100.0).conserved_drift)
            tau = b_both(m, x[k], xi[k])[k % 2]
            tr = integrate_full(m, np.concatenate([[0.0, tau], x[k], xi[k]]), 100.0)
            full = max(full, tr.conserved_drift)
        worst[m.name] = (half, full)
    ok = all(max(v) <= 1e-8 for v in worst.values())
    detail(record_property, ", ".join(f"{n}: b {h:.1e}, tau/p {f:.1e}" for n, (h, f) in worst.items())
           + " (<= 1e-8)")
    assert ok


def test_A3_sign_factorization(record_property):
    out = []
    ok = True
    for m in all_metrics():
        x, xi = rand_points(100_000, 13, radius=40.0)
        tau = np.random.default_rng(14).normal(scale=5.0, size=len(x))
        bp, bm = b_both(m, x, xi)
        sign_viol = int(np.sum(~((bp > 0) & (bm < 0))))
        p = p_symbol(m, tau, x, xi)
        fact = np.abs(p + (tau - bp) * (tau - bm)) / (1.0 + np.abs(p))
        ok = ok and sign_viol == 0 and fact.max() <= 1e-10
        out.append(f"{m.name}: {sign_viol} sign violations, factor err {fact.max():.1e}")
    detail(record_property, "; ".join(out))
    assert ok


def _scaled_verdicts(metric, gamma, seeds, sign, R, T_max):
    """Verdicts and hits in the original metric and in the gamma-scaled one.

    With g~(x) = g(gamma x), the ray of g~ from (x, xi) is gamma^-1 times the ray of
    g from (gamma x, xi) run for gamma times the parameter, so R and T_max scale by 1/gamma.
    """
    x, xi = seeds
    a = check_gcc(metric, (x, xi), sign, R, T_max=T_max)
    b = check_gcc(scale_metric(metric, gamma), (x / gamma, xi), sign, R / gamma,
                  T_max=T_max / gamma, a_threshold=gamma * a.a_threshold)
    return ([(c.verdict, c.max_damping > a.a_threshold) for c in a.verdicts],
            [(c.verdict, c.max_damping > b.a_threshold) for c in b.verdicts])


def test_A4_scaling(shell, shell_damped, radii, record_property):
    flow_dev = 0.0
    for m in all_metrics():
        x, xi = rand_points(8, 15, radius=6.0)
        for k in range(8):
            for lam in (0.5, 10.0):
                for sg in ("+", "-"):
                    flow_dev = max(flow_dev, verify_flow_scaling(m, (x[k], xi[k]), lam, sg)["deviation"])
    R, T_max = 16.0, 200.0
    hx, hxi = gcc_seeds(shell_damped, "+", R, 128, seed=3)
    sx, sxi = shell_seeds(shell_damped, "+", 0.9 * radii[0], radii[1], 128, seed=3)
    seeds = (np.concatenate([hx, sx]), np.concatenate([hxi, sxi]))
    compared = mismatch = 0
    kinds = {TRAPPED: 0, ESCAPED: 0}
    for gamma in (2.0, 10.0):
        va, vb = _scaled_verdicts(shell_damped, gamma, seeds, "+", R, T_max)
        for ca, cb in zip(va, vb):
            if UNDETERMINED in (ca[0], cb[0]):
                continue
            compared += 1
            kinds[ca[0]] += 1
            mismatch += ca != cb
    ok = flow_dev <= 1e-7 and mismatch == 0 and compared > 0
    detail(record_property, f"flow scaling dev {flow_dev:.1e} (<= 1e-7); GCC verdicts {compared - mismatch}/"
           f"{compared} agree over gamma in (2, 10) ({kinds[TRAPPED]} trapped, {kinds[ESCAPED]} escaped)")
    assert ok


def test_A5_factor_correspondence(record_property):
    worst = {}
    for m in all_metrics():
        x, xi = rand_points(50, 16, radius=6.0)
        dev = 0.0
        for sg in ("+", "-"):
            for k in range(50):
                dev = max(dev, reparam_match(m, (x[k], xi[k], sg), t_window=50.0)["deviation"])
        worst[m.name] = dev
    ok = max(worst.values()) <= 1e-6
    detail(record_property, ", ".join(f"{n} {d:.1e}" for n, d in worst.items()) + " (<= 1e-6)")
    assert ok


def test_A6_trapping_detection(shell, radii, record_property):
    r_s, R = radii[0], 16.0
    ang = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    # tangential seeds in several planes through the origin
    n = np.stack([np.cos(ang), np.sin(ang), 0.3 * np.sin(2 * ang)], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t = np.cross(n, [[0.0, 0.0, 1.0]])
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    lines = []
    ok = True
    for sg in ("+", "-"):
        tx, txi = phi_scale(shell, r_s * n, t, sg)
        rx, rxi = phi_scale(shell, r_s * n, n, sg)
        tang = classify_rays(shell, sg, tx, txi, R, T_max=500.0)
        rad = classify_rays(shell, sg, rx, rxi, R, T_max=500.0)
        gx, gxi = gcc_seeds(shell, sg, R, 128, seed=6)
        panel = classify_rays(shell, sg, gx, gxi, R, T_max=500.0)
        trapped = all(c.verdict == TRAPPED and abs(c.max_radius - r_s) <= 0.1 * r_s for c in tang)
        escaped = all(c.verdict == ESCAPED for c in rad)
        esc = [c for c in rad + panel if c.verdict == ESCAPED]
        perm = sum(c.permanence for c in esc)
        ok = ok and trapped and escaped and perm == len(esc)
        spread = max(abs(c.max_radius - r_s) for c in tang) / r_s
        lines.append(f"{sg}: tangential trapped {trapped} (max radius dev {spread:.1%}), "
                     f"radial escaped {escaped}, permanence {perm}/{len(esc)}")
    detail(record_property, "; ".join(lines))
    assert ok


def _run(sub, config, out, threads=1):
    code = run(sub, config, out, threads)
    return code, out


def test_A7_gcc_audit(tmp_path, record_property):
    code_c, out_c = _run("gcc", CONFIGS / "shell_covered.yaml", tmp_path / "covered")
    code_d, out_d = _run("gcc", CONFIGS / "shell_displaced.yaml", tmp_path / "displaced")
    cov = load_json(out_c / "gcc.json")["aggregates"]
    dis = load_json(out_d / "gcc.json")["aggregates"]
    ok = code_c == EXIT_OK and code_d == EXIT_OK
    parts = []
    for sg in ("+", "-"):
        c, d = cov[sg], dis[sg]
        ok = ok and c["seeds"] == 4096 and d["seeds"] == 4096
        ok = ok and c["trapped"] > 0 and c["trapped_hit"] == c["trapped"]
        ok = ok and d["trapped"] > 0 and d["trapped_hit"] == 0
        parts.append(f"{sg}: covered {c['trapped_hit']}/{c['trapped']}, displaced {d['trapped_hit']}/{d['trapped']}")
    detail(record_property, "trapped rays hitting damping " + "; ".join(parts))
    assert ok


def test_A8_escape_positivity(tmp_path, record_property):
    out = tmp_path / "escape"
    code = run("escape", CONFIGS / "shell_covered.yaml", out)
    res = load_json(out / "escape.json")
    rep = res["report"]
    wall = load_json(out / "manifest.json")["wall_seconds"]
    n_generic = rep["n_generic"]
    frac = 1.0 - rep["fraction_generic_below_c0"] * n_generic / rep["n_samples"]
    ok = (code == EXIT_OK and res["passed"] and rep["n_samples"] >= 100_000 and rep["c0"] > 0
          and frac >= 0.99 and rep["min_char"] >= rep["c0"] and rep["validity_fraction"] == 1.0
          and wall <= 1800.0)
    p = res["params_found"]
    detail(record_property, f"lambda {p['lambda']:g}, sigma {p['sigma']:g}, gamma {p['gamma']:g}, "
           f"epsilon {p['epsilon']:.3g}; c0 {rep['c0']:.3g}, {frac:.4%} of {rep['n_samples']} samples "
           f">= c0, char min {rep['min_char']:.3g}, validity {rep['validity_fraction']:.0%}, {wall / 60:.1f} min")
    assert ok


def test_A9_energy_ledger(tmp_path, record_property):
    base = yaml.safe_load((CONFIGS / "wave.yaml").read_text())
    res = {}
    for n in (48, 96):
        cfg = dict(base, wave=dict(base["wave"], n=n))
        path = tmp_path / f"wave{n}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert run("wave", path, tmp_path / f"w{n}") == EXIT_OK
        res[n] = load_json(tmp_path / f"w{n}" / "wave.json")
    ratio = res[48]["dissipation_residual"] / res[96]["dissipation_residual"]
    mono = all(r["scheme_energy_non_increasing"] for r in res.values())
    sponge = res[96]["ledger"]
    ok = 3.0 <= ratio <= 5.0 and mono
    detail(record_property, f"residual ratio {ratio:.2f} (in [3, 5]); E non-increasing {mono}; "
           f"sponge ledger at n=96: {json.dumps(sponge, sort_keys=True)[:120]}")
    assert ok


def test_A10_empirical_led(tmp_path, record_property):
    out = tmp_path / "led"
    code = run("led", CONFIGS / "led.yaml", out)
    chk = load_json(out / "led.json")["checks"]
    wall = load_json(out / "manifest.json")["wall_seconds"]
    g = chk["growth"]
    ok = (code == EXIT_OK and g["flat"] <= 1.05 and g["damped"] <= 1.05 and g["undamped"] >= 1.15
          and chk["separation"] >= 1.30 and wall <= 3600.0)
    detail(record_property, f"rho(80)/rho(40): flat {g['flat']:.3f}, damped {g['damped']:.3f}, "
           f"undamped {g['undamped']:.3f}; undamped/damped at 80 {chk['separation']:.2f}; {wall / 60:.1f} min")
    assert ok


SMALL = {
    "name": "small",
    "rng_seed": 1,
    "metric": {"name": "trapped_shell", "params": {"A": 2.0, "r_c": 5.0, "width": 1.0}},
    "damping": {"kind": "shell", "params": {"radius": 3.75, "half_width": 2.5, "amplitude": 1.0}},
    "rays": {"R": 16.0, "T_max": 60.0, "s_max": 20.0, "seeds": 16, "radius": 8.0},
    "gcc": {"R": 16.0, "T_max": 60.0, "seeds": 48, "detect_radii": 16},
    "escape": {"j_max": 6, "samples_per_annulus": 200, "trapped_seeds": 16, "gcc_T_max": 60.0,
               "horizon": 30.0, "n_probes": 64, "n_generic": 1500, "n_char": 150,
               "lambdas": [4.0], "sigmas": [4.0], "gammas": [16.0], "eps_min": 2.0**-14},
    "wave": {"extent": 8.0, "n": 24, "sponge_width": 3.0, "T": 2.0, "radius": 2.0,
             "center": [3.5, 0.0, 0.0]},
    "led": {"extent": 8.0, "n": 24, "sponge_width": 3.0, "T_list": [1.0, 2.0], "radius": 2.0,
            "runs": [{"label": "flat", "metric": {"name": "minkowski"}},
                     {"label": "undamped", "metric": {"name": "trapped_shell",
                                                      "params": {"A": 2.0, "r_c": 5.0, "width": 1.0}}}]},
}


def _payloads(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.suffix in (".csv", ".json") and p.name != "manifest.json"}


def test_A11_determinism(tmp_path, record_property):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    runs = []
    for k, th in enumerate((1, 1, 8)):
        out = tmp_path / f"run{k}"
        code = run("all", path, out, th)
        runs.append((code, _payloads(out)))
    codes = {c for c, _ in runs}
    files = sorted(runs[0][1])
    same = runs[0][1] == runs[1][1] == runs[2][1]
    subs = sorted({f.split("/")[0] for f in files if "/" in f})
    ok = same and codes == {EXIT_OK} and subs == ["escape", "gcc", "led", "rays", "wave"]
    detail(record_property, f"{len(files)} payload files from {', '.join(subs)} identical across 2 runs "
           f"and threads 1/8: {same} (exit code {codes})")
    assert ok
