"""Full and half-wave Hamiltonian flows, trapping classification, GCC audit.

Half flows (one per light-cone branch), parameterized so that t' = 1:

    x' = -d_xi b±,    xi' = +d_x b±.

Full flow of p on T*R^4 (tau is conserved since the metric is stationary):

    t' = -2 tau + 2 g^{0j} xi_j,   tau' = 0,
    x' = 2 tau g^{0k} + 2 g^{kj} xi_j,
    xi'_k = -2 tau d_k g^{0j} xi_j - d_k g^{ij} xi_i xi_j.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .halfwave import as_sign, b_both, grad_b, p_symbol, phi_scale, unit_directions
from .integrate import StepFailure, dense_eval, dopri_batch

__all__ = ["Trajectory", "RayClass", "GCCReport", "half_rhs", "full_rhs", "integrate_half",
           "integrate_full", "integrate_half_batch", "reparam_match", "classify_ray",
           "classify_rays", "check_gcc", "gcc_seeds", "shell_seeds", "detect_trapped_shell",
           "verify_flow_scaling", "ESCAPED", "TRAPPED", "UNDETERMINED"]

ESCAPED, TRAPPED, UNDETERMINED = "Escaped", "Trapped", "Undetermined"
CHUNK = 2048


def half_rhs(metric, sign):
    s = as_sign(sign)

    def rhs(y):
        _, bx, bxi = grad_b(metric, y[:, :3], y[:, 3:], s)
        return np.concatenate([-bxi, bx], axis=1)
    return rhs


def full_rhs(metric):
    def rhs(y):
        tau = y[:, 1]
        x, xi = y[:, 2:5], y[:, 5:8]
        g0 = metric.g0j(x)
        G = metric.gij(x)
        beta = np.sum(g0 * xi, axis=-1)
        dbeta = np.einsum("nkj,nj->nk", metric.grad_g0j(x), xi)
        dQ = np.einsum("nkij,ni,nj->nk", metric.grad_gij(x), xi, xi)
        out = np.empty_like(y)
        out[:, 0] = -2.0 * tau + 2.0 * beta
        out[:, 1] = 0.0
        out[:, 2:5] = 2.0 * tau[:, None] * g0 + 2.0 * np.einsum("nkj,nj->nk", G, xi)
        out[:, 5:8] = -2.0 * tau[:, None] * dbeta - dQ
        return out
    return rhs


# ---------------------------------------------------------------------------
# single trajectories with dense output
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Accepted steps of one orbit; ``at(s)`` interpolates with the quartic dense output."""
    s: np.ndarray
    states: np.ndarray
    sign: str
    conserved_drift: float
    valid: bool
    h: np.ndarray = field(repr=False, default=None)
    K: np.ndarray = field(repr=False, default=None)

    @property
    def samples(self):
        return list(zip(self.s, self.states))

    def at(self, s_query):
        sq = np.atleast_1d(np.asarray(s_query, dtype=float))
        forward = self.s[-1] >= self.s[0]
        if forward:
            k = np.searchsorted(self.s, sq, side="right") - 1
        else:
            k = len(self.s) - 1 - np.searchsorted(self.s[::-1], sq, side="left")
        k = np.clip(k, 0, len(self.s) - 2)
        theta = (sq - self.s[k]) / self.h[k]
        return dense_eval(self.states[k], self.h[k], self.K[k], theta)


def _collect(rhs, y0, s_end, rtol, atol, max_step):
    segs = []

    def on_step(rec):
        segs.append((rec.s0[0], rec.h[0], rec.y0[0], rec.y1[0], rec.K[0]))

    dopri_batch(rhs, y0[None, :], s_end, rtol=rtol, atol=atol, max_step=max_step, on_step=on_step)
    s = np.array([segs[0][0]] + [a[0] + a[1] for a in segs])
    states = np.array([segs[0][2]] + [a[3] for a in segs])
    return s, states, np.array([a[1] for a in segs]), np.array([a[4] for a in segs])


def _span(s_span):
    if np.isscalar(s_span):
        return 0.0, float(s_span)
    a, b = s_span
    return float(a), float(b)


def integrate_half(metric, sign, w0, s_span, tol=1e-8, rtol=1e-10, atol=1e-12, max_step=0.5):
    """Half flow of b± from w0 = (x0, xi0). ``s_span`` = T or (s0, s1); s0 shifts the labels."""
    sg = as_sign(sign)
    x0, xi0 = (np.asarray(w0.x), np.asarray(w0.xi)) if hasattr(w0, "x") else w0
    y0 = np.concatenate([np.asarray(x0, float), np.asarray(xi0, float)])
    if np.sum(y0[3:] ** 2) == 0.0:
        raise ValueError("xi0 must be nonzero")
    a, b = _span(s_span)
    s, st, h, K = _collect(half_rhs(metric, sg), y0, b - a, rtol, atol, max_step)
    bvals = np.asarray(b_both(metric, st[:, :3], st[:, 3:])[0 if sg > 0 else 1])
    drift = float(np.max(np.abs(bvals - bvals[0])) / abs(bvals[0]))
    return Trajectory(s + a, st, "+" if sg > 0 else "-", drift, drift <= tol, h, K)


def integrate_full(metric, w0, s_span, tol=1e-8, rtol=1e-10, atol=1e-12, max_step=0.5):
    """Full flow from w0 = (t, tau, x, xi); drift reports tau and, for null data, p."""
    if hasattr(w0, "tau"):
        y0 = np.concatenate([[w0.t, w0.tau], np.asarray(w0.x, float), np.asarray(w0.xi, float)])
    else:
        y0 = np.asarray(w0, dtype=float)
    if y0[1] == 0.0 and np.sum(y0[5:] ** 2) == 0.0:
        raise ValueError("(tau, xi) must be nonzero")
    a, b = _span(s_span)
    s, st, h, K = _collect(full_rhs(metric), y0, b - a, rtol, atol, max_step)
    tau0 = st[0, 1]
    scale = abs(tau0) + np.sqrt(np.sum(st[0, 5:] ** 2))
    drift_tau = float(np.max(np.abs(st[:, 1] - tau0)) / scale)
    p = p_symbol(metric, st[:, 1], st[:, 2:5], st[:, 5:8])
    drift_p = float(np.max(np.abs(p - p[0])) / scale**2)
    drift = max(drift_tau, drift_p)
    return Trajectory(s + a, st, "full", drift, drift <= tol, h, K)


def integrate_half_batch(metric, sign, x0, xi0, s_end, rtol=1e-10, atol=1e-12, max_step=0.5):
    """End states of many half-flow rays (no dense output kept)."""
    y0 = np.concatenate([np.asarray(x0, float), np.asarray(xi0, float)], axis=1)
    _, y, _ = dopri_batch(half_rhs(metric, sign), y0, s_end, rtol=rtol, atol=atol, max_step=max_step)
    return y[:, :3], y[:, 3:]


def reparam_match(metric, w0, t_window=50.0, n_check=501, rtol=1e-10, atol=1e-12, max_step=0.5):
    """Compare the t-reparameterized full flow with the half flow of the matching branch.

    w0 = (x, xi, branch): tau0 = b±(x, xi), so p(w0) = 0. Along the full flow
    t' = -2(tau - beta) = -+2 sqrt(beta^2 + Q), so t is monotone; we integrate
    in the direction in which t increases, invert s -> t by Newton iteration on
    the dense output, and compare (x, xi) at common t with the half flow.
    """
    x0, xi0, branch = w0
    sg = as_sign(branch)
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    bp, bm = b_both(metric, x0, xi0)
    tau0 = float(bp if sg > 0 else bm)
    # t' < 0 on the + branch and > 0 on the - branch
    direction = -1.0 if sg > 0 else 1.0
    rate0 = abs(float(full_rhs(metric)(np.concatenate([[0.0, tau0], x0, xi0])[None, :])[0, 0]))
    s_len = 1.5 * t_window / max(rate0, 1e-12)
    full = None
    for _ in range(8):
        full = integrate_full(metric, np.concatenate([[0.0, tau0], x0, xi0]), direction * s_len,
                              rtol=rtol, atol=atol, max_step=max_step)
        if abs(full.states[-1, 0]) >= t_window:
            break
        s_len *= 2.0
    half = integrate_half(metric, sg, (x0, xi0), t_window, rtol=rtol, atol=atol, max_step=max_step)
    t_grid = np.linspace(0.0, t_window, n_check)
    # initial guess by linear interpolation of t(s) on the accepted nodes
    tn = full.states[:, 0]
    order = np.argsort(tn)
    s_guess = np.interp(t_grid, tn[order], full.s[order])
    rhs = full_rhs(metric)
    for _ in range(50):
        st = full.at(s_guess)
        tdot = rhs(st)[:, 0]
        ds = (st[:, 0] - t_grid) / tdot
        s_guess = s_guess - ds
        if np.max(np.abs(ds)) < 1e-15 * max(1.0, np.max(np.abs(s_guess))):
            break
    st = full.at(s_guess)
    hs = half.at(t_grid)
    dx = np.max(np.sqrt(np.sum((st[:, 2:5] - hs[:, :3]) ** 2, axis=1)))
    dxi = np.max(np.sqrt(np.sum((st[:, 5:8] - hs[:, 3:]) ** 2, axis=1))) / np.sqrt(np.sum(xi0**2))
    return {"deviation": float(max(dx, dxi)), "dev_x": float(dx), "dev_xi": float(dxi),
            "branch": "+" if sg > 0 else "-", "tau0": tau0, "t_window": float(t_window),
            "drift_full": full.conserved_drift, "drift_half": half.conserved_drift}


def verify_flow_scaling(metric, w0, lam, sign, s_window=50.0, n_check=501, rtol=1e-10,
                        atol=1e-12, max_step=0.5):
    """Deviation of x_s(x, lam xi) = x_s(x, xi) and xi_s(x, lam xi) = lam xi_s(x, xi)."""
    x0, xi0 = (w0.x, w0.xi) if hasattr(w0, "x") else w0
    x0 = np.asarray(x0, float)
    xi0 = np.asarray(xi0, float)
    a = integrate_half(metric, sign, (x0, xi0), s_window, rtol=rtol, atol=atol, max_step=max_step)
    if lam == 1.0:
        return {"dev_x": 0.0, "dev_xi": 0.0, "deviation": 0.0, "lambda": 1.0}
    b = integrate_half(metric, sign, (x0, lam * xi0), s_window, rtol=rtol, atol=atol, max_step=max_step)
    s = np.linspace(0.0, s_window, n_check)
    ya, yb = a.at(s), b.at(s)
    nxi = np.sqrt(np.sum(xi0**2))
    dx = float(np.max(np.abs(yb[:, :3] - ya[:, :3])))
    dxi = float(np.max(np.abs(yb[:, 3:] - lam * ya[:, 3:])) / (lam * nxi))
    return {"dev_x": dx, "dev_xi": dxi, "deviation": max(dx, dxi), "lambda": float(lam)}


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

@dataclass
class RayClass:
    verdict: str
    escape_param: float
    horizon: float
    min_radius: float
    max_radius: float
    max_damping: float = 0.0
    first_hit: float = float("nan")
    permanence: bool = True
    drift: float = 0.0
    note: str = ""


class _Tracker:
    """Per-ray running diagnostics for one direction of a batched run."""

    def __init__(self, metric, sign, x0, R, delta, direction, a_threshold, extend):
        n = len(x0)
        self.metric = metric
        self.sign = as_sign(sign)
        self.r0 = np.sqrt(np.sum(x0 * x0, axis=1))
        self.target = np.maximum(2.0 * R, self.r0 + delta)
        self.direction = direction
        self.a_threshold = a_threshold
        self.extend = extend
        self.rmin = self.r0.copy()
        self.rmax = self.r0.copy()
        self.amax = metric.a(x0) if a_threshold is not None else np.zeros(n)
        self.first_hit = np.where(self.amax > (a_threshold or np.inf), 0.0, np.nan)
        self.escape = np.full(n, np.nan)
        self.r_escape = np.full(n, np.nan)
        self.monotone = np.ones(n, dtype=bool)
        self.r_prev = np.full(n, np.nan)

    def __call__(self, rec):
        x1 = rec.y1[:, :3]
        r1 = np.sqrt(np.sum(x1 * x1, axis=1))
        i = rec.idx
        s1 = rec.s0 + rec.h
        esc_known = ~np.isnan(self.escape[i])
        # before escape: track radii, damping and the escape criterion
        pre = ~esc_known
        ip = i[pre]
        self.rmin[ip] = np.minimum(self.rmin[ip], r1[pre])
        self.rmax[ip] = np.maximum(self.rmax[ip], r1[pre])
        if self.a_threshold is not None:
            a1 = self.metric.a(x1)
            self.amax[ip] = np.maximum(self.amax[ip], a1[pre])
            new_hit = pre & np.isnan(self.first_hit[i]) & (a1 > self.a_threshold)
            self.first_hit[i[new_hit]] = np.abs(s1[new_hit])
        fire = pre & (r1 >= self.target[i])
        if np.any(fire):
            sp = self._refine(rec, fire)
            self.escape[i[fire]] = sp
            self.r_escape[i[fire]] = self.target[i[fire]]
            self.r_prev[i[fire]] = r1[fire]
        # after escape: check monotone growth of |x| up to 1.1 s'
        post = esc_known
        if np.any(post):
            ipo = i[post]
            self.monotone[ipo] &= r1[post] > self.r_prev[ipo]
            self.r_prev[ipo] = r1[post]
        stop = np.zeros(len(i), dtype=bool)
        done = ~np.isnan(self.escape[i]) & (np.abs(s1) >= self.extend * np.abs(self.escape[i]))
        stop |= done
        return stop

    def _refine(self, rec, fire):
        """First parameter with |x| = target inside the step, by bisection on the dense output."""
        y0, h, K = rec.y0[fire], rec.h[fire], rec.K[fire]
        tgt = self.target[rec.idx[fire]]
        lo = np.zeros(len(h))
        hi = np.ones(len(h))
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ym = dense_eval(y0, h, K, mid)
            out = np.sqrt(np.sum(ym[:, :3] ** 2, axis=1)) >= tgt
            hi = np.where(out, mid, hi)
            lo = np.where(out, lo, mid)
        return np.abs(rec.s0[fire] + hi * h)


def _classify_dir(metric, sign, x0, xi0, R, delta, T_max, direction, a_threshold, rtol, atol,
                  max_step):
    tr = _Tracker(metric, sign, x0, R, delta, direction, a_threshold, 1.1)
    y0 = np.concatenate([x0, xi0], axis=1)
    n = len(x0)
    # run to 1.1 T_max at most so escapes near the horizon still get the permanence check
    s_end = np.full(n, direction * 1.1 * T_max)
    failed = np.zeros(n, dtype=bool)
    try:
        _, y, _ = dopri_batch(half_rhs(metric, sign), y0, s_end, rtol=rtol, atol=atol,
                              max_step=max_step, on_step=tr)
    except StepFailure as exc:
        failed[exc.rays] = True
    bidx = 0 if as_sign(sign) > 0 else 1
    b0 = b_both(metric, x0, xi0)[bidx]
    return tr, failed, b0


def classify_rays(metric, sign, x0, xi0, R, delta=None, T_max=500.0, direction="both",
                  a_threshold=None, rtol=1e-10, atol=1e-12, max_step=0.5, threads=1):
    """Classify a batch of rays; returns a list of RayClass in input order.

    Rays are processed in fixed chunks of CHUNK seeds; ``threads`` only decides
    how many chunks run at once, so the output does not depend on it.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    delta = 0.1 * R if delta is None else delta
    chunks = [(k, min(k + CHUNK, len(x0))) for k in range(0, len(x0), CHUNK)]

    def job(c):
        lo, hi = c
        return _classify_chunk(metric, sign, x0[lo:hi], xi0[lo:hi], R, delta, T_max, direction,
                               a_threshold, rtol, atol, max_step)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    return [rc for part in parts for rc in part]


def _classify_chunk(metric, sign, x0, xi0, R, delta, T_max, direction, a_threshold, rtol, atol,
                    max_step):
    dirs = {"forward": [1.0], "backward": [-1.0], "both": [1.0, -1.0]}[direction]
    runs = [(d,) + _classify_dir(metric, sign, x0, xi0, R, delta, T_max, d, a_threshold, rtol,
                                 atol, max_step) for d in dirs]
    out = []
    for k in range(len(x0)):
        rmin = min(r[1].rmin[k] for r in runs)
        rmax = max(r[1].rmax[k] for r in runs)
        amax = max(r[1].amax[k] for r in runs)
        hits = [r[1].first_hit[k] * r[0] for r in runs if not np.isnan(r[1].first_hit[k])]
        first = min(hits, key=abs) if hits else float("nan")
        failed = any(r[2][k] for r in runs)
        esc = [(r[0], r[1].escape[k], r[1].monotone[k]) for r in runs
               if not np.isnan(r[1].escape[k]) and r[1].escape[k] <= T_max]
        if failed:
            out.append(RayClass(UNDETERMINED, float("nan"), T_max, rmin, rmax, amax, first,
                                True, note="integration failure"))
        elif esc:
            d, sp, mono = min(esc, key=lambda e: e[1])
            out.append(RayClass(ESCAPED, float(d * sp), T_max, rmin, rmax, amax, first, bool(mono)))
        elif rmax <= 2.0 * R:
            out.append(RayClass(TRAPPED, float("nan"), T_max, rmin, rmax, amax, first, True))
        else:
            out.append(RayClass(UNDETERMINED, float("nan"), T_max, rmin, rmax, amax, first, True,
                                note="left 2R without meeting the escape criterion"))
    return out


def classify_ray(metric, sign, w0, R, delta=None, T_max=500.0, direction="both",
                 a_threshold=None, **kw):
    x0, xi0 = (w0.x, w0.xi) if hasattr(w0, "x") else w0
    return classify_rays(metric, sign, np.asarray(x0, float)[None, :],
                         np.asarray(xi0, float)[None, :], R, delta, T_max, direction,
                         a_threshold, **kw)[0]


# ---------------------------------------------------------------------------
# seeds and the GCC audit
# ---------------------------------------------------------------------------

def gcc_seeds(metric, sign, R, count, seed=0):
    """Scrambled Halton points in {|x| <= 2R} x S^2, normalized by Phi±."""
    u = qmc.Halton(d=5, scramble=True, seed=seed).random(count)
    x = 2.0 * R * u[:, :1] ** (1.0 / 3.0) * unit_directions(u[:, 1:3])
    xi = unit_directions(u[:, 3:5])
    return phi_scale(metric, x, xi, sign)


def detect_trapped_shell(metric, sign, R, T_max=500.0, n_radii=64, rtol=1e-10, atol=1e-12,
                         max_step=0.5):
    """Radii whose tangential rays (x = (r,0,0), xi = (0,1,0)) stay bounded; (r_lo, r_hi) or None."""
    r = np.linspace(0.05, 2.0 * R, n_radii) * (1.0 - 0.5 / n_radii)
    x = np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=1)
    xi = np.tile([0.0, 1.0, 0.0], (n_radii, 1))
    x, xi = phi_scale(metric, x, xi, sign)
    cls = classify_rays(metric, sign, x, xi, R, T_max=T_max, direction="both", rtol=rtol,
                        atol=atol, max_step=max_step)
    rt = r[[c.verdict == TRAPPED for c in cls]]
    if len(rt) == 0:
        return None
    return float(rt.min()), float(rt.max())


def shell_seeds(metric, sign, r_lo, r_hi, count, seed=0, tilt=0.05):
    """Seeds at radii in [r_lo, r_hi] with nearly tangential covectors of random orientation."""
    u = qmc.Halton(d=4, scramble=True, seed=seed + 104729).random(count)
    n = unit_directions(u[:, :2])
    r = r_lo + (r_hi - r_lo) * u[:, 2]
    # orthonormal frame of the tangent plane at n
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    ang = 2.0 * np.pi * u[:, 3]
    t = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    radial = tilt * (2.0 * ((u[:, 3] * 7.0) % 1.0) - 1.0)
    xi = t + radial[:, None] * n
    return phi_scale(metric, r[:, None] * n, xi, sign)


@dataclass
class GCCReport:
    sign: str
    verdicts: list
    n_trapped: int
    n_escaped: int
    n_undetermined: int
    n_hit: int
    trapped_fraction_hit: float
    a_threshold: float
    permanence_ok: bool
    x0: np.ndarray = field(repr=False, default=None)
    xi0: np.ndarray = field(repr=False, default=None)

    def aggregates(self):
        return {"sign": self.sign, "seeds": len(self.verdicts), "trapped": self.n_trapped,
                "escaped": self.n_escaped, "undetermined": self.n_undetermined,
                "trapped_hit": self.n_hit, "trapped_fraction_hit": self.trapped_fraction_hit,
                "gcc_holds": self.n_trapped == self.n_hit, "a_threshold": self.a_threshold,
                "escape_permanence": self.permanence_ok}

    def rows(self):
        for k, c in enumerate(self.verdicts):
            yield {"seed": k, "sign": self.sign, "verdict": c.verdict,
                   "s_escape_or_horizon": c.escape_param if c.verdict == ESCAPED else c.horizon,
                   "min_radius": c.min_radius, "max_radius": c.max_radius,
                   "max_a": c.max_damping, "first_hit": c.first_hit}


def check_gcc(metric, seeds, sign, R, delta=None, T_max=500.0, a_threshold=None, threads=1,
              rtol=1e-10, atol=1e-12, max_step=0.5):
    """Classify every seed and test whether the Trapped ones meet {a > a_threshold}."""
    x0, xi0 = seeds
    if a_threshold is None:
        a_threshold = 1e-6 * _damping_max(metric)
    cls = classify_rays(metric, sign, x0, xi0, R, delta, T_max, "both", a_threshold, rtol, atol,
                        max_step, threads)
    trapped = [c for c in cls if c.verdict == TRAPPED]
    hit = [c for c in trapped if c.max_damping > a_threshold]
    esc = [c for c in cls if c.verdict == ESCAPED]
    frac = len(hit) / len(trapped) if trapped else 1.0
    return GCCReport("+" if as_sign(sign) > 0 else "-", cls, len(trapped), len(esc),
                     sum(c.verdict == UNDETERMINED for c in cls), len(hit), frac,
                     float(a_threshold), all(c.permanence for c in esc), x0, xi0)


def _damping_max(metric):
    d = metric.damping
    p = d.params
    if "amplitude" in p:
        return p["amplitude"] * p.get("scale", 1.0)
    return 0.0
