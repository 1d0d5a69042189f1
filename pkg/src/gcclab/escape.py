"""Escape-function symbols and the sampled positivity check.

Per light-cone branch ± there are three ingredients, all degree 0 in xi:

* q1 (semi-bounded rays): a finite sum of flow integrals
  q_w(z) = int_0^{s_w} chi_w(phi_{-s} z) ds over a cover of the trapped seeds,
  composed with Phi±(x, xi) = (x, xi / |b±|);
* q_in (non-trapped interior rays): -chi_{<2R}(|x|) int_0^inf psi(phi_s z) ds,
  again composed with Phi±;
* q_out (exterior): -chi_{>R}(|x|) f(|x|) d_xi b± . x/|x| with the bootstrap
  weight f = exp(sigma F), F(r) = int_{R0}^r c(s)/s ds.

They are combined as

    q = (tau - b+) Q- + (tau - b-) Q+,
    Q± = [exp(-sigma q1±) + exp(-sigma (eps q_in± + q_out±))] chi_{>lam}(|b±|),

and the bracket H_p q + 2 gamma tau a q = a0 tau^2 + a1 tau + a2 is measured by
central differences of q along the Hamiltonian field of p. The correction
m = -(a1 (b+ + b-) + 2 (a0 b+ b- + a2)) / (b+ - b-)^2 makes the corrected
quadratic positive in tau whenever it is positive at tau = b±.

Every flow-integral symbol is evaluated once per phase-space point and cached
as a handful of scalar "components"; sigma, gamma, eps and lam enter only
through cheap algebra on those components, which is what makes the tuning
loop affordable.
"""

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.stats import qmc

from .cutoff import chi, chi_gt, chi_lt, smoothstep
from .flow import half_rhs
from .halfwave import as_sign, b_both, b_scale_bounds, grad_b, phi_scale, unit_directions
from .metric import japanese, with_damping

__all__ = [
    "EscapeConstructionError", "BootstrapWeight", "build_bootstrap", "CoverElement",
    "SemiBoundedSymbol", "build_q_semibounded", "PsiSpec", "InteriorSymbol", "build_q_in",
    "ExteriorSymbol", "build_q_out", "EscapeSymbols", "EscapeAssembly", "assemble_q",
    "build_correction", "SampleSpec", "PositivityReport", "verify_escape_inequality",
    "PhaseSamples", "sample_phase_space", "ComponentCache", "cache_components",
    "evaluate_cache", "tune_escape", "TuningResult", "hamilton_field",
]

C_FLOOR = 1e-12
SIGNS = (1, -1)
CHUNK = 1 << 17


class EscapeConstructionError(RuntimeError):
    """A symbol could not be built; ``ledger`` carries the offending data."""

    def __init__(self, msg, ledger=None):
        super().__init__(msg)
        self.ledger = ledger or {}


def _key(sign):
    return "+" if as_sign(sign) > 0 else "-"


# ---------------------------------------------------------------------------
# bootstrap weight
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapWeight:
    """f(r) = exp(sigma F(r)) with F(r) = int_{R0}^r c(s)/s ds.

    F does not depend on sigma, so ``with_sigma`` reuses the quadrature table.
    """
    sigma: float
    R0: float
    delta: float
    c_nodes: np.ndarray
    u_nodes: np.ndarray
    _logc: object = field(repr=False)
    _G: object = field(repr=False)
    _G0: float = 0.0

    def _u(self, r):
        r = np.asarray(r, dtype=float)
        return np.log(np.maximum(r, 1e-300))

    def c_fn(self, r):
        u = np.clip(self._u(r), self.u_nodes[0], self.u_nodes[-1])
        return np.exp(self._logc(u))

    def dc(self, r):
        """c'(s), zero outside the node range where c is held constant."""
        u = self._u(r)
        inside = (u > self.u_nodes[0]) & (u < self.u_nodes[-1])
        uc = np.clip(u, self.u_nodes[0], self.u_nodes[-1])
        val = np.exp(self._logc(uc)) * self._logc(uc, 1) / np.maximum(np.asarray(r, float), 1e-300)
        return np.where(inside, val, 0.0)

    def F(self, r):
        u = self._u(r)
        lo, hi = self.u_nodes[0], self.u_nodes[-1]
        uc = np.clip(u, lo, hi)
        g = self._G(uc)
        c_lo = np.exp(self._logc(lo))
        c_hi = np.exp(self._logc(hi))
        g = g + np.where(u < lo, c_lo * (u - lo), 0.0) + np.where(u > hi, c_hi * (u - hi), 0.0)
        return g - self._G0

    def f(self, r):
        return np.exp(self.sigma * self.F(r))

    def dF(self, r):
        """F'(r), the derivative of the tabulated F (equal to c(r)/r up to the table error)."""
        r = np.asarray(r, dtype=float)
        u = self._u(r)
        inside = (u > self.u_nodes[0]) & (u < self.u_nodes[-1])
        uc = np.clip(u, self.u_nodes[0], self.u_nodes[-1])
        return np.where(inside, self._G(uc, 1), self.c_fn(r)) / r

    def df(self, r):
        return self.sigma * self.dF(r) * self.f(r)

    def f_inf(self):
        return float(np.exp(self.sigma * self.F(np.exp(self.u_nodes[-1]))))

    def with_sigma(self, sigma):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        return BootstrapWeight(float(sigma), self.R0, self.delta, self.c_nodes, self.u_nodes,
                               self._logc, self._G, self._G0)


def build_bootstrap(c_seq, sigma, extra_levels=24, n_sub=8):
    """Smooth c(s) from the dyadic sequence and the weight f.

    c is a monotone cubic (PCHIP) in log-log coordinates through the nodes
    (1.5 * 2^j, 1.5 c_j) for j >= j0, held constant outside the node range
    (only r > R0 matters). Beyond the last sampled level the sequence continues as c_J 2^{-delta (j - J)}.
    F is tabulated by adaptive quadrature on a fixed sub-grid and interpolated
    by a cubic Hermite spline with the exact derivative c(e^u).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = np.asarray(c_seq.c_seq, dtype=float)[c_seq.j0:].copy()
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("c_seq must be finite and nonnegative")
    if np.any(c < C_FLOOR):
        warnings.warn(f"c_seq has entries below {C_FLOOR:g}; substituting the floor", stacklevel=2)
        c = np.maximum(c, C_FLOOR)
    tail = c[-1] * 2.0 ** (-c_seq.delta * np.arange(1, extra_levels + 1))
    c = np.concatenate([c, np.maximum(tail, C_FLOOR)])
    u_nodes = np.log(1.5) + np.log(2.0) * (c_seq.j0 + np.arange(len(c)))
    logc = PchipInterpolator(u_nodes, np.log(1.5 * c))
    ug = np.linspace(u_nodes[0], u_nodes[-1], n_sub * (len(c) - 1) + 1)
    G = np.zeros_like(ug)
    for k in range(1, len(ug)):
        G[k] = G[k - 1] + quad(lambda u: np.exp(logc(u)), ug[k - 1], ug[k],
                               epsabs=0.0, epsrel=1e-12)[0]
    spline = CubicHermiteSpline(ug, G, np.exp(logc(ug)))
    bw = BootstrapWeight(float(sigma), float(c_seq.R0), float(c_seq.delta), c, u_nodes, logc,
                         spline, 0.0)
    G0 = float(bw.F(c_seq.R0))
    return BootstrapWeight(float(sigma), float(c_seq.R0), float(c_seq.delta), c, u_nodes, logc,
                           spline, G0)


# ---------------------------------------------------------------------------
# fixed-step flows shared by q1 and q_in
# ---------------------------------------------------------------------------

def _rk4_step(rhs, y, h):
    k1 = rhs(y)
    y2 = y + 0.5 * h * k1
    k2 = rhs(y2)
    y3 = y + 0.5 * h * k2
    k3 = rhs(y3)
    y4 = y + h * k3
    k4 = rhs(y4)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), (y, y2, y3, y4)


def _flow_fixed(metric, sign, x, xi, s, h):
    """State after signed time s with RK4 steps of size <= h (s/h rounded up)."""
    y = np.concatenate([np.atleast_2d(x), np.atleast_2d(xi)], axis=1).astype(float)
    n = int(np.ceil(abs(s) / h - 1e-9))
    if n == 0:
        return y[:, :3], y[:, 3:]
    rhs = half_rhs(metric, sign)
    hh = s / n
    for _ in range(n):
        y, _ = _rk4_step(rhs, y, hh)
    return y[:, :3], y[:, 3:]


def _max_speed(metric):
    """Upper bound for |x'| = |d_xi b| along half flows."""
    return float(metric.cross_bound + np.sqrt(metric.ellipticity_bounds[1]))


def _min_speed(metric):
    c_ell = metric.ellipticity_bounds[0]
    k = metric.cross_bound
    return float(max(np.sqrt(k * k + c_ell) - k, 1e-3))


def _a_max(metric):
    p = metric.damping.params
    if "amplitude" in p:
        return float(p["amplitude"] * p.get("scale", 1.0))
    return 0.0


# ---------------------------------------------------------------------------
# q1: semi-bounded construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverElement:
    """One cover element w with chi_w = chi(d/rho): 1 on V_w = {d <= rho}, 0 off U_w = {d >= 2 rho}.

    d is the Euclidean distance in (x, xi) to the normalized seed. ``k`` is the
    signed number of RK4 steps (of size s_w / k) used for the flow integral.
    """
    x: np.ndarray
    xi: np.ndarray
    rho: float
    s_w: float
    alpha: float
    k: int

    def to_dict(self):
        return {"x": [float(v) for v in self.x], "xi": [float(v) for v in self.xi],
                "rho": self.rho, "s_w": self.s_w, "alpha": self.alpha}


@dataclass(frozen=True)
class DampingElement:
    """Zero-time cover element: V = {a >= hi a_max}, U = {a > lo a_max}, alpha = lo a_max / 2.

    Seeds already inside V need no flow integral (s_w = 0 gives q_w = 0 and the
    damping term alone carries the estimate there).
    """
    a_max: float
    lo: float = 0.125
    hi: float = 0.25

    @property
    def alpha(self):
        return 0.5 * self.lo * self.a_max

    def weight(self, a):
        """1 on V, 0 off U (the factor removed from psi)."""
        if self.a_max <= 0.0:
            return np.zeros_like(np.asarray(a, dtype=float))
        return smoothstep((np.asarray(a, dtype=float) / self.a_max - self.lo) / (self.hi - self.lo))

    def to_dict(self):
        return {"a_max": self.a_max, "lo": self.lo, "hi": self.hi, "alpha": self.alpha}


@dataclass
class SemiBoundedSymbol:
    metric: object
    sign: int
    R: float
    elements: list
    damping_element: DampingElement
    C: float
    h: float
    skipped: int = 0
    uncovered: int = 0
    margin: float = float("nan")

    def to_dict(self):
        return {"sign": _key(self.sign), "R": self.R, "C": self.C, "h": self.h,
                "elements": [e.to_dict() for e in self.elements],
                "damping_element": self.damping_element.to_dict(),
                "seeds_inside_damping": self.skipped, "seeds_uncovered": self.uncovered,
                "validation_margin": self.margin}

    def chi_elements(self, x, xi):
        """(m, M) matrix of chi_w at the points."""
        if not self.elements:
            return np.zeros((len(x), 0))
        cx = np.stack([e.x for e in self.elements])
        cxi = np.stack([e.xi for e in self.elements])
        rho = np.array([e.rho for e in self.elements])
        d2 = (np.sum((x[:, None, :] - cx[None]) ** 2, axis=-1)
              + np.sum((xi[:, None, :] - cxi[None]) ** 2, axis=-1))
        return chi(np.sqrt(d2) / rho[None, :])

    def tilde(self, x, xi):
        """Sum of q_w at already-normalized points (flow integrals, no Phi)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        out = np.zeros(len(x))
        for e in self.elements:
            if e.k != 0:
                out += self._q_w(e, x, xi)
        return out

    def _q_w(self, e, x, xi):
        # q_w(z) = int_0^{s_w} chi_w(phi_{-s} z) ds by RK4 in k steps of s_w / k;
        # only points within flow reach of U_w can be nonzero
        reach = 2.0 * e.rho + _max_speed(self.metric) * abs(e.s_w)
        near = np.sqrt(np.sum((x - e.x) ** 2, axis=1)) <= reach
        out = np.zeros(len(x))
        idx = np.nonzero(near)[0]
        if len(idx) == 0:
            return out
        y = np.concatenate([x[idx], xi[idx]], axis=1)
        rhs = half_rhs(self.metric, self.sign)
        hstep = e.s_w / abs(e.k)
        acc = np.zeros(len(idx))
        for _ in range(abs(e.k)):
            y, stages = _rk4_step(rhs, y, -hstep)
            for wgt, st in zip((1.0, 2.0, 2.0, 1.0), stages):
                d = np.sqrt(np.sum((st[:, :3] - e.x) ** 2, axis=1) + np.sum((st[:, 3:] - e.xi) ** 2, axis=1))
                acc += wgt * chi(d / e.rho)
        out[idx] = acc * (hstep / 6.0)
        return out

    def __call__(self, x, xi):
        """q1± = q~1 o Phi±."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not any(e.k != 0 for e in self.elements):
            return np.zeros(len(x))
        xn, xin = phi_scale(self.metric, x, np.atleast_2d(xi), self.sign)
        return self.tilde(xn, xin)


def _hit_profile(metric, sign, x, xi, horizon, h, direction):
    """a along the RK4 grid (k = 0..n) of the flow in the given direction."""
    n = int(np.ceil(horizon / h))
    rhs = half_rhs(metric, sign)
    y = np.concatenate([x, xi], axis=1)
    prof = np.empty((n + 1, len(x)))
    prof[0] = metric.a(y[:, :3])
    for k in range(n):
        y, _ = _rk4_step(rhs, y, direction * h)
        prof[k + 1] = metric.a(y[:, :3])
    return prof


def _choose_sw(prof, threshold):
    """(k, a_at_k) per seed: the first local peak of a after entering {a > threshold}, or (None, 0)."""
    out = []
    for col in prof.T:
        above = np.nonzero(col > threshold)[0]
        if len(above) == 0:
            out.append((None, 0.0))
            continue
        kp = above[0]
        while kp + 1 < len(col) and col[kp + 1] >= col[kp]:
            kp += 1
        out.append((int(kp), float(col[kp])))
    return out


def build_q_semibounded(metric, damping, sign, R, trapped_seeds, horizon, rho=0.25, h=0.02,
                        a_threshold=None, n_validate=64, max_halvings=5, max_elements=512,
                        damping_lo=0.125, damping_hi=0.25, seed=0):
    """Finite cover of the semi-bounded seeds and the symbol q1± = sum_w q_w o Phi±.

    Seeds are normalized by Phi±, restricted to |x| <= R and ordered by damping
    hit time. Seeds inside the damping element {a >= damping_hi a_max} are
    covered by it. Each remaining seed gets s_w on the RK4 grid at the first
    local peak of a(x_s) after entering {a > a_threshold}, forward or backward,
    whichever is sooner, and alpha_w = a(x_{s_w})/2; U_w is validated by
    sampling, halving rho when some point of U_w misses {a > alpha_w}.
    ``damping`` replaces the metric's damping when given. Returns (symbol, C)
    with C = sum 2/alpha over all elements.
    """
    if damping is not None:
        metric = with_damping(metric, damping)
    sg = as_sign(sign)
    a_max = _a_max(metric)
    if a_threshold is None:
        a_threshold = 1e-6 * a_max
    x0, xi0 = trapped_seeds
    x0 = np.atleast_2d(np.asarray(x0, dtype=float)).reshape(-1, 3)
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float)).reshape(-1, 3)
    dmp = DampingElement(a_max, damping_lo, damping_hi)
    if len(x0) == 0:
        return SemiBoundedSymbol(metric, sg, R, [], dmp, 0.0, h), 0.0
    if a_max <= 0.0:
        raise EscapeConstructionError("trapped seeds present but the damping vanishes",
                                      {"seeds": len(x0)})
    x0, xi0 = phi_scale(metric, x0, xi0, sg)
    keep = np.sqrt(np.sum(x0 * x0, axis=1)) <= R
    x0, xi0 = x0[keep], xi0[keep]
    a0 = metric.a(x0)
    inside = dmp.weight(a0) >= 1.0
    skipped = int(np.sum(inside))
    x0, xi0 = x0[~inside], xi0[~inside]
    if len(x0) == 0:
        return SemiBoundedSymbol(metric, sg, R, [], dmp, 2.0 / dmp.alpha, h, skipped), 2.0 / dmp.alpha
    fwd = _choose_sw(_hit_profile(metric, sg, x0, xi0, horizon, h, 1.0), a_threshold)
    bwd = _choose_sw(_hit_profile(metric, sg, x0, xi0, horizon, h, -1.0), a_threshold)
    choice = []
    for i, (f, b) in enumerate(zip(fwd, bwd)):
        cands = [(k, a) for k, a in (f,) if k is not None] + [(-k, a) for k, a in (b,) if k is not None]
        if not cands:
            raise EscapeConstructionError(
                "a seed never meets the damping within the horizon (GCC fails for this cover)",
                {"seed_x": x0[i].tolist(), "seed_xi": xi0[i].tolist(), "horizon": horizon})
        choice.append(min(cands, key=lambda c: (abs(c[0]), -c[1])))
    order = sorted(range(len(x0)), key=lambda i: (abs(choice[i][0]), i))
    rng = np.random.default_rng(seed)
    elements = []
    uncovered = 0
    for i in order:
        z = np.concatenate([x0[i], xi0[i]])
        covered = any(np.linalg.norm(z - np.concatenate([e.x, e.xi])) < e.rho for e in elements)
        if covered:
            continue
        if len(elements) >= max_elements:
            uncovered += 1
            continue
        k, a_hit = choice[i]
        alpha = 0.5 * a_hit
        r_try = rho
        for _ in range(max_halvings + 1):
            pts = z + 2.0 * r_try * _ball6(rng, n_validate)
            xs, _ = _flow_fixed(metric, sg, pts[:, :3], pts[:, 3:], k * h, h)
            if np.all(metric.a(xs) > alpha):
                break
            r_try *= 0.5
        else:
            raise EscapeConstructionError(
                "no neighbourhood of a seed keeps a(x_{s_w}) above alpha_w",
                {"seed_x": x0[i].tolist(), "seed_xi": xi0[i].tolist(), "s_w": k * h,
                 "alpha": alpha})
        # resolve chi_w along the ray: at least 32 steps per crossing of V_w
        h_w = min(h, r_try / (32.0 * _max_speed(metric)))
        n_w = int(np.sign(k)) * int(np.ceil(abs(k) * h / h_w))
        elements.append(CoverElement(x0[i].copy(), xi0[i].copy(), float(r_try), float(k * h),
                                     float(alpha), n_w))
    C = float(sum(2.0 / e.alpha for e in elements) + 2.0 / dmp.alpha)
    sym = SemiBoundedSymbol(metric, sg, R, elements, dmp, C, h, skipped, uncovered)
    sym.margin = _validate_semibounded(sym, rng, n_validate)
    return sym, C


def _ball6(rng, n):
    v = rng.normal(size=(n, 6))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random((n, 1)) ** (1.0 / 6.0)


def directional_derivative(fn, metric, sign, x, xi, rel=1e-5):
    """Central difference of fn along the half-flow field at (x, xi)."""
    _, bx, bxi = grad_b(metric, x, xi, sign)
    vx, vxi = -bxi, bx
    nx = np.sqrt(np.sum(vx * vx, axis=-1))
    nxi = np.sqrt(np.sum(vxi * vxi, axis=-1))
    with np.errstate(divide="ignore"):
        eta = rel * np.minimum(np.maximum(1.0, np.sqrt(np.sum(x * x, axis=-1))) / nx,
                               np.where(nxi > 0, np.sqrt(np.sum(xi * xi, axis=-1)) / nxi, np.inf))
    e = eta[:, None]
    return (fn(x + e * vx, xi + e * vxi) - fn(x - e * vx, xi - e * vxi)) / (2.0 * eta)


def _validate_semibounded(sym, rng, n):
    """min of H q1 + C a over points of the V_w (empty cover: nan)."""
    if not sym.elements:
        return float("nan")
    vals = []
    for e in sym.elements:
        z = np.concatenate([e.x, e.xi]) + e.rho * _ball6(rng, n)
        xs, xis = z[:, :3], z[:, 3:]
        d = directional_derivative(sym.tilde, sym.metric, sym.sign, xs, xis)
        vals.append(np.min(d + sym.C * sym.metric.a(xs)))
    return float(min(vals))


# ---------------------------------------------------------------------------
# q_in: interior non-trapped construction
# ---------------------------------------------------------------------------

@dataclass
class PsiSpec:
    """psi(x, xi) at normalized points (|b±| = 1).

    Default psi = chi_{<R}(|x|) * window(|xi|) * (1 - damping weight) *
    prod_w (1 - chi(2 d_w / rho_w)); ``fn`` replaces it by a custom callable.
    """
    R: float
    xi_lo: float
    xi_hi: float
    delta: float
    cover: SemiBoundedSymbol = None
    fn: object = None

    def window(self, nxi):
        lo = smoothstep((nxi - (self.xi_lo - self.delta)) / self.delta)
        hi = 1.0 - smoothstep((nxi - self.xi_hi) / 1.0)
        return lo * hi

    def __call__(self, x, xi):
        if self.fn is not None:
            return self.fn(x, xi)
        r = np.sqrt(np.sum(x * x, axis=-1))
        val = chi_lt(r, self.R) * self.window(np.sqrt(np.sum(xi * xi, axis=-1)))
        if self.cover is not None:
            val = val * (1.0 - self.cover.damping_element.weight(self.cover.metric.a(x)))
            if self.cover.elements:
                rho = np.array([e.rho for e in self.cover.elements])
                cx = np.stack([e.x for e in self.cover.elements])
                cxi = np.stack([e.xi for e in self.cover.elements])
                d = np.sqrt(np.sum((x[:, None, :] - cx[None]) ** 2, axis=-1)
                            + np.sum((xi[:, None, :] - cxi[None]) ** 2, axis=-1))
                val = val * np.prod(1.0 - chi(2.0 * d / rho[None, :]), axis=1)
        return val

    @property
    def support_radius(self):
        return 2.0 * self.R

    def to_dict(self):
        return {"R": self.R, "xi_window": [self.xi_lo, self.xi_hi], "delta": self.delta,
                "custom": self.fn is not None,
                "cover_elements": 0 if self.cover is None else len(self.cover.elements)}


def default_psi(metric, sign, R, cover=None, delta=None, n_bounds=20000, seed=0):
    """psi with the |xi| window built from the sampled b-scale bounds.

    At points normalized by Phi± one has 1/C_b <= |xi| <= 1/c_b; the window
    is 1 there and vanishes below 1/C_b - delta and above 1/c_b + 1.
    """
    c_b, C_b = b_scale_bounds(metric, 2.0 * R, n=n_bounds, seed=seed)
    delta = 0.1 * c_b if delta is None else delta
    lo = 1.0 / C_b
    if lo - delta <= 0.0:
        delta = 0.5 * lo
    return PsiSpec(R=float(R), xi_lo=float(lo), xi_hi=float(1.0 / c_b), delta=float(delta),
                   cover=cover)


@dataclass
class InteriorSymbol:
    """q_in± with the flow integral taken in a rescaled time.

    The ray is followed in t with ds/dt = kappa(|x|), kappa = 1 on
    |x| <= fine_radius (default: the support radius of psi) and
    ``coarse_factor`` beyond 2 fine_radius, so that the fixed step h resolves
    supp psi and strides through the rest. kappa is smooth, hence so is the
    discrete integral.
    """
    metric: object
    sign: int
    R: float
    psi: PsiSpec
    T_prime: float
    S_cap: float
    h: float
    fine_radius: float = None
    coarse_factor: float = 8.0
    probe_max_transit: float = 0.0
    truncated: int = 0

    def to_dict(self):
        return {"sign": _key(self.sign), "R": self.R, "T_prime": self.T_prime,
                "S_cap": self.S_cap, "h": self.h, "fine_radius": self._fine(),
                "coarse_factor": self.coarse_factor,
                "probe_max_transit": self.probe_max_transit, "psi": self.psi.to_dict()}

    def _fine(self):
        return self.psi.support_radius if self.fine_radius is None else self.fine_radius

    def kappa(self, x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        return 1.0 + (self.coarse_factor - 1.0) * chi_gt(r, self._fine())

    def integral(self, x, xi):
        """int_0^S psi(phi_s z) ds, S >= S_cap; rays freeze once beyond 2 supp psi."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        n = len(x)
        out = np.zeros(n)
        if n == 0:
            return out
        base = half_rhs(self.metric, self.sign)
        y = np.concatenate([x, xi], axis=1)
        r0 = np.sqrt(np.sum(x * x, axis=1))
        exit_r = np.maximum(2.0 * self.psi.support_radius, r0 + 0.1 * self.R)
        live = np.arange(n)
        h = self.h
        # kappa >= 1, so this many steps cover at least S_cap of flow time
        nsteps = int(np.ceil(self.S_cap / h))
        for _ in range(nsteps):
            if len(live) == 0:
                break
            yl = y[live]
            acc = 0.0
            incr = 0.0
            k = None
            for wgt, c in zip((1.0, 2.0, 2.0, 1.0), (0.0, 0.5, 0.5, 1.0)):
                st = yl if k is None else yl + (c * h) * k
                kap = self.kappa(st[:, :3])
                k = kap[:, None] * base(st)
                acc = acc + wgt * self.psi(st[:, :3], st[:, 3:]) * kap
                incr = incr + wgt * k
            out[live] += (h / 6.0) * acc
            y_new = yl + (h / 6.0) * incr
            y[live] = y_new
            rl = np.sqrt(np.sum(y_new[:, :3] ** 2, axis=1))
            live = live[rl < exit_r[live]]
        self.truncated = max(self.truncated, len(live))
        return out

    def tilde(self, x, xi):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.sqrt(np.sum(x * x, axis=1))
        cut = chi_lt(r, 2.0 * self.R)
        out = np.zeros(len(x))
        on = cut > 0.0
        if np.any(on):
            out[on] = -cut[on] * self.integral(x[on], np.atleast_2d(xi)[on])
        return out

    def __call__(self, x, xi):
        """q_in± = q~_in o Phi±."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        r = np.sqrt(np.sum(x * x, axis=1))
        out = np.zeros(len(x))
        on = r < 4.0 * self.R
        if np.any(on):
            xn, xin = phi_scale(self.metric, x[on], xi[on], self.sign)
            out[on] = self.tilde(xn, xin)
        return out


def _transit_times(metric, sign, psi, x, xi, h, cap, exit_r, direction):
    """Time spent in {psi > 0} by each probe ray before it leaves |x| < exit_r (or hits the cap)."""
    rhs = half_rhs(metric, sign)
    y = np.concatenate([x, xi], axis=1)
    t_in = np.zeros(len(x))
    live = np.arange(len(x))
    for _ in range(int(np.ceil(cap / h))):
        if len(live) == 0:
            break
        t_in[live] += h * (psi(y[live, :3], y[live, 3:]) > 0.0)
        y_new, _ = _rk4_step(rhs, y[live], direction * h)
        y[live] = y_new
        live = live[np.sqrt(np.sum(y_new[:, :3] ** 2, axis=1)) < exit_r]
    return t_in, live


def build_q_in(metric, sign, R, psi_support_spec, n_probes=2048, h=0.05, pad=2.0, seed=0,
               fine_radius=None, coarse_factor=8.0, probe_h=0.25):
    """q_in± = q~_in o Phi± with q~_in = -chi_{<2R}(|x|) int_0^{S_cap} psi o phi_s ds.

    T' is the largest time a probe ray spends in supp psi (forward plus
    backward from a probe point inside it), padded by ``pad``. Rays reach
    supp psi from anywhere in |x| < 4R within 8R / v_min, so the quadrature
    is truncated at S_cap = T' + 8R / v_min. A probe whose time in supp psi
    reaches the probing cap raises EscapeConstructionError.
    """
    sg = as_sign(sign)
    psi = psi_support_spec
    if n_probes == 0:
        return InteriorSymbol(metric, sg, R, psi, 0.0, 0.0, h, fine_radius, coarse_factor)
    u = qmc.Halton(d=5, scramble=True, seed=seed + 31 * (sg > 0)).random(n_probes)
    x = psi.support_radius * u[:, :1] ** (1.0 / 3.0) * unit_directions(u[:, 1:3])
    xi = unit_directions(u[:, 3:5])
    x, xi = phi_scale(metric, x, xi, sg)
    on = psi(x, xi) > 0.0
    x, xi = x[on], xi[on]
    v_min = _min_speed(metric)
    exit_r = 2.0 * psi.support_radius
    cap = 20.0 * exit_r / v_min
    tf, lf = _transit_times(metric, sg, psi, x.copy(), xi.copy(), probe_h, cap, exit_r, 1.0)
    tb, lb = _transit_times(metric, sg, psi, x.copy(), xi.copy(), probe_h, cap, exit_r, -1.0)
    total = tf + tb
    linger = np.nonzero(total >= 0.5 * cap)[0]
    if len(linger):
        i = int(linger[0])
        raise EscapeConstructionError(
            "a probe ray lingers in supp psi (psi touches the trapped set)",
            {"seed_x": x[i].tolist(), "seed_xi": xi[i].tolist(), "time_in_support": float(total[i]),
             "cap": cap})
    t_max = float(total.max()) if len(total) else 0.0
    T_prime = pad * t_max
    S_cap = T_prime + 8.0 * R / v_min
    return InteriorSymbol(metric, sg, R, psi, T_prime, S_cap, h, fine_radius, coarse_factor, t_max)


# ---------------------------------------------------------------------------
# q_out: exterior multiplier
# ---------------------------------------------------------------------------

@dataclass
class ExteriorSymbol:
    metric: object
    sign: int
    R: float
    f: BootstrapWeight

    def base(self, x, xi):
        """-chi_{>R}(|x|) d_xi b± . x/|x| (the factor multiplying f)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        r = np.sqrt(np.sum(x * x, axis=1))
        out = np.zeros(len(x))
        on = r > self.R
        if np.any(on):
            _, _, bxi = grad_b(self.metric, x[on], xi[on], self.sign)
            out[on] = -chi_gt(r[on], self.R) * np.sum(bxi * x[on], axis=1) / r[on]
        return out

    def __call__(self, x, xi):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.f.f(np.sqrt(np.sum(x * x, axis=1))) * self.base(x, xi)


def build_q_out(metric, sign, R, f):
    return ExteriorSymbol(metric, as_sign(sign), float(R), f)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class EscapeSymbols:
    """The sigma/gamma/eps/lam independent part: q1±, q_in±, q_out± and F."""
    metric: object
    q1: dict
    q_in: dict
    q_out: dict
    bootstrap: BootstrapWeight

    def components(self, x, xi):
        """Per-point scalars from which q and its bracket are assembled."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        bp, bm = b_both(self.metric, x, xi)
        r = np.sqrt(np.sum(x * x, axis=1))
        comp = {"bp": bp, "bm": bm, "a": self.metric.a(x), "F": self.bootstrap.F(r)}
        for s in SIGNS:
            k = "p" if s > 0 else "m"
            comp["q1" + k] = self.q1[s](x, xi) if self.q1.get(s) is not None else np.zeros(len(x))
            comp["qin" + k] = self.q_in[s](x, xi) if self.q_in.get(s) is not None else np.zeros(len(x))
            comp["qob" + k] = self.q_out[s].base(x, xi) if self.q_out.get(s) is not None else np.zeros(len(x))
        return comp


@dataclass(frozen=True)
class Params:
    lam: float
    sigma: float
    gamma: float
    epsilon: float

    def to_dict(self):
        return {"lambda": self.lam, "sigma": self.sigma, "gamma": self.gamma,
                "epsilon": self.epsilon}


def _branch_factor(comp, k, prm, scale=1.0):
    """Q± from components; ``scale`` multiplies b (the lam-rescaling of xi)."""
    b = comp["b" + k] * scale
    f = np.exp(prm.sigma * comp["F"])
    q2 = prm.epsilon * comp["qin" + k] + f * comp["qob" + k]
    with np.errstate(over="ignore"):
        e = np.exp(-prm.sigma * comp["q1" + k]) + np.exp(-prm.sigma * q2)
    return e * chi_gt(np.abs(b), prm.lam)


def q_from_components(comp, tau, prm, scale=1.0):
    bp = comp["bp"] * scale
    bm = comp["bm"] * scale
    return (tau - bp) * _branch_factor(comp, "m", prm, scale) + (tau - bm) * _branch_factor(comp, "p", prm, scale)


def hamilton_field(metric, tau, x, xi):
    """(x', xi') of the full flow of p at fixed tau."""
    g0 = metric.g0j(x)
    G = metric.gij(x)
    dbeta = np.einsum("...kj,...j->...k", metric.grad_g0j(x), xi)
    dQ = np.einsum("...kij,...i,...j->...k", metric.grad_gij(x), xi, xi)
    tau = np.asarray(tau, dtype=float)[..., None]
    return 2.0 * tau * g0 + 2.0 * np.einsum("...kj,...j->...k", G, xi), -2.0 * tau * dbeta - dQ


def _fd_step(x, xi, vx, vxi, rel=1e-5):
    nx = np.sqrt(np.sum(vx * vx, axis=-1))
    nxi = np.sqrt(np.sum(vxi * vxi, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ex = np.where(nx > 0, np.maximum(1.0, np.sqrt(np.sum(x * x, axis=-1))) / nx, np.inf)
        exi = np.where(nxi > 0, np.sqrt(np.sum(xi * xi, axis=-1)) / nxi, np.inf)
    return rel * np.minimum(ex, exi)


@dataclass
class EscapeAssembly:
    symbols: EscapeSymbols
    lam: float
    sigma: float
    gamma: float
    epsilon: float

    @property
    def params(self):
        return Params(self.lam, self.sigma, self.gamma, self.epsilon)

    @property
    def metric(self):
        return self.symbols.metric

    def q(self, tau, x, xi):
        comp = self.symbols.components(x, xi)
        return q_from_components(comp, np.asarray(tau, dtype=float), self.params)

    def q_branch(self, sign, x, xi):
        """q±_{1,>lam} + q±_{2,>lam}."""
        comp = self.symbols.components(x, xi)
        return _branch_factor(comp, "p" if as_sign(sign) > 0 else "m", self.params)

    def bracket(self, tau, x, xi):
        """H_p q + 2 gamma tau a q by central differences along the field of p."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (len(x),))
        vx, vxi = hamilton_field(self.metric, tau, x, xi)
        eta = _fd_step(x, xi, vx, vxi)[:, None]
        qp = self.q(tau, x + eta * vx, xi + eta * vxi)
        qm = self.q(tau, x - eta * vx, xi - eta * vxi)
        q0 = self.q(tau, x, xi)
        return (qp - qm) / (2.0 * eta[:, 0]) + 2.0 * self.gamma * tau * self.metric.a(x) * q0

    def a_coeffs(self, x, xi):
        """(a0, a1, a2) from the bracket at tau in {b-, 0, b+} (Vandermonde solve)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        bp, bm = b_both(self.metric, x, xi)
        return _vandermonde(bm, bp, self.bracket(bm, x, xi), self.bracket(np.zeros(len(x)), x, xi),
                            self.bracket(bp, x, xi))

    def m(self, x, xi):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        bp, bm = b_both(self.metric, x, xi)
        a0, a1, a2 = self.a_coeffs(x, xi)
        return correction_from_coeffs(a0, a1, a2, bp, bm)


def _vandermonde(bm, bp, Bm, B0, Bp):
    a2 = B0
    up = (Bp - a2) / bp
    um = (Bm - a2) / bm
    a0 = (up - um) / (bp - bm)
    a1 = up - a0 * bp
    return a0, a1, a2


def correction_from_coeffs(a0, a1, a2, bp, bm):
    """m = -(a1 (b+ + b-) + 2 (a0 b+ b- + a2)) / (b+ - b-)^2."""
    return -(a1 * (bp + bm) + 2.0 * (a0 * bp * bm + a2)) / (bp - bm) ** 2


def assemble_q(q1, q_in, q_out, epsilon, sigma, lam, gamma=0.0, metric=None, bootstrap=None):
    """Combine per-sign symbols (dicts keyed by +1/-1) into an EscapeAssembly.

    Any of q1, q_in, q_out may be None (treated as zero).
    """
    q1 = q1 or {}
    q_in = q_in or {}
    q_out = q_out or {}
    if metric is None:
        for d in (q1, q_in, q_out):
            for v in d.values():
                if v is not None:
                    metric = v.metric
                    break
    if metric is None:
        raise ValueError("assemble_q needs a metric when all symbols are empty")
    if bootstrap is None:
        outs = [v for v in q_out.values() if v is not None]
        bootstrap = outs[0].f if outs else None
    if bootstrap is None:
        from .metric import AFEstimate
        bootstrap = build_bootstrap(AFEstimate(1.0, 0, np.full(2, C_FLOOR), 0.0, np.zeros(2), 0.25,
                                               0.1, 0.0), sigma)
    syms = EscapeSymbols(metric, {as_sign(k): v for k, v in q1.items()},
                         {as_sign(k): v for k, v in q_in.items()},
                         {as_sign(k): v for k, v in q_out.items()}, bootstrap)
    return EscapeAssembly(syms, float(lam), float(sigma), float(gamma), float(epsilon))


def build_correction(assembly, pt):
    """m(x, xi) at pt = (tau, x, xi); tau is ignored (m does not depend on it)."""
    _, x, xi = pt
    xi = np.asarray(xi, dtype=float)
    if np.any(np.sum(np.atleast_2d(xi) ** 2, axis=-1) == 0.0):
        raise ValueError("xi must be nonzero")
    m = assembly.m(x, xi)
    return float(m[0]) if np.ndim(x) == 1 else m


# ---------------------------------------------------------------------------
# sampling, component cache and the positivity report
# ---------------------------------------------------------------------------

@dataclass
class SampleSpec:
    R: float
    n_generic: int = 100_000
    n_char: int = 25_000
    radius_factor: float = 8.0
    xi_factor: float = 8.0
    C_b: float = 1.0
    seed: int = 0


@dataclass
class PhaseSamples:
    """Base samples at lam = 1; the lam-sample is (tau lam, x, xi lam)."""
    x: np.ndarray
    xi: np.ndarray
    tau: np.ndarray
    kind: np.ndarray       # 0 generic, 1 on tau = b+, -1 on tau = b-


def sample_phase_space(metric, spec):
    """|x| uniform on [0, 8R], |xi| uniform on [1, 8], tau uniform on [-8 C_b, 8 C_b], plus tau = b±."""
    def block(n, salt):
        u = qmc.Halton(d=7, scramble=True, seed=spec.seed + salt).random(n)
        x = spec.radius_factor * spec.R * u[:, :1] * unit_directions(u[:, 1:3])
        xi = (1.0 + (spec.xi_factor - 1.0) * u[:, 3:4]) * unit_directions(u[:, 4:6])
        tau = spec.xi_factor * spec.C_b * (2.0 * u[:, 6] - 1.0)
        return x, xi, tau

    xg, xig, tg = block(spec.n_generic, 0)
    xp, xip, _ = block(spec.n_char, 1)
    xm, xim, _ = block(spec.n_char, 2)
    tp = b_both(metric, xp, xip)[0]
    tm = b_both(metric, xm, xim)[1]
    kind = np.concatenate([np.zeros(len(xg), int), np.ones(len(xp), int), -np.ones(len(xm), int)])
    return PhaseSamples(np.concatenate([xg, xp, xm]), np.concatenate([xig, xip, xim]),
                        np.concatenate([tg, tp, tm]), kind)


@dataclass
class ComponentCache:
    """Components at every sample and at the finite-difference stencil points.

    ``stencil[k]`` holds (eta, plus, minus) for the direction of the field at
    tau_k; for stationary metrics without cross terms the field does not
    depend on tau and a single stencil serves all four tau values
    (b-, 0, b+, sample tau).
    """
    samples: PhaseSamples
    center: dict
    stencils: list
    shared: bool
    seconds: float


def _eval_components(symbols, x, xi, threads):
    n = len(x)
    chunks = [(k, min(k + CHUNK, n)) for k in range(0, n, CHUNK)]

    def job(c):
        return symbols.components(x[c[0]:c[1]], xi[c[0]:c[1]])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def cache_components(symbols, samples, threads=1):
    t0 = time.perf_counter()
    metric = symbols.metric
    x, xi, tau = samples.x, samples.xi, samples.tau
    n = len(x)
    bp, bm = b_both(metric, x, xi)
    taus = [bm, np.zeros(n), bp, tau]
    shared = bool(metric.static)
    etas, xs, xis = [], [x], [xi]
    for t in (taus[:1] if shared else taus):
        vx, vxi = hamilton_field(metric, t, x, xi)
        eta = _fd_step(x, xi, vx, vxi)
        e = eta[:, None]
        etas.append(eta)
        xs += [x + e * vx, x - e * vx]
        xis += [xi + e * vxi, xi - e * vxi]
    # one batch for the center and all stencil points keeps the per-step overhead shared
    comp = _eval_components(symbols, np.concatenate(xs), np.concatenate(xis), threads)

    def part(k):
        return {key: v[k * n:(k + 1) * n] for key, v in comp.items()}

    stencils = [(eta, part(1 + 2 * i), part(2 + 2 * i)) for i, eta in enumerate(etas)]
    return ComponentCache(samples, part(0), stencils, shared, time.perf_counter() - t0)


@dataclass
class PositivityReport:
    params: dict
    n_samples: int
    n_generic: int
    n_char: int
    c0: float
    c0_saturated: float
    C_target: float
    quantile_1pct: float
    min_generic: float
    min_char: float
    fraction_below_target: float
    fraction_generic_below_c0: float
    char_below_target: int
    validity_fraction: float
    n_validity_fail: int
    min_value_formula_error: float
    poly_consistency: float
    passed: bool
    worst: list
    seconds: float = 0.0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _bracket_from_cache(cache, prm, which, tau, scale):
    """H_p q + 2 gamma tau a q at (lam-scaled) tau using stencil ``which``."""
    eta, plus, minus = cache.stencils[0 if cache.shared else which]
    c = cache.center
    qp = q_from_components(plus, tau, prm, scale)
    qm = q_from_components(minus, tau, prm, scale)
    q0 = q_from_components(c, tau, prm, scale)
    # the stencil offsets were taken at lam = 1: eta scales like 1/lam
    return (qp - qm) / (2.0 * eta / scale) + 2.0 * prm.gamma * tau * c["a"] * q0


def evaluate_cache(cache, prm, C_target=0.0, n_worst=10):
    """Positivity report for one parameter set from cached components."""
    t0 = time.perf_counter()
    s = cache.samples
    c = cache.center
    lam = prm.lam
    bp = c["bp"] * lam
    bm = c["bm"] * lam
    tau = s.tau * lam
    nxi = np.sqrt(np.sum(s.xi * s.xi, axis=1)) * lam
    with np.errstate(over="ignore", invalid="ignore"):
        Bm = _bracket_from_cache(cache, prm, 0, bm, lam)
        B0 = _bracket_from_cache(cache, prm, 1, np.zeros_like(bp), lam)
        Bp = _bracket_from_cache(cache, prm, 2, bp, lam)
        a0, a1, a2 = _vandermonde(bm, bp, Bm, B0, Bp)
        m = correction_from_coeffs(a0, a1, a2, bp, bm)
        p = -(tau - bp) * (tau - bm)
        direct = _bracket_from_cache(cache, prm, 3, tau, lam) + m * p
        poly = (a0 - m) * tau**2 + (a1 + (bp + bm) * m) * tau + (a2 - bp * bm * m)
        on_p = s.kind == 1
        on_m = s.kind == -1
        value = np.where(on_p, Bp, np.where(on_m, Bm, direct))
        ratio = value * japanese(s.x) ** 2 / (tau**2 + nxi**2)
        # validity of the correction
        c1 = a0 - m
        disc = (a1 + (bp + bm) * m) ** 2 - 4.0 * (a0 - m) * (a2 - bp * bm * m)
        valid = (c1 > 0) & (disc < 0)
        # closed-form minimum over tau vs the vertex of the corrected quadratic
        vert = (a2 - bp * bm * m) - (a1 + (bp + bm) * m) ** 2 / (4.0 * c1)
        closed = Bp * Bm / (Bp + Bm)
        mv_err = np.abs(vert - closed) / np.maximum(np.abs(closed), 1e-300)
        scale_poly = np.abs(a0) * tau**2 + np.abs(a1 * tau) + np.abs(a2) + np.abs(m * p)
        cons = np.abs(direct - poly) / np.maximum(scale_poly, 1e-300)
    gen = s.kind == 0
    char = ~gen
    ratio = np.where(np.isfinite(ratio), ratio, -np.inf)
    q01 = float(np.quantile(ratio[gen], 0.01, method="lower")) if np.any(gen) else np.inf
    min_char = float(ratio[char].min()) if np.any(char) else np.inf
    c0 = min(q01, min_char)
    sat = (np.abs(bp) >= 2.0 * lam) & (np.abs(bm) >= 2.0 * lam)
    q01s = float(np.quantile(ratio[gen & sat], 0.01, method="lower")) if np.any(gen & sat) else np.inf
    mcs = float(ratio[char & sat].min()) if np.any(char & sat) else np.inf
    order = np.argsort(ratio, kind="stable")[:n_worst]
    worst = [{"index": int(i), "kind": int(s.kind[i]), "tau": float(tau[i]),
              "x": [float(v) for v in s.x[i]], "xi": [float(v) * lam for v in s.xi[i]],
              "ratio": float(ratio[i])} for i in order]
    vf = float(np.mean(valid))
    ok_mv = np.isfinite(mv_err) & valid
    report = PositivityReport(
        params=prm.to_dict(), n_samples=len(ratio), n_generic=int(gen.sum()),
        n_char=int(char.sum()), c0=float(c0), c0_saturated=float(min(q01s, mcs)),
        C_target=float(C_target), quantile_1pct=q01, min_generic=float(ratio[gen].min()),
        min_char=min_char, fraction_below_target=float(np.mean(ratio < C_target)),
        fraction_generic_below_c0=float(np.mean(ratio[gen] < c0)),
        char_below_target=int(np.sum(ratio[char] < C_target)),
        validity_fraction=vf, n_validity_fail=int(np.sum(~valid)),
        min_value_formula_error=float(np.max(mv_err[ok_mv])) if np.any(ok_mv) else float("nan"),
        poly_consistency=float(np.nanmax(cons)),
        passed=bool(c0 > C_target and vf == 1.0),
        worst=worst, seconds=time.perf_counter() - t0)
    return report


def verify_escape_inequality(assembly, sample_spec, gamma=None, C_target=0.0, threads=1,
                             cache=None):
    """Sampled lower bound of (H_p q + 2 gamma tau a q + m p) <x>^2 / (tau^2 + |xi|^2)."""
    if cache is None:
        samples = sample_phase_space(assembly.metric, sample_spec)
        cache = cache_components(assembly.symbols, samples, threads)
    prm = Params(assembly.lam, assembly.sigma,
                 assembly.gamma if gamma is None else float(gamma), assembly.epsilon)
    return evaluate_cache(cache, prm, C_target)


# ---------------------------------------------------------------------------
# tuning loop
# ---------------------------------------------------------------------------

@dataclass
class TuningResult:
    passed: bool
    params: dict
    report: PositivityReport
    trials: list
    cache_seconds: float

    def to_dict(self):
        return {"passed": self.passed, "params": self.params, "report": self.report.to_dict(),
                "trials": self.trials, "cache_seconds": self.cache_seconds}


def tune_escape(cache, lams=(4, 8, 16, 32), sigmas=(4, 16, 64),
                gammas=(16, 64, 256), eps_start=1.0, eps_min=2.0**-40, C_target=0.0):
    """First (lam, sigma, gamma, eps) in loop order whose report passes.

    ``cache`` holds the sigma-independent components. For each (lam, sigma,
    gamma) eps is halved from ``eps_start`` until the report passes or eps
    drops below ``eps_min``. Every trial is logged; the last report is returned
    when nothing passes.
    """
    trials = []
    last = None
    for lam in lams:
        for sigma in sigmas:
            for gamma in gammas:
                eps = eps_start
                while eps >= eps_min:
                    prm = Params(float(lam), float(sigma), float(gamma), float(eps))
                    rep = evaluate_cache(cache, prm, C_target)
                    trials.append({**prm.to_dict(), "c0": rep.c0, "validity": rep.validity_fraction,
                                   "passed": rep.passed})
                    last = rep
                    if rep.passed:
                        return TuningResult(True, prm.to_dict(), rep, trials, cache.seconds)
                    eps *= 0.5
    return TuningResult(False, last.params if last else {}, last, trials, cache.seconds)
