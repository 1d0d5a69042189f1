"""Stationary inverse metrics, damping profiles and asymptotic-flatness data.

A metric is stored through its inverse coefficients relative to
g^{00} = -1: the cross terms g^{0j}(x), the spatial block g^{ij}(x), their
first derivatives, and a damping coefficient a(x) >= 0. Every field is a
vectorized callable acting on arrays of shape (..., 3).

Index conventions for the derivative fields:

    grad_g0j(x)[..., k, j]    = d_k g^{0j}(x)
    grad_gij(x)[..., k, i, j] = d_k g^{ij}(x)
"""

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .cutoff import bump

__all__ = [
    "Damping", "MetricModel", "AFEstimate", "minkowski", "trapped_shell",
    "crossterm_toy", "damping_ball", "damping_shell", "no_damping",
    "with_damping", "evaluate", "scale_metric", "estimate_af",
    "shell_orbit_radii", "japanese",
]


def japanese(x):
    """<x> = (1 + |x|^2)^{1/2}."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 + np.sum(x * x, axis=-1))


# ---------------------------------------------------------------------------
# damping profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Damping:
    """Nonnegative damping coefficient a(x) with a known support radius."""
    name: str
    params: dict
    fn: Callable
    support_radius: float

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def no_damping():
    def fn(x):
        return np.zeros(x.shape[:-1])
    return Damping("none", {}, fn, 0.0)


def damping_ball(center, radius, amplitude):
    """Smooth bump a0 * bump(|x - x0| / rho), supported in the ball B(x0, rho)."""
    c = np.asarray(center, dtype=float)
    if radius <= 0 or amplitude < 0:
        raise ValueError("damping_ball needs radius > 0 and amplitude >= 0")

    def fn(x):
        d = np.sqrt(np.sum((x - c) ** 2, axis=-1))
        return amplitude * bump(d / radius)

    params = {"center": [float(v) for v in c], "radius": float(radius),
              "amplitude": float(amplitude)}
    return Damping("ball", params, fn, float(np.linalg.norm(c) + radius))


def damping_shell(radius, half_width, amplitude):
    """Radial bump a0 * bump((|x| - r0) / hw); covers every orbit plane at once."""
    if half_width <= 0 or amplitude < 0 or radius < 0:
        raise ValueError("damping_shell needs half_width > 0 and amplitude >= 0")

    def fn(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        return amplitude * bump((r - radius) / half_width)

    params = {"radius": float(radius), "half_width": float(half_width),
              "amplitude": float(amplitude)}
    return Damping("shell", params, fn, float(radius + half_width))


# ---------------------------------------------------------------------------
# metric model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricModel:
    """Inverse metric coefficients (g^{00} = -1 implicit) plus damping."""
    name: str
    g0j: Callable
    gij: Callable
    grad_g0j: Callable
    grad_gij: Callable
    ellipticity_bounds: tuple
    damping: Damping = field(default_factory=no_damping)
    params: dict = field(default_factory=dict)
    static: bool = False
    cross_bound: float = 0.0
    # optional (w, w') with g^{ij} = w(|x|) delta^{ij} and g^{0j} = 0; enables fast paths
    radial: tuple = None

    @property
    def damping_support_radius(self):
        return self.damping.support_radius

    def a(self, x):
        return self.damping(x)


def with_damping(metric, damping):
    """Same geometry with a different damping profile."""
    return replace(metric, damping=damping if damping is not None else no_damping())


def evaluate(metric, x):
    """Return (g0j, gij, a) at x; raises on non-finite output."""
    x = np.asarray(x, dtype=float)
    g0 = metric.g0j(x)
    g = metric.gij(x)
    a = metric.a(x)
    if not (np.all(np.isfinite(g0)) and np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
        raise FloatingPointError(f"metric {metric.name!r} produced non-finite values")
    return g0, g, a


def _zeros_vec(x):
    return np.zeros(x.shape)


def _zeros_mat(x):
    return np.zeros(x.shape[:-1] + (3, 3))


def _zeros_tensor(x):
    return np.zeros(x.shape[:-1] + (3, 3, 3))


def _identity(x):
    return np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()


def minkowski(damping=None):
    return MetricModel(
        name="minkowski", g0j=_zeros_vec, gij=_identity, grad_g0j=_zeros_mat,
        grad_gij=_zeros_tensor, ellipticity_bounds=(1.0, 1.0),
        damping=damping if damping is not None else no_damping(),
        params={}, static=True, cross_bound=0.0,
        radial=(lambda r: np.ones_like(r), lambda r: np.zeros_like(r)))


def _shell_profile(A, r_c, width):
    # even extension in r so that w(|x|) is smooth at the origin
    def w(r):
        return 1.0 + A * (np.exp(-((r - r_c) / width) ** 2)
                          + np.exp(-((r + r_c) / width) ** 2))

    def dw(r):
        return -2.0 * A / width**2 * ((r - r_c) * np.exp(-((r - r_c) / width) ** 2)
                                      + (r + r_c) * np.exp(-((r + r_c) / width) ** 2))
    return w, dw


def trapped_shell(A=2.0, r_c=5.0, width=1.0, damping=None):
    """Isotropic g^{ij} = w(|x|) delta^{ij} with a Gaussian bump in w at r_c.

    Null rays see the effective potential w(r)/r^2. For A large enough it has
    a local minimum (a stable circular orbit) inside the shell, see
    ``shell_orbit_radii``.
    """
    if A < 0 or width <= 0 or r_c < 0:
        raise ValueError("trapped_shell needs A >= 0, width > 0, r_c >= 0")
    w, dw = _shell_profile(A, r_c, width)

    def gij(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        return w(r)[..., None, None] * np.eye(3)

    def grad_gij(x):
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.where(r > 0.0, r, 1.0)
        gw = (dw(r) / rs)[..., None] * x
        return gw[..., :, None, None] * np.eye(3)

    c_ell = 1.0 + A * (1.0 + np.exp(-(2.0 * r_c / width) ** 2))
    return MetricModel(
        name="trapped_shell", g0j=_zeros_vec, gij=gij, grad_g0j=_zeros_mat,
        grad_gij=grad_gij, ellipticity_bounds=(1.0, float(c_ell)),
        damping=damping if damping is not None else no_damping(),
        params={"A": float(A), "r_c": float(r_c), "width": float(width)},
        static=True, cross_bound=0.0, radial=(w, dw))


def crossterm_toy(eps=0.05, damping=None):
    """Flat spatial block with a rotating cross term eps*exp(-|x|^2)*(-x2, x1, 0)."""
    def g0j(x):
        e = eps * np.exp(-np.sum(x * x, axis=-1))
        return np.stack([-e * x[..., 1], e * x[..., 0], np.zeros_like(e)], axis=-1)

    def grad_g0j(x):
        e = eps * np.exp(-np.sum(x * x, axis=-1))
        v = np.stack([-x[..., 1], x[..., 0], np.zeros(x.shape[:-1])], axis=-1)
        out = -2.0 * (e[..., None, None] * x[..., :, None] * v[..., None, :])
        out[..., 1, 0] -= e
        out[..., 0, 1] += e
        return out

    return MetricModel(
        name="crossterm_toy", g0j=g0j, gij=_identity, grad_g0j=grad_g0j,
        grad_gij=_zeros_tensor, ellipticity_bounds=(1.0, 1.0),
        damping=damping if damping is not None else no_damping(),
        params={"eps": float(eps)}, static=False,
        cross_bound=float(abs(eps) / np.sqrt(2.0 * np.e)))


def shell_orbit_radii(A, r_c, width, r_max=None):
    """Circular null orbits of trapped_shell: critical points of w(r)/r^2.

    Returns (r_stable, r_unstable): the local minimum (stable, trapping well)
    and the local maximum (unstable) of the effective potential, or None when
    there is no interior critical point.
    """
    from scipy.optimize import brentq

    w, dw = _shell_profile(A, r_c, width)
    r_max = r_max if r_max is not None else r_c + 6.0 * width

    def cond(r):
        return r * dw(r) - 2.0 * w(r)

    grid = np.linspace(1e-3 * max(r_c, 1.0), r_max, 4001)
    vals = cond(grid)
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]:
        roots.append(brentq(cond, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-14))
    if len(roots) < 2:
        return None
    # d/dr (w/r^2) changes sign - to + at the minimum
    return float(roots[0]), float(roots[1])


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def scale_metric(metric, gamma):
    """g~(x) = g(gamma x) with damping gamma * a(gamma x)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    gamma = float(gamma)
    m = metric
    d = metric.damping

    def damp(x):
        return gamma * d(gamma * x)

    params = dict(metric.params)
    params["scale"] = gamma * params.get("scale", 1.0)
    radial = None
    if metric.radial is not None:
        w, dw = metric.radial
        radial = (lambda r: w(gamma * r), lambda r: gamma * dw(gamma * r))
    return MetricModel(
        name=metric.name, params=params,
        g0j=lambda x: m.g0j(gamma * x),
        gij=lambda x: m.gij(gamma * x),
        grad_g0j=lambda x: gamma * m.grad_g0j(gamma * x),
        grad_gij=lambda x: gamma * m.grad_gij(gamma * x),
        ellipticity_bounds=metric.ellipticity_bounds,
        damping=Damping(d.name, dict(d.params, scale=gamma), damp, d.support_radius / gamma),
        static=metric.static, cross_bound=metric.cross_bound, radial=radial)


# ---------------------------------------------------------------------------
# asymptotic flatness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AFEstimate:
    """Dyadic smallness data of a metric.

    ``raw[j]`` is the sampled sup over the annulus A_j of
    sum_{|alpha| <= 2} <x>^{|alpha|} |d^alpha (g - m)|. ``c_seq`` keeps the raw
    values below the level j0 = log2 R0 and replaces them above it by the
    smallest slowly-varying majorant of max(raw_j, envelope * 2^{-delta (j - j0)}).
    """
    R0: float
    j0: int
    c_seq: np.ndarray
    c_total: float
    raw: np.ndarray
    delta: float
    threshold: float
    envelope: float


def _annulus_points(j, n, seed):
    u = qmc.Halton(d=3, scramble=True, seed=seed + 7919 * j).random(n)
    lo = 1.0 if j == 0 else 2.0**j
    jb = lo * (2.0 ** (j + 1) / lo) ** u[:, 0]
    r = np.sqrt(np.maximum(jb * jb - 1.0, 0.0))
    cth = 2.0 * u[:, 1] - 1.0
    sth = np.sqrt(1.0 - cth * cth)
    ph = 2.0 * np.pi * u[:, 2]
    return r[:, None] * np.stack([sth * np.cos(ph), sth * np.sin(ph), cth], axis=-1)


def _deviation_parts(metric, x):
    """Stack (g0j, gij - I) into 12 components, plus their gradients."""
    h0 = np.concatenate([metric.g0j(x), (metric.gij(x) - np.eye(3)).reshape(x.shape[:-1] + (9,))], axis=-1)
    d0 = metric.grad_g0j(x)
    d1 = metric.grad_gij(x).reshape(x.shape[:-1] + (3, 9))
    return h0, np.concatenate([d0, d1], axis=-1)


def af_profile(metric, x):
    """Pointwise sum_{|alpha|<=2} <x>^{|alpha|} max_component |d^alpha (g - m)|."""
    x = np.asarray(x, dtype=float)
    jx = japanese(x)
    h0, d1 = _deviation_parts(metric, x)
    total = np.max(np.abs(h0), axis=-1)
    total = total + jx * np.sum(np.max(np.abs(d1), axis=-1), axis=-1)
    step = 1e-4 * np.maximum(1.0, np.sqrt(np.sum(x * x, axis=-1)))
    second = np.zeros(x.shape[:-1] + (3, 3, d1.shape[-1]))
    for l in range(3):
        e = np.zeros(3)
        e[l] = 1.0
        dp = _deviation_parts(metric, x + step[..., None] * e)[1]
        dm = _deviation_parts(metric, x - step[..., None] * e)[1]
        second[..., l, :, :] = (dp - dm) / (2.0 * step[..., None, None])
    sym = 0.5 * (second + np.swapaxes(second, -2, -3))
    acc = np.zeros(x.shape[:-1])
    for k in range(3):
        for l in range(k, 3):
            acc = acc + np.max(np.abs(sym[..., k, l, :]), axis=-1)
    return total + jx * jx * acc


def estimate_af(metric, j_max, samples_per_annulus, threshold=0.1, delta=0.25,
                envelope=0.0, seed=0):
    """Sample the AF norm per dyadic annulus and locate R0 = 2^{j0}."""
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    raw = np.empty(j_max + 1)
    for j in range(j_max + 1):
        raw[j] = float(np.max(af_profile(metric, _annulus_points(j, samples_per_annulus, seed))))
    below = raw < threshold
    if not below[-1]:
        raise ValueError(f"metric {metric.name!r} is not AF-small up to 2^{j_max} "
                         f"(last annulus value {raw[-1]:.3g} >= {threshold})")
    j0 = j_max
    while j0 > 0 and below[j0 - 1]:
        j0 -= 1
    levels = np.arange(j_max + 1)
    base = raw.copy()
    tail = levels >= j0
    base[tail] = np.maximum(raw[tail], envelope * 2.0 ** (-delta * (levels[tail] - j0)))
    c = raw.copy()
    for j in levels[tail]:
        k = levels[tail]
        c[j] = np.max(base[k] * 2.0 ** (-delta * np.abs(j - k)))
    c_total = float(np.sum(c[tail]))
    return AFEstimate(R0=float(2.0**j0), j0=int(j0), c_seq=c, c_total=c_total, raw=raw,
                      delta=float(delta), threshold=float(threshold), envelope=float(envelope))
