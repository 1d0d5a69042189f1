"""Principal symbol, half-wave symbols b± and the normalization map Phi±.

With beta = g^{0j} xi_j and Q = g^{ij} xi_i xi_j the principal symbol is

    p(tau, x, xi) = -(tau^2 - 2 tau beta - Q) = -(tau - b+)(tau - b-),
    b± = beta ± sqrt(beta^2 + Q).

All functions are vectorized over leading axes of x and xi.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

__all__ = ["PhasePoint", "FullPhasePoint", "as_sign", "p_symbol", "b_pm", "b_both",
           "grad_b", "grad_b_generic", "phi_scale", "b_scale_bounds"]


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if np.any(np.sum(self.xi**2, axis=-1) == 0.0):
            raise ValueError("xi must be nonzero")


@dataclass(frozen=True)
class FullPhasePoint:
    t: float
    tau: float
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if np.any((np.asarray(self.tau) == 0.0) & (np.sum(self.xi**2, axis=-1) == 0.0)):
            raise ValueError("(tau, xi) must be nonzero")


def as_sign(sign):
    if sign in (1, "+", "plus", +1.0):
        return 1
    if sign in (-1, "-", "minus", -1.0):
        return -1
    raise ValueError(f"sign must be '+' or '-', got {sign!r}")


def _parts(metric, x, xi):
    g0 = metric.g0j(x)
    G = metric.gij(x)
    beta = np.sum(g0 * xi, axis=-1)
    Gxi = np.einsum("...ij,...j->...i", G, xi)
    Q = np.sum(xi * Gxi, axis=-1)
    return g0, beta, Gxi, Q


def p_symbol(metric, tau, x, xi):
    """p = -(tau^2 - 2 tau g^{0j} xi_j - g^{ij} xi_i xi_j)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    _, beta, _, Q = _parts(metric, x, xi)
    return -(tau * tau - 2.0 * tau * beta - Q)


def b_both(metric, x, xi):
    """(b+, b-) computed without cancellation: b∓ = -Q / b±."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if metric.radial is not None:
        b = np.sqrt(metric.radial[0](np.sqrt(np.sum(x * x, axis=-1))) * np.sum(xi * xi, axis=-1))
        return b, -b
    _, beta, _, Q = _parts(metric, x, xi)
    S = np.sqrt(beta * beta + Q)
    # the larger-magnitude root first, then the other from b+ b- = -Q
    big = np.where(beta >= 0.0, beta + S, beta - S)
    small = -Q / big
    bp = np.where(beta >= 0.0, big, small)
    bm = np.where(beta >= 0.0, small, big)
    return bp, bm


def b_pm(metric, x, xi, sign):
    bp, bm = b_both(metric, x, xi)
    return bp if as_sign(sign) > 0 else bm


def grad_b(metric, x, xi, sign):
    """Return (b, d_x b, d_xi b) for the chosen branch."""
    s = as_sign(sign)
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if metric.radial is not None:
        return _grad_b_radial(metric, x, xi, s)
    return grad_b_generic(metric, x, xi, s)


def _grad_b_radial(metric, x, xi, s):
    # g^{ij} = w(r) delta^{ij}: b = ±sqrt(w)|xi|
    w, dw = metric.radial
    r = np.sqrt(np.sum(x * x, axis=-1))
    nxi = np.sqrt(np.sum(xi * xi, axis=-1))
    wr = w(r)
    sw = np.sqrt(wr)
    b = s * sw * nxi
    rs = np.where(r > 0.0, r, 1.0)
    bx = (s * 0.5 * dw(r) * nxi / (sw * rs))[..., None] * x
    bxi = (s * sw / nxi)[..., None] * xi
    return b, bx, bxi


def grad_b_generic(metric, x, xi, sign):
    """Coefficient-field route for (b, d_x b, d_xi b); no structural shortcuts."""
    s = as_sign(sign)
    g0, beta, Gxi, Q = _parts(metric, x, xi)
    S = np.sqrt(beta * beta + Q)
    dg0 = metric.grad_g0j(x)
    dG = metric.grad_gij(x)
    dbeta = np.einsum("...kj,...j->...k", dg0, xi)
    dQ = np.einsum("...kij,...i,...j->...k", dG, xi, xi)
    big = np.where(beta >= 0.0, beta + S, beta - S)
    bp = np.where(beta >= 0.0, big, -Q / big)
    bm = np.where(beta >= 0.0, -Q / big, big)
    b = bp if s > 0 else bm
    bx = dbeta + s * (beta[..., None] * dbeta + 0.5 * dQ) / S[..., None]
    bxi = g0 + s * (beta[..., None] * g0 + Gxi) / S[..., None]
    return b, bx, bxi


def phi_scale(metric, x, xi, sign):
    """Phi±(x, xi) = (x, xi / |b±(x, xi)|)."""
    xi = np.asarray(xi, dtype=float)
    b = b_pm(metric, x, xi, sign)
    return np.asarray(x, dtype=float), xi / np.abs(b)[..., None]


def unit_directions(u):
    """Map points of [0,1)^2 to the unit sphere (area preserving)."""
    z = 2.0 * u[..., 0] - 1.0
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    ph = 2.0 * np.pi * u[..., 1]
    return np.stack([rho * np.cos(ph), rho * np.sin(ph), z], axis=-1)


def b_scale_bounds(metric, radius, n=20000, seed=0, pad=0.1):
    """Empirical (c_b, C_b) with c_b |xi| <= |b±| <= C_b |xi|, padded by ``pad``.

    Samples x in the ball of the given radius and unit xi, over both branches.
    Outside the sampled ball the ellipticity and cross-term bounds still give
    the analytic bracket, which is merged in.
    """
    u = qmc.Halton(d=5, scramble=True, seed=seed).random(n)
    x = radius * u[:, :1] ** (1.0 / 3.0) * unit_directions(u[:, 1:3])
    xi = unit_directions(u[:, 3:5])
    bp, bm = b_both(metric, x, xi)
    vals = np.concatenate([np.abs(bp), np.abs(bm)])
    c_ell, C_ell = metric.ellipticity_bounds
    k = metric.cross_bound
    lo = min(vals.min(), np.sqrt(k * k + c_ell) - k)
    hi = max(vals.max(), np.sqrt(k * k + C_ell) + k)
    return float(lo / (1.0 + pad)), float(hi * (1.0 + pad))
