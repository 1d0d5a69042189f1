"""Batched explicit Runge-Kutta integrators.

``dopri_batch`` advances many independent rays at once with the Dormand-Prince
5(4) pair, each ray carrying its own step size. The Butcher tableau and the
quartic dense-output matrix are read from scipy's RK45 class; scipy's
solve_ivp itself cannot give each member of a batch its own step sequence.

``rk4_fixed`` is a classic fixed-step RK4 used where a smooth map of the
initial point matters more than adaptivity (flow quadratures that are later
differentiated by finite differences).
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

__all__ = ["DOPRI_A", "DOPRI_B", "DOPRI_C", "DOPRI_E", "DOPRI_P", "StepFailure",
           "dopri_batch", "dense_eval", "rk4_fixed"]

DOPRI_C = np.asarray(RK45.C, dtype=float)
DOPRI_A = np.asarray(RK45.A, dtype=float)
DOPRI_B = np.asarray(RK45.B, dtype=float)
DOPRI_E = np.asarray(RK45.E, dtype=float)
DOPRI_P = np.asarray(RK45.P, dtype=float)
_NSTAGE = len(DOPRI_B)


class StepFailure(RuntimeError):
    """Step size collapsed below the floor for some rays."""

    def __init__(self, msg, rays):
        super().__init__(msg)
        self.rays = rays


@dataclass
class StepRecord:
    """One batch of accepted steps: ray indices, start/end parameter and state, stage slopes."""
    idx: np.ndarray
    s0: np.ndarray
    h: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    K: np.ndarray

    def dense(self, theta):
        """State at s0 + theta*h for theta in [0,1] (per-ray theta array)."""
        return dense_eval(self.y0, self.h, self.K, theta)


def dense_eval(y0, h, K, theta):
    theta = np.asarray(theta, dtype=float)
    powers = np.stack([theta, theta**2, theta**3, theta**4], axis=-1)
    Q = np.einsum("nsd,sk->ndk", K, DOPRI_P)
    return y0 + h[:, None] * np.einsum("ndk,nk->nd", Q, powers)


def dopri_batch(rhs, y0, s_end, rtol=1e-10, atol=1e-12, max_step=np.inf, h0=None,
                on_step=None, h_min=1e-14, max_iter=10_000_000):
    """Integrate y' = rhs(y) from s = 0 to s_end (per ray, sign gives direction).

    ``rhs`` maps an (m, d) array to an (m, d) array. ``on_step(record)`` is
    called after every batch of accepted steps and may return a boolean mask
    (aligned with record.idx) of rays to stop early. Returns (s, y, done) where
    s is the parameter each ray stopped at.
    """
    y = np.array(y0, dtype=float, copy=True)
    N, d = y.shape
    s_end = np.broadcast_to(np.asarray(s_end, dtype=float), (N,)).copy()
    direction = np.where(s_end >= 0.0, 1.0, -1.0)
    s = np.zeros(N)
    if h0 is None:
        h0 = min(max_step, 1e-2)
    h = np.minimum(np.full(N, float(h0)), np.abs(s_end))
    active = np.abs(s_end) > 0.0
    fsal = np.full(N, False)
    f_last = np.zeros((N, d))
    stopped = np.zeros(N, dtype=bool)
    it = 0
    while np.any(active):
        it += 1
        if it > max_iter:
            raise StepFailure("iteration limit reached", np.nonzero(active)[0])
        idx = np.nonzero(active)[0]
        yi = y[idx]
        hi = np.minimum(h[idx], np.abs(s_end[idx] - s[idx])) * direction[idx]
        K = np.empty((len(idx), _NSTAGE + 1, d))
        have = fsal[idx]
        if np.all(have):
            K[:, 0] = f_last[idx]
        else:
            k0 = f_last[idx]
            miss = ~have
            k0[miss] = rhs(yi[miss])
            K[:, 0] = k0
        for st in range(1, _NSTAGE):
            dy = np.einsum("nsd,s->nd", K[:, :st], DOPRI_A[st, :st]) * hi[:, None]
            K[:, st] = rhs(yi + dy)
        y_new = yi + hi[:, None] * np.einsum("nsd,s->nd", K[:, :_NSTAGE], DOPRI_B)
        K[:, _NSTAGE] = rhs(y_new)
        err = hi[:, None] * np.einsum("nsd,s->nd", K, DOPRI_E)
        scale = atol + rtol * np.maximum(np.abs(yi), np.abs(y_new))
        err_norm = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        ok = np.isfinite(err_norm) & (err_norm <= 1.0)
        with np.errstate(divide="ignore"):
            fac = np.where(err_norm == 0.0, 10.0, 0.9 * err_norm ** (-0.2))
        fac = np.where(np.isfinite(fac), fac, 0.2)
        fac = np.where(ok, np.clip(fac, 0.2, 10.0), np.clip(fac, 0.2, 1.0))
        h_next = np.minimum(np.abs(hi) * fac, max_step)
        acc = idx[ok]
        if len(acc):
            s_old = s[acc].copy()
            y_old = y[acc].copy()
            s[acc] = s_old + hi[ok]
            y[acc] = y_new[ok]
            f_last[acc] = K[ok, _NSTAGE]
            fsal[acc] = True
            reached = np.abs(s[acc] - s_end[acc]) <= 1e-13 * np.maximum(1.0, np.abs(s_end[acc]))
            s[acc[reached]] = s_end[acc[reached]]
            active[acc[reached]] = False
            if on_step is not None:
                rec = StepRecord(acc, s_old, hi[ok], y_old, y[acc].copy(), K[ok, :_NSTAGE + 1])
                stop = on_step(rec)
                if stop is not None:
                    stop = np.asarray(stop, dtype=bool)
                    active[acc[stop]] = False
                    stopped[acc[stop]] = True
        h[idx] = h_next
        tiny = active[idx] & (h[idx] < h_min * np.maximum(1.0, np.abs(s[idx])))
        if np.any(tiny):
            raise StepFailure("step size underflow (stiff or singular region)", idx[tiny])
    return s, y, stopped


def rk4_fixed(rhs, y0, h, nsteps, quad=None, on_step=None):
    """Fixed-step RK4 for y' = rhs(y), optionally carrying quadratures.

    ``quad(y)`` returns integrand values of shape (m, q); the integrals
    int_0^{s} quad(y(s')) ds' are advanced as extra ODE components, which for
    RK4 amounts to a Simpson-type rule on the stage states. ``on_step(k, y, Q)``
    may return a boolean mask of rays to freeze (drop from further work).
    Returns (y, Q).
    """
    y = np.array(y0, dtype=float, copy=True)
    m = y.shape[0]
    Q = None
    live = np.arange(m)
    for k in range(nsteps):
        if len(live) == 0:
            break
        yl = y[live]
        k1 = rhs(yl)
        y2 = yl + 0.5 * h * k1
        k2 = rhs(y2)
        y3 = yl + 0.5 * h * k2
        k3 = rhs(y3)
        y4 = yl + h * k3
        k4 = rhs(y4)
        if quad is not None:
            q = quad(yl) + 2.0 * quad(y2) + 2.0 * quad(y3) + quad(y4)
            if Q is None:
                Q = np.zeros((m,) + q.shape[1:])
            Q[live] += (h / 6.0) * q
        y[live] = yl + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if on_step is not None:
            freeze = on_step(k, live, y[live])
            if freeze is not None and np.any(freeze):
                live = live[~np.asarray(freeze, dtype=bool)]
    return y, Q
