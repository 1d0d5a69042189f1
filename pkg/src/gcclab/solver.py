"""Finite-difference evolution of the stationary damped wave equation.

The equation, with g^{00} = -1, is

    u_tt - 2 g^{0j} d_j u_t - (d_j g^{0j}) u_t - d_i(g^{ij} d_j u) + a u_t = f.

Writing v = u_t and K v = g^{0j} d_j v + d_j(g^{0j} v) (a skew operator) this is
u_tt = L u + K v - a v + f with L u = d_i(g^{ij} d_j u).

Scheme: staggered leapfrog with v at half steps. Diagonal fluxes of L are
taken at half-grid faces, mixed ones with centered differences. Damping
(physical a plus the sponge) is treated exactly implicitly pointwise, the
skew term by a two-pass predictor-corrector. Boundary nodes are held at zero
behind a sponge layer.

With K = 0 the staggered energy

    E^{n+1/2} = |v^{n+1/2}|^2 + <-L u^{n+1}, u^n>

obeys E^{n+1/2} - E^{n-1/2} = -2 dt <a vbar, vbar> exactly, so it is
non-increasing whenever a >= 0 and f = 0.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cutoff import poly_bump
from .metric import japanese

__all__ = ["GridSpec", "CFLError", "WaveOperator", "WaveHistory", "LEReport", "evolve",
           "energy", "dissipation_residual", "le_norms", "led_experiment",
           "bump_data", "write_history", "read_history", "annulus_index"]


class CFLError(ValueError):
    pass


# leapfrog with the 7-point Laplacian is stable for c dt / h <= 1/sqrt(3)
CFL_MAX = 1.0 / np.sqrt(3.0)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [-L, L]^3 with n nodes per axis."""
    extent: float
    n: int
    dt: float
    sponge_width: float
    sponge_strength: float
    cfl: float = 0.4

    @property
    def h(self):
        return 2.0 * self.extent / (self.n - 1)

    @classmethod
    def for_metric(cls, extent, n, C_ell, cfl=0.4, sponge_width=None, sponge_strength=3.0):
        h = 2.0 * extent / (n - 1)
        dt = cfl * h / np.sqrt(C_ell)
        if sponge_width is None:
            sponge_width = max(6.0, 4.0 * h)
        return cls(float(extent), int(n), float(dt), float(sponge_width),
                   float(sponge_strength), float(cfl))

    def validate(self, C_ell):
        if not 0.0 < self.cfl <= CFL_MAX:
            raise CFLError(f"cfl={self.cfl} outside (0, {CFL_MAX:.6g}], the leapfrog stability range")
        limit = self.cfl * self.h / np.sqrt(C_ell)
        if self.dt > limit * (1.0 + 1e-12):
            raise CFLError(f"dt={self.dt:.6g} exceeds CFL limit {limit:.6g} "
                           f"(cfl={self.cfl}, h={self.h:.6g}, C_ell={C_ell:.6g})")
        if self.sponge_width < 4.0 * self.h * (1.0 - 1e-12):
            raise CFLError(f"sponge_width={self.sponge_width} is below 4h={4 * self.h:.6g}")
        if self.n < 8:
            raise CFLError("grid needs at least 8 points per axis")

    def axis(self):
        return np.linspace(-self.extent, self.extent, self.n)

    def nodes(self):
        a = self.axis()
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    def to_dict(self):
        return {"extent": self.extent, "n": self.n, "dt": self.dt,
                "sponge_width": self.sponge_width, "sponge_strength": self.sponge_strength,
                "cfl": self.cfl}


def sponge_profile(grid):
    """sigma(x) = strength * sum_i ((|x_i| - (L - W)) / W)_+^2."""
    a = grid.axis()
    d = np.clip((np.abs(a) - (grid.extent - grid.sponge_width)) / grid.sponge_width, 0.0, None) ** 2
    return grid.sponge_strength * (d[:, None, None] + d[None, :, None] + d[None, None, :])


def physical_mask(grid):
    a = np.abs(grid.axis()) <= grid.extent - grid.sponge_width + 1e-12
    return a[:, None, None] & a[None, :, None] & a[None, None, :]


def annulus_index(jx):
    """Dyadic level of <x>: 0 for <x> < 2, j for 2^j <= <x> < 2^{j+1}."""
    return np.maximum(np.floor(np.log2(jx)).astype(np.int64), 0)


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------

def _sl(axis, s):
    idx = [slice(None)] * 3
    idx[axis] = s
    return tuple(idx)


class WaveOperator:
    """Coefficient arrays of L, K and the total damping on a grid.

    Stencil passes split the first axis into a fixed set of slabs; worker
    threads only change who computes which slab, never the arithmetic.
    """
    NSLAB = 8

    def __init__(self, metric, grid, threads=1):
        self.grid = grid
        self.threads = max(1, int(threads))
        h = grid.h
        a = grid.axis()
        X = grid.nodes()
        self.face = []
        for ax in range(3):
            Xf = X[_sl(ax, slice(0, -1))].copy()
            Xf[..., ax] += 0.5 * h
            self.face.append(np.ascontiguousarray(metric.gij(Xf)[..., ax, ax]))
        G = metric.gij(X)
        self.offdiag = {}
        for i in range(3):
            for j in range(i + 1, 3):
                gij = np.ascontiguousarray(G[..., i, j])
                if np.max(np.abs(gij)) > 0.0:
                    self.offdiag[(i, j)] = gij
        del G
        g0 = metric.g0j(X)
        self.g0 = [np.ascontiguousarray(g0[..., k]) for k in range(3)] if np.max(np.abs(g0)) > 0.0 else None
        del g0
        self.a_phys = np.ascontiguousarray(metric.a(X))
        self.a_sponge = sponge_profile(grid)
        self.a_total = self.a_phys + self.a_sponge
        del X
        self.jx = japanese(np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1))
        self.mask = physical_mask(grid)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        n = grid.n
        edges = np.linspace(0, n, self.NSLAB + 1).astype(int)
        self.slabs = [(int(edges[k]), int(edges[k + 1])) for k in range(self.NSLAB)]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, fn):
        if self._pool is None:
            for s in self.slabs:
                fn(*s)
        else:
            list(self._pool.map(lambda s: fn(*s), self.slabs))

    def dplus(self, u):
        h = self.grid.h
        return [np.diff(u, axis=ax) / h for ax in range(3)]

    def apply_L(self, u, du=None):
        """L u on interior nodes (zero on the boundary); returns (Lu, D+ u)."""
        h = self.grid.h
        if du is None:
            du = self.dplus(u)
        flux = [self.face[ax] * du[ax] for ax in range(3)]
        out = np.zeros_like(u)

        def work(lo, hi):
            lo_i, hi_i = max(lo, 1), min(hi, u.shape[0] - 1)
            if hi_i <= lo_i:
                return
            blk = out[lo_i:hi_i]
            blk += (flux[0][lo_i:hi_i] - flux[0][lo_i - 1:hi_i - 1]) / h
            blk[:, 1:-1, :] += (flux[1][lo_i:hi_i, 1:, :] - flux[1][lo_i:hi_i, :-1, :]) / h
            blk[:, :, 1:-1] += (flux[2][lo_i:hi_i, :, 1:] - flux[2][lo_i:hi_i, :, :-1]) / h
            blk[:, 0, :] = 0.0
            blk[:, -1, :] = 0.0
            blk[:, :, 0] = 0.0
            blk[:, :, -1] = 0.0

        self._map(work)
        if self.offdiag:
            d0 = [self.dcentral(u, ax) for ax in range(3)]
            for (i, j), gij in self.offdiag.items():
                out += self.dcentral(gij * d0[j], i) + self.dcentral(gij * d0[i], j)
        return out, du

    def dcentral(self, v, ax):
        h = self.grid.h
        out = np.zeros_like(v)
        out[_sl(ax, slice(1, -1))] = (v[_sl(ax, slice(2, None))] - v[_sl(ax, slice(0, -2))]) / (2.0 * h)
        out[_sl(ax, 0)] = 0.0
        out[_sl(ax, -1)] = 0.0
        for other in range(3):
            if other != ax:
                out[_sl(other, 0)] = 0.0
                out[_sl(other, -1)] = 0.0
        return out

    def apply_K(self, v):
        if self.g0 is None:
            return None
        out = np.zeros_like(v)
        for k in range(3):
            out += self.g0[k] * self.dcentral(v, k) + self.dcentral(self.g0[k] * v, k)
        return out

    def gradient_energy(self, du, du2=None):
        """Face quadrature of g^{ii} D+u D+w plus centered mixed terms (without h^3)."""
        du2 = du if du2 is None else du2
        total = 0.0
        for ax in range(3):
            total += float(np.sum(self.face[ax] * du[ax] * du2[ax]))
        return total

    def mixed_energy(self, u):
        if not self.offdiag:
            return 0.0
        d0 = [self.dcentral(u, ax) for ax in range(3)]
        return float(sum(2.0 * np.sum(g * d0[i] * d0[j]) for (i, j), g in self.offdiag.items()))


def bump_data(grid, center, radius=2.0, amplitude=1.0, mode=None):
    """C^2 bump (1 - r^2/radius^2)^3 centered at ``center``; optional plane-wave modulation."""
    X = grid.nodes()
    d = X - np.asarray(center, dtype=float)
    u0 = amplitude * poly_bump(np.sqrt(np.sum(d * d, axis=-1)), radius)
    if mode is not None:
        k = np.asarray(mode, dtype=float)
        u0 = u0 * np.cos(np.sum(d * k, axis=-1))
    u0[0, :, :] = u0[-1, :, :] = 0.0
    u0[:, 0, :] = u0[:, -1, :] = 0.0
    u0[:, :, 0] = u0[:, :, -1] = 0.0
    return u0, np.zeros_like(u0)


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------

@dataclass
class WaveHistory:
    """Per-step diagnostics plus thinned field snapshots.

    Time series (index n <-> t = n dt):
      energy         continuous energy functional of (u^n, u_t^n), face quadrature
      scheme_energy  staggered energy E^{n+1/2} (exactly non-increasing for a >= 0, f = 0, K = 0)
      damp_power     2 int a u_t^2 (physical a)
      sponge_power   2 int sigma u_t^2 (sponge)
      force_power    2 int f u_t
      grad_l2        int |du|^2 over the physical region, du = (u_t, grad u)
      support_radius max |x| with |u| > support_tol (physical region), on snapshot steps
    Per-annulus series (shape (steps, levels)) over the physical region:
      ann_u   int <x>^{-1} u^2,  ann_du int <x>^{-1} |du|^2,  ann_u3 int <x>^{-3} u^2,
      ann_f   int <x> f^2
    """
    grid: GridSpec
    times: np.ndarray
    energy: np.ndarray
    scheme_energy: np.ndarray
    damp_power: np.ndarray
    sponge_power: np.ndarray
    force_power: np.ndarray
    grad_l2: np.ndarray
    ann_u: np.ndarray
    ann_du: np.ndarray
    ann_u3: np.ndarray
    ann_f: np.ndarray
    ann_truncated: np.ndarray
    snapshot_times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    support_radius: dict = field(default_factory=dict)
    forcing_spec: str = "none"
    data_spec: str = ""
    initial_support: float = 0.0

    @property
    def energy_trace(self):
        return self.energy


def _annulus_sums(labels, nlev, weights):
    return np.bincount(labels, weights=weights, minlength=nlev)[:nlev]


def evolve(metric, grid, data, forcing=None, T=1.0, snapshot_every=None, snapshot_times=(),
           threads=1, support_tol=1e-12, data_spec="", forcing_spec="none"):
    """Run the scheme to time T and return a WaveHistory.

    ``forcing`` is None or a callable t -> array on the grid. ``snapshot_every``
    keeps every k-th step; ``snapshot_times`` keeps the steps nearest to the
    listed times.
    """
    C_ell = metric.ellipticity_bounds[1]
    grid.validate(C_ell)
    u0, v0 = data
    op = WaveOperator(metric, grid, threads=threads)
    try:
        return _run(op, metric, grid, np.array(u0, dtype=float), np.array(v0, dtype=float),
                    forcing, T, snapshot_every, snapshot_times, support_tol, data_spec, forcing_spec)
    finally:
        op.close()


def _run(op, metric, grid, u, v0, forcing, T, snapshot_every, snapshot_times, support_tol,
         data_spec, forcing_spec):
    dt, h = grid.dt, grid.h
    vol = h**3
    nsteps = int(round(T / dt))
    a = op.a_total
    damp_lo = 1.0 - 0.5 * dt * a
    damp_hi = 1.0 + 0.5 * dt * a
    mask = op.mask
    labels = np.where(mask, annulus_index(op.jx), -1).ravel()
    nlev = int(labels.max()) + 1
    sel = labels >= 0
    lab = labels[sel]
    winv = (1.0 / op.jx).ravel()[sel]
    winv3 = winv**3
    wj = op.jx.ravel()[sel]
    # annuli cut by the sponge boundary
    half = grid.extent - grid.sponge_width
    trunc = np.array([2.0 ** (j + 1) > np.sqrt(1.0 + half * half) for j in range(nlev)])
    radius = np.sqrt(np.maximum(op.jx**2 - 1.0, 0.0))

    snap_steps = set()
    if snapshot_every:
        snap_steps.update(range(0, nsteps + 1, int(snapshot_every)))
    for ts in snapshot_times:
        snap_steps.add(min(nsteps, int(round(ts / dt))))
    snap_steps.add(0)
    snap_steps.add(nsteps)

    def force(t):
        if forcing is None:
            return None
        f = np.asarray(forcing(t), dtype=float)
        return f

    out = {k: np.zeros(nsteps + 1) for k in
           ("energy", "scheme", "damp", "sponge", "force", "grad")}
    ann = {k: np.zeros((nsteps + 1, nlev)) for k in ("u", "du", "u3", "f")}
    hist_snaps, hist_times, support = [], [], {}
    init_support = float(radius[np.abs(u) > support_tol].max()) if np.any(np.abs(u) > support_tol) else 0.0

    # v^{-1/2} from a Taylor step
    Lu, du = op.apply_L(u)
    f0 = force(0.0)
    acc = Lu - op.a_total * v0
    K0 = op.apply_K(v0)
    if K0 is not None:
        acc += K0
    if f0 is not None:
        acc += f0
    vm = v0 - 0.5 * dt * acc
    prev_du = None
    for n in range(nsteps + 1):
        t = n * dt
        if n > 0:
            Lu, du = op.apply_L(u)
        f = force(t)
        r = Lu if f is None else Lu + f
        vp = (damp_lo * vm + dt * r) / damp_hi
        if op.g0 is not None:
            for _ in range(2):
                kv = op.apply_K(0.5 * (vp + vm))
                vp = (damp_lo * vm + dt * (r + kv)) / damp_hi
        v = 0.5 * (vp + vm)
        if not np.all(np.isfinite(vp)):
            raise FloatingPointError(f"non-finite field at step {n} (t={t:.6g})")
        grad_e = op.gradient_energy(du) + op.mixed_energy(u)
        v2 = v * v
        out["energy"][n] = vol * (float(np.sum(v2)) + grad_e)
        if prev_du is not None:
            out["scheme"][n - 1] = vol * (float(np.sum(vm * vm)) + op.gradient_energy(du, prev_du)
                                          + _mixed_cross(op, u, u_prev))
        out["damp"][n] = 2.0 * vol * float(np.sum(op.a_phys * v2))
        out["sponge"][n] = 2.0 * vol * float(np.sum(op.a_sponge * v2))
        if f is not None:
            out["force"][n] = 2.0 * vol * float(np.sum(f * v))
        gsq = v2
        for ax in range(3):
            gsq = gsq + op.dcentral(u, ax) ** 2
        gsq_m = gsq.ravel()[sel]
        u2 = (u * u).ravel()[sel]
        out["grad"][n] = vol * float(np.sum(gsq_m))
        ann["u"][n] = vol * _annulus_sums(lab, nlev, u2 * winv)
        ann["du"][n] = vol * _annulus_sums(lab, nlev, gsq_m * winv)
        ann["u3"][n] = vol * _annulus_sums(lab, nlev, u2 * winv3)
        if f is not None:
            ann["f"][n] = vol * _annulus_sums(lab, nlev, (f * f).ravel()[sel] * wj)
        if n in snap_steps:
            hist_snaps.append((u.copy(), v.copy()))
            hist_times.append(t)
            big = (np.abs(u) > support_tol) & mask
            support[t] = float(radius[big].max()) if np.any(big) else 0.0
        if n == nsteps:
            break
        u_prev = u
        prev_du = du
        u = u + dt * vp
        vm = vp
    # final staggered energy needs u^{N+1}; leave the last entry as the previous value
    out["scheme"][nsteps] = out["scheme"][nsteps - 1] if nsteps > 0 else out["energy"][0]
    return WaveHistory(
        grid=grid, times=dt * np.arange(nsteps + 1), energy=out["energy"],
        scheme_energy=out["scheme"], damp_power=out["damp"], sponge_power=out["sponge"],
        force_power=out["force"], grad_l2=out["grad"], ann_u=ann["u"], ann_du=ann["du"],
        ann_u3=ann["u3"], ann_f=ann["f"], ann_truncated=trunc, snapshot_times=hist_times,
        fields=hist_snaps, support_radius=support, forcing_spec=forcing_spec,
        data_spec=data_spec, initial_support=init_support)


def _mixed_cross(op, u1, u0):
    if not op.offdiag:
        return 0.0
    d1 = [op.dcentral(u1, ax) for ax in range(3)]
    d0 = [op.dcentral(u0, ax) for ax in range(3)]
    return float(sum(np.sum(g * (d1[i] * d0[j] + d1[j] * d0[i])) for (i, j), g in op.offdiag.items()))


# ---------------------------------------------------------------------------
# energy and norms
# ---------------------------------------------------------------------------

def energy(metric, snapshot, grid):
    """E = int g^{ij} d_i u d_j u + u_t^2, face quadrature for the diagonal terms."""
    u, v = snapshot
    op = _light_operator(metric, grid)
    du = op.dplus(np.asarray(u, dtype=float))
    return grid.h**3 * (float(np.sum(np.asarray(v, dtype=float) ** 2))
                        + op.gradient_energy(du) + op.mixed_energy(u))


class _LightOperator(WaveOperator):
    def __init__(self, metric, grid):
        self.grid = grid
        h = grid.h
        X = grid.nodes()
        self.face = []
        for ax in range(3):
            Xf = X[_sl(ax, slice(0, -1))].copy()
            Xf[..., ax] += 0.5 * h
            self.face.append(metric.gij(Xf)[..., ax, ax])
        G = metric.gij(X)
        self.offdiag = {(i, j): G[..., i, j] for i in range(3) for j in range(i + 1, 3)
                        if np.max(np.abs(G[..., i, j])) > 0.0}


def _light_operator(metric, grid):
    return _LightOperator(metric, grid)


def dissipation_residual(metric, history, stride=1):
    """max_t |dE/dt - (2 int f u_t - 2 int a u_t^2)| / max E, sponge included as damping.

    dE/dt is the centered difference of the energy trace with spacing
    ``stride`` steps. Returns (residual, ledger) where the ledger reports the
    integrated sponge dissipation separately.
    """
    E = history.energy
    dt = history.grid.dt * stride
    k = stride
    if len(E) <= 2 * k:
        raise ValueError("history too short for a centered difference")
    dE = (E[2 * k:] - E[:-2 * k]) / (2.0 * dt)
    rhs = (history.force_power - history.damp_power - history.sponge_power)[k:-k]
    resid = float(np.max(np.abs(dE - rhs)) / np.max(E))
    ledger = {
        "sponge_dissipated": float(np.trapezoid(history.sponge_power, history.times)),
        "physical_dissipated": float(np.trapezoid(history.damp_power, history.times)),
        "forcing_work": float(np.trapezoid(history.force_power, history.times)),
    }
    return resid, ledger


@dataclass(frozen=True)
class LEReport:
    per_annulus: np.ndarray
    le: float
    le1: float
    le_star_f: float
    energy_trace: np.ndarray
    dissipation_residual: float
    du_le: float = 0.0
    u_le: float = 0.0
    sup_du: float = 0.0
    truncated: tuple = ()
    T: float = 0.0

    def to_dict(self):
        return {"T": self.T, "le": self.le, "le1": self.le1, "le_star_f": self.le_star_f,
                "du_le": self.du_le, "u_le": self.u_le, "sup_du": self.sup_du,
                "per_annulus": [float(x) for x in self.per_annulus],
                "truncated_annuli": list(self.truncated),
                "dissipation_residual": self.dissipation_residual}


def le_norms(history, R0=1.0, j_max=None, T=None, metric=None):
    """LE, LE^1 and LE* norms on [0, T] from the per-step annulus integrals.

    Annulus A_0 = {<x> < 2}, A_j = {2^j <= <x> < 2^{j+1}}; levels above j_max
    are dropped. Annuli cut by the sponge are flagged in ``truncated``.
    """
    t = history.times
    n = len(t) if T is None else int(np.searchsorted(t, T + 1e-9 * max(1.0, T)))
    n = max(n, 2)
    tt = t[:n]
    nlev = history.ann_u.shape[1] if j_max is None else min(j_max + 1, history.ann_u.shape[1])

    def tint(series):
        return np.sqrt(np.maximum(np.trapezoid(series[:n, :nlev], tt, axis=0), 0.0))

    per_u = tint(history.ann_u)
    per_du = tint(history.ann_du)
    per_u3 = tint(history.ann_u3)
    per_f = tint(history.ann_f)
    du_le = float(per_du.max())
    u_le = float(per_u3.max())
    resid = float("nan")
    if metric is not None:
        resid = dissipation_residual(metric, history)[0]
    return LEReport(per_annulus=per_u, le=float(per_u.max()), le1=du_le + u_le,
                    le_star_f=float(per_f.sum()), energy_trace=history.energy[:n],
                    dissipation_residual=resid, du_le=du_le, u_le=u_le,
                    sup_du=float(np.sqrt(np.max(history.grad_l2[:n]))),
                    truncated=tuple(int(j) for j in np.nonzero(history.ann_truncated[:nlev])[0]),
                    T=float(tt[-1]))


def _forcing_norm(history, n):
    """min(LE*, L^1 L^2) of the forcing, an upper bound for the sum-space norm."""
    tt = history.times[:n]
    le_star = float(np.sum(np.sqrt(np.maximum(np.trapezoid(history.ann_f[:n], tt, axis=0), 0.0))))
    jx_free = history.ann_f[:n].sum(axis=1)
    l1l2 = float(np.trapezoid(np.sqrt(np.maximum(jx_free, 0.0)), tt))
    return min(le_star, l1l2) if le_star > 0 else 0.0


def led_experiment(metric, data, T_list, grid, forcing=None, threads=1, label=""):
    """rho(T) = (LE^1[0,T] + sup_t |du|) / (|du(0)| + |f|_{LE* + L^1 L^2}) for each T."""
    T_list = sorted(float(T) for T in T_list)
    hist = evolve(metric, grid, data, forcing=forcing, T=T_list[-1], snapshot_times=T_list,
                  threads=threads, data_spec=label)
    du0 = float(np.sqrt(hist.grad_l2[0]))
    rows = []
    for T in T_list:
        rep = le_norms(hist, T=T)
        n = int(np.searchsorted(hist.times, T + 1e-9 * max(1.0, T)))
        den = du0 + (_forcing_norm(hist, n) if forcing is not None else 0.0)
        num = rep.le1 + rep.sup_du
        rows.append({"T": T, "numerator": num, "denominator": den, "rho": num / den,
                     "energy": float(hist.energy[n - 1])})
    return rows, hist


# ---------------------------------------------------------------------------
# binary snapshot output
# ---------------------------------------------------------------------------

def write_history(path, history, meta=None):
    """Flat little-endian binary: header (n, L, dt, count, times) then float64 (u, u_t) pairs."""
    g = history.grid
    times = np.asarray(history.snapshot_times, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", g.n))
        fh.write(struct.pack("<d", g.extent))
        fh.write(struct.pack("<d", g.dt))
        fh.write(struct.pack("<q", len(times)))
        fh.write(times.tobytes())
        for u, v in history.fields:
            fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    side = {"grid": g.to_dict(), "snapshot_times": [float(t) for t in times],
            "data_spec": history.data_spec, "forcing_spec": history.forcing_spec}
    if meta:
        side.update(meta)
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def read_history(path):
    with open(path, "rb") as fh:
        n = struct.unpack("<q", fh.read(8))[0]
        L = struct.unpack("<d", fh.read(8))[0]
        dt = struct.unpack("<d", fh.read(8))[0]
        k = struct.unpack("<q", fh.read(8))[0]
        times = np.frombuffer(fh.read(8 * k), dtype="<f8")
        fields = []
        for _ in range(k):
            u = np.frombuffer(fh.read(8 * n**3), dtype="<f8").reshape(n, n, n)
            v = np.frombuffer(fh.read(8 * n**3), dtype="<f8").reshape(n, n, n)
            fields.append((u, v))
    return {"n": n, "extent": L, "dt": dt, "times": times, "fields": fields}
