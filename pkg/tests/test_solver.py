import numpy as np
import pytest

from gcclab.metric import damping_shell, japanese, minkowski, trapped_shell
from gcclab.solver import (CFLError, GridSpec, annulus_index, bump_data, dissipation_residual,
                           energy, evolve, le_norms, read_history, write_history)


def grid(n=33, L=8.0, C_ell=1.0, W=2.0):
    return GridSpec.for_metric(L, n, C_ell, sponge_width=max(W, 8.0 * L / (n - 1)))


def sines(g, m=(1, 2, 3)):
    a = g.axis()
    k = [mi * np.pi / (2 * g.extent) for mi in m]
    X, Y, Z = np.meshgrid(a, a, a, indexing="ij")
    u = np.sin(k[0] * (X + g.extent)) * np.sin(k[1] * (Y + g.extent)) * np.sin(k[2] * (Z + g.extent))
    return u, k


def test_cfl_rejected():
    g = grid()
    bad = GridSpec(g.extent, g.n, 2.0 * g.dt, g.sponge_width, g.sponge_strength, g.cfl)
    with pytest.raises(CFLError):
        bad.validate(1.0)
    with pytest.raises(CFLError):
        GridSpec.for_metric(8.0, 33, 1.0, sponge_width=0.5).validate(1.0)


def test_zero_data_stays_zero(flat):
    g = grid(17)
    z = np.zeros((17,) * 3)
    h = evolve(flat, g, (z, z), T=1.0)
    assert np.all(h.energy == 0.0) and np.all(h.ann_u == 0.0)
    rep = le_norms(h)
    assert rep.le == 0.0 and rep.le1 == 0.0
    assert energy(flat, (z, z), g) == 0.0


def test_energy_of_sines_closed_form(flat):
    # int over [-L, L]^3 of |grad u|^2 = (k1^2 + k2^2 + k3^2) L^3; the face rule sees
    # (2/h) sin(k h / 2) in place of k, the same sum by discrete orthogonality
    for n in (33, 65):
        g = grid(n)
        u, k = sines(g)
        L, h = g.extent, g.h
        exact = sum(kk**2 for kk in k) * L**3
        disc = sum((2 / h * np.sin(kk * h / 2)) ** 2 for kk in k) * L**3
        E = energy(flat, (u, np.zeros_like(u)), g)
        assert E == pytest.approx(disc, rel=1e-12)
        assert abs(E - exact) / exact < 0.05 * (16 / (n - 1)) ** 2


def test_energy_coercive(shell):
    g = grid(17, L=6.0, C_ell=3.0)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(17,) * 3)
    du = [np.diff(u, axis=ax) / g.h for ax in range(3)]
    base = g.h**3 * sum(float(np.sum(d * d)) for d in du)
    E = energy(shell, (u, np.zeros_like(u)), g)
    lo, hi = shell.ellipticity_bounds
    assert lo * base <= E * (1 + 1e-12) and E <= hi * base * (1 + 1e-12)


def test_dalembert_plane_pulse(flat):
    # u0 = g(x1), u_t = 0 -> u = (g(x1 - t) + g(x1 + t)) / 2 on the axis, away from the sponge
    errs = []
    for n in (33, 65):
        g = grid(n, L=8.0, W=2.0)
        a = g.axis()
        prof = np.exp(-(a / 1.2) ** 2)
        u0 = np.broadcast_to(prof[:, None, None], (n,) * 3).copy()
        u0[[0, -1]] = 0
        u0[:, [0, -1]] = 0
        u0[:, :, [0, -1]] = 0
        T = 2.0
        h = evolve(flat, g, (u0, np.zeros_like(u0)), T=T)
        t = h.times[-1]
        u = h.fields[-1][0][:, n // 2, n // 2]

        def pb(s):
            return np.exp(-(s / 1.2) ** 2)
        exact = 0.5 * (pb(a - t) + pb(a + t))
        errs.append(np.max(np.abs(u - exact)))
    order = np.log2(errs[0] / errs[1])
    assert 1.7 <= order <= 2.3


def test_undamped_scheme_energy_conserved(flat):
    g = grid(33)
    u0, v0 = bump_data(g, [0, 0, 0], 2.0)
    h = evolve(flat, g, (u0, v0), T=2.0)
    E = h.scheme_energy[:-1]
    assert np.max(np.abs(E - E[0])) <= 1e-12 * E[0]


def test_damped_energy_non_increasing():
    m = trapped_shell(2.0, 5.0, 1.0, damping=damping_shell(3.75, 2.5, 1.0))
    g = grid(33, C_ell=3.0)
    u0, v0 = bump_data(g, [3.5, 0, 0], 2.0)
    h = evolve(m, g, (u0, v0), T=4.0)
    E = h.scheme_energy
    assert np.all(np.diff(E) <= 1e-13 * E[0])
    assert E[-1] < E[0]


def test_annulus_integrals_match_direct(flat):
    g = grid(33)
    u0, v0 = bump_data(g, [5.0, 0, 0], 1.5)
    h = evolve(flat, g, (u0, v0), T=0.1)
    X = g.nodes()
    jx = japanese(X)
    lev = annulus_index(jx)
    inner = np.all(np.abs(X) <= g.extent - g.sponge_width + 1e-12, axis=-1)
    direct = g.h**3 * np.sum(np.where(inner & (lev == 2), u0**2 / jx, 0.0))
    assert h.ann_u[0, 2] == pytest.approx(direct, rel=1e-12)
    # <x>^{-3} <= <x>^{-1}: the u-part weights are ordered per annulus
    assert np.all(h.ann_u3 <= h.ann_u * (1 + 1e-15))


def test_annulus_index():
    assert list(annulus_index(np.array([1.0, 1.9, 2.0, 3.9, 4.0, 9.0]))) == [0, 0, 1, 1, 2, 3]


@pytest.mark.parametrize("forced", [False, True])
def test_residual_second_order(flat, forced):
    res = []
    for n in (48, 96):
        g = grid(n)
        u0, v0 = bump_data(g, [0, 0, 0], 2.0)
        if forced:
            z = np.zeros_like(u0)
            h = evolve(flat, g, (z, z), forcing=lambda t: np.sin(2 * t) * u0, T=4.0)
        else:
            h = evolve(flat, g, (u0, v0), T=4.0)
        resid, ledger = dissipation_residual(flat, h)
        assert (ledger["forcing_work"] > 0) == forced
        res.append(resid)
    assert 3.0 <= res[0] / res[1] <= 5.0


def test_threads_bitwise(shell):
    g = grid(33, C_ell=3.0)
    u0, v0 = bump_data(g, [3.5, 0, 0], 2.0)
    a = evolve(shell, g, (u0, v0), T=1.0, threads=1)
    b = evolve(shell, g, (u0, v0), T=1.0, threads=4)
    assert a.energy.tobytes() == b.energy.tobytes()
    assert a.fields[-1][0].tobytes() == b.fields[-1][0].tobytes()


def test_history_roundtrip(tmp_path, flat):
    g = grid(17)
    u0, v0 = bump_data(g, [0, 0, 0], 2.0)
    h = evolve(flat, g, (u0, v0), T=0.5, snapshot_every=2)
    p = tmp_path / "h.bin"
    write_history(p, h)
    back = read_history(p)
    assert back["n"] == 17 and len(back["fields"]) == len(h.fields)
    assert np.array_equal(back["fields"][-1][0], h.fields[-1][0])
    assert (tmp_path / "h.bin.json").exists()
