import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

from gcclab import escape as E
from gcclab.cutoff import chi, chi_gt
from gcclab.flow import half_rhs, integrate_half
from gcclab.halfwave import b_both, phi_scale
from gcclab.metric import (AFEstimate, crossterm_toy, damping_ball, estimate_af, minkowski,
                           shell_orbit_radii, trapped_shell)

from conftest import SHELL, rand_points


def af_const(c0, levels=8, delta=0.25):
    c = np.full(levels, c0)
    return AFEstimate(R0=1.0, j0=0, c_seq=c, c_total=float(c.sum()), raw=c, delta=delta,
                      threshold=0.1, envelope=0.0)


@pytest.fixture(scope="module")
def shell_af():
    m = trapped_shell(*SHELL)
    return estimate_af(m, 12, 2000, envelope=0.01, delta=0.25)


# ---------------------------------------------------------------------------
# bootstrap weight
# ---------------------------------------------------------------------------

def test_bootstrap_flat_is_one(flat):
    af = estimate_af(flat, 6, 200)
    with pytest.warns(UserWarning):
        bw = E.build_bootstrap(af, 64.0)
    r = np.geomspace(1.0, 1e6, 50)
    assert np.max(np.abs(bw.f(r) - 1.0)) < 1e-8


def test_bootstrap_constant_closed_form():
    c0, sigma = 0.02, 4.0
    bw = E.build_bootstrap(af_const(c0), sigma)
    # nodes carry 1.5 c_j, so F = 1.5 c0 ln(r / R0) between 1.5 and 1.5 * 2^7
    r = np.geomspace(1.5, 1.5 * 2**7, 200)
    assert np.allclose(bw.F(r) - bw.F(1.5), 1.5 * c0 * np.log(r / 1.5), rtol=1e-12, atol=1e-14)
    assert np.allclose(bw.f(r) / bw.f(1.5), (r / 1.5) ** (1.5 * sigma * c0), rtol=1e-10)


def test_bootstrap_matches_quadrature(shell_af):
    bw = E.build_bootstrap(shell_af, 4.0)
    for r in (20.0, 100.0, 3000.0, 1e6):
        ref = quad(lambda s: bw.c_fn(s) / s, shell_af.R0, r, limit=400, epsrel=1e-12)[0]
        assert bw.F(r) == pytest.approx(ref, rel=1e-6, abs=1e-12)


def test_bootstrap_invariants(shell_af):
    sigma = 4.0
    bw = E.build_bootstrap(shell_af, sigma)
    j0 = shell_af.j0
    r = np.geomspace(shell_af.R0 * 1.01, 2.0 ** (j0 + 30), 1000)
    c = bw.c_fn(r)
    f = bw.f(r)
    # f' r / (c f) = sigma
    assert np.allclose(bw.df(r) * r / (c * f), sigma, rtol=1e-6)
    # c is slowly varying: |c'| s <= delta c
    assert np.all(np.abs(bw.dc(r)) * r <= shell_af.delta * c * (1 + 1e-9))
    # c dominates the dyadic sequence on each annulus it was sampled on
    j = np.floor(np.log2(r)).astype(int)
    inside = j <= len(shell_af.c_seq) - 1
    cj = shell_af.c_seq[j[inside]]
    ratio = c[inside] / cj
    assert np.all((ratio > 1.0) & (ratio < 2.0))


def test_bootstrap_total_bounded(shell_af):
    sigma = 4.0
    bw = E.build_bootstrap(shell_af, sigma)
    levels = np.arange(shell_af.j0, len(shell_af.c_seq))
    tail = shell_af.c_seq[-1] * 2.0 ** (-shell_af.delta * np.arange(1, 25))
    total = np.sum(shell_af.c_seq[levels]) + np.sum(tail)
    # 1.5 node factor and the PCHIP overshoot stay within (1 + 0.7)
    assert bw.f_inf() / bw.f(shell_af.R0) <= np.exp(sigma * total * np.log(2) * 1.7)
    assert bw.f(shell_af.R0) == pytest.approx(1.0)


def test_bootstrap_sigma_swap(shell_af):
    a = E.build_bootstrap(shell_af, 4.0)
    b = a.with_sigma(16.0)
    r = np.array([30.0, 300.0])
    assert np.allclose(np.log(b.f(r)), 4.0 * np.log(a.f(r)))
    with pytest.raises(ValueError):
        a.with_sigma(0.0)


# ---------------------------------------------------------------------------
# q1: semi-bounded cover
# ---------------------------------------------------------------------------

def test_q1_empty_flat(flat):
    sym, C = E.build_q_semibounded(flat, None, "+", 4.0, (np.zeros((0, 3)), np.zeros((0, 3))), 50.0)
    x, xi = rand_points(20, 0)
    assert C == 0.0 and np.all(sym(x, xi) == 0.0)


@pytest.fixture(scope="module")
def one_seed():
    r_s = shell_orbit_radii(*SHELL)[0]
    m = trapped_shell(*SHELL, damping=damping_ball([0.0, r_s, 0.0], 1.0, 1.0))
    seed = (np.array([[r_s, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    sym, C = E.build_q_semibounded(m, None, "+", 8.0, seed, 60.0)
    return m, sym, C


def test_q1_single_element(one_seed):
    m, sym, C = one_seed
    assert len(sym.elements) == 1 and sym.skipped == 0
    e = sym.elements[0]
    assert e.s_w != 0.0 and e.alpha > 0.0
    assert C == pytest.approx(2.0 / e.alpha + 2.0 / sym.damping_element.alpha)
    assert sym.margin > 0.0


def _phi_oracle(metric, z, s):
    """State after half-flow time s by the adaptive integrator (independent route)."""
    tr = integrate_half(metric, "+", (z[:3], z[3:]), s, rtol=1e-12, atol=1e-13, max_step=0.05)
    return tr.states[-1]


def test_q1_seed_value_oracle(one_seed):
    # q_w(w) = int_0^{s_w} chi_w(phi_{-s} w) ds by solve_ivp + quad
    m, sym, _ = one_seed
    e = sym.elements[0]
    rhs = half_rhs(m, "+")
    sol = solve_ivp(lambda s, y: -rhs(y[None, :])[0], (0.0, e.s_w), np.concatenate([e.x, e.xi]),
                    rtol=1e-12, atol=1e-13, dense_output=True, method="DOP853")
    z0 = np.concatenate([e.x, e.xi])

    def integrand(s):
        y = sol.sol(s)
        return chi(np.linalg.norm(y - z0) / e.rho)
    ref = quad(integrand, 0.0, e.s_w, limit=500, points=None, epsabs=1e-12)[0]
    got = sym.tilde(e.x[None, :], e.xi[None, :])[0]
    assert got == pytest.approx(ref, abs=1e-6)


def test_q1_telescoping(one_seed):
    # H q_w = chi_w - chi_w o phi_{-s_w} near the seed
    m, sym, _ = one_seed
    e = sym.elements[0]
    rng = np.random.default_rng(3)
    z0 = np.concatenate([e.x, e.xi])
    pts = z0 + 1.5 * e.rho * rng.uniform(-1, 1, size=(12, 6)) / np.sqrt(6)
    got = E.directional_derivative(sym.tilde, m, "+", pts[:, :3], pts[:, 3:])
    back = np.array([_phi_oracle(m, p, -e.s_w) for p in pts])
    want = chi(np.linalg.norm(pts - z0, axis=1) / e.rho) - chi(np.linalg.norm(back - z0, axis=1) / e.rho)
    assert np.max(np.abs(got - want)) <= 1e-4


def test_q1_composition_scaling(one_seed):
    m, sym, _ = one_seed
    e = sym.elements[0]
    x = e.x[None, :] + 0.05
    xi = 3.0 * e.xi[None, :]
    lhs = E.directional_derivative(sym, m, "+", x, xi)
    xn, xin = phi_scale(m, x, xi, "+")
    rhs = E.directional_derivative(sym.tilde, m, "+", xn, xin)
    # the b-flow at (x, c xi) moves x at the same speed and xi c times faster
    assert lhs[0] == pytest.approx(rhs[0], abs=1e-6)


def test_q1_no_damping_raises(shell):
    with pytest.raises(E.EscapeConstructionError):
        E.build_q_semibounded(shell, None, "+", 8.0, (np.array([[3.5, 0, 0]]), np.array([[0, 1.0, 0]])), 10.0)


# ---------------------------------------------------------------------------
# q_in
# ---------------------------------------------------------------------------

def test_q_in_zero_psi(flat):
    psi = E.PsiSpec(R=2.0, xi_lo=0.5, xi_hi=1.5, delta=0.1, fn=lambda x, xi: np.zeros(len(x)))
    q = E.build_q_in(flat, "+", 2.0, psi, n_probes=64)
    x, xi = rand_points(10, 1, radius=3.0)
    assert np.all(q(x, xi) == 0.0)


@pytest.fixture(scope="module")
def flat_qin():
    m = minkowski()
    R = 2.0
    psi = E.default_psi(m, "+", R)
    return m, psi, E.build_q_in(m, "+", R, psi, n_probes=512)


def test_q_in_transit_geometry(flat_qin):
    _, psi, q = flat_qin
    # straight unit-speed chords through supp psi = {|x| < 2R}: at most the diameter 4R
    diam = 2.0 * psi.support_radius
    assert q.probe_max_transit <= diam + 2 * 0.25
    assert q.probe_max_transit >= 0.9 * diam
    assert q.T_prime == pytest.approx(2.0 * q.probe_max_transit)


def test_q_in_flat_integral(flat_qin):
    m, psi, q = flat_qin
    x, xi = rand_points(6, 5, radius=1.5)
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    got = q.integral(x, xi)
    for k in range(6):
        ref = quad(lambda s: psi((x[k] - s * xi[k])[None, :], xi[k][None, :])[0], 0.0, 20.0,
                   limit=200, epsabs=1e-12)[0]
        assert got[k] == pytest.approx(ref, abs=1e-6)


def test_q_in_bracket_is_psi(flat_qin):
    m, psi, q = flat_qin
    x, xi = rand_points(20, 6, radius=1.0)
    xn, xin = phi_scale(m, x, xi, "+")
    d = E.directional_derivative(q.tilde, m, "+", xn, xin)
    assert np.allclose(d, psi(xn, xin), atol=1e-6)
    # the same at unnormalized covectors through Phi
    d2 = E.directional_derivative(q, m, "+", x, 5.0 * xi)
    assert np.allclose(d2, d, atol=1e-6)


# ---------------------------------------------------------------------------
# q_out
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("sign", [1, -1])
def test_q_out_flat_formula(flat, sign):
    bw = E.build_bootstrap(af_const(0.05), 4.0)
    R = 2.0
    q = E.build_q_out(flat, sign, R, bw)
    x, xi = rand_points(200, 7, radius=10.0)
    r = np.linalg.norm(x, axis=1)
    want = -sign * chi_gt(r, R) * bw.f(r) * np.sum(xi * x, axis=1) / (np.linalg.norm(xi, axis=1) * r)
    assert np.allclose(q(x, xi), want, rtol=1e-13, atol=1e-15)
    assert np.all(q(x[r < R], xi[r < R]) == 0.0)


def test_q_out_flat_bracket(flat):
    # along straight rays: H q_out = f'(r) c^2 + f(r) (1 - c^2) / r with c = xi^.x^, for r >= 2R
    bw = E.build_bootstrap(af_const(0.05), 4.0)
    R = 2.0
    q = E.build_q_out(flat, 1, R, bw)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 3))
    x *= (rng.uniform(2 * R + 0.5, 40.0, 200) / np.linalg.norm(x, axis=1))[:, None]
    xi = rng.normal(size=(200, 3))
    r = np.linalg.norm(x, axis=1)
    c = np.sum(x * xi, axis=1) / (r * np.linalg.norm(xi, axis=1))
    want = bw.df(r) * c**2 + bw.f(r) * (1 - c**2) / r
    got = E.directional_derivative(q, flat, 1, x, xi)
    assert np.allclose(got, want, rtol=1e-6)
    assert np.all(got > 0)


# ---------------------------------------------------------------------------
# assembly and correction
# ---------------------------------------------------------------------------

def test_correction_hand_example():
    n = 2.7
    assert E.correction_from_coeffs(1.0, 0.0, -n * n, n, -n) == pytest.approx(1.0)
    assert E.correction_from_coeffs(0.0, 0.0, 0.0, n, -n) == 0.0


def test_zero_symbols_flat_bracket(flat):
    asm = E.assemble_q(None, None, None, 1.0, 4.0, 1.0, metric=flat)
    x, xi = rand_points(50, 9, radius=6.0)
    a0, a1, a2 = asm.a_coeffs(x, xi)
    scale = np.sum(xi * xi, axis=1)
    assert np.max(np.abs(a0)) < 1e-8 and np.max(np.abs(a1) / np.sqrt(scale)) < 1e-8
    assert np.max(np.abs(a2) / scale) < 1e-8


@pytest.fixture(scope="module")
def cross_asm():
    m = crossterm_toy(0.05)
    bw = E.build_bootstrap(af_const(0.05), 4.0)
    qo = {s: E.build_q_out(m, s, 0.5, bw) for s in (1, -1)}
    return E.assemble_q(None, None, qo, 1.0, 4.0, 1.0, gamma=0.0, metric=m, bootstrap=bw)


def test_cutoff_support(cross_asm):
    asm = cross_asm
    asm4 = E.EscapeAssembly(asm.symbols, 4.0, asm.sigma, asm.gamma, asm.epsilon)
    x, xi = rand_points(200, 10, radius=3.0)
    xi *= (0.9 / np.linalg.norm(xi, axis=1))[:, None]
    bp, bm = b_both(asm.metric, x, xi)
    low = (np.abs(bp) < 4.0) & (np.abs(bm) < 4.0)
    assert np.all(low)
    tau = np.linspace(-3, 3, 200)
    assert np.all(asm4.q(tau, x, xi) == 0.0)
    assert np.all(asm4.m(x, xi) == 0.0)


def test_degree_one(cross_asm):
    asm = cross_asm
    x, xi = rand_points(200, 11, radius=3.0)
    xi *= (3.0 / np.linalg.norm(xi, axis=1))[:, None]
    tau = np.random.default_rng(11).uniform(-5, 5, 200)
    bp, bm = b_both(asm.metric, x, xi)
    sat = (np.abs(bp) >= 2.0) & (np.abs(bm) >= 2.0)
    q1 = asm.q(tau, x, xi)
    q2 = asm.q(2.0 * tau, x, 2.0 * xi)
    assert np.allclose(q2[sat], 2.0 * q1[sat], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("sign", [1, -1])
def test_single_branch_bracket(cross_asm, sign):
    # on tau = b+: H_p q = -(b+ - b-)^2 D+ Q+ + (b+ - b-) (D+ b-) Q+ (D+ the half-flow derivative)
    asm = cross_asm
    m = asm.metric
    x, xi = rand_points(40, 12, radius=1.5)
    xi *= (3.0 / np.linalg.norm(xi, axis=1))[:, None]
    bp, bm = b_both(m, x, xi)
    b, other = (bp, bm) if sign > 0 else (bm, bp)
    got = asm.bracket(b, x, xi)
    D = E.directional_derivative(lambda y, z: asm.q_branch(sign, y, z), m, sign, x, xi)
    Db = E.directional_derivative(lambda y, z: b_both(m, y, z)[1 if sign > 0 else 0], m, sign, x, xi)
    Qs = asm.q_branch(sign, x, xi)
    want = -(b - other) ** 2 * D + (b - other) * Db * Qs
    assert np.allclose(got, want, rtol=1e-4, atol=1e-6 * np.max(np.abs(want)))


def test_build_correction_point(cross_asm):
    x = np.array([0.3, 0.2, -0.1])
    xi = np.array([3.0, 0.5, 0.0])
    m = E.build_correction(cross_asm, (1.0, x, xi))
    assert m == pytest.approx(float(cross_asm.m(x[None], xi[None])[0]))
    with pytest.raises(ValueError):
        E.build_correction(cross_asm, (1.0, x, np.zeros(3)))


# ---------------------------------------------------------------------------
# verification on a non-trapping metric
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def flat_tuned():
    m = minkowski()
    R = 2.0
    af = af_const(0.01)
    bw = E.build_bootstrap(af, 1.0)
    qi, qo = {}, {}
    for s in (1, -1):
        psi = E.default_psi(m, s, R)
        qi[s] = E.build_q_in(m, s, R, psi, n_probes=256)
        qo[s] = E.build_q_out(m, s, R, bw)
    asm = E.assemble_q(None, qi, qo, 1.0, 4.0, 4.0, gamma=16.0, metric=m, bootstrap=bw)
    spec = E.SampleSpec(R=R, n_generic=8000, n_char=1000, seed=0)
    cache = E.cache_components(asm.symbols, E.sample_phase_space(m, spec))
    return cache, E.tune_escape(cache, lams=(4,), sigmas=(4,), gammas=(16,), eps_min=2.0**-12)


def test_flat_positivity(flat_tuned):
    _, res = flat_tuned
    rep = res.report
    assert res.passed and rep.c0 > 0
    assert rep.validity_fraction == 1.0
    assert rep.n_samples == 10000
    assert rep.min_value_formula_error < 1e-6


def test_lambda_invariance(flat_tuned):
    cache, res = flat_tuned
    p = res.params
    reps = [E.evaluate_cache(cache, E.Params(lam, p["sigma"], p["gamma"], p["epsilon"]))
            for lam in (4.0, 16.0)]
    assert reps[0].c0 == pytest.approx(reps[1].c0, rel=1e-8)


def test_sample_design(flat):
    s = E.sample_phase_space(flat, E.SampleSpec(R=2.0, n_generic=500, n_char=100, C_b=1.0))
    nxi = np.linalg.norm(s.xi, axis=1)
    assert np.all((nxi >= 1.0) & (nxi <= 8.0))
    assert np.all(np.linalg.norm(s.x, axis=1) <= 16.0)
    bp, bm = b_both(flat, s.x, s.xi)
    assert np.all(s.tau[s.kind == 1] == bp[s.kind == 1])
    assert np.all(s.tau[s.kind == -1] == bm[s.kind == -1])
    assert np.all(np.abs(s.tau[s.kind == 0]) <= 8.0)
