import numpy as np
import pytest

from mkdvtori.reducibility import (MelnikovViolation, PhaseSpace, default_n0, fit_m3_m1,
                                   floquet_evolve, invert_L_omega, kam_step, melnikov_membership,
                                   reduce_to_constant)
from mkdvtori.reduction import reduce_operator
from mkdvtori.torus import Params, TorusSystem, freq_amp

OMEGA = np.array([1 - 3 * 0.05 ** 2])
MODES = np.array([-6, -5, -4, -3, -2, 2, 3, 4, 5, 6])


def _space():
    return PhaseSpace(1, 4, OMEGA, MODES)


def _skew_perturbation(space, rng, size):
    """Smooth X(phi) with X_j^k(phi) = -conj(X_k^j(phi)) so that mu stays imaginary."""
    n = len(space.modes)
    c = rng.standard_normal((3, n, n)) + 1j * rng.standard_normal((3, n, n))
    d = np.abs(space.modes[:, None] - space.modes[None, :])
    c *= np.exp(-d)[None] * size
    phi = 2 * np.pi * np.arange(space.size) / space.size
    x = sum(np.exp(1j * k * phi)[:, None, None] * c[k + 1] for k in (-1, 0, 1))
    return 0.5 * (x - np.conj(np.swapaxes(x, 1, 2)))


def test_zero_perturbation_is_fixed():
    sp = _space()
    delta = 1j * -MODES.astype(float) ** 3
    st = reduce_to_constant(sp, delta, np.zeros((sp.size, 10, 10)), 1e-3, 3, 2.0)
    assert st.n == 0 and np.array_equal(st.mu, delta)
    assert np.array_equal(st.transform[0], np.eye(10))


def test_constant_diagonal_absorbed():
    sp = _space()
    delta = 1j * -MODES.astype(float) ** 3
    shift = 1j * np.linspace(0.1, 0.2, 10)
    X = np.broadcast_to(np.diag(shift), (sp.size, 10, 10)).copy()
    st = reduce_to_constant(sp, delta, X, 1e-3, 3, 2.0)
    assert np.allclose(st.mu, delta + shift, atol=1e-15, rtol=0)
    assert np.abs(st.R).max() <= 1e-15


def test_synthetic_convergence(rng):
    sp = _space()
    delta = 1j * -MODES.astype(float) ** 3
    X = _skew_perturbation(sp, rng, 1e-2)
    st = reduce_to_constant(sp, delta, X, 1e-3, 3, 2.0, tol=1e-12)
    assert sp.decay_norm(st.R, 1.5) <= 1e-12
    assert np.abs(st.mu.real).max() <= 1e-14
    assert np.abs(st.mu - delta).max() <= 0.1
    afters = [h["after"] for h in st.history]
    assert afters[-1] < afters[0]


def test_small_divisor_raises():
    sp = PhaseSpace(1, 4, np.array([7.0]), MODES)
    delta = 1j * -MODES.astype(float) ** 3
    X = np.zeros((sp.size, 10, 10), complex)
    X[:, 5, 6] = X[:, 6, 5] = 1e-3j
    from mkdvtori.reducibility import _initial_state
    with pytest.raises(MelnikovViolation):
        kam_step(sp, _initial_state(sp, delta, X, 5.0), 10.0, 3)


@pytest.fixture(scope="module")
def reduced(quasilinear_model):
    p = Params(0.05, n_phi=8, n_x=16)
    om = freq_amp(quasilinear_model.sites, 1, 0.05, np.array([1.0]))
    ch = reduce_operator(quasilinear_model, p, TorusSystem(quasilinear_model, p, om).trivial(), om)
    sp = PhaseSpace.from_frame(ch.frame)
    st = reduce_to_constant(sp, ch.final.delta, ch.final.X, p.gamma, p.tau, default_n0(0.05, p.gamma, p.a))
    return p, ch, st


def test_eigenvalues_follow_constant_coefficients(reduced):
    p, ch, st = reduced
    j = ch.frame.modes
    keep = np.abs(j) <= p.n_x
    m3, m1 = fit_m3_m1(j[keep], st.mu[keep])
    assert m3 == pytest.approx(ch.m3, abs=1e-6)
    assert m1 == pytest.approx(ch.m1, abs=1e-4)
    assert np.abs(st.mu.real).max() <= 1e-14
    assert np.abs(st.mu[::-1] - np.conj(st.mu)).max() <= 1e-14


def test_inversion_residual(reduced, rng):
    p, ch, st = reduced
    f = ch.frame
    for _ in range(3):
        g = f.random_field(rng)
        h = invert_L_omega(ch, st, g)
        res = ch.stages[0].apply(f, h) - g
        assert f.field_norm(res, f.s0) <= 1e-12 * f.field_norm(g, f.s0 + p.tau + 3)


def test_melnikov_vacuous_and_small_gamma():
    mu = 1j * -MODES.astype(float) ** 3
    ok, wit = melnikov_membership(OMEGA, MODES, mu, 1e-12, 3, 10)
    assert ok and not wit
    ok, wit = melnikov_membership(OMEGA, MODES, np.zeros(10), 1e-12, 3, 10)
    assert all(j != k for _, j, k, _, _ in wit)


def test_melnikov_witness_values():
    mu = 1j * -MODES.astype(float) ** 3
    ok, wit = melnikov_membership(OMEGA, MODES, mu, 1.0, 3, 4)
    assert not ok
    table = dict(zip(MODES.tolist(), mu))
    table[0] = 0.0
    for l, j, k, div, bound in wit:
        assert div == pytest.approx(abs(1j * OMEGA[0] * l[0] + table[j] - table[k]))
        assert bound == pytest.approx(2 * abs(j ** 3 - k ** 3) * (1 + l[0] ** 2) ** -1.5)
        assert div < bound


def test_floquet_modulus_conserved(rng):
    mu = 1j * -MODES.astype(float) ** 3 * 0.99
    v0 = rng.standard_normal(10) + 1j * rng.standard_normal(10)
    v = floquet_evolve(OMEGA, mu, v0, np.linspace(0, 1e3, 101))
    assert np.abs(np.abs(v) - np.abs(v0)).max() <= 1e-8


def test_floquet_forced_matches_ode(rng):
    from scipy.integrate import solve_ivp
    mu = np.array([0.3j, -1.1j])
    lat = np.array([[-1], [0], [1]])
    forcing = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    v0 = np.array([1.0, 0.5j])

    def rhs(t, v):
        f = sum(forcing[a] * np.exp(1j * lat[a, 0] * OMEGA[0] * t) for a in range(3))
        return -mu * v + f
    ts = np.linspace(0, 5, 6)
    ref = solve_ivp(rhs, (0, 5), v0.astype(complex), t_eval=ts, rtol=1e-12, atol=1e-12).y.T
    assert np.allclose(floquet_evolve(OMEGA, mu, v0, ts, forcing, lat), ref, atol=1e-9)
