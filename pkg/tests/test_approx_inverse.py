import numpy as np
import pytest

from conftest import random_embedding
from mkdvtori.approx_inverse import (ApproximateInverse, DG_delta, G_delta_chart, NormalInverse,
                                     apply_D, isotropic_correction, isotropy_data, k_taylor,
                                     solve_D, symplectic_pairing)
from mkdvtori.fourier import lattice
from mkdvtori.hamiltonian import Model, Monomial, PolynomialDensity
from mkdvtori.sites import SiteSet
from mkdvtori.torus import Params, TorusEmbedding, TorusSystem, freq_amp, s0_of


@pytest.fixture(scope="module")
def one_site():
    model = Model(1, PolynomialDensity((Monomial(1.0, "const", 0, 3, 2),)))
    p = Params(0.1, n_phi=4, n_x=10)
    return TorusSystem(model, p, freq_amp(model.sites, 1, 0.1, [1.0]))


@pytest.fixture(scope="module")
def two_sites():
    model = Model(1, sites=SiteSet((1, 2)))
    p = Params(0.05, tau=4, n_phi=3, n_x=8)
    return TorusSystem(model, p, freq_amp(model.sites, 1, 0.05, [1.0, 1.3]))


def _two_site_embedding(s, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    e = s.trivial()
    w = np.exp(-np.abs(lattice(2, 3)).sum(1)).reshape(7, 7, 1)
    c = lambda a: rng.standard_normal(a.shape) + 1j * rng.standard_normal(a.shape)
    mask = np.zeros(e.z.shape[-1], bool)
    mask[s.jidx] = True
    return TorusEmbedding(c(e.theta) * w * 0.05 * scale, c(e.y) * w * 0.05 * scale,
                          c(e.z) * w * mask * 0.02 * scale, np.zeros(2)).realified()


def _pairing_error(s, mats, rng):
    n = mats.shape[-1]
    u = rng.standard_normal((mats.shape[0], n))
    v = rng.standard_normal((mats.shape[0], n))
    du = np.einsum("pab,pb->pa", mats, u)
    dv = np.einsum("pab,pb->pa", mats, v)
    return np.abs(symplectic_pairing(s, du, dv) - symplectic_pairing(s, u, v)).max()


def test_trivial_torus_is_isotropic(two_sites):
    d = isotropy_data(two_sites, two_sites.trivial())
    assert not np.any(d.a) and d.defect() == 0.0


def test_constant_actions(two_sites):
    e = two_sites.trivial()
    y = e.y.copy()
    y[3, 3] = [0.4, -0.2]
    d = isotropy_data(two_sites, e.replace(y=y))
    centre = (d.a.shape[0] - 1) // 2
    assert np.allclose(d.a[centre, centre], [-0.4, 0.2], atol=1e-15)
    assert np.abs(d.a).sum() == pytest.approx(0.6, abs=1e-14)
    assert d.defect() <= 1e-15


def test_isotropic_correction_is_quadratic(two_sites):
    before, after = [], []
    for sc in (1.0, 0.5, 0.25):
        i0 = _two_site_embedding(two_sites, 2, sc)
        before.append(isotropy_data(two_sites, i0).defect())
        after.append(isotropy_data(two_sites, isotropic_correction(two_sites, i0)).defect())
    logs = np.log([1.0, 0.5, 0.25])
    assert np.polyfit(logs, np.log(before), 1)[0] == pytest.approx(1.0, abs=0.1)
    assert np.polyfit(logs, np.log(after), 1)[0] == pytest.approx(2.0, abs=0.1)


def test_chart_symplectic_on_corrected_torus(two_sites, rng):
    i0 = _two_site_embedding(two_sites, 2)
    raw = _pairing_error(two_sites, DG_delta(two_sites, i0), rng)
    fixed = _pairing_error(two_sites, DG_delta(two_sites, isotropic_correction(two_sites, i0)), rng)
    assert fixed <= 0.02 * raw


def test_chart_centred_and_trivial_derivative(two_sites):
    i_delta = isotropic_correction(two_sites, _two_site_embedding(two_sites, 4))
    for a, b in zip(G_delta_chart(two_sites, i_delta), two_sites.on_grid(i_delta)):
        assert np.array_equal(a, b)
    dg = DG_delta(two_sites, two_sites.trivial())
    assert np.array_equal(dg, np.broadcast_to(np.eye(dg.shape[-1]), dg.shape))


def test_chart_inverse(one_site, rng):
    from mkdvtori.approx_inverse import Chart
    ch = Chart(one_site, random_embedding(rng, one_site, 0.02))
    p, nj = ch.dtheta.shape[0], len(one_site.jn)
    parts = (rng.standard_normal((p, 1)), rng.standard_normal((p, 1)), rng.standard_normal((p, nj)))
    back = ch.inverse_grid(*ch.forward_grid(*parts))
    for a, b in zip(back, parts):
        assert np.abs(a - b).max() <= 1e-13


def test_k11_transpose_is_adjoint(one_site, rng):
    k = k_taylor(one_site, random_embedding(rng, one_site, 0.02))
    p = k.K11.shape[0]
    eta = rng.standard_normal((p, 1))
    w = rng.standard_normal((p, len(one_site.jn)))
    lhs = np.sum(np.einsum("pji,pi->pj", k.K11, eta) * w[:, ::-1], axis=1)
    rhs = np.sum(eta * k.k11_transpose(w), axis=1)
    assert np.abs(lhs - rhs).max() <= 1e-14


def test_k02_symmetric(one_site, rng):
    k = k_taylor(one_site, random_embedding(rng, one_site, 0.02))
    b = k.K02[:, ::-1, :]
    assert np.abs(b - np.swapaxes(b, 1, 2)).max() <= 1e-13 * np.abs(b).max()


def test_solve_D_round_trip(one_site, rng):
    k = k_taylor(one_site, random_embedding(rng, one_site, 0.02))
    linv = NormalInverse(k, one_site.omega)
    g = random_embedding(rng, one_site, 1.0).replace(zeta=np.zeros(1))
    sol = solve_D(k, linv, g, one_site.omega)
    assert (apply_D(k, sol, one_site.omega) - g).norm(0) <= 1e-12 * g.norm(0)
    assert solve_D(k, linv, TorusEmbedding.zeros(1, g.box), one_site.omega).norm(0) == 0.0


def test_constant_action_source_gives_zeta(one_site):
    s = one_site
    k = k_taylor(s, s.trivial())
    g = TorusEmbedding.zeros(1, s.trivial().box)
    g.y[s.params.n_phi] = 0.37
    sol = solve_D(k, NormalInverse(k, s.omega), g, s.omega)
    assert sol.zeta == pytest.approx([0.37], abs=1e-15)


def test_T0_linear(one_site, rng):
    ai = ApproximateInverse(one_site, random_embedding(rng, one_site, 0.02))
    a, b = random_embedding(rng, one_site, 1.0), random_embedding(rng, one_site, 1.0)
    lhs = ai.apply(a.scale(2.0) + b)
    assert (lhs - ai.apply(a).scale(2.0) - ai.apply(b)).norm(0) <= 1e-12 * lhs.norm(0)


def test_defect_small_at_converged_torus(converged_small, rng):
    model, params, omega, out = converged_small
    s = TorusSystem(model, params, omega)
    ai = ApproximateInverse(s, out.solution)
    for _ in range(3):
        assert ai.defect(random_embedding(rng, s, 1.0)) <= 1e-6


def test_defect_proportional_to_residual():
    model = Model(1, PolynomialDensity((Monomial(1.0, "const", 0, 5, 0),)))
    res, dfc = [], []
    for eps in (0.02, 0.05, 0.1):
        p = Params(eps, n_phi=6, n_x=12)
        s = TorusSystem(model, p, freq_amp(model.sites, 1, eps, [1.0]))
        i0 = s.trivial()
        res.append(s.residual(i0).norm(s0_of(1)))
        g = random_embedding(np.random.default_rng(3), s, 1.0)
        dfc.append(ApproximateInverse(s, i0).defect(g))
    assert np.polyfit(np.log(res), np.log(dfc), 1)[0] == pytest.approx(1.0, abs=0.15)
