import numpy as np
import pytest

from mkdvtori.fourier import TorusField
from mkdvtori.hamiltonian import Model, Monomial, PolynomialDensity
from mkdvtori.sites import SiteSet
from conftest import random_embedding
from mkdvtori.torus import (Params, TorusEmbedding, TorusSystem, embed_A_eps, freq_amp, s0_of,
                            split_N_P, twist_inverse, twist_matrix, xi_of_omega)


@pytest.mark.parametrize("eps", [0.02, 0.1])
def test_frequency_single_site(eps):
    om = freq_amp(SiteSet((1,)), 1, eps, [1.0])
    assert om[0] == pytest.approx(1 - 3 * eps ** 2, rel=1e-15)


def test_twist_inverse_random_sites(rng):
    for nu in range(1, 7):
        for sign in (1, -1):
            for _ in range(5):
                sites = SiteSet(tuple(rng.choice(np.arange(1, 40), nu, replace=False)))
                err = twist_matrix(sites, sign) @ twist_inverse(sites, sign) - np.eye(nu)
                assert np.abs(err).max() <= 1e-12


def test_mass_variant_twist_diagonal():
    sites = SiteSet((2, 5))
    assert np.allclose(twist_matrix(sites, -1, True), np.diag([-6.0, -15.0]))


def test_round_trip(rng):
    sites = SiteSet((1, 3, 4))
    xi = rng.uniform(1, 2, 3)
    om = freq_amp(sites, 1, 0.05, xi)
    assert np.allclose(freq_amp(sites, 1, 0.05, xi_of_omega(sites, 1, 0.05, om)), om, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        freq_amp(sites, 1, 0.05, [1.0, -1.0, 1.0])


def test_embedding_leading_term():
    p = Params(0.05, n_x=6)
    z = TorusField.zeros(0, (0, 6))
    u = embed_A_eps(p, SiteSet((2,)), [1.5], [0.0], [0.0], z)
    want = np.zeros(13, dtype=complex)
    want[6 + 2] = want[6 - 2] = 0.05 * np.sqrt(1.5)
    assert np.allclose(u.coeffs, want, atol=1e-16)


def test_embedding_radicand_and_reality(rng):
    p = Params(0.05, n_x=6)
    c = np.zeros(13, dtype=complex)
    c[6 + 3] = 0.3 + 0.1j
    c[6 - 3] = 0.3 - 0.1j
    z = TorusField(0, c)
    with pytest.raises(ValueError, match="radicand"):
        embed_A_eps(p, SiteSet((1,)), [1e-6], [0.0], [-1.0], z)
    for _ in range(5):
        u = embed_A_eps(p, SiteSet((1, 2)), [1.0, 1.2], rng.uniform(0, 6, 2), rng.uniform(-1, 1, 2), z)
        assert isinstance(u, TorusField)


def test_split_n_p_at_zero_normal():
    model = Model(1)
    p = Params(0.05, n_phi=4, n_x=8)
    om = freq_amp(model.sites, 1, 0.05, [1.2])
    y = np.array([0.3])
    n_val, _ = split_N_P(model, p, [0.4], y, TorusField.zeros(0, (0, 8)), om)
    assert n_val == pytest.approx(float(om @ y), rel=1e-13)


def test_trivial_residual_scaling():
    model = Model(1, PolynomialDensity((Monomial(1.0, "const", 0, 5, 0),)))
    norms = []
    eps_list = (0.02, 0.05, 0.1)
    for eps in eps_list:
        p = Params(eps, n_phi=6, n_x=12)
        s = TorusSystem(model, p, freq_amp(model.sites, 1, eps, [1.0]))
        norms.append(s.residual(s.trivial()).norm(s0_of(1)))
    slope = np.polyfit(np.log(eps_list), np.log(norms), 1)[0]
    assert abs(slope - (5 - 2 * p.b)) <= 0.15


@pytest.fixture(scope="module")
def small_system():
    model = Model(1, PolynomialDensity((Monomial(1.0, "const", 0, 3, 2),)))
    p = Params(0.1, n_phi=4, n_x=10)
    return TorusSystem(model, p, freq_amp(model.sites, 1, 0.1, [1.0]))


def test_zeta_enters_affinely(rng, small_system):
    s = small_system
    i0 = random_embedding(rng, s, 0.05)
    a = s.residual(i0)
    b = s.residual(i0.replace(zeta=i0.zeta + 0.3))
    d = b - a
    assert np.abs(d.y[4] - 0.3).max() <= 1e-12
    d.y[4] = 0.0
    assert max(np.abs(d.theta).max(), np.abs(d.y).max(), np.abs(d.z).max()) <= 1e-12


def test_linearization_matches_finite_difference(rng, small_system):
    s = small_system
    i0 = random_embedding(rng, s, 0.05)
    d = random_embedding(rng, s, 1.0)
    smat, _ = s.linear_blocks(i0)
    assert np.abs(smat - np.transpose(smat, (0, 2, 1))).max() <= 1e-9 * np.abs(smat).max()
    lin = s.apply_linearization(smat, d)
    h = 1e-4
    fd = (s.residual(i0 + d.scale(h)) - s.residual(i0 - d.scale(h))).scale(1 / (2 * h))
    assert (fd - lin).norm(0) <= 1e-6 * lin.norm(0)


def test_embedding_json_round_trip(rng, small_system):
    e = random_embedding(rng, small_system, 0.1)
    back = TorusEmbedding.from_json(e.to_json())
    assert np.allclose(back.z, e.z) and np.allclose(back.theta, e.theta) and np.allclose(back.zeta, e.zeta)


def test_system_rejects_bad_frequency():
    model = Model(1)
    with pytest.raises(ValueError, match="amplitude domain"):
        TorusSystem(model, Params(0.05, n_phi=4, n_x=8), [1.0])
    with pytest.raises(ValueError, match="tau"):
        TorusSystem(model, Params(0.05, tau=2.0, n_phi=4, n_x=8), [0.99])
