import numpy as np
import pytest

from mkdvtori.hamiltonian import Model
from mkdvtori.measure import (a_jk, b_ljk, decomposition, excluded_fraction, excluded_mask,
                              fit_eigen_model, inclusion_check, pair_list)
from mkdvtori.sites import SiteSet
from mkdvtori.torus import Params, freq_amp


@pytest.fixture(scope="module")
def eigen(quasilinear_model):
    p = Params(0.05, n_phi=8, n_x=16)
    return p, fit_eigen_model(quasilinear_model, p)


def test_a_jk_nonzero_single_site():
    sites = SiteSet((1,))
    js = [j for j in range(-40, 41) if abs(j) != 1]
    for j in js:
        for k in js:
            if j != k:
                assert abs(a_jk(sites, j, k)) >= 1.0
    assert a_jk(sites, 2, 0) == pytest.approx(-1j * 2 * (4 - 2))


def test_a_and_b_antisymmetric():
    model = Model(1, sites=SiteSet((1, 3)))
    for j, k in ((2, 0), (5, -4), (-7, 2)):
        assert a_jk(model.sites, j, k) == pytest.approx(-a_jk(model.sites, k, j))
        l = np.array([2, -1])
        assert np.allclose(b_ljk(model, -l, k, j), -b_ljk(model, l, j, k))
    with pytest.raises(ValueError):
        a_jk(model.sites, 3, 3)


def test_pair_list_constraints():
    sites = SiteSet((1, 2))
    jj, kk = pair_list(sites, 500)
    assert len(jj) > 0
    assert np.all(jj != kk) and np.all(np.abs(jj ** 3 - kk ** 3) <= 500)
    assert not np.any(sites.in_s(jj)) and not np.any(sites.in_s(kk))
    brute = {(j, k) for j in range(-10, 11) for k in range(-10, 11)
             if j != k and abs(j ** 3 - k ** 3) <= 500 and abs(j) not in (1, 2) and abs(k) not in (1, 2)}
    assert set(zip(jj.tolist(), kk.tolist())) == brute


def test_exact_resonance_excluded():
    # 3 omega = m3 (2^3 - 1^3) with m3 = 1, m1 = 0
    pairs = (np.array([2]), np.array([1]))
    wits = []
    mask = excluded_mask(np.array([[7 / 3], [2.2]]), np.ones(2), np.zeros(2), 1e-3, 3, 5, pairs, wits)
    assert mask.tolist() == [True, False]
    assert wits[0].l == (3,) and (wits[0].j, wits[0].k) == (2, 1)


def test_tiny_gamma_excludes_nothing(quasilinear_model, eigen):
    p, em = eigen
    out = excluded_fraction(quasilinear_model, p, 400, [1e-9], eigen=em)
    assert out["fractions"] == [0.0]


def test_fraction_non_increasing_in_tau(quasilinear_model, eigen):
    p, em = eigen
    fr = [excluded_fraction(quasilinear_model, p, 1000, [p.gamma], tau=t, l_max=200, eigen=em,
                            method="cell")["fractions"][0] for t in (3, 4, 6)]
    assert fr[0] > 0 and fr[0] >= fr[1] >= fr[2]


def test_cell_fraction_linear_in_gamma(quasilinear_model, eigen):
    p, em = eigen
    gs = [p.gamma, 2 * p.gamma, 4 * p.gamma]
    out = excluded_fraction(quasilinear_model, p, 1000, gs, l_max=200, eigen=em, method="cell")
    assert out["slope"] == pytest.approx(1.0, abs=0.02)


def test_cantor_sets_nested(quasilinear_model, eigen):
    p, em = eigen
    assert inclusion_check(quasilinear_model, p, eigen=em)


def test_decomposition_reconstructs(quasilinear_model):
    p = Params(0.05)
    om = freq_amp(quasilinear_model.sites, 1, 0.05, [1.3])
    mu = lambda j: 1j * (-j ** 3 + 0.02 * j)
    phi, a, bo, q, err = decomposition(quasilinear_model, p, om, [4], 3, -2, mu(3), mu(-2))
    assert err <= 1e-12
    assert phi == pytest.approx(1j * 4 * om[0] + mu(3) - mu(-2))
