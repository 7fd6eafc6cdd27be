import numpy as np
import pytest

from mkdvtori.hamiltonian import Model, Monomial, PolynomialDensity
from mkdvtori.sites import SiteSet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def quasilinear_model():
    """x-dependent quasi-linear density used for the reduction sweeps."""
    dens = PolynomialDensity((Monomial(1.0, "cos", 1, 3, 2), Monomial(0.5, "const", 0, 3, 2)))
    return Model(1, dens, 0.0, SiteSet((1,)))


@pytest.fixture(scope="session")
def tiny_density_model():
    return Model(1, PolynomialDensity((Monomial(1e-6, "const", 0, 5, 0),)), 0.0, SiteSet((1,)))


@pytest.fixture(scope="session")
def converged_small():
    """Converged torus at (N_phi, N_x) = (8, 16) for the tiny density."""
    from mkdvtori.nash_moser import nm_iterate
    from mkdvtori.torus import Params, freq_amp
    model = Model(1, PolynomialDensity((Monomial(1e-6, "const", 0, 5, 0),)), 0.0, SiteSet((1,)))
    params = Params(0.05, n_phi=8, n_x=16)
    omega = freq_amp(model.sites, 1, 0.05, np.array([1.0]))
    out = nm_iterate(model, params, omega, defect_samples=0)
    assert out.converged
    return model, params, omega, out


def random_real_coeffs(rng, n, decay=0.0):
    """Centred coefficients of a random real zero-mean trigonometric polynomial."""
    js = np.arange(-n, n + 1)
    c = (rng.standard_normal(2 * n + 1) + 1j * rng.standard_normal(2 * n + 1)) * np.exp(-decay * np.abs(js))
    c = 0.5 * (c + np.conj(c[::-1]))
    c[n] = 0.0
    return c


def random_embedding(rng, s, scale):
    """Random real embedding for system s, decaying in l and j (nu = 1)."""
    from mkdvtori.torus import TorusEmbedding
    e = s.trivial()
    n_phi, nx = e.box
    cplx = lambda a: rng.standard_normal(a.shape) + 1j * rng.standard_normal(a.shape)
    lw = np.exp(-np.abs(np.arange(-n_phi, n_phi + 1)))[:, None]
    mask = np.zeros(2 * nx + 1, bool)
    mask[s.jidx] = True
    zw = np.exp(-0.3 * np.abs(np.arange(-nx, nx + 1)))
    return TorusEmbedding(cplx(e.theta) * lw * scale, cplx(e.y) * lw * scale,
                          cplx(e.z) * mask * lw * zw * scale, rng.standard_normal(1) * scale).realified()


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
