import numpy as np
import pytest

from mkdvtori.evolve import (BlowUp, EvolutionConfig, integrate, l2_mass, phase_fit,
                             torus_defect)
from mkdvtori.hamiltonian import Model

N = 8
JS = np.arange(-N, N + 1)


def _single(amp, j=2):
    c = np.zeros(2 * N + 1, complex)
    c[N + j] = c[N - j] = amp
    return c


def _random(rng, size):
    c = np.zeros(2 * N + 1, complex)
    c[N + 1:N + 5] = size * (rng.standard_normal(4) + 1j * rng.standard_normal(4))
    c[N - 4:N] = np.conj(c[N + 1:N + 5][::-1])
    return c


def test_zero_stays_zero():
    tr = integrate(Model(1), np.zeros(2 * N + 1), EvolutionConfig(dt=0.01, T=1.0))
    assert not np.any(tr.u)


def test_airy_flow_exact(rng):
    c = _random(rng, 0.3)
    tr = integrate(Model(1), c, EvolutionConfig(dt=0.1, T=50.0, nonlinear=False))
    assert np.abs(tr.final - np.exp(1j * JS ** 3 * 50.0) * c).max() <= 1e-12


def test_midpoint_reversible(rng):
    c = _random(rng, 0.1)
    fwd = integrate(Model(1), c, EvolutionConfig(dt=0.01, T=2.0, scheme="midpoint", every=200))
    back = integrate(Model(1), fwd.final, EvolutionConfig(dt=-0.01, T=2.0, scheme="midpoint", every=200))
    assert np.abs(back.final - c).max() <= 1e-7


@pytest.mark.parametrize("scheme", ["etdrk4", "midpoint"])
def test_invariants_conserved(scheme):
    tr = integrate(Model(-1), _single(0.04), EvolutionConfig(dt=0.005, T=5.0, scheme=scheme))
    assert tr.energy_drift() <= 1e-8
    assert tr.mass_drift() <= 1e-8
    assert tr.mass[0] == pytest.approx(l2_mass(_single(0.04)))


def test_single_mode_frequency_shift():
    # omega_2 = 8 - 3 * 2 * a^2 up to O(a^4)
    for amp in (0.02, 0.04):
        tr = integrate(Model(1), _single(amp), EvolutionConfig(dt=0.005, T=5.0))
        shift = phase_fit(tr, 2) - 8
        assert shift == pytest.approx(-6 * amp ** 2, rel=5e-3)


def test_blowup_detected():
    with pytest.raises(BlowUp) as err:
        integrate(Model(-1), _single(3.0, 1), EvolutionConfig(dt=0.01, T=5.0))
    assert err.value.t > 0 and len(err.value.trajectory.t) >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(dt=0.0)
    with pytest.raises(ValueError):
        EvolutionConfig(scheme="rk4")
    assert EvolutionConfig(dt=0.02, T=1.0).steps == 50


@pytest.mark.slow
def test_converged_torus_stays_close(converged_small):
    model, params, omega, out = converged_small
    res = torus_defect(model, params, omega, out.solution, EvolutionConfig(dt=0.02, T=2 * np.pi * 5, every=50))
    assert res["interpolation_error"] <= 1e-10
    assert res["max_defect"] <= 1e-8
    assert res["energy_drift"] <= 1e-8
