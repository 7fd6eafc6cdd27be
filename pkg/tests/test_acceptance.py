"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line which
is also collected into the terminal summary."""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_real_coeffs
from mkdvtori import hamiltonian as ham
from mkdvtori.evolve import EvolutionConfig, torus_defect
from mkdvtori.fourier import TorusField
from mkdvtori.hamiltonian import Model, Monomial, PolynomialDensity
from mkdvtori.measure import empty_shell_check, excluded_fraction, fit_eigen_model
from mkdvtori.nash_moser import nm_iterate, residual_floor, superlinear_order
from mkdvtori.reducibility import (PhaseSpace, default_n0, floquet_evolve, reduce_to_constant)
from mkdvtori.reduction import (bnf_denominators, c_xi, conjugation_residuals, fit_symbol,
                                hamiltonian_defect, reduce_operator, remainder_decay_norm)
from mkdvtori.sites import SiteSet
from mkdvtori.torus import Params, TorusSystem, freq_amp, twist_inverse, twist_matrix
from mkdvtori.weak_bnf import admissible, bnf_map, build_generator, cube_identity, verify_normal_form

pytestmark = pytest.mark.slow

EPS = (0.02, 0.05, 0.1)


def report(number, title, checks, started):
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
    line = f"criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} [{time.time() - started:.1f}s] {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def quasilinear(lam=0.0):
    dens = PolynomialDensity((Monomial(1.0, "cos", 1, 3, 2), Monomial(0.5, "const", 0, 3, 2)))
    return Model(1, dens, lam, SiteSet((1,)))


def tiny_quintic():
    return Model(1, PolynomialDensity((Monomial(1e-6, "const", 0, 5, 0),)), 0.0, SiteSet((1,)))


def test_cube_identity():
    t0 = time.time()
    r = range(-30, 31)
    bad = checked = 0
    for a, b, c in itertools.product(r, repeat=3):
        d = -(a + b + c)
        if abs(d) > 30:
            continue
        checked += 1
        if cube_identity(a, b, c, d) != a ** 3 + b ** 3 + c ** 3 + d ** 3:
            bad += 1
    elapsed = time.time() - t0
    report(1, "cube identity", [("violations", bad == 0, f"{bad} of {checked}"),
                                ("runtime", elapsed < 10, f"{elapsed:.1f}s")], t0)


def test_admissibility():
    t0 = time.time()
    nu1 = all(admissible(SiteSet((j,))).admissible for j in range(1, 10001))
    found = None
    for a, b in itertools.combinations(range(1, 40), 2):
        t = 2 * (a * a + b * b)
        if t % 3:
            continue
        t //= 3
        r = int(math.isqrt(2 * t)) + 2
        hits = [(j, k) for j in range(-r, r + 1) for k in range(-r, r + 1)
                if j != k and abs(j) not in (a, b) and abs(k) not in (a, b) and j * j + j * k + k * k == t]
        if hits:
            found = (a, b)
            break
    res = admissible(SiteSet(found))
    j, k = res.violated_by or (0, 0)
    witness_ok = (not res.admissible and j != k and j * j + j * k + k * k == res.target
                  and abs(j) not in found and abs(k) not in found)
    elapsed = time.time() - t0
    report(2, "admissibility", [("nu=1 up to 1e4", nu1, "all admissible"),
                                ("nu=2 violation", witness_ok, f"S+={found} witness={res.violated_by}"),
                                ("runtime", elapsed < 30, f"{elapsed:.1f}s")], t0)


def test_twist_algebra():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        nu = int(rng.integers(1, 7))
        sites = SiteSet(tuple(int(s) for s in rng.choice(np.arange(1, 60), nu, replace=False)))
        for sign in (1, -1):
            err = twist_matrix(sites, sign) @ twist_inverse(sites, sign) - np.eye(nu)
            worst = max(worst, float(np.abs(err).max()))
    report(3, "twist algebra", [("|A A^-1 - I|", worst <= 1e-12, f"{worst:.2e}")], t0)


def test_weak_birkhoff_normal_form():
    t0 = time.time()
    rng = np.random.default_rng(11)
    gen = build_generator(SiteSet((1,)), 1)
    n = 8
    js = np.arange(-n, n + 1)
    v = np.zeros(2 * n + 1, complex)
    v[n + 1] = v[n - 1] = 0.9
    z = (rng.standard_normal(2 * n + 1) + 1j * rng.standard_normal(2 * n + 1)) * np.exp(-0.5 * np.abs(js))
    z = 0.25 * (z + np.conj(z[::-1]))
    z[[n - 1, n, n + 1]] = 0.0
    rep = verify_normal_form(Model(1), gen, v, z)
    u = 0.1 * (v + z) / np.linalg.norm(v + z)
    h, k = random_real_coeffs(rng, n, 0.3), random_real_coeffs(rng, n, 0.3)
    d = 1e-5
    jac = lambda w: (bnf_map(gen, u + d * w) - bnf_map(gen, u - d * w)) / (2 * d)
    om = lambda a, b: ham.symplectic_form(TorusField(0, a), TorusField(0, b))
    symp = abs(om(jac(h), jac(k)) - om(h, k))
    elapsed = time.time() - t0
    report(4, "weak Birkhoff normal form", [
        ("sector error", max(rep["sector_error"]) <= 1e-6, f"{max(rep['sector_error']):.2e}"),
        ("v3z sector", rep["v3z"] <= 1e-8, f"{rep['v3z']:.2e}"),
        ("residual slope", rep["residual_slope"] >= 4.9, f"{rep['residual_slope']:.3f}"),
        ("symplecticity", symp <= 1e-9, f"{symp:.2e} of {abs(om(h, k)):.2e}"),
        ("runtime", elapsed < 120, f"{elapsed:.1f}s")], t0)


def test_reduction_chain():
    t0 = time.time()
    model = quasilinear()
    p = Params(0.05, n_phi=16, n_x=32)
    om = freq_amp(model.sites, 1, 0.05, np.array([1.0]))
    ch = reduce_operator(model, p, TorusSystem(model, p, om).trivial(), om)
    f = ch.frame
    conj = conjugation_residuals(ch, 3)
    b2 = float(np.abs(ch.stages[1].info["b2"]).max())
    c3 = fit_symbol(f, ch.stages[2].X, order=3)[0][3]
    c1_before = np.ptp(ch.stages[4].lower[1])
    c1_after = np.ptp(fit_symbol(f, ch.stages[5].X, order=3)[0][1])
    ham_def = max(hamiltonian_defect(f, st.X) for st in ch.stages)
    elapsed = time.time() - t0
    report(5, "reduction chain", [
        ("conjugation residuals", conj.max() <= 1e-6, f"max {conj.max():.2e}"),
        ("d_xxx coefficient after step 2", np.ptp(c3) <= 1e-10, f"oscillation {np.ptp(c3):.2e}"),
        ("b2 after step 1", b2 <= 1e-8, f"{b2:.2e}"),
        ("d_x coefficient after step 5", c1_after <= 1e-6 and c1_after <= 1e-3 * c1_before,
         f"oscillation {c1_after:.2e} from {c1_before:.2e}"),
        ("hamiltonian defect", ham_def <= 1e-9, f"max {ham_def:.2e}"),
        ("runtime", elapsed < 300, f"{elapsed:.1f}s")], t0)


@pytest.fixture(scope="module")
def sweep():
    """Reduction and reducibility at (8, 16) for each eps, plus the mass variant."""
    rows, mass = [], []
    for eps in EPS:
        model = quasilinear()
        p = Params(eps, n_phi=8, n_x=16)
        om = freq_amp(model.sites, 1, eps, np.array([1.0]))
        ch = reduce_operator(model, p, TorusSystem(model, p, om).trivial(), om)
        sp = PhaseSpace.from_frame(ch.frame)
        st = reduce_to_constant(sp, ch.final.delta, ch.final.X, p.gamma, p.tau,
                                default_n0(eps, p.gamma, p.a))
        j = ch.frame.modes
        keep = np.abs(j) <= p.n_x
        r = st.mu - 1j * (-ch.m3 * j ** 3 + ch.m1 * j)
        rows.append({"eps": eps, "gamma": p.gamma, "m3": ch.m3, "m1": ch.m1,
                     "c": c_xi(model, ch.xi), "R5": remainder_decay_norm(ch.frame, ch.final.X),
                     "off": sp.decay_norm(st.R, ch.frame.s0), "mu": st.mu, "r": np.abs(r[keep]).max(),
                     "omega": om})
        mv = quasilinear(0.75)
        omm = freq_amp(mv.sites, 1, eps, np.array([1.0]), True)
        chm = reduce_operator(mv, p, TorusSystem(mv, p, omm).trivial(), omm)
        mass.append({"eps": eps, "gamma": p.gamma, "m1": chm.m1})
    return rows, mass


def test_scaling_laws(sweep):
    t0 = time.time()
    rows, mass = sweep
    a = 0.1
    eps = np.array(EPS)
    s_m3 = slope(eps, [abs(r["m3"] - 1) for r in rows])
    s_r5 = slope(eps, [r["R5"] for r in rows])
    env = [r["eps"] ** 5 / r["gamma"] for r in rows]
    m1_dev = [abs(r["m1"] - r["eps"] ** 2 * r["c"]) for r in rows]
    m1_mass = [abs(r["m1"]) for r in mass]
    report(6, "scaling laws", [
        ("|m3 - 1| slope", abs(s_m3 - 3) <= 0.3, f"{s_m3:.3f} vs 3"),
        ("|m1 - eps^2 c| envelope", all(d <= e for d, e in zip(m1_dev, env)),
         "ratios " + ", ".join(f"{d / e:.2e}" for d, e in zip(m1_dev, env))),
        ("|R5| slope", abs(s_r5 - (3 - 2 * a)) <= 0.4, f"{s_r5:.3f} vs {3 - 2 * a}"),
        ("mass variant |m1| envelope", all(m <= e for m, e in zip(m1_mass, env))
         and slope(eps, m1_mass) > 2.5,
         "ratios " + ", ".join(f"{m / e:.2e}" for m, e in zip(m1_mass, env))
         + f", slope {slope(eps, m1_mass):.2f}")], t0)


def test_linear_birkhoff_normal_form():
    t0 = time.time()
    diag_ok, surv_ok, den_min, mass_ok, rows_seen = True, True, np.inf, True, 0
    site_sets = [(j,) for j in range(1, 21)]
    site_sets += [s for s in itertools.combinations(range(1, 21), 2) if admissible(SiteSet(s)).admissible]
    for plus in site_sets:
        sites = SiteSet(plus)
        modes = sites.normal_modes(3 * max(plus) + 20)
        xi = np.full(len(plus), 1.5)
        for sign in (1, -1):
            om = freq_amp(sites, sign, 0.05, xi)
            c = c_xi(Model(sign, sites=sites), xi)
            for l, j, jp, b, resonant, den in bnf_denominators(sites, sign, xi, om, 1.0, modes):
                rows_seen += 1
                if max(abs(v) for v in l) > 2 or abs(j - jp) > 2 * max(plus):
                    diag_ok = False
                if resonant:
                    if any(l) or j != jp or abs(b - 1j * j * c) > 1e-12 * abs(j * c):
                        diag_ok = False
                else:
                    den_min = min(den_min, abs(den))
            omm = freq_amp(sites, sign, 0.05, xi, True)
            for *_, b, resonant, _ in bnf_denominators(sites, sign, xi, omm, 1.0, modes, True):
                if resonant and b != 0:
                    mass_ok = False
    elapsed = time.time() - t0
    report(7, "linear Birkhoff normal form", [
        ("resonant terms diagonal, B = ij c", diag_ok, f"{rows_seen} entries, {len(site_sets)} site sets"),
        ("mass variant surviving term", mass_ok, "zero"),
        ("denominators", den_min >= 0.5, f"min {den_min:.3f}"),
        ("runtime", elapsed < 60, f"{elapsed:.1f}s")], t0)


def test_reducibility(sweep):
    t0 = time.time()
    rows, _ = sweep
    a = 0.1
    off = max(r["off"] for r in rows)
    re_mu = max(np.abs(r["mu"].real).max() for r in rows)
    pair = max(np.abs(r["mu"][::-1] - np.conj(r["mu"])).max() for r in rows)
    s_r = slope(np.array(EPS), [r["r"] for r in rows])
    mid = rows[1]
    rng = np.random.default_rng(5)
    v0 = rng.standard_normal(len(mid["mu"])) + 1j * rng.standard_normal(len(mid["mu"]))
    v = floquet_evolve(mid["omega"], mid["mu"], v0, np.linspace(0, 1e3, 1001))
    norms = np.linalg.norm(v, axis=1)
    drift = float(np.abs(norms - norms[0]).max() / norms[0])
    report(8, "reducibility", [
        ("off-diagonal decay norm", off <= 1e-8, f"max {off:.2e}"),
        ("max |Re mu|", re_mu <= 1e-10, f"{re_mu:.2e}"),
        ("mu_-j = conj mu_j", pair <= 1e-12, f"{pair:.2e}"),
        ("r_j sup slope", abs(s_r - (3 - 2 * a)) <= 0.5, f"{s_r:.3f} vs {3 - 2 * a}"),
        ("Floquet norm drift", drift <= 1e-8, f"{drift:.2e} over 1e3")], t0)


@pytest.fixture(scope="module")
def solved():
    model = tiny_quintic()
    p = Params(0.05, a=0.1, n_phi=16, n_x=32)
    om = freq_amp(model.sites, 1, 0.05, np.array([1.0]))
    t0 = time.time()
    out = nm_iterate(model, p, om, max_steps=6, tol=1e-10)
    return model, p, om, out, time.time() - t0


def test_nash_moser(solved):
    t0 = time.time()
    model, p, om, out, spent = solved
    res = [h.residual for h in out.history]
    floor = residual_floor(model, p, om, out.solution)
    order = superlinear_order(res, floor=floor)
    zeta = float(np.abs(out.solution.zeta).max())
    steps = len(res) - 1
    report(9, "Nash-Moser", [
        ("converged", out.converged and res[-1] <= 1e-10 and steps <= 6,
         f"residual {res[-1]:.2e} after {steps} steps"),
        ("superlinear order", order is not None and order >= 1.3,
         f"{order:.2f} above floor {floor:.1e}" if order else "undetermined"),
        ("|zeta| vs residual", zeta <= 10 * res[-1], f"{zeta:.2e}"),
        ("approximate inverse defect", out.defect <= 1e-6, f"{out.defect:.2e}"),
        ("runtime", spent < 900, f"{spent:.1f}s")], t0)


def test_end_to_end(solved):
    t0 = time.time()
    model, p, om, out, _ = solved
    period = 2 * np.pi / om[0]
    cfg = EvolutionConfig(dt=0.02, T=50 * period, every=int(round(period / 0.02 / 4)))
    run = torus_defect(model, p, om, out.solution, cfg)
    ctrl_cfg = EvolutionConfig(dt=0.01, T=50 * period, every=int(round(period / 0.01)))
    ctrl = torus_defect(model, p, om, out.solution, ctrl_cfg, flow_model=model.without_density())
    elapsed = time.time() - t0
    report(10, "end-to-end validation", [
        ("torus defect over 50 periods", run["max_defect"] <= 1e-4, f"{run['max_defect']:.2e}"),
        ("control run energy", ctrl["energy_drift"] <= 1e-8, f"drift {ctrl['energy_drift']:.2e}"),
        ("runtime", elapsed < 600, f"{elapsed:.1f}s")], t0)


def test_measure():
    t0 = time.time()
    model = quasilinear()
    p = Params(0.05, n_phi=8, n_x=16)
    em = fit_eigen_model(model, p)
    gammas = [p.gamma, 2 * p.gamma, 4 * p.gamma]
    out = excluded_fraction(model, p, 1000, gammas, l_max=2000, eigen=em, method="cell")
    shell = empty_shell_check(model, p, em)
    elapsed = time.time() - t0
    s = out["slope"]
    report(11, "measure", [
        ("fraction vs gamma slope", s is not None and 0.8 <= s <= 1.2,
         f"{s:.4f}, fractions " + ", ".join(f"{f:.2e}" for f in out["fractions"])),
        ("empty shell", not shell["witnesses"],
         f"C1 {shell['c1']:.3f}, {shell['checked']} triples"),
        ("runtime", elapsed < 600, f"{elapsed:.1f}s")], t0)
