"""Sampling estimates of the non-resonant parameter set and the geometry of
the resonant sets

    R_ljk = { omega : |i omega.l + mu_j - mu_k| < 2 gamma |j^3 - k^3| <l>^-tau }.

Eigenvalues come either from the fitted constant-coefficient model
mu_j = i(-m3 j^3 + m1 j) (``analytic``) or from the full reducibility scheme
(``final``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fourier import bracket, lattice
from .reducibility import PhaseSpace, default_n0, reduce_to_constant
from .reduction import assemble_L_omega, c_xi, constant_coefficients, reduce_operator
from .torus import TorusSystem, freq_amp, twist_inverse, xi_of_omega

__all__ = [
    "ResonantWitness", "a_jk", "b_ljk", "omega_grid", "EigenModel", "fit_eigen_model",
    "final_eigenvalues", "pair_list", "excluded_mask", "excluded_fraction", "gamma_slope",
    "empty_shell_check", "decomposition", "inclusion_check", "resonant_intervals",
    "cell_fractions",
]


@dataclass(frozen=True)
class ResonantWitness:
    omega: tuple
    l: tuple
    j: int
    k: int
    divisor: float
    bound: float
    a: complex
    b: tuple


def a_jk(sites, j, k):
    if j == k:
        raise ValueError("a_jk needs j != k")
    nu = sites.nu
    target = 2.0 / (2 * nu - 1) * sum(jb * jb for jb in sites.plus)
    return -1j * (j - k) * (j * j + j * k + k * k - target)


def b_ljk(model, l, j, k):
    """i(l + 6 sign (j - k) A^-T 1) for the standard model; the mass variant
    has no eps^2 correction in m1, so the shift term is dropped."""
    sites = model.sites
    l = np.asarray(l, float)
    if model.mass_variant:
        return 1j * l
    ainv = twist_inverse(sites, model.sign)
    return 1j * (l + 6 * model.sign * (j - k) * ainv.T @ np.ones(sites.nu))


def omega_grid(model, eps, n, rng=None):
    """Points of Omega_eps = omega(xi), xi in [1, 2]^nu.  nu = 1 uses cell
    midpoints; larger nu draws n uniform samples."""
    sites = model.sites
    if n < 1:
        raise ValueError("empty grid")
    if sites.nu == 1:
        xi = (1 + (np.arange(n) + 0.5) / n)[:, None]
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        xi = 1 + rng.random((n, sites.nu))
    om = np.array([freq_amp(sites, model.sign, eps, x, model.mass_variant) for x in xi])
    return om, xi


def _design(xi):
    cols = [np.ones(len(xi))] + [xi[:, i] for i in range(xi.shape[1])]
    cols += [xi[:, i] * xi[:, k] for i in range(xi.shape[1]) for k in range(i, xi.shape[1])]
    return np.stack(cols, axis=1)


@dataclass
class EigenModel:
    """m3 and m1 as quadratic polynomials in the amplitudes xi."""
    model: object
    eps: float
    c3: np.ndarray
    c1: np.ndarray
    fit_error: float

    def constants(self, omega):
        om = np.atleast_2d(omega)
        xi = np.array([xi_of_omega(self.model.sites, self.model.sign, self.eps, o,
                                   self.model.mass_variant) for o in om])
        d = _design(xi)
        return d @ self.c3, d @ self.c1


def fit_eigen_model(model, params, n_fit=7, seed=0):
    """Sample (m3, m1) at the trivial torus over Omega_eps and fit them."""
    nu = model.sites.nu
    if nu == 1:
        xi = np.linspace(1, 2, n_fit)[:, None]
    else:
        n_fit = max(n_fit, 2 * (1 + nu + nu * (nu + 1) // 2))
        xi = 1 + np.random.default_rng(seed).random((n_fit, nu))
    vals = []
    for x in xi:
        om = freq_amp(model.sites, model.sign, params.eps, x, model.mass_variant)
        emb = TorusSystem(model, params, om).trivial()
        frame, st = assemble_L_omega(model, params, emb, om, with_matrix=False)
        vals.append(constant_coefficients(frame, st))
    vals = np.array(vals)
    d = _design(xi)
    c3 = np.linalg.lstsq(d, vals[:, 0], rcond=None)[0]
    c1 = np.linalg.lstsq(d, vals[:, 1], rcond=None)[0]
    err = float(np.abs(d @ np.stack([c3, c1], 1) - vals).max())
    return EigenModel(model, params.eps, c3, c1, err)


def final_eigenvalues(model, params, omega, n0=None):
    """Interior modes and mu_j from the full reducibility scheme at the trivial torus."""
    system = TorusSystem(model, params, omega)
    chain = reduce_operator(model, params, system.trivial(), omega)
    space = PhaseSpace.from_frame(chain.frame)
    n0 = default_n0(params.eps, params.gamma, params.a) if n0 is None else n0
    state = reduce_to_constant(space, chain.final.delta, chain.final.X, params.gamma,
                               params.tau, n0)
    keep = np.abs(chain.frame.modes) <= params.n_x
    return chain.frame.modes[keep], state.mu[keep]


def pair_list(sites, d_max, j_max=None):
    """Pairs (j, k) in S^c + {0}, j != k, with |j^3 - k^3| <= d_max."""
    j_max = int(math.ceil(d_max ** (1 / 3))) + 2 if j_max is None else j_max
    js = np.arange(-j_max, j_max + 1)
    js = js[~sites.in_s(js)]
    jj, kk = np.meshgrid(js, js, indexing="ij")
    d = jj ** 3 - kk ** 3
    keep = (jj != kk) & (np.abs(d) <= d_max)
    return jj[keep], kk[keep]


def excluded_mask(omegas, m3, m1, gamma, tau, l_max, pairs, witnesses=None, first_set=True):
    """Boolean exclusion per omega: first set (diophantine), then the
    second-order conditions with mu_j = i(-m3 j^3 + m1 j) over pairs and
    |l|_inf <= l_max."""
    omegas = np.atleast_2d(omegas)
    nu = omegas.shape[1]
    jj, kk = pairs
    d = (jj ** 3 - kk ** 3).astype(float)
    lat = lattice(nu, l_max)
    wl = bracket(*lat.T) ** (-tau)
    out = np.zeros(len(omegas), bool)
    for n, om in enumerate(omegas):
        ol = lat @ om
        if first_set:
            nz = np.any(lat != 0, axis=1)
            bad = nz & (np.abs(ol) < gamma * wl)
            if np.any(bad):
                out[n] = True
                if witnesses is not None:
                    i = int(np.nonzero(bad)[0][0])
                    witnesses.append(ResonantWitness(tuple(om), tuple(lat[i]), 0, 0,
                                                     float(abs(ol[i])), float(gamma * wl[i]),
                                                     0j, ()))
                continue
        t = m3[n] * d - m1[n] * (jj - kk)
        order = np.argsort(ol)
        ols = ol[order]
        reach = 2 * gamma * np.abs(d)
        lo = np.searchsorted(ols, t - reach, "left")
        hi = np.searchsorted(ols, t + reach, "right")
        for p in np.nonzero(hi > lo)[0]:
            idx = order[lo[p]:hi[p]]
            div = np.abs(ol[idx] - t[p])
            bound = 2 * gamma * abs(d[p]) * wl[idx]
            hit = div < bound
            if np.any(hit):
                out[n] = True
                if witnesses is not None:
                    i = idx[np.nonzero(hit)[0][0]]
                    witnesses.append(ResonantWitness(tuple(om), tuple(lat[i]), int(jj[p]), int(kk[p]),
                                                     float(abs(ol[i] - t[p])), float(2 * gamma * abs(d[p]) * wl[i]),
                                                     complex(0.0), ()))
                break
    return out


def gamma_slope(gammas, fractions):
    g = np.asarray(gammas, float)
    f = np.asarray(fractions, float)
    if len(np.unique(g)) < 2 or np.any(f <= 0):
        return None
    return float(np.polyfit(np.log(g), np.log(f), 1)[0])


def shell_constant(omegas, m3, m1, gamma, pairs):
    """Lower bound C1 with |l| >= C1 |j^3 - k^3| on every non-empty resonant
    set: |omega||l| >= |omega.l| >= |mu_j - mu_k| - 2 gamma |j^3 - k^3|."""
    jj, kk = pairs
    d = (jj ** 3 - kk ** 3).astype(float)
    worst = math.inf
    for n, om in enumerate(np.atleast_2d(omegas)):
        gap = np.abs(m3[n] * d - m1[n] * (jj - kk)) - 2 * gamma * np.abs(d)
        worst = min(worst, float(np.min(gap / np.abs(d))) / float(np.linalg.norm(om)))
    return worst


def resonant_intervals(eigen, om_lo, om_hi, gamma, tau, l_max, pairs):
    """nu = 1: the sets R_ljk as omega-intervals (centre, half width) meeting
    [om_lo, om_hi].  The centre solves omega l = m3 d - m1 (j - k) by fixed
    point in omega, the width divides the bound by the divisor's slope."""
    jj, kk = pairs
    d = (jj ** 3 - kk ** 3).astype(float)
    sel = d > 0
    jj, kk, d = jj[sel], kk[sel], d[sel]
    mid = 0.5 * (om_lo + om_hi)
    m3, m1 = eigen.constants(np.full((1, 1), mid))
    t0 = m3[0] * d - m1[0] * (jj - kk)
    pad = 1e-3 * (om_hi - om_lo) + 1e-12
    l_lo = np.maximum(np.ceil(t0 / (om_hi + pad) - 1), 1).astype(int)
    l_hi = np.minimum(np.floor(t0 / (om_lo - pad) + 1), l_max).astype(int)
    cnt = np.maximum(l_hi - l_lo + 1, 0)
    if cnt.sum() == 0:
        return np.zeros((0, 2)), []
    rep = np.repeat(np.arange(len(d)), cnt)
    ls = np.concatenate([np.arange(a, b + 1) for a, b in zip(l_lo, l_hi) if b >= a]).astype(float)
    dd, dj = d[rep], (jj - kk)[rep].astype(float)
    om = t0[rep] / ls
    for _ in range(3):
        m3, m1 = eigen.constants(om[:, None])
        om = (m3 * dd - m1 * dj) / ls
    h = 1e-7
    m3p, m1p = eigen.constants((om + h)[:, None])
    m3m, m1m = eigen.constants((om - h)[:, None])
    slope = np.abs(ls - ((m3p - m3m) * dd - (m1p - m1m) * dj) / (2 * h))
    half = 2 * gamma * dd * bracket(ls) ** (-tau) / slope
    keep = (om + half > om_lo) & (om - half < om_hi)
    labels = [(int(l), int(jj[r]), int(kk[r])) for l, r, k in zip(ls, rep, keep) if k]
    return np.stack([om[keep], half[keep]], 1), labels


def cell_fractions(edges, intervals):
    """Exact covered length of the union of intervals inside each cell."""
    lo = np.minimum(edges[0], edges[-1])
    hi = np.maximum(edges[0], edges[-1])
    e = np.sort(edges)
    if len(intervals) == 0:
        return np.zeros(len(e) - 1)
    a = np.clip(intervals[:, 0] - intervals[:, 1], lo, hi)
    b = np.clip(intervals[:, 0] + intervals[:, 1], lo, hi)
    order = np.argsort(a)
    merged = []
    for x, y in zip(a[order], b[order]):
        if merged and x <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], y)
        else:
            merged.append([x, y])
    merged = np.array(merged)
    cover = np.zeros(len(e) - 1)
    for x, y in merged:
        i0 = max(np.searchsorted(e, x, "right") - 1, 0)
        i1 = min(np.searchsorted(e, y, "left"), len(e) - 1)
        for i in range(i0, i1):
            cover[i] += max(0.0, min(y, e[i + 1]) - max(x, e[i]))
    return cover / np.diff(e)


def excluded_fraction(model, params, n_grid=1000, gammas=None, tau=None, l_max=None,
                      source="analytic", eigen=None, d_max=None, keep_witnesses=10,
                      method="midpoint"):
    """Excluded fraction of an omega grid for each gamma and the log-log
    slope of fraction against gamma.  The pair range is capped by the shell
    |j^3 - k^3| <= 2 l_max / C1.

    method "midpoint" marks a cell excluded when its midpoint is; "cell"
    (nu = 1, analytic eigenvalues) integrates the exact excluded length of
    each cell, which resolves resonant sets far thinner than the grid."""
    sites = model.sites
    tau = params.tau if tau is None else tau
    l_max = params.n_phi if l_max is None else l_max
    gammas = [params.gamma] if gammas is None else list(gammas)
    omegas, xi = omega_grid(model, params.eps, n_grid)
    if source == "analytic":
        eigen = fit_eigen_model(model, params) if eigen is None else eigen
        m3, m1 = eigen.constants(omegas)
    elif source == "final":
        m3, m1 = _final_constants(model, params, omegas)
    else:
        raise ValueError("source must be 'analytic' or 'final'")
    probe = pair_list(sites, 64)
    c1 = shell_constant(omegas, m3, m1, max(gammas), probe)
    if d_max is None:
        d_max = 2 * l_max / max(c1, 1e-3)
    pairs = pair_list(sites, d_max)
    fractions, witnesses = [], []
    if method == "cell":
        if sites.nu != 1 or source != "analytic":
            raise ValueError("cell integration needs nu = 1 and analytic eigenvalues")
        edges_xi = 1 + np.arange(n_grid + 1) / n_grid
        edges = np.array([freq_amp(sites, model.sign, params.eps, [x], model.mass_variant)[0]
                          for x in edges_xi])
        for g in gammas:
            ivals, labels = resonant_intervals(eigen, edges.min(), edges.max(), g, tau, l_max, pairs)
            fractions.append(float(cell_fractions(edges, ivals).mean()))
            witnesses.append([{"l": lab[0], "j": lab[1], "k": lab[2], "omega": float(iv[0]),
                               "half_width": float(iv[1])}
                              for lab, iv in list(zip(labels, ivals))[:keep_witnesses]])
        return {"gammas": gammas, "fractions": fractions, "slope": gamma_slope(gammas, fractions),
                "tau": tau, "l_max": l_max, "d_max": d_max, "c1": c1, "n_grid": n_grid,
                "pairs": len(pairs[0]), "witnesses": witnesses, "method": method}
    elif method != "midpoint":
        raise ValueError("method must be 'midpoint' or 'cell'")
    for g in gammas:
        wits = []
        mask = excluded_mask(omegas, m3, m1, g, tau, l_max, pairs, wits)
        fractions.append(float(mask.mean()))
        witnesses.append([_decorate(model, w) for w in wits[:keep_witnesses]])
    return {"gammas": gammas, "fractions": fractions, "slope": gamma_slope(gammas, fractions),
            "tau": tau, "l_max": l_max, "d_max": d_max, "c1": c1, "n_grid": len(omegas),
            "pairs": len(pairs[0]), "witnesses": witnesses, "method": method}


def _final_constants(model, params, omegas):
    """Per-omega (m3, m1) refitted from the full reducibility eigenvalues."""
    from .reducibility import fit_m3_m1
    out3, out1 = [], []
    for om in omegas:
        modes, mu = final_eigenvalues(model, params, om)
        m3, m1 = fit_m3_m1(modes, mu)
        out3.append(m3)
        out1.append(m1)
    return np.array(out3), np.array(out1)


def _decorate(model, w):
    if w.j == w.k:
        return w
    return ResonantWitness(w.omega, w.l, w.j, w.k, w.divisor, w.bound,
                           a_jk(model.sites, w.j, w.k), tuple(b_ljk(model, w.l, w.j, w.k)))


def empty_shell_check(model, params, eigen=None, gamma=None, d_max=2000, n_grid=50, margin=0.5):
    """Scan (l, j, k) with |l| < margin * C1 |j^3 - k^3| over a grid of omegas
    and confirm no resonance arises there."""
    gamma = params.gamma if gamma is None else gamma
    eigen = fit_eigen_model(model, params) if eigen is None else eigen
    omegas, _ = omega_grid(model, params.eps, n_grid)
    m3, m1 = eigen.constants(omegas)
    pairs = pair_list(model.sites, d_max)
    c1 = shell_constant(omegas, m3, m1, gamma, pairs)
    jj, kk = pairs
    d = (jj ** 3 - kk ** 3).astype(float)
    nu = model.sites.nu
    witnesses = []
    checked = 0
    for n, om in enumerate(omegas):
        for p in range(len(d)):
            lm = int(math.ceil(margin * c1 * abs(d[p]))) - 1
            if lm < 0:
                continue
            lat = lattice(nu, lm)
            ln = np.linalg.norm(lat, axis=1)
            lat = lat[ln < margin * c1 * abs(d[p])]
            div = np.abs(lat @ om - (m3[n] * d[p] - m1[n] * (jj[p] - kk[p])))
            bound = 2 * gamma * abs(d[p]) * bracket(*lat.T) ** (-params.tau)
            checked += len(lat)
            for i in np.nonzero(div < bound)[0]:
                witnesses.append((tuple(lat[i]), int(jj[p]), int(kk[p]), float(div[i]), float(bound[i])))
    return {"c1": c1, "shell": margin * c1, "checked": checked, "witnesses": witnesses,
            "crossover": _crossover(m3, m1, pairs)}


def _crossover(m3, m1, pairs):
    """Smallest j^2 + k^2 beyond which the cubic part of mu_j - mu_k beats
    twice the linear part for every sampled pair."""
    jj, kk = pairs
    d = np.abs(jj ** 3 - kk ** 3).astype(float)
    lin = np.abs(jj - kk) * float(np.max(np.abs(m1)))
    cub = float(np.min(m3)) * d
    r = jj ** 2 + kk ** 2
    bad = cub < 2 * lin
    return int(r[bad].max()) + 1 if np.any(bad) else int(r.min())


def decomposition(model, params, omega, l, j, k, mu_j, mu_k):
    """Split phi(omega) = i omega.l + mu_j - mu_k as a_jk + b_ljk.omega + q_jk.

    q is built from its own pieces: the deviation of (mu_j - mu_k) from the
    unperturbed-plus-eps^2 model.  Returns (phi, a, b.omega, q, reconstruction
    error)."""
    sites = model.sites
    omega = np.asarray(omega, float)
    phi = 1j * float(np.dot(omega, l)) + mu_j - mu_k
    a = a_jk(sites, j, k) if not model.mass_variant else -1j * (j ** 3 - k ** 3)
    b = b_ljk(model, l, j, k)
    bo = complex(np.dot(b, omega))
    xi = xi_of_omega(sites, model.sign, params.eps, omega, model.mass_variant)
    model_diff = 1j * (-(j ** 3 - k ** 3) + params.eps ** 2 * c_xi(model, xi) * (j - k))
    q = (mu_j - mu_k) - model_diff
    return phi, a, bo, q, abs(a + bo + q - phi)


def inclusion_check(model, params, n_grid=200, steps=4, eigen=None, l_max=None):
    """G_{n+1} within G_n along gamma_n = gamma (1 + 2^-n)."""
    eigen = fit_eigen_model(model, params) if eigen is None else eigen
    omegas, _ = omega_grid(model, params.eps, n_grid)
    m3, m1 = eigen.constants(omegas)
    l_max = params.n_phi if l_max is None else l_max
    pairs = pair_list(model.sites, 2 * l_max)
    prev = None
    for n in range(steps):
        g = params.gamma * (1 + 2.0 ** (-n))
        member = ~excluded_mask(omegas, m3, m1, g, params.tau, l_max, pairs)
        if prev is not None and np.any(member & ~prev):
            return False
        prev = member
    return True
