"""Reduction of the normal linearized operator to constant coefficients.

Operators are stored as families of matrices X(phi) on the normal modes
|j| <= n_op, sampled on an odd uniform angle grid, so that

    L = omega . d_phi + diag(delta) + X(phi).

Every change of variables is applied in commutator form, which keeps the
large cubic diagonal out of the matrix products.  Coefficient functions of
(phi, x) live on the product of the angle grid and an odd x-grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from .approx_inverse import Chart, isotropic_correction
from .fourier import DecayOperator, bracket, decay_norm, from_grid, lattice
from .torus import AngleGrid, TorusSystem, s0_of
from .weak_bnf import bnf_map

__all__ = [
    "Frame", "Stage", "ReductionChain", "ReductionError", "assemble_L_omega",
    "step1_space", "step2_time", "step3_translate", "step4_linear_bnf",
    "step5_descent", "reduce_operator", "constant_coefficients", "step1_coefficients", "bnf_denominators", "fit_symbol",
    "hamiltonian_defect", "conjugation_residuals", "stage_report",
]


class ReductionError(RuntimeError):
    pass


# ---------------------------------------------------------------- grids


class Frame:
    """Angle grid, x-grid and normal modes shared by all stages."""

    def __init__(self, system, n_op=None):
        p = system.params
        self.system = system
        self.model = system.model
        self.nu = system.nu
        self.omega = system.omega
        self.eps = p.eps
        self.n_x = system.n
        self.n_op = 2 * system.n if n_op is None else n_op
        self.n_t = 2 * p.n_phi
        self.grid = AngleGrid(self.nu, self.n_t, m=2 * self.n_t + 1)
        self.modes = system.sites.normal_modes(self.n_op)
        self.ij = 1j * self.modes
        self.cube = self.ij ** 3
        self.mx = 4 * self.n_op + 1
        self.x = 2 * np.pi * np.arange(self.mx) / self.mx
        self.kx = np.fft.fftfreq(self.mx, 1.0 / self.mx)
        self.lat = lattice(self.nu, self.n_t)
        self.ol = self.lat @ self.omega
        self.gamma = p.gamma
        self.tau = p.tau
        self.s0 = s0_of(self.nu)
        self.check_diophantine()

    @property
    def size(self):
        return self.grid.size

    def check_diophantine(self):
        nz = np.any(self.lat != 0, axis=1)
        bound = 0.5 * self.gamma * bracket(*self.lat.T) ** (-self.tau)
        bad = nz & (np.abs(self.ol) < bound)
        if np.any(bad):
            raise ReductionError(f"omega . l too small at l = {self.lat[bad][0].tolist()}")

    # -- angle direction ---------------------------------------------------

    def t_coeffs(self, v):
        return self.grid.coeffs(v, self.n_t)

    def t_values(self, c):
        return self.grid.values(c)

    def d_omega(self, v):
        c = self.t_coeffs(v)
        out = self.t_values(c * (1j * self.ol).reshape(c.shape[:self.nu] + (1,) * (c.ndim - self.nu)))
        return out.real if np.isrealobj(v) else out

    def d_omega_inv(self, v):
        c = self.t_coeffs(v)
        ol = self.ol.reshape(c.shape[:self.nu])
        inv = np.zeros(ol.shape, dtype=complex)
        nz = ol != 0
        inv[nz] = 1 / (1j * ol[nz])
        out = self.t_values(c * inv.reshape(inv.shape + (1,) * (c.ndim - self.nu)))
        return out.real if np.isrealobj(v) else out

    def t_average(self, v):
        return v.mean(axis=0)

    def t_eval_matrix(self, pts):
        """Rows evaluate the trigonometric interpolant at the given angles."""
        return np.exp(1j * pts @ self.lat.T)

    def t_eval(self, emat, v):
        c = self.t_coeffs(v).reshape((len(self.lat),) + v.shape[1:])
        out = np.tensordot(emat, c, axes=(1, 0))
        return out.real if np.isrealobj(v) else out

    # -- x direction ------------------------------------------------------

    def dx(self, f, k=1):
        return np.fft.ifft(np.fft.fft(f, axis=-1) * (1j * self.kx) ** k, axis=-1).real

    def dx_inv(self, f):
        c = np.fft.fft(f, axis=-1)
        inv = np.zeros(self.mx, dtype=complex)
        inv[1:] = 1 / (1j * self.kx[1:])
        return np.fft.ifft(c * inv, axis=-1).real

    def x_shift(self, f, shift):
        """f(phi, x + shift(phi)) for a per-angle constant shift."""
        c = np.fft.fft(f, axis=-1)
        return np.fft.ifft(c * np.exp(1j * self.kx * shift[:, None]), axis=-1).real

    def x_eval(self, f, pts):
        """f(phi_p, pts[p, i]) by direct summation of the Fourier series."""
        c = np.fft.fft(f, axis=-1) / self.mx
        out = np.empty(pts.shape, dtype=complex)
        for p in range(f.shape[0]):
            out[p] = np.exp(1j * pts[p][:, None] * self.kx[None, :]) @ c[p]
        return out.real if np.isrealobj(f) else out

    def mult(self, f):
        """Matrices of h -> Pi(f h) on the normal modes."""
        c = from_grid(f, [2 * self.n_op])
        d = self.modes[:, None] - self.modes[None, :]
        return c[:, d + 2 * self.n_op]

    def diff_matrix(self, coeffs):
        """sum_k f_k d_x^k for a dict {k: f_k} (constants allowed)."""
        out = np.zeros((self.size, len(self.modes), len(self.modes)), dtype=complex)
        for k, f in coeffs.items():
            f = np.asarray(f, dtype=float)
            if f.ndim == 0:
                out += np.diag(f * self.ij ** k)[None]
            elif f.ndim == 1:
                out += f[:, None, None] * np.diag(self.ij ** k)[None]
            else:
                out += self.mult(f) * (self.ij ** k)[None, None, :]
        return out

    def field_norm(self, v, s):
        """Sobolev norm over (l, j) of a grid family of mode vectors."""
        c = self.t_coeffs(v).reshape(len(self.lat), -1)
        w = bracket(*self.lat.T[:, :, None], self.modes[None, :]) ** s
        return float(np.sqrt(np.sum((w * np.abs(c)) ** 2)))

    def random_field(self, rng, n_phi=None, n_x=None):
        n_phi = self.system.params.n_phi if n_phi is None else n_phi
        n_x = self.n_x if n_x is None else n_x
        c = np.zeros((len(self.lat), len(self.modes)), dtype=complex)
        keep = (np.abs(self.lat).max(axis=1)[:, None] <= n_phi) & (np.abs(self.modes)[None, :] <= n_x)
        amp = bracket(*self.lat.T[:, :, None], self.modes[None, :]) ** (-4.0)
        c[keep] = (amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape)))[keep]
        return self.t_values(c.reshape((2 * self.n_t + 1,) * self.nu + (len(self.modes),)))


# ---------------------------------------------------------------- stages


@dataclass(eq=False)
class Stage:
    """L = omega . d_phi + diag(delta) + X(phi); ``lower`` maps derivative
    orders to the tracked coefficient functions of X."""

    name: str
    delta: np.ndarray
    X: np.ndarray
    lower: dict
    info: dict = field(default_factory=dict)

    def remainder(self, frame):
        return self.X - frame.diff_matrix(self.lower)

    def apply(self, frame, h):
        return frame.d_omega(h) + self.delta * h + np.einsum("pab,pb->pa", self.X, h)


def _conjugate(frame, stage_delta, X, phi, phi_inv):
    """phi^{-1} (omega.d + delta + X) phi - omega.d - delta."""
    dphi = frame.d_omega(phi)
    comm = (stage_delta[:, None] - stage_delta[None, :]) * phi
    return phi_inv @ (comm + X @ phi + dphi)


def _series_exp(a, tol=1e-16):
    """exp(a) per angle by the power series, stopped when a term is below tol."""
    out = np.broadcast_to(np.eye(a.shape[-1]), a.shape).astype(complex)
    term = out.copy()
    scale = 1.0
    for k in range(1, 200):
        term = term @ a / k
        out = out + term
        if np.abs(term).max() < tol * scale:
            return out
    raise ReductionError("exponential series did not converge")


def hamiltonian_defect(frame, X):
    """Relative failure of d_x^{-1} X to be symmetric for the pairing sum u_j v_{-j}."""
    s = X / frame.ij[:, None]
    mirrored = np.swapaxes(s[:, ::-1, ::-1], 1, 2)
    scale = max(np.abs(s).max(), 1e-300)
    return float(np.abs(s - mirrored).max() / scale)


# ---------------------------------------------------------------- assembly


def _k02_wide(frame, chart):
    system = frame.system
    nu = system.nu
    smat, _ = system.second_derivatives(chart.theta0, chart.y0, chart.zc, n_out=frame.n_op)
    syy = smat[:, nu:2 * nu, nu:2 * nu]
    syz = smat[:, nu:2 * nu, 2 * nu:]
    szz = smat[:, 2 * nu:, 2 * nu:]
    q = np.zeros((smat.shape[0], nu, len(frame.modes)), dtype=complex)
    q[:, :, np.searchsorted(frame.modes, system.jn)] = chart.q
    qt = np.swapaxes(q, 1, 2)
    b = qt @ syy @ q + qt @ syz + np.swapaxes(syz, 1, 2) @ q + szz
    return b[:, ::-1, :]


def _density_fields(frame, w):
    """u, u_x of Phi_B(T_delta) on the (phi, x) grid."""
    n = (w.shape[-1] - 1) // 2
    js = np.arange(-n, n + 1)
    pad = np.zeros(w.shape[:-1] + (frame.mx,), dtype=complex)
    pad[..., :n + 1] = w[..., n:]
    pad[..., frame.mx - n:] = w[..., :n]
    u = np.fft.ifft(pad, axis=-1).real * frame.mx
    padx = np.zeros_like(pad)
    wx = w * 1j * js
    padx[..., :n + 1] = wx[..., n:]
    padx[..., frame.mx - n:] = wx[..., :n]
    ux = np.fft.ifft(padx, axis=-1).real * frame.mx
    return u, ux


def assemble_L_omega(model, params, i_delta, omega, n_op=None, isotropic=True, with_matrix=True):
    """Stage 0: L_omega = Pi(omega.d - d_x K02)Pi with its tracked symbol
    d_xx(a1 d_x) + d_x(a0 .).  Without the matrix only the symbol is built."""
    base = TorusSystem(model, params, omega)
    if isotropic:
        i_delta = isotropic_correction(base, i_delta)
    probe = Frame(base, n_op)
    system = TorusSystem(model, params, omega, grid=probe.grid)
    frame = Frame(system, n_op)
    chart = Chart(system, i_delta)
    X = None
    if with_matrix:
        k02 = _k02_wide(frame, chart)
        X = -frame.ij[None, :, None] * k02 - np.diag(frame.cube)[None]
    t_delta = system.lift(chart.theta0, chart.y0, chart.zc)
    w = bnf_map(system.gen, t_delta)
    u, ux = _density_fields(frame, w)
    dens = model.density
    x = frame.x[None, :]
    a1 = 1.0 + dens.derivative(x, u, ux, dux=2)
    sq = u ** 2
    if model.mass_variant:
        sq = sq - sq.mean(axis=-1, keepdims=True)
    sigma0 = dens.derivative(x, u, ux, du=2) - frame.dx(dens.derivative(x, u, ux, du=1, dux=1))
    a0 = 3 * model.sign * sq - sigma0
    a1x = frame.dx(a1)
    lower = {3: a1 - 1.0, 2: 2 * a1x, 1: frame.dx(a1x) + a0, 0: frame.dx(a0)}
    st = Stage("L0", frame.cube.copy(), X, lower, {"a1": a1, "a0": a0, "u": u})
    return frame, st


# ---------------------------------------------------------------- step 1


def _transport_rhs(frame, beta, betax, shape):
    def rhs(tau, y):
        b = beta / (1.0 + tau * betax)
        gen = frame.ij[None, :, None] * frame.mult(b)
        return (gen @ y.reshape(shape)).ravel()
    return rhs


def transport_flow(frame, beta, h=None, backward=False, rtol=1e-12):
    """Time-one flow of u_tau = Pi d_x(b(tau) u), b = beta/(1 + tau beta_x):
    the matrix family when h is None, else the flow applied to h."""
    betax = frame.dx(beta)
    n = len(frame.modes)
    y0 = np.broadcast_to(np.eye(n), (frame.size, n, n)) if h is None else h[:, :, None]
    y0 = np.ascontiguousarray(y0, dtype=complex)
    span = (1.0, 0.0) if backward else (0.0, 1.0)
    sol = solve_ivp(_transport_rhs(frame, beta, betax, y0.shape), span, y0.ravel(),
                    method="DOP853", rtol=rtol, atol=rtol * 1e-3)
    if not sol.success:
        raise ReductionError(f"transport flow failed: {sol.message}")
    out = sol.y[:, -1].reshape(y0.shape)
    return out if h is None else out[:, :, 0]


def change_of_variable_matrix(frame, beta):
    """Matrix of h -> Pi (1 + beta_x) h(x + beta) on the normal modes."""
    betax = frame.dx(beta)
    out = np.empty((frame.size, len(frame.modes), len(frame.modes)), dtype=complex)
    for c, k in enumerate(frame.modes):
        f = (1 + betax) * np.exp(1j * k * (frame.x[None, :] + beta))
        out[:, :, c] = from_grid(f, [frame.n_op])[:, frame.modes + frame.n_op]
    return out


def inverse_shift(frame, beta, tol=1e-15, max_iter=200):
    """beta~ with y = x + beta(x) <=> x = y + beta~(y)."""
    bt = -beta.copy()
    pts = frame.x[None, :]
    for _ in range(max_iter):
        new = -frame.x_eval(beta, pts + bt)
        if np.abs(new - bt).max() < tol:
            return new
        bt = new
    raise ReductionError("inverse spatial diffeomorphism did not converge")


def step1_coefficients(frame, st):
    """beta and the symbol (b3, b2, b1, b0) of the conjugated operator."""
    a1 = st.info["a1"]
    a0 = st.info["a0"]
    if np.any(a1 <= 0):
        raise ReductionError("a1 must stay positive")
    b3 = np.mean(a1 ** (-1 / 3), axis=-1) ** (-3)
    rho = b3[:, None] ** (1 / 3) * a1 ** (-1 / 3) - 1.0
    beta = frame.dx_inv(rho)
    bx = frame.dx(beta)
    size = max(np.abs(beta).max(), np.abs(bx).max())
    if size >= 0.5:
        raise ReductionError(f"|beta|_W1inf = {size:.3g} too large")
    bxx, bxxx, bxxxx = (frame.dx(beta, k) for k in (2, 3, 4))
    a1x = frame.dx(a1)
    a1xx = frame.dx(a1, 2)
    a0x = frame.dx(a0)
    dbeta = frame.d_omega(beta)
    dbetax = frame.d_omega(bx)
    one = 1 + bx
    bt = inverse_shift(frame, beta)
    pts = frame.x[None, :] + bt

    def pull(f):
        return frame.x_eval(f, pts)

    return {
        "b3": b3,
        "b2": pull(2 * a1x * one ** 2 + 6 * a1 * bxx * one),
        "b1": pull(dbeta + 3 * a1 * bxx ** 2 / one + 4 * a1 * bxxx + 6 * a1x * bxx + (a1xx + a0) * one),
        "b0": pull((dbetax + a1 * bxxxx + 2 * a1x * bxxx + (a1xx + a0) * bxx) / one + a0x),
        "beta": beta,
        "beta_inv": bt,
    }


def step1_space(frame, st):
    info = step1_coefficients(frame, st)
    phi = transport_flow(frame, info["beta"])
    phi_inv = np.linalg.inv(phi)
    X = _conjugate(frame, st.delta, st.X, phi, phi_inv)
    info.update(phi=phi, phi_inv=phi_inv)
    lower = {3: info["b3"] - 1.0, 1: info["b1"], 0: info["b0"]}
    return Stage("L1", st.delta.copy(), X, lower, info)


def constant_coefficients(frame, st):
    """(m3, m1) from the tracked symbols alone, without building the flows."""
    info = step1_coefficients(frame, st)
    b3 = info["b3"]
    m3 = float(np.mean(b3))
    alpha = frame.d_omega_inv(b3 - m3) / m3
    at = inverse_time_shift(frame, alpha)
    e_inv = frame.t_eval_matrix(frame.grid.points + at[:, None] * frame.omega[None, :])
    rho = frame.t_eval(e_inv, b3) / m3
    c1 = frame.t_eval(e_inv, info["b1"]) / rho[:, None]
    return m3, float(np.mean(c1))


# ---------------------------------------------------------------- step 2


def inverse_time_shift(frame, alpha, tol=1e-15, max_iter=200):
    """alpha~ with theta = phi + omega alpha(phi) <=> phi = theta + omega alpha~(theta)."""
    at = -alpha.copy()
    pts = frame.grid.points
    for _ in range(max_iter):
        emat = frame.t_eval_matrix(pts + at[:, None] * frame.omega[None, :])
        new = -frame.t_eval(emat, alpha)
        if np.abs(new - at).max() < tol:
            return new
        at = new
    raise ReductionError("inverse time reparametrization did not converge")


def step2_time(frame, st):
    b3 = st.info["b3"]
    m3 = float(np.mean(b3))
    alpha = frame.d_omega_inv(b3 - m3) / m3
    at = inverse_time_shift(frame, alpha)
    pts = frame.grid.points
    e_inv = frame.t_eval_matrix(pts + at[:, None] * frame.omega[None, :])
    e_fwd = frame.t_eval_matrix(pts + alpha[:, None] * frame.omega[None, :])
    b3s = frame.t_eval(e_inv, b3)
    rho = b3s / m3
    xb = st.X - (b3 - 1.0)[:, None, None] * np.diag(frame.cube)[None]
    X = frame.t_eval(e_inv, xb) / rho[:, None, None]
    c1 = frame.t_eval(e_inv, st.lower[1]) / rho[:, None]
    c0 = frame.t_eval(e_inv, st.lower[0]) / rho[:, None]
    info = {"m3": m3, "alpha": alpha, "alpha_inv": at, "rho": rho, "c1": c1, "c0": c0,
            "e_inv": e_inv, "e_fwd": e_fwd}
    return Stage("L2", m3 * frame.cube, X, {1: c1, 0: c0}, info)


# ---------------------------------------------------------------- step 3


def step3_translate(frame, st):
    c1, c0 = st.lower[1], st.lower[0]
    m1 = float(np.mean(c1))
    p = frame.d_omega_inv(m1 - c1.mean(axis=-1))
    dp = frame.d_omega(p)
    ph = np.exp(1j * frame.modes[None, :] * p[:, None])
    X = np.conj(ph)[:, :, None] * st.X * ph[:, None, :]
    X = X + dp[:, None, None] * np.diag(frame.ij)[None]
    d1 = frame.x_shift(c1, -p) + dp[:, None]
    d0 = frame.x_shift(c0, -p)
    info = {"m1": m1, "p": p, "d1": d1, "d0": d0}
    return Stage("L3", st.delta.copy(), X, {1: d1, 0: d0}, info)


# ---------------------------------------------------------------- step 4


def vbar(frame, xi):
    """sum_{j in S} sqrt(xi_j) e^{i l(j).phi} e^{ijx} on the (phi, x) grid."""
    sites = frame.system.sites
    out = np.zeros((frame.size, frame.mx))
    for i, j in enumerate(sites.plus):
        out += 2 * np.sqrt(xi[i]) * np.cos(frame.grid.points[:, i][:, None] + j * frame.x[None, :])
    return out


def c_xi(model, xi):
    return 0.0 if model.mass_variant else 3 * model.sign * 2 * float(np.sum(xi))


def _pair_weights(sites, xi, mass_variant):
    """(l, d) -> sum sqrt(xi_j1 xi_j2) over j1 + j2 = d, l(j1) + l(j2) = l."""
    full = sites.full
    amp = {j: math.sqrt(xi[sites.plus.index(abs(j))]) for j in full}
    out = {}
    for j1 in full:
        for j2 in full:
            d = j1 + j2
            if mass_variant and d == 0:
                continue
            key = (tuple(int(v) for v in sites.ell(j1) + sites.ell(j2)), d)
            out[key] = out.get(key, 0.0) + amp[j1] * amp[j2]
    return out


def bnf_denominators(sites, sign, xi, omega, m3, modes, mass_variant=False):
    """Entries B_j^{j'}(l), the resonance flags and the solved denominators.

    Returns a list of (l, j, j', B, resonant, denominator)."""
    weights = _pair_weights(sites, xi, mass_variant)
    wbar = np.asarray(sites.plus, dtype=float) ** 3
    pos = {int(j): i for i, j in enumerate(modes)}
    rows = []
    for (l, d), wgt in weights.items():
        larr = np.asarray(l)
        for j in modes:
            jp = int(j) - d
            if jp not in pos:
                continue
            b = 3 * sign * 1j * j * wgt
            integer = int(round(larr @ wbar)) + jp ** 3 - int(j) ** 3
            den = float(larr @ omega + m3 * (jp ** 3 - int(j) ** 3))
            rows.append((l, int(j), jp, b, integer == 0, den))
    return rows


def step4_linear_bnf(frame, st, xi, m3):
    model = frame.model
    sites = frame.system.sites
    eps2 = frame.eps ** 2
    pos = {int(j): i for i, j in enumerate(frame.modes)}
    n = len(frame.modes)
    a_grid = np.zeros((frame.size, n, n), dtype=complex)
    min_den = np.inf
    surviving = []
    for l, j, jp, b, resonant, den in bnf_denominators(
            sites, model.sign, xi, frame.omega, m3, frame.modes, model.mass_variant):
        if resonant:
            if b != 0:
                surviving.append((l, j, jp, b))
            continue
        min_den = min(min_den, abs(den))
        phase = np.exp(1j * frame.grid.points @ np.asarray(l, dtype=float))
        a_grid[:, pos[j], pos[jp]] += -b / (1j * den) * phase
    if min_den < 0.5:
        raise ReductionError(f"linear Birkhoff denominator {min_den:.3g} below 1/2")
    for l, j, jp, _ in surviving:
        if any(l) or j != jp:
            raise ReductionError(f"off-diagonal resonant term at l={l}, j={j}, j'={jp}")
    gen = eps2 * a_grid
    phi = _series_exp(gen)
    phi_inv = _series_exp(-gen)
    X = _conjugate(frame, st.delta, st.X, phi, phi_inv)
    v2 = vbar(frame, xi) ** 2
    if model.mass_variant:
        v2 = v2 - v2.mean(axis=-1, keepdims=True)
    d1t = st.lower[1] - 3 * model.sign * eps2 * v2
    d0t = st.lower[0] - 3 * model.sign * eps2 * frame.dx(v2)
    cx = c_xi(model, xi)
    info = {"A": a_grid, "phi": phi, "phi_inv": phi_inv, "c_xi": cx, "d1_tilde": d1t,
            "d0_tilde": d0t, "min_denominator": min_den, "surviving": surviving}
    return Stage("L4", st.delta.copy(), X, {1: eps2 * cx + d1t, 0: d0t}, info)


# ---------------------------------------------------------------- step 5


def step5_descent(frame, st, m3, m1):
    cx = st.info["c_xi"]
    f = st.lower[1] - m1
    w = -frame.dx_inv(f) / (3 * m3)
    gen = frame.mult(w) / frame.ij[None, None, :]
    s = _series_exp(gen)
    s_inv = _series_exp(-gen)
    X = _conjugate(frame, st.delta, st.X, s, s_inv)
    X = X - m1 * np.diag(frame.ij)[None]
    info = {"w": w, "S": s, "S_inv": s_inv, "generator": gen, "m1": m1, "c_xi": cx}
    return Stage("L5", st.delta + m1 * frame.ij, X, {}, info)


# ---------------------------------------------------------------- chain


@dataclass(eq=False)
class ReductionChain:
    frame: Frame
    stages: list
    xi: np.ndarray

    @property
    def m3(self):
        return self.stages[2].info["m3"]

    @property
    def m1(self):
        return self.stages[3].info["m1"]

    @property
    def final(self):
        return self.stages[-1]

    def forward(self, k, h):
        """Apply the stage-k change of variables (k = 1..5) to grid fields."""
        f = self.frame
        st = self.stages[k]
        if k == 1:
            return transport_flow(f, st.info["beta"], h)
        if k == 2:
            return f.t_eval(st.info["e_fwd"], h)
        if k == 3:
            return np.exp(1j * f.modes[None, :] * st.info["p"][:, None]) * h
        if k == 4:
            return np.einsum("pab,pb->pa", sla.expm(f.eps ** 2 * st.info["A"]), h)
        if k == 5:
            return np.einsum("pab,pb->pa", sla.expm(st.info["generator"]), h)
        raise ValueError("stage index must be 1..5")

    def backward(self, k, h):
        f = self.frame
        st = self.stages[k]
        if k == 1:
            return np.einsum("pab,pb->pa", st.info["phi_inv"], h)
        if k == 2:
            return f.t_eval(st.info["e_inv"], h)
        if k == 3:
            return np.exp(-1j * f.modes[None, :] * st.info["p"][:, None]) * h
        if k in (4, 5):
            key = "phi_inv" if k == 4 else "S_inv"
            return np.einsum("pab,pb->pa", st.info[key], h)
        raise ValueError("stage index must be 1..5")

    def to_final(self, g):
        """Right-hand side of L0 h = g mapped to the frame of L5."""
        for k in range(1, 6):
            g = self.backward(k, g)
            if k == 2:
                g = g / self.stages[2].info["rho"][:, None]
        return g

    def from_final(self, h):
        for k in range(5, 0, -1):
            h = self.forward(k, h)
        return h


def reduce_operator(model, params, i_delta, omega, n_op=None, isotropic=True):
    frame, s0 = assemble_L_omega(model, params, i_delta, omega, n_op, isotropic)
    s1 = step1_space(frame, s0)
    s2 = step2_time(frame, s1)
    s3 = step3_translate(frame, s2)
    s4 = step4_linear_bnf(frame, s3, frame.system.xi, s2.info["m3"])
    s5 = step5_descent(frame, s4, s2.info["m3"], s3.info["m1"])
    return ReductionChain(frame, [s0, s1, s2, s3, s4, s5], frame.system.xi)


# ---------------------------------------------------------------- diagnostics


def conjugation_residuals(chain, n_samples=10, seed=0):
    """max over random h of |L_{k-1} T_k h - T_k (rho_k) L_k h|_{s0} / |h|_{s0+3}."""
    f = chain.frame
    rng = np.random.default_rng(seed)
    out = np.zeros(5)
    for _ in range(n_samples):
        h = f.random_field(rng)
        for k in range(1, 6):
            prev, cur = chain.stages[k - 1], chain.stages[k]
            lhs = prev.apply(f, chain.forward(k, h))
            lk = cur.apply(f, h)
            if k == 2:
                lk = cur.info["rho"][:, None] * lk
            rhs = chain.forward(k, lk)
            r = f.field_norm(lhs - rhs, f.s0) / f.field_norm(h, f.s0 + 3)
            out[k - 1] = max(out[k - 1], r)
    return out


def fit_symbol(frame, X, order=3, probes=None, d_max=None, smoothing=2):
    """Least-squares symbol of X on high probes e^{ijx}: for each diagonal d,
    X[j + d, j] ~ sum_m c_m(d) (ij)^m with m = -smoothing..order.  Returns
    the functions c_m(phi, x) for m = 0..order and the worst condition number."""
    n_x = frame.n_x
    probes = np.arange(n_x // 2, n_x + 1) if probes is None else np.asarray(probes)
    probes = np.concatenate([-probes[::-1], probes])
    d_max = n_x // 2 if d_max is None else d_max
    pos = {int(j): i for i, j in enumerate(frame.modes)}
    powers = np.arange(-smoothing, order + 1)
    coeffs = np.zeros((len(powers), frame.size, 2 * d_max + 1), dtype=complex)
    worst = 1.0
    for d in range(-d_max, d_max + 1):
        js = [int(j) for j in probes if int(j) in pos and int(j) + d in pos]
        if len(js) < 2 * len(powers):
            continue
        js = np.asarray(js)
        scale = float(np.abs(js).max())
        v = (1j * js[:, None] / scale) ** powers[None, :]
        worst = max(worst, float(np.linalg.cond(v)))
        y = X[:, [pos[j + d] for j in js], [pos[j] for j in js]]
        sol, *_ = np.linalg.lstsq(v, y.T, rcond=None)
        coeffs[:, :, d + d_max] = sol / scale ** powers[:, None]
    ds = np.arange(-d_max, d_max + 1)
    funcs = np.einsum("mpd,dx->mpx", coeffs[smoothing:], np.exp(1j * ds[:, None] * frame.x[None, :])).real
    return funcs, worst


def remainder_decay_norm(frame, R, s=None, interior=True):
    s = frame.s0 if s is None else s
    modes = frame.modes
    if interior:
        keep = np.abs(modes) <= frame.n_x
        R = R[:, keep][:, :, keep]
        modes = modes[keep]
    mats = R.reshape(frame.grid.shape + R.shape[1:])
    e = from_grid(np.moveaxis(mats, (-2, -1), (0, 1)), [frame.n_t] * frame.nu)
    e = np.moveaxis(e, (0, 1), (-2, -1))
    op = _RawOperator(frame.nu, modes, e)
    return decay_norm(op, s)


@dataclass(frozen=True)
class _RawOperator:
    nu: int
    modes: np.ndarray
    entries: np.ndarray

    @property
    def l_range(self):
        return (self.entries.shape[0] - 1) // 2


def to_decay_operator(frame, X, interior=True):
    """DecayOperator of a grid family, made exactly real-structured."""
    modes = frame.modes
    if interior:
        keep = np.abs(modes) <= frame.n_x
        X = X[:, keep][:, :, keep]
        modes = modes[keep]
    mats = X.reshape(frame.grid.shape + X.shape[1:])
    e = from_grid(np.moveaxis(mats, (-2, -1), (0, 1)), [frame.n_t] * frame.nu)
    e = np.moveaxis(e, (0, 1), (-2, -1))
    mirrored = np.conj(e[(slice(None, None, -1),) * frame.nu][..., ::-1, ::-1])
    return DecayOperator(frame.nu, modes, 0.5 * (e + mirrored))


def stage_report(chain, n_samples=3, seed=0):
    """Per-stage summary rows for the command-line report."""
    f = chain.frame
    res = conjugation_residuals(chain, n_samples, seed)
    rows = []
    for k, st in enumerate(chain.stages):
        if k == 0:
            var = float(np.std(st.info["a1"]))
        elif k == 1:
            var = float(np.std(st.info["b3"]))
        elif k in (2, 3, 4):
            var = float(np.std(st.lower[1]))
        else:
            funcs, _ = fit_symbol(f, st.X, order=1)
            var = float(np.std(funcs[1]))
        rows.append({
            "stage": k,
            "m3": chain.m3 if k >= 2 else None,
            "m1": chain.m1 if k >= 3 else None,
            "coeff_variation": var,
            "conjugation_residual": float(res[k - 1]) if k else 0.0,
            "remainder_decay_norm": remainder_decay_norm(f, st.remainder(f)),
            "hamiltonian_defect": hamiltonian_defect(f, st.X),
        })
    return rows
