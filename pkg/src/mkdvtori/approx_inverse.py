"""Approximate right inverse of the linearized torus functional.

The torus is first made isotropic, then straightened by the symplectic chart
G_delta; in those coordinates the linearized equations are triangular up to
terms that vanish at an exact solution."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, gmres

from .fourier import DecayOperator, bracket, lattice
from .torus import TorusEmbedding, s0_of


class SingularChart(ValueError):
    pass


# ---------------------------------------------------------------- isotropy


@dataclass(frozen=True, eq=False)
class IsotropyData:
    a: np.ndarray   # coefficients (2L+1,)*nu + (nu,)
    A: np.ndarray   # coefficients (2L+1,)*nu + (nu, nu)

    def defect(self):
        return float(np.abs(self.A).max(initial=0.0))


def _dx_inv_pairing(system, zc):
    js = system.jn
    inv = np.zeros(zc.shape[-1], dtype=complex)
    inv[system.jidx] = 1 / (1j * js)
    return zc * inv


def isotropy_data(system, emb):
    """Pull-back one-form a_k and its differential A_kj = d_k a_j - d_j a_k."""
    g = system.grid
    nu = system.nu
    dth = np.eye(nu) + g.values(g.gradient(emb.theta)).real   # [p, i, k] = d_k theta_i
    y = g.values(emb.y).real
    dz = g.values(g.gradient(emb.z))                           # [p, j, k]
    zc = g.values(emb.z)
    w = _dx_inv_pairing(system, zc)
    a = -np.einsum("pik,pi->pk", dth, y)
    a = a + 0.5 * np.einsum("pjk,pj->pk", dz, w[:, ::-1]).real
    ac = g.coeffs(a, 2 * g.n_phi)
    da = g.gradient(ac)                                        # [..., j, k] = d_k a_j
    big_a = da - np.swapaxes(da, -1, -2)
    return IsotropyData(ac, np.swapaxes(big_a, -1, -2))


def _laplace_inv(g, c):
    n = (c.shape[0] - 1) // 2
    lat = lattice(g.nu, n)
    lap = -np.sum(lat ** 2, axis=1).reshape((2 * n + 1,) * g.nu)
    inv = np.zeros_like(lap, dtype=float)
    inv[lap != 0] = 1 / lap[lap != 0]
    return c * inv.reshape(inv.shape + (1,) * (c.ndim - g.nu))


def isotropic_correction(system, i0):
    """i_delta: only y changes, y_delta = y0 + [d theta0]^{-T} rho."""
    g = system.grid
    data = isotropy_data(system, i0)
    big_a = data.A
    # rho_j = Laplace^{-1} sum_k d_k A_kj
    grad = g.gradient(big_a)                                   # [..., k, j, m] = d_m A_kj
    div = np.einsum("...kjk->...j", grad)
    rho = _laplace_inv(g, div)
    if not np.any(rho):
        return i0
    dth = np.eye(system.nu) + g.values(g.gradient(i0.theta)).real
    try:
        m = np.linalg.inv(dth)
    except np.linalg.LinAlgError as exc:
        raise SingularChart("d_phi theta0 is singular on the angle grid") from exc
    shift = np.einsum("pki,pk->pi", m, g.values(rho).real)
    return i0.replace(y=i0.y + g.coeffs(shift)).realified()


# ---------------------------------------------------------------- chart


class Chart:
    """G_delta(psi, eta, w) = (theta0(psi), y_delta(psi) + [d theta0]^{-T} eta
    + [(d_theta z~0)(theta0(psi))]^T d_x^{-1} w, z0(psi) + w), on the grid."""

    def __init__(self, system, i_delta):
        self.system = system
        self.emb = i_delta
        g = system.grid
        nu = system.nu
        self.theta0, self.y0, self.zc = system.on_grid(i_delta)
        self.dtheta = np.eye(nu) + g.values(g.gradient(i_delta.theta)).real
        cond = np.linalg.cond(self.dtheta)
        if not np.all(np.isfinite(cond)) or cond.max() > 1e12:
            raise SingularChart(f"d_phi theta0 is singular (condition {cond.max():.3g})")
        self.dtheta_inv = np.linalg.inv(self.dtheta)
        self.m = np.swapaxes(self.dtheta_inv, -1, -2)
        self.dy = g.values(g.gradient(i_delta.y)).real
        self.dz = g.values(g.gradient(i_delta.z))[:, system.jidx, :]
        zmat = self.dz @ self.dtheta_inv
        self.q = np.swapaxes(zmat[:, ::-1, :] / (1j * system.jn)[None, :, None], 1, 2)

    def point(self, eta, w):
        """G_delta at the grid angles, with eta, w sampled on the same grid."""
        y = self.y0 + np.einsum("pik,pk->pi", self.m, eta) + np.einsum("pkj,pj->pk", self.q, w).real
        z = self.zc.copy()
        z[:, self.system.jidx] += w
        return self.theta0, y, z

    def forward_grid(self, psi, eta, w):
        th = np.einsum("pik,pk->pi", self.dtheta, psi)
        y = (np.einsum("pik,pk->pi", self.dy, psi) + np.einsum("pik,pk->pi", self.m, eta)
             + np.einsum("pkj,pj->pk", self.q, w))
        z = np.einsum("pjk,pk->pj", self.dz, psi) + w
        return th, y, z

    def inverse_grid(self, th, y, z):
        psi = np.einsum("pik,pk->pi", self.dtheta_inv, th)
        w = z - np.einsum("pjk,pk->pj", self.dz, psi)
        rest = y - np.einsum("pik,pk->pi", self.dy, psi) - np.einsum("pkj,pj->pk", self.q, w)
        eta = np.einsum("pki,pk->pi", self.dtheta, rest)
        return psi, eta, w

    def _to_grid(self, u):
        g, j = self.system.grid, self.system.jidx
        return g.values(u.theta), g.values(u.y), g.values(u.z)[:, j]

    def _from_grid(self, a, b, c, zeta):
        g, s = self.system.grid, self.system
        z = np.zeros(s.trivial().z.shape, dtype=complex)
        z[..., s.jidx] = g.coeffs(c)
        return TorusEmbedding(g.coeffs(a), g.coeffs(b), z, zeta).realified()

    def apply(self, u):
        """DG_delta(phi, 0, 0) applied to (psi^, eta^, w^); zeta passes through."""
        return self._from_grid(*self.forward_grid(*self._to_grid(u)), u.zeta)

    def apply_inverse(self, u):
        return self._from_grid(*self.inverse_grid(*self._to_grid(u)), u.zeta)


def G_delta_chart(system, i_delta, eta_w=None):
    chart = Chart(system, i_delta)
    if eta_w is None:
        g = system.grid
        nj = len(system.jn)
        return chart.point(np.zeros((g.size, system.nu)), np.zeros((g.size, nj)))
    return chart.point(*eta_w)


def DG_delta(system, i_delta):
    """Per-angle block matrix of DG_delta(phi, 0, 0) in (theta, y, z_J) order."""
    c = Chart(system, i_delta)
    nu, nj = system.nu, len(system.jn)
    p = c.dtheta.shape[0]
    out = np.zeros((p, 2 * nu + nj, 2 * nu + nj), dtype=complex)
    out[:, :nu, :nu] = c.dtheta
    out[:, nu:2 * nu, :nu] = c.dy
    out[:, nu:2 * nu, nu:2 * nu] = c.m
    out[:, nu:2 * nu, 2 * nu:] = c.q
    out[:, 2 * nu:, :nu] = c.dz
    out[:, 2 * nu:, 2 * nu:] = np.eye(nj)
    return out


def symplectic_pairing(system, u, v):
    """Pointwise 2-form of the (theta, y, z_J) phase space for stacked vectors."""
    nu = system.nu
    js = system.jn
    zpart = np.sum(u[..., 2 * nu:] / (1j * js) * v[..., 2 * nu:][..., ::-1], axis=-1)
    return (np.sum(u[..., :nu] * v[..., nu:2 * nu], axis=-1)
            - np.sum(u[..., nu:2 * nu] * v[..., :nu], axis=-1) + zpart)


# ---------------------------------------------------------------- K coefficients


@dataclass(frozen=True, eq=False)
class KTaylor:
    """Taylor coefficients in (eta, w) of K = H_{eps,zeta0} o G_delta, sampled
    on the angle grid (leading axis)."""

    K00: np.ndarray
    K10: np.ndarray
    K01: np.ndarray
    K20: np.ndarray
    K11: np.ndarray
    K02: np.ndarray
    modes: np.ndarray
    dtheta: np.ndarray
    grid: object

    def k11_transpose(self, w):
        """K11^T w with (K11 eta, w) = eta . K11^T w, pointwise."""
        return np.einsum("pji,pj->pi", self.K11[:, ::-1, :], w)

    def k02_operator(self, l_range=None):
        l_range = 2 * self.grid.n_phi if l_range is None else l_range
        mats = self.K02.reshape(self.grid.shape + self.K02.shape[1:])
        return DecayOperator.from_grid(self.grid.nu, self.modes, mats, l_range)


def k_taylor(system, i_delta, zeta0=None, chart=None):
    chart = chart or Chart(system, i_delta)
    zeta0 = i_delta.zeta if zeta0 is None else np.asarray(zeta0, float)
    nu = system.nu
    smat, (dy, _, gz) = system.second_derivatives(chart.theta0, chart.y0, chart.zc)
    syy = smat[:, nu:2 * nu, nu:2 * nu]
    syz = smat[:, nu:2 * nu, 2 * nu:]
    szz = smat[:, 2 * nu:, 2 * nu:]
    m, q = chart.m, chart.q
    mt = np.swapaxes(m, 1, 2)
    qt = np.swapaxes(q, 1, 2)
    k20 = (mt @ syy @ m).real
    c = mt @ (syy @ q + syz)
    k11 = np.swapaxes(c, 1, 2)[:, ::-1, :]
    b = qt @ syy @ q + qt @ syz + np.swapaxes(syz, 1, 2) @ q + szz
    k02 = b[:, ::-1, :]
    k10 = np.einsum("pki,pk->pi", m, dy)
    k01 = np.einsum("pkj,pk->pj", q, dy)[:, ::-1] + gz[:, system.jidx]
    k00 = system.value(chart.theta0, chart.y0, chart.zc) + chart.theta0 @ zeta0
    return KTaylor(k00, k10, k01, 0.5 * (k20 + np.swapaxes(k20, 1, 2)), k11, k02,
                   system.jn, chart.dtheta, system.grid)


# ---------------------------------------------------------------- normal inverse


def check_diophantine(grid, omega, gamma, tau):
    ol, w, lat = grid.smallest_divisor(omega)
    bad = ol < gamma * w ** (-tau)
    if np.any(bad):
        l = lat[np.argmax(bad)]
        raise ValueError(f"omega fails the diophantine bound at l = {l.tolist()}")


class NormalInverse:
    """Inverse of L_omega = omega.d_phi - d_x K02(phi) on normal fields of the
    angle truncation (Galerkin in phi, grid products)."""

    def __init__(self, k, omega, method=None, tol=1e-12):
        self.k = k
        self.omega = np.asarray(omega, float)
        g = k.grid
        self.nu = g.nu
        self.n = g.n_phi
        self.nj = len(k.modes)
        self.shape = (2 * self.n + 1,) * self.nu + (self.nj,)
        self.dx = 1j * k.modes
        self.tol = tol
        self.method = method or ("dense" if self.nu == 1 else "gmres")
        if self.method == "dense":
            self._factor()
        elif self.method == "gmres":
            self._precondition()
        else:
            raise ValueError(f"unknown method {self.method!r}")

    def _kmats(self, n):
        return self.k.grid.coeffs(self.k.K02, n)

    def matrix(self):
        if self.nu != 1:
            raise ValueError("dense L_omega is assembled for nu = 1 only")
        n, nj = self.n, self.nj
        kh = self._kmats(2 * n)
        ls = np.arange(-n, n + 1)
        diff = ls[:, None] - ls[None, :] + 2 * n
        blocks = -self.dx[None, None, :, None] * kh[diff]
        blocks[np.arange(2 * n + 1), np.arange(2 * n + 1)] += np.eye(nj) * (1j * self.omega[0] * ls)[:, None, None]
        return np.transpose(blocks, (0, 2, 1, 3)).reshape((2 * n + 1) * nj, (2 * n + 1) * nj)

    def _factor(self):
        mat = self.matrix()
        self.lu = sla.lu_factor(mat)
        self.cond_estimate = None

    def apply_L(self, h):
        g = self.k.grid
        kv = np.einsum("pab,pb->pa", self.k.K02, g.values(h))
        return g.d_omega(h, self.omega) - self.dx * g.coeffs(kv)

    def _precondition(self):
        k0 = self._kmats(0).reshape(self.nj, self.nj)
        ol = self.k.grid.omega_l(self.omega).ravel()
        base = -self.dx[:, None] * k0
        self.blocks = np.linalg.inv(base[None] + 1j * ol[:, None, None] * np.eye(self.nj))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=complex)
        if self.method == "dense":
            return sla.lu_solve(self.lu, rhs.reshape(-1)).reshape(self.shape)
        size = rhs.size

        def mv(x):
            return self.apply_L(x.reshape(self.shape)).reshape(-1)

        def pc(x):
            xb = x.reshape(-1, self.nj)
            return np.einsum("lab,lb->la", self.blocks, xb).reshape(-1)

        op = LinearOperator((size, size), matvec=mv, dtype=complex)
        pre = LinearOperator((size, size), matvec=pc, dtype=complex)
        sol, info = gmres(op, rhs.reshape(-1), M=pre, rtol=self.tol, atol=0.0, restart=200, maxiter=50)
        if info != 0:
            raise RuntimeError(f"GMRES did not converge (info={info})")
        return sol.reshape(self.shape)


# ---------------------------------------------------------------- the D system


def _grid_mat(g, mats, coeffs):
    return np.einsum("pab,pb->pa", mats, g.values(coeffs))


def apply_D(k, u, omega):
    """D[psi^, eta^, w^, zeta^] for an embedding-shaped tuple (w^ on J modes)."""
    g = k.grid
    jidx = _jidx(k, u)
    w = u.z[..., jidx]
    eta_g = g.values(u.y)
    w_g = g.values(w)
    r1 = g.d_omega(u.theta, omega) - g.coeffs(np.einsum("pik,pk->pi", k.K20, eta_g) + k.k11_transpose(w_g))
    r2 = g.d_omega(u.y, omega) + g.coeffs(np.einsum("pki,k->pi", k.dtheta, u.zeta))
    inner = np.einsum("pji,pi->pj", k.K11, eta_g) + np.einsum("pab,pb->pa", k.K02, w_g)
    r3 = np.zeros(u.z.shape, dtype=complex)
    r3[..., jidx] = g.d_omega(w, omega) - 1j * k.modes * g.coeffs(inner)
    return TorusEmbedding(r1, r2, r3, np.zeros_like(u.zeta))


def _jidx(k, u):
    nx = (u.z.shape[-1] - 1) // 2
    return k.modes + nx


@dataclass(frozen=True)
class SolveReport:
    cond_M1: float
    eta_average: np.ndarray


def solve_D(k, linv, g_in, omega, gamma=None, tau=None, report=None):
    """Triangular solve of D[psi^, eta^, w^, zeta^] = g."""
    g = k.grid
    omega = np.asarray(omega, float)
    if gamma is not None:
        check_diophantine(g, omega, gamma, tau)
    nu = g.nu
    jidx = _jidx(k, g_in)
    zero = (g.n_phi,) * nu
    g1, g2, g3 = g_in.theta, g_in.y, g_in.z[..., jidx]
    zeta = g2[zero].real.copy()
    src = g2 - g.coeffs(np.einsum("pki,k->pi", k.dtheta, zeta))
    eta0 = g.d_omega_inv(src, omega)

    def w_of(eta_c, extra):
        inner = np.einsum("pji,pi->pj", k.K11, g.values(eta_c))
        return linv.solve(extra + 1j * k.modes * g.coeffs(inner))

    def psi_rhs(eta_c, w_c, base):
        return base + g.coeffs(np.einsum("pik,pk->pi", k.K20, g.values(eta_c))
                               + k.k11_transpose(g.values(w_c)))

    w0 = w_of(eta0, g3)
    r0 = psi_rhs(eta0, w0, g1)
    cols_w, cols_r = [], []
    for i in range(nu):
        e = np.zeros_like(eta0)
        e[zero + (i,)] = 1.0
        wi = w_of(e, np.zeros_like(g3))
        cols_w.append(wi)
        cols_r.append(psi_rhs(e, wi, np.zeros_like(g1)))
    m1 = np.stack([c[zero] for c in cols_r], axis=-1)
    cond = float(np.linalg.cond(m1))
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"<M1> is near singular (condition {cond:.3g})")
    bar = -np.linalg.solve(m1, r0[zero])
    eta = eta0.copy()
    eta[zero] += bar
    w = w0 + sum(bi * wi for bi, wi in zip(bar, cols_w))
    r = r0 + sum(bi * ri for bi, ri in zip(bar, cols_r))
    psi = g.d_omega_inv(r, omega)
    if report is not None:
        report.append(SolveReport(cond, bar))
    z = np.zeros(g_in.z.shape, dtype=complex)
    z[..., jidx] = w
    return TorusEmbedding(psi, eta, z, zeta)


# ---------------------------------------------------------------- T0


class ApproximateInverse:
    """T0 = DG~_delta o D^{-1} o DG_delta^{-1} around a torus i0."""

    def __init__(self, system, i0, method=None):
        self.system = system
        self.i0 = i0
        self.i_delta = isotropic_correction(system, i0)
        self.chart = Chart(system, self.i_delta)
        self.k = k_taylor(system, self.i_delta, i0.zeta, self.chart)
        self.linv = NormalInverse(self.k, system.omega, method)
        self.reports = []

    def apply(self, g):
        u = self.chart.apply_inverse(g.replace(zeta=np.zeros(self.system.nu)))
        u = u.replace(zeta=np.zeros(self.system.nu))
        sol = solve_D(self.k, self.linv, u, self.system.omega, report=self.reports)
        out = self.chart.apply(sol)
        return out.replace(zeta=sol.zeta)

    @cached_property
    def _smat(self):
        return self.system.linear_blocks(self.i0)[0]

    def defect(self, g, s=None, mu=None):
        nu = self.system.nu
        s = s0_of(nu) if s is None else s
        mu = self.system.params.tau + 2 if mu is None else mu
        t = self.apply(g)
        back = self.system.apply_linearization(self._smat, t)
        return (back - g).norm(s) / g.norm(s + mu)

    def forecast_terms(self):
        """Sizes of the terms dropped from the linearized system: they vanish
        at an exact solution."""
        k, g = self.k, self.system.grid
        k10 = g.coeffs(k.K10)
        k01 = g.coeffs(k.K01)
        k00 = g.coeffs(k.K00[:, None])
        zero = (g.n_phi,) * g.nu
        k10_dev = k10.copy()
        k10_dev[zero] -= self.system.omega
        k00_dev = k00.copy()
        k00_dev[zero] = 0
        return {"K10_minus_omega": float(np.abs(k10_dev).max()),
                "K01": float(np.abs(k01).max()),
                "K00_oscillation": float(np.abs(k00_dev).max())}


def T0_apply(system, i0, g):
    return ApproximateInverse(system, i0).apply(g)


def approx_inverse_defect(system, i0, g):
    return ApproximateInverse(system, i0).defect(g)
