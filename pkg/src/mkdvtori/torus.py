"""Action-angle embedding, the rescaled Hamiltonian H_eps and the torus
functional F(i, zeta) whose zeros are invariant tori."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.fft import next_fast_len

from . import hamiltonian as ham
from .fourier import TorusField, bracket, centred, from_grid, lattice, to_grid
from .sites import SiteSet
from .weak_bnf import bnf_map, build_generator


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Params:
    eps: float
    a: float = 0.1
    tau: float = 3.0
    n_phi: int = 16
    n_x: int = 32

    def __post_init__(self):
        if not 0 < self.a < 1 / 6:
            raise ValueError("a must lie in (0, 1/6)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.n_phi < 0 or self.n_x < 1:
            raise ValueError("truncations must be positive")

    @property
    def b(self):
        return 1 + self.a / 2

    @property
    def gamma(self):
        return self.eps ** (2 * self.b)

    def check_tau(self, nu):
        if self.tau < nu + 2:
            raise ValueError(f"tau = {self.tau} is below nu + 2 = {nu + 2}")


def s0_of(nu):
    return (nu + 2) / 2


def twist_matrix(sites, sign, mass_variant=False):
    ds = np.diag(np.asarray(sites.plus, dtype=float))
    if mass_variant:
        return 3 * sign * ds
    nu = sites.nu
    return 3 * sign * ds @ (np.eye(nu) - 2 * np.ones((nu, nu)))


def twist_inverse(sites, sign, mass_variant=False):
    dinv = np.diag(1 / np.asarray(sites.plus, dtype=float))
    if mass_variant:
        return dinv / (3 * sign)
    nu = sites.nu
    return (np.eye(nu) - 2 * np.ones((nu, nu)) / (2 * nu - 1)) @ dinv / (3 * sign)


def omega_bar(sites):
    return np.asarray(sites.plus, dtype=float) ** 3


def freq_amp(sites, sign, eps, xi, mass_variant=False):
    xi = np.asarray(xi, dtype=float)
    if sites.nu == 0:
        raise ValueError("nu = 0 has no frequencies")
    if np.any(xi <= 0):
        raise ValueError("amplitudes xi must be positive")
    return omega_bar(sites) + eps ** 2 * twist_matrix(sites, sign, mass_variant) @ xi


def xi_of_omega(sites, sign, eps, omega, mass_variant=False):
    if sites.nu == 0:
        raise ValueError("nu = 0 has no frequencies")
    return twist_inverse(sites, sign, mass_variant) @ (np.asarray(omega, float) - omega_bar(sites)) / eps ** 2


# ---------------------------------------------------------------- embeddings


def _sym(c):
    axes = tuple(range(c.ndim - 1))
    mirrored = c[tuple(slice(None, None, -1) for _ in axes)]
    return mirrored


@dataclass(frozen=True, eq=False)
class TorusEmbedding:
    """Periodic parts (Theta, y, z) of phi -> (phi + Theta, y, z) and zeta.

    theta, y: coefficients of shape (2N_phi+1,)*nu + (nu,)
    z:        coefficients of shape (2N_phi+1,)*nu + (2N_x+1,)"""

    theta: np.ndarray
    y: np.ndarray
    z: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        for name in ("theta", "y", "z", "zeta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=complex
                                                        if name != "zeta" else float))

    @property
    def nu(self):
        return self.theta.shape[-1]

    @property
    def box(self):
        return (self.theta.shape[0] - 1) // 2, (self.z.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, nu, box):
        n_phi, nx = box
        lead = (2 * n_phi + 1,) * nu
        return cls(np.zeros(lead + (nu,)), np.zeros(lead + (nu,)),
                   np.zeros(lead + (2 * nx + 1,)), np.zeros(nu))

    def replace(self, **kw):
        data = dict(theta=self.theta, y=self.y, z=self.z, zeta=self.zeta)
        data.update(kw)
        return TorusEmbedding(**data)

    def __add__(self, o):
        return TorusEmbedding(self.theta + o.theta, self.y + o.y, self.z + o.z, self.zeta + o.zeta)

    def __sub__(self, o):
        return TorusEmbedding(self.theta - o.theta, self.y - o.y, self.z - o.z, self.zeta - o.zeta)

    def scale(self, c):
        return TorusEmbedding(self.theta * c, self.y * c, self.z * c, self.zeta * c)

    def _weights(self, s):
        n_phi, nx = self.box
        ls = lattice(self.nu, n_phi)
        lw = bracket(*ls.T).reshape((2 * n_phi + 1,) * self.nu) ** s
        grids = np.meshgrid(*([centred(n_phi)] * self.nu), centred(nx), indexing="ij")
        zw = bracket(*grids) ** s
        return lw, zw

    def norm(self, s, with_zeta=False):
        lw, zw = self._weights(s)
        tot = np.sum((lw[..., None] ** 2) * (np.abs(self.theta) ** 2 + np.abs(self.y) ** 2))
        tot += np.sum(zw ** 2 * np.abs(self.z) ** 2)
        if with_zeta:
            tot += np.sum(self.zeta ** 2)
        return float(np.sqrt(tot))

    def reality_defect(self):
        out = 0.0
        for c in (self.theta, self.y):
            out = max(out, float(np.abs(c - np.conj(_sym(c))).max(initial=0.0)))
        zc = self.z[(slice(None, None, -1),) * self.z.ndim]
        return max(out, float(np.abs(self.z - np.conj(zc)).max(initial=0.0)))

    def realified(self):
        def fix(c, full=False):
            m = c[(slice(None, None, -1),) * c.ndim] if full else _sym(c)
            return 0.5 * (c + np.conj(m))
        return TorusEmbedding(fix(self.theta), fix(self.y), fix(self.z, True), self.zeta)

    def to_json(self):
        def rows(c, full):
            out = []
            n_phi = self.box[0]
            for idx in zip(*np.nonzero(c)):
                l = [int(i) - n_phi for i in idx[:self.nu]]
                k = int(idx[-1]) - (self.box[1] if full else 0)
                out.append([*l, k, c[idx].real, c[idx].imag])
            return out
        return json.dumps({"nu": self.nu, "box": list(self.box), "theta": rows(self.theta, False),
                           "y": rows(self.y, False), "z": rows(self.z, True),
                           "zeta": self.zeta.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        nu, box = int(d["nu"]), tuple(d["box"])
        e = cls.zeros(nu, box)
        arrays = {"theta": e.theta.copy(), "y": e.y.copy(), "z": e.z.copy()}
        for name, arr in arrays.items():
            off = box[1] if name == "z" else 0
            for r in d[name]:
                idx = tuple(int(x) + box[0] for x in r[:nu]) + (int(r[nu]) + off,)
                arr[idx] = complex(r[nu + 1], r[nu + 2])
        out = cls(arrays["theta"], arrays["y"], arrays["z"], np.asarray(d["zeta"], float))
        if out.reality_defect() > 1e-12:
            raise ValueError("embedding violates the reality condition")
        return out


# ---------------------------------------------------------------- angle grid


class AngleGrid:
    """Uniform grid on T^nu and the matching truncated Fourier transforms."""

    def __init__(self, nu, n_phi, m=None):
        self.nu = nu
        self.n_phi = n_phi
        self.m = next_fast_len(4 * n_phi + 2) if m is None else m
        self.shape = (self.m,) * nu
        self.size = self.m ** nu
        self.lat = lattice(nu, n_phi)
        axes = np.meshgrid(*([2 * np.pi * np.arange(self.m) / self.m] * nu), indexing="ij")
        self.points = np.stack([a.ravel() for a in axes], axis=-1)

    def values(self, c):
        """Coefficients (2n+1,)*nu + rest -> samples (P,) + rest."""
        rest = c.shape[self.nu:]
        moved = np.moveaxis(c, tuple(range(self.nu)), tuple(range(c.ndim - self.nu, c.ndim)))
        g = to_grid(moved, self.shape)
        g = np.moveaxis(g, tuple(range(g.ndim - self.nu, g.ndim)), tuple(range(self.nu)))
        return g.reshape((self.size,) + rest)

    def coeffs(self, v, n=None):
        """Samples (P,) + rest -> coefficients |l|_inf <= n."""
        n = self.n_phi if n is None else n
        rest = v.shape[1:]
        g = v.reshape(self.shape + rest)
        moved = np.moveaxis(g, tuple(range(self.nu)), tuple(range(g.ndim - self.nu, g.ndim)))
        c = from_grid(moved, [n] * self.nu)
        return np.moveaxis(c, tuple(range(c.ndim - self.nu, c.ndim)), tuple(range(self.nu)))

    def omega_l(self, omega, n=None):
        n = self.n_phi if n is None else n
        lat = lattice(self.nu, n)
        return (lat @ np.asarray(omega, float)).reshape((2 * n + 1,) * self.nu)

    def d_omega(self, c, omega):
        ol = self.omega_l(omega, (c.shape[0] - 1) // 2)
        return c * (1j * ol).reshape(ol.shape + (1,) * (c.ndim - self.nu))

    def d_omega_inv(self, c, omega, tol=1e-9, atol=1e-14):
        n = (c.shape[0] - 1) // 2
        ol = self.omega_l(omega, n)
        zero = (n,) * self.nu
        scale = np.abs(c).max(initial=0.0)
        if np.abs(c[zero]).max(initial=0.0) > max(tol * scale, atol):
            raise ValueError("(omega . d_phi)^{-1} applied to data with nonzero average")
        inv = np.zeros_like(ol, dtype=complex)
        nz = ol != 0
        inv[nz] = 1 / (1j * ol[nz])
        inv[zero] = 0.0
        return c * inv.reshape(inv.shape + (1,) * (c.ndim - self.nu))

    def gradient(self, c):
        """d_phi_k of coefficient arrays: extra trailing axis k."""
        n = (c.shape[0] - 1) // 2
        lat = lattice(self.nu, n).reshape((2 * n + 1,) * self.nu + (self.nu,))
        lat = lat.reshape(lat.shape[:self.nu] + (1,) * (c.ndim - self.nu) + (self.nu,))
        return c[..., None] * 1j * lat

    def mean(self, v):
        return v.mean(axis=0)

    def smallest_divisor(self, omega):
        ol = np.abs(self.lat @ np.asarray(omega, float))
        w = bracket(*self.lat.T)
        nz = np.any(self.lat != 0, axis=1)
        return ol[nz], w[nz], self.lat[nz]


# ---------------------------------------------------------------- the system


class TorusSystem:
    """H_eps = eps^{-2b} (H o Phi_B) o A_eps on a truncated phase space."""

    def __init__(self, model, params, omega, grid=None):
        self.model = model
        self.params = params
        self.sites = model.sites
        self.nu = self.sites.nu
        params.check_tau(self.nu)
        self.omega = np.atleast_1d(np.asarray(omega, dtype=float))
        if self.omega.shape != (self.nu,):
            raise ValueError("frequency vector has the wrong dimension")
        self.xi = xi_of_omega(self.sites, model.sign, params.eps, self.omega, model.mass_variant)
        if np.any(self.xi <= 0):
            raise ValueError(f"omega outside the amplitude domain: xi = {self.xi}")
        self.gen = build_generator(self.sites, model.sign)
        self.n = params.n_x
        if self.n < self.gen.cutoff:
            raise ValueError("x truncation must contain the Birkhoff space E")
        self.grid = grid or AngleGrid(self.nu, params.n_phi)
        self.jn = self.sites.normal_modes(self.n)
        self.jidx = self.jn + self.n
        self.splus = np.asarray(self.sites.plus)
        self.eidx = np.array([j + self.n for j in self.gen.modes])

    # -- embedding ------------------------------------------------------

    @property
    def eps(self):
        return self.params.eps

    @property
    def b(self):
        return self.params.b

    def radii2(self, y):
        return self.xi + self.eps ** (2 * self.b - 2) * self.splus * y

    def lift(self, theta, y, zc):
        """U = A_eps(theta, y, z) for batched real theta, y and centred z."""
        r2 = self.radii2(y)
        if np.any(r2 <= 0):
            bad = self.splus[np.nonzero(np.any(np.atleast_2d(r2) <= 0, axis=0))[0]]
            raise ValueError(f"negative radicand at tangential sites {bad.tolist()}")
        u = self.eps ** self.b * np.asarray(zc, dtype=complex).copy()
        u[..., self.n + self.splus] = self.eps * np.sqrt(r2) * np.exp(1j * theta)
        u[..., self.n - self.splus] = self.eps * np.sqrt(r2) * np.exp(-1j * theta)
        return u

    def trivial(self):
        return TorusEmbedding.zeros(self.nu, (self.params.n_phi, self.n))

    def on_grid(self, emb):
        g = self.grid
        theta = g.points + g.values(emb.theta).real
        y = g.values(emb.y).real
        zc = g.values(emb.z)
        return theta, y, zc

    # -- derivatives ----------------------------------------------------

    def _pull_gradient(self, gh, jac):
        gb = gh.copy()
        ge = gh[:, self.eidx]
        gb[:, self.eidx] = np.einsum("zba,zb->za", jac, ge[:, ::-1])[:, ::-1]
        return gb

    def value(self, theta, y, zc):
        u = self.lift(theta, y, zc)
        return self.eps ** (-2 * self.b) * ham.value(self.model, bnf_map(self.gen, u))

    def first_derivatives(self, theta, y, zc):
        """(dH/dy, dH/dtheta, grad_z H) at batched points."""
        u = self.lift(theta, y, zc)
        w, jac = bnf_map(self.gen, u, order=1)
        gb = self._pull_gradient(ham.gradient(self.model, w), jac)
        return self._chain_first(u, y, gb)

    def _chain_first(self, u, y, gb):
        e, b = self.eps, self.b
        q = gb[:, self.n + self.splus] * u[:, self.n - self.splus]
        c = e ** (2 * b - 2) * self.splus / (2 * self.radii2(y))
        dy = e ** (-2 * b) * 2 * c * q.real
        dth = e ** (-2 * b) * 2 * q.imag
        gz = np.zeros_like(gb)
        gz[:, self.jidx] = e ** (-b) * gb[:, self.jidx]
        return dy, dth, gz

    def second_derivatives(self, theta, y, zc, n_out=None):
        """Symmetric bilinear matrices of H_eps in (theta, y, z_J) per point.

        With n_out > n the z-block is extended to the larger normal set
        (the torus itself stays on |j| <= n)."""
        n_out = self.n if n_out is None else n_out
        e, b, n = self.eps, self.b, self.n
        u = self.lift(theta, y, zc)
        w, jac, kk = bnf_map(self.gen, u, order=2)
        gh = ham.gradient(self.model, w)
        gb = self._pull_gradient(gh, jac)
        dy, dth, gz = self._chain_first(u, y, gb)
        wide = ham._resize(w, n_out)
        hmat = ham.hessian(self.model, wide, n_out=n_out)
        sb = hmat[:, ::-1, :]
        eo = np.array([j + n_out for j in self.gen.modes])
        # S_b = J^T S_H J + G2 on the E block
        cols = sb[:, :, eo]
        sb = sb.copy()
        sb[:, :, eo] = np.einsum("zab,zbc->zac", cols, jac)
        rows = sb[:, eo, :]
        sb[:, eo, :] = np.einsum("zba,zbc->zac", jac, rows)
        ge = gh[:, self.eidx]
        g2 = np.einsum("za,zabc->zbc", ge, kk[:, ::-1])
        sb[np.ix_(range(sb.shape[0]), eo, eo)] += g2
        # tangent vectors of the embedding
        nu = self.nu
        jn = self.sites.normal_modes(n_out)
        jo = jn + n_out
        c = e ** (2 * b - 2) * self.splus / (2 * self.radii2(y))
        pts = u.shape[0]
        tang = np.zeros((pts, 2 * n_out + 1, 2 * nu), dtype=complex)
        for i, j in enumerate(self.splus):
            up, um = u[:, n + j], u[:, n - j]
            tang[:, n_out + j, i] = 1j * up
            tang[:, n_out - j, i] = -1j * um
            tang[:, n_out + j, nu + i] = c[:, i] * up
            tang[:, n_out - j, nu + i] = c[:, i] * um
        dim = 2 * nu + len(jn)
        s = np.zeros((pts, dim, dim), dtype=complex)
        tt = np.einsum("zab,zbc->zac", sb, tang)
        s[:, :2 * nu, :2 * nu] = np.einsum("zba,zbc->zac", tang, tt)
        s[:, :2 * nu, 2 * nu:] = e ** b * np.einsum("zba,zbc->zac", tang, sb[:, :, jo])
        s[:, 2 * nu:, :2 * nu] = np.transpose(s[:, :2 * nu, 2 * nu:], (0, 2, 1))
        s[:, 2 * nu:, 2 * nu:] = e ** (2 * b) * sb[:, jo][:, :, jo]
        q = gb[:, n + self.splus] * u[:, n - self.splus]
        for i in range(nu):
            s[:, i, i] += -2 * q[:, i].real
            s[:, i, nu + i] += 2 * c[:, i] * q[:, i].imag
            s[:, nu + i, i] += 2 * c[:, i] * q[:, i].imag
            s[:, nu + i, nu + i] += -2 * c[:, i] ** 2 * q[:, i].real
        s *= e ** (-2 * b)
        return s, (dy, dth, gz)

    # -- functional -----------------------------------------------------

    def vector_field_grid(self, emb):
        theta, y, zc = self.on_grid(emb)
        dy, dth, gz = self.first_derivatives(theta, y, zc)
        return dy, -dth, 1j * centred(self.n) * gz

    def residual(self, emb):
        """F(i, zeta) = D_omega i - X_{H_eps}(i) + (0, zeta, 0)."""
        g = self.grid
        xt, xy, xz = self.vector_field_grid(emb)
        om = self.omega
        r_theta = g.d_omega(emb.theta, om) - g.coeffs(xt)
        r_theta[(self.params.n_phi,) * self.nu] += om
        r_y = g.d_omega(emb.y, om) - g.coeffs(xy)
        r_y[(self.params.n_phi,) * self.nu] += emb.zeta
        r_z = g.d_omega(emb.z, om) - g.coeffs(xz)
        mask = np.zeros(2 * self.n + 1, bool)
        mask[self.jidx] = True
        r_z = r_z * mask
        out = TorusEmbedding(r_theta, r_y, r_z, np.zeros(self.nu))
        return out.realified()

    def linear_blocks(self, emb, n_out=None):
        theta, y, zc = self.on_grid(emb)
        return self.second_derivatives(theta, y, zc, n_out)

    def linearized_field(self, smat, n_out=None):
        """A(phi) with D X_{H_eps}[delta] = A delta in (theta, y, z_J) coordinates."""
        n_out = self.n if n_out is None else n_out
        nu = self.nu
        jn = self.sites.normal_modes(n_out)
        a = np.empty_like(smat)
        a[:, :nu] = smat[:, nu:2 * nu]
        a[:, nu:2 * nu] = -smat[:, :nu]
        # flip within the symmetric normal set, then multiply by i j
        zrows = smat[:, 2 * nu:][:, ::-1]
        a[:, 2 * nu:] = (1j * jn)[None, :, None] * zrows
        return a

    def apply_linearization(self, smat, delta):
        """d_{i,zeta} F [delta] for an embedding-shaped increment."""
        g = self.grid
        nu = self.nu
        a = self.linearized_field(smat)
        vals = np.concatenate([g.values(delta.theta), g.values(delta.y),
                               g.values(delta.z)[:, self.jidx]], axis=1)
        av = np.einsum("zab,zb->za", a, vals)
        om = self.omega
        r_theta = g.d_omega(delta.theta, om) - g.coeffs(av[:, :nu])
        r_y = g.d_omega(delta.y, om) - g.coeffs(av[:, nu:2 * nu])
        r_y[(self.params.n_phi,) * nu] += delta.zeta
        rz = np.zeros(delta.z.shape, dtype=complex)
        rz[..., self.jidx] = g.coeffs(av[:, 2 * nu:])
        r_z = g.d_omega(delta.z, om) - rz
        return TorusEmbedding(r_theta, r_y, r_z, np.zeros(nu))

    # -- split ----------------------------------------------------------

    def constant_e(self):
        e, b, s = self.eps, self.b, self.model.sign
        xi, js = self.xi, self.splus
        quart = 0.75 * s * (2 * np.sum(xi ** 2) - 4 * np.sum(xi) ** 2) + self.model.lam * 4 * np.sum(xi) ** 2
        return e ** (-2 * b) * (e ** 2 * np.sum(js ** 2 * xi) + e ** 4 * quart)

    def normal_part(self, theta, y, zc):
        """N = alpha(xi) . y + (1/2)(N(theta) z, z)."""
        e, s = self.eps, self.model.sign
        alpha = freq_amp(self.sites, s, e, self.xi, self.model.mass_variant)
        m = ham.grid_size(self.model, self.n)
        v = np.zeros_like(zc)
        r = np.sqrt(self.xi)
        v[..., self.n + self.splus] = r * np.exp(1j * theta)
        v[..., self.n - self.splus] = r * np.exp(-1j * theta)
        vg = to_grid(v, [m]).real
        zg = to_grid(zc, [m]).real
        js = centred(self.n)
        kin = 0.5 * np.sum(js ** 2 * np.abs(zc) ** 2, axis=-1)
        pot = -1.5 * s * e ** 2 * np.mean(vg ** 2 * zg ** 2, axis=-1)
        if self.model.lam:
            pot = pot + 2 * self.model.lam * e ** 2 * np.mean(vg ** 2, axis=-1) * np.mean(zg ** 2, axis=-1)
        return np.sum(alpha * y, axis=-1) + kin + pot


def embed_A_eps(params, sites, xi, theta, y, z):
    """A_eps(theta, y, z) as an x-only field; z is an x-only normal field."""
    theta, y, xi = (np.atleast_1d(np.asarray(v, float)) for v in (theta, y, xi))
    n = z.box[1]
    js = np.asarray(sites.plus)
    r2 = xi + params.eps ** (2 * params.b - 2) * js * y
    if np.any(r2 <= 0):
        raise ValueError(f"negative radicand at tangential sites {js[r2 <= 0].tolist()}")
    if np.any(sites.in_s(centred(n)) & (np.abs(z.coeffs) > 0)):
        raise ValueError("z must not carry tangential modes")
    u = params.eps ** params.b * z.coeffs.copy()
    u[n + js] = params.eps * np.sqrt(r2) * np.exp(1j * theta)
    u[n - js] = params.eps * np.sqrt(r2) * np.exp(-1j * theta)
    return TorusField(0, u)


def split_N_P(model, params, theta, y, z, omega):
    """(N, P) at one point (theta, y, z) of phase space; e(xi) is dropped."""
    system = TorusSystem(model, params, omega)
    th = np.atleast_2d(np.asarray(theta, float))
    yy = np.atleast_2d(np.asarray(y, float))
    zc = ham._resize(z.coeffs, system.n)[None]
    h = system.value(th, yy, zc)[0]
    nval = system.normal_part(th, yy, zc)[0]
    return float(nval), float(h - nval - system.constant_e())


def F_operator(model, params, i, omega):
    return TorusSystem(model, params, omega).residual(i)
