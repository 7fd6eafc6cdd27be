"""mKdV Hamiltonian with a polynomial quasi-linear density.

    H(u) = int u_x^2/2 - (sign/4) int u^4 + int f(x, u, u_x) + lam * M(u)^2

Public functions act on x-only TorusFields and use the plain integral over
[0, 2pi].  The array helpers below (``density_terms``, ``gradient``,
``hessian`` and friends) work on batches of centred coefficient vectors and
take ``normalized=True`` to use the mean (1/2pi) int instead; the torus and
normal-form layers run in that normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .fourier import TorusField, centred, from_grid, grid_points, to_grid
from .sites import SiteSet

TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class Monomial:
    c: float
    kind: str = "const"
    m: int = 0
    p: int = 5
    q: int = 0

    def __post_init__(self):
        if self.kind not in ("cos", "sin", "const"):
            raise ValueError(f"unknown harmonic kind {self.kind!r}")
        if self.p < 0 or self.q < 0 or int(self.p) != self.p or int(self.q) != self.q:
            raise ValueError("powers must be nonnegative integers")
        if self.p + self.q < 5:
            raise ValueError(f"monomial u^{self.p} u_x^{self.q} has order below five")
        if not np.isfinite(self.c):
            raise ValueError("coefficient must be finite")

    def harmonic(self, x):
        if self.kind == "cos":
            return np.cos(self.m * x)
        if self.kind == "sin":
            return np.sin(self.m * x)
        return np.ones_like(x)


def _falling(n, k):
    out = 1
    for i in range(k):
        out *= n - i
    return out


def _power(base, n):
    if n < 0:
        return np.zeros_like(base)
    return base ** n


@dataclass(frozen=True)
class PolynomialDensity:
    monomials: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "monomials", tuple(self.monomials))

    @classmethod
    def from_records(cls, records):
        return cls(tuple(Monomial(float(r["c"]), r.get("kind", "const"), int(r.get("m", 0)),
                                  int(r["p"]), int(r["q"])) for r in records))

    @property
    def degree(self):
        return max((mo.p + mo.q for mo in self.monomials), default=0)

    @property
    def x_dependent(self):
        return any(mo.kind != "const" and mo.m != 0 for mo in self.monomials)

    @property
    def max_harmonic(self):
        return max((mo.m for mo in self.monomials if mo.kind != "const"), default=0)

    def derivative(self, x, u, ux, du=0, dux=0):
        """d^{du}_u d^{dux}_{u_x} f evaluated pointwise."""
        out = np.zeros(np.broadcast(x, u).shape)
        for mo in self.monomials:
            k = _falling(mo.p, du) * _falling(mo.q, dux)
            if k == 0:
                continue
            out = out + mo.c * k * mo.harmonic(x) * _power(u, mo.p - du) * _power(ux, mo.q - dux)
        return out

    def scaled(self, factor):
        return PolynomialDensity(tuple(Monomial(mo.c * factor, mo.kind, mo.m, mo.p, mo.q)
                                       for mo in self.monomials))


@dataclass(frozen=True)
class Model:
    sign: int = 1
    density: PolynomialDensity = field(default_factory=PolynomialDensity)
    lam: float = 0.0
    sites: SiteSet = field(default_factory=lambda: SiteSet((1,)))

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.lam not in (0.0, 0.75 * self.sign):
            raise ValueError("lam must be 0 or 3*sign/4")

    @property
    def mass_variant(self):
        return self.lam != 0.0

    def without_density(self):
        return Model(self.sign, PolynomialDensity(), self.lam, self.sites)

    @property
    def degree(self):
        return max(4, self.density.degree)


def grid_size(model, n):
    """Collocation size that resolves every product met in values, gradients
    and Hessians for modes |j| <= n without aliasing."""
    return next_fast_len((model.degree + 1) * n + 1)


def _fields(u_coeffs, m):
    n = (u_coeffs.shape[-1] - 1) // 2
    js = centred(n)
    u = to_grid(u_coeffs, [m]).real
    ux = to_grid(u_coeffs * 1j * js, [m]).real
    return u, ux


def density_terms(model, u_coeffs, m=None):
    """Grid samples (x, u, u_x) for batched coefficient vectors."""
    n = (u_coeffs.shape[-1] - 1) // 2
    m = grid_size(model, n) if m is None else m
    x = grid_points(m)
    u, ux = _fields(u_coeffs, m)
    return x, u, ux


def value(model, u_coeffs, normalized=True):
    x, u, ux = density_terms(model, u_coeffs)
    dens = 0.5 * ux ** 2 - 0.25 * model.sign * u ** 4 + model.density.derivative(x, u, ux)
    mean = dens.mean(axis=-1)
    mass_mean = (u ** 2).mean(axis=-1)
    if normalized:
        return mean + model.lam * mass_mean ** 2
    return TWO_PI * mean + model.lam * (TWO_PI * mass_mean) ** 2


def gradient(model, u_coeffs, normalized=True, n_out=None):
    """Coefficients of the L^2 gradient (with pi_0 applied) on |j| <= n_out."""
    n = (u_coeffs.shape[-1] - 1) // 2
    n_out = n if n_out is None else n_out
    m = next_fast_len((model.degree + 1) * max(n, n_out) + 1)
    x, u, ux = density_terms(model, u_coeffs, m)
    dens = model.density
    nonlocal_part = -model.sign * u ** 3 + dens.derivative(x, u, ux, du=1)
    flux = ux + dens.derivative(x, u, ux, dux=1)
    js = centred(n_out)
    g = from_grid(nonlocal_part, [n_out]) - 1j * js * from_grid(flux, [n_out])
    mass_mean = (u ** 2).mean(axis=-1)
    weight = mass_mean if normalized else TWO_PI * mass_mean
    g = g + 4 * model.lam * weight[..., None] * _resize(u_coeffs, n_out)
    g[..., n_out] = 0.0
    return g


def _resize(c, n_new):
    n = (c.shape[-1] - 1) // 2
    if n_new == n:
        return c
    out = np.zeros(c.shape[:-1] + (2 * n_new + 1,), dtype=complex)
    k = min(n, n_new)
    out[..., n_new - k:n_new + k + 1] = c[..., n - k:n + k + 1]
    return out


def toeplitz(c, n):
    """Matrix of h -> (c h) on modes |j| <= n from coefficients c_k, |k| <= 2n."""
    nc = (c.shape[-1] - 1) // 2
    js = centred(n)
    d = js[:, None] - js[None, :]
    return c[..., d + nc]


def hessian(model, u_coeffs, n_out=None, normalized=True):
    """Matrix H with delta(grad)_j = sum_k H_jk delta u_k on |j|,|k| <= n_out.

    Rows and columns of the zero mode vanish (pi_0)."""
    n = (u_coeffs.shape[-1] - 1) // 2
    n_out = n if n_out is None else n_out
    m = next_fast_len((model.degree + 1) * max(n, n_out) + 2 * n_out + 1)
    x, u, ux = density_terms(model, u_coeffs, m)
    dens = model.density
    js = centred(n_out)
    dmat = 1j * js
    quad = -3 * model.sign * u ** 2 + dens.derivative(x, u, ux, du=2)
    mixed = dens.derivative(x, u, ux, du=1, dux=1)
    top = dens.derivative(x, u, ux, dux=2)
    h = toeplitz(from_grid(quad, [2 * n_out]), n_out)
    if dens.monomials:
        tm = toeplitz(from_grid(mixed, [2 * n_out]), n_out)
        tt = toeplitz(from_grid(top, [2 * n_out]), n_out)
        h = h + tm * dmat[None, :] - dmat[:, None] * tm - dmat[:, None] * tt * dmat[None, :]
    h = h + np.diag(js.astype(float) ** 2)
    if model.lam:
        uc = _resize(u_coeffs, n_out)
        mass_mean = (u ** 2).mean(axis=-1)
        scale = 1.0 if normalized else TWO_PI
        h = h + 4 * model.lam * scale * mass_mean[..., None, None] * np.eye(2 * n_out + 1)
        h = h + 8 * model.lam * scale * uc[..., :, None] * uc[..., None, ::-1]
    h[..., n_out, :] = 0.0
    h[..., :, n_out] = 0.0
    return h


# ---------------------------------------------------------------- public API


def _xonly(u):
    if u.nu != 0:
        raise ValueError("expected an x-only field (nu = 0)")
    return u.coeffs


def eval_H(model, u):
    return float(value(model, _xonly(u), normalized=False))


def grad_H(model, u):
    return TorusField(0, gradient(model, _xonly(u), normalized=False))


def vector_field_X(model, u):
    g = grad_H(model, u)
    _, n = u.box
    return TorusField(0, g.coeffs * 1j * centred(n))


def poisson_bracket(F_grad, G_grad, u):
    """{F, G}(u) = int grad F d_x grad G dx for gradient callables."""
    a = F_grad(u).coeffs
    b = G_grad(u).coeffs
    n = (a.shape[-1] - 1) // 2
    return float((TWO_PI * np.sum(a[::-1] * 1j * centred(n) * b)).real)


def symplectic_form(u, v):
    """Omega(u, v) = int (d_x^{-1} u) v dx."""
    a, b = _xonly(u), _xonly(v)
    n = (a.shape[-1] - 1) // 2
    js = centred(n)
    inv = np.zeros(2 * n + 1, dtype=complex)
    inv[js != 0] = 1 / (1j * js[js != 0])
    return float((TWO_PI * np.sum(a * inv * b[::-1])).real)


def mass(u):
    c = _xonly(u)
    return float(TWO_PI * np.sum(np.abs(c) ** 2))


def N4(model, u):
    """Quasi-linear part of the vector field: -d_x[f_u - d_x f_{u_x}]."""
    c = _xonly(u)
    n = (c.shape[-1] - 1) // 2
    x, uu, ux = density_terms(model, c)
    js = centred(n)
    inner = from_grid(model.density.derivative(x, uu, ux, du=1), [n]) \
        - 1j * js * from_grid(model.density.derivative(x, uu, ux, dux=1), [n])
    out = -1j * js * inner
    out[n] = 0.0
    return TorusField(0, out)
