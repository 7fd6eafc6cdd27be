"""Diagonalization of omega . d_phi + diag(mu) + R(phi) by a quadratic scheme.

Operators are per-angle matrices on an odd uniform grid.  Each step solves

    omega . d_phi W + [diag(mu), W] = -Pi_N R_off,

conjugates by exp(W) and moves the time average of the new diagonal into mu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fourier import bracket, decay_norm, from_grid, lattice, to_grid

__all__ = [
    "PhaseSpace", "ReducibilityState", "MelnikovViolation", "SmallnessFailure",
    "scale_sequence", "default_n0", "kam_step", "reduce_to_constant",
    "melnikov_membership", "invert_L_omega", "floquet_evolve", "fit_m3_m1",
    "tame_constant",
]


class MelnikovViolation(ArithmeticError):
    def __init__(self, witnesses):
        self.witnesses = witnesses
        l, j, k, div, bound = witnesses[0]
        super().__init__(f"divisor {div:.3g} below {bound:.3g} at l={l}, j={j}, k={k}")


class SmallnessFailure(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class PhaseSpace:
    """Odd angle grid of size (2 n_t + 1)^nu and a symmetric normal mode set."""

    nu: int
    n_t: int
    omega: np.ndarray
    modes: np.ndarray

    @classmethod
    def from_frame(cls, frame):
        return cls(frame.nu, frame.n_t, np.asarray(frame.omega, float), frame.modes)

    @property
    def m(self):
        return 2 * self.n_t + 1

    @property
    def shape(self):
        return (self.m,) * self.nu

    @property
    def size(self):
        return self.m ** self.nu

    @property
    def lat(self):
        return lattice(self.nu, self.n_t)

    @property
    def ol(self):
        return self.lat @ self.omega

    def fourier(self, v):
        """Grid (P, ...) -> coefficients (L, ...) in lattice order."""
        g = v.reshape(self.shape + v.shape[1:])
        moved = np.moveaxis(g, tuple(range(self.nu)), tuple(range(g.ndim - self.nu, g.ndim)))
        c = from_grid(moved, [self.n_t] * self.nu)
        c = np.moveaxis(c, tuple(range(c.ndim - self.nu, c.ndim)), tuple(range(self.nu)))
        return c.reshape((len(self.lat),) + v.shape[1:])

    def values(self, c):
        g = c.reshape((self.m,) * self.nu + c.shape[1:])
        moved = np.moveaxis(g, tuple(range(self.nu)), tuple(range(g.ndim - self.nu, g.ndim)))
        out = to_grid(moved, self.shape)
        out = np.moveaxis(out, tuple(range(out.ndim - self.nu, out.ndim)), tuple(range(self.nu)))
        return out.reshape((self.size,) + c.shape[1:])

    def decay_norm(self, R, s):
        return decay_norm(_Entries(self.nu, self.modes, self.fourier(R).reshape(
            self.shape + R.shape[1:])), s)


@dataclass(frozen=True)
class _Entries:
    nu: int
    modes: np.ndarray
    entries: np.ndarray

    @property
    def l_range(self):
        return (self.entries.shape[0] - 1) // 2


def scale_sequence(n0, chi=1.5, steps=20):
    return [n0 ** (chi ** n) for n in range(steps)]


def default_n0(eps, gamma, a, c1=20.0):
    """N_0 = (eps^4 gamma^-3)^rho with rho at half its admissible bound."""
    rho = 0.5 * (1 - 3 * a) / (c1 * (2 + 3 * a))
    return max((eps ** 4 / gamma ** 3) ** rho, 1.0 + 1e-3)


@dataclass(eq=False)
class ReducibilityState:
    n: int
    scale: float
    mu: np.ndarray
    R: np.ndarray
    transform: np.ndarray
    history: list = field(default_factory=list)

    def off_norm(self, space, s):
        return space.decay_norm(self.R, s)


def _ad_series(R, W, tol=1e-16, shift=0):
    """sum_{k>=1} ad_W^k(R) / (k + shift)! with ad_W(Y) = Y W - W Y."""
    out = np.zeros_like(R)
    term = R
    scale = max(np.abs(R).max(), 1e-300)
    for k in range(1, 200):
        term = term @ W - W @ term
        add = term / math.factorial(k + shift)
        out = out + add
        if np.abs(add).max() < tol * scale:
            return out
    raise ArithmeticError("commutator series did not converge")


def _exp(W, tol=1e-16):
    out = np.broadcast_to(np.eye(W.shape[-1]), W.shape).astype(complex)
    term = out.copy()
    for k in range(1, 200):
        term = term @ W / k
        out = out + term
        if np.abs(term).max() < tol:
            return out
    raise ArithmeticError("exponential series did not converge")


def _divisors(space, mu):
    return 1j * space.ol[:, None, None] + mu[None, :, None] - mu[None, None, :]


def _cells(space, n_scale):
    lat = space.lat
    d = space.modes[:, None] - space.modes[None, :]
    lwin = np.abs(lat).max(axis=1) <= n_scale if space.nu else np.ones(1, bool)
    win = lwin[:, None, None] & (np.abs(d) <= n_scale)[None]
    zero = np.all(lat == 0, axis=1)
    win[zero] &= ~np.eye(len(space.modes), dtype=bool)
    return win


def _check_divisors(space, div, win, gamma, tau):
    j = space.modes
    cubes = np.abs(j[:, None] ** 3 - j[None, :] ** 3).astype(float)
    weight = bracket(*space.lat.T) ** (-tau)
    bound = gamma * cubes[None] * weight[:, None, None]
    same = np.eye(len(j), dtype=bool)[None]
    bound = np.where(same, gamma * weight[:, None, None], bound)
    bad = win & (np.abs(div) < bound)
    if np.any(bad):
        idx = np.argwhere(bad)[:8]
        wit = [(space.lat[a].tolist(), int(j[b]), int(j[c]), float(abs(div[a, b, c])),
                float(bound[a, b, c])) for a, b, c in idx]
        raise MelnikovViolation(wit)


def kam_step(space, state, gamma, tau, s=None, chi=1.5, threshold=np.inf, c0=1.0):
    s = (space.nu + 2) / 2 if s is None else s
    before = space.decay_norm(state.R, s)
    product = state.scale ** c0 * before / gamma
    if product > threshold:
        raise SmallnessFailure(f"N^C0 |R| / gamma = {product:.3g} exceeds {threshold:.3g}")
    rc = space.fourier(state.R)
    win = _cells(space, state.scale)
    div = _divisors(space, state.mu)
    _check_divisors(space, div, win, gamma, tau)
    qc = np.where(win, rc, 0.0)
    wc = np.zeros_like(qc)
    wc[win] = -qc[win] / div[win]
    Q = space.values(qc)
    W = space.values(wc)
    R = state.R - Q + _ad_series(state.R, W) - _ad_series(Q, W, shift=1)
    absorbed = np.einsum("pjj->j", R) / space.size
    R[:, np.arange(len(space.modes)), np.arange(len(space.modes))] -= absorbed[None]
    mu = state.mu + absorbed
    transform = state.transform @ _exp(W)
    after = space.decay_norm(R, s)
    record = {"n": state.n, "scale": state.scale, "before": before, "after": after,
              "W": space.decay_norm(W, s), "log_product": math.log(max(product, 1e-300))}
    return ReducibilityState(state.n + 1, state.scale ** chi, mu, R, transform,
                             state.history + [record])


def _initial_state(space, delta, X, n0):
    R = np.array(X, dtype=complex)
    absorbed = np.einsum("pjj->j", R) / space.size
    idx = np.arange(len(space.modes))
    R[:, idx, idx] -= absorbed[None]
    eye = np.broadcast_to(np.eye(len(space.modes)), R.shape).astype(complex)
    return ReducibilityState(0, n0, np.asarray(delta, complex) + absorbed, R, eye.copy())


def reduce_to_constant(space, delta, X, gamma, tau, n0, tol=1e-8, max_steps=40,
                       chi=1.5, threshold=np.inf, c0=1.0, s=None):
    """Iterate kam_step until the off-diagonal s-decay norm is below tol."""
    s = (space.nu + 2) / 2 if s is None else s
    state = _initial_state(space, delta, X, n0)
    for _ in range(max_steps):
        if space.decay_norm(state.R, s) <= tol:
            return state
        state = kam_step(space, state, gamma, tau, s, chi, threshold, c0)
    if space.decay_norm(state.R, s) <= tol:
        return state
    raise ArithmeticError(f"reducibility did not converge in {max_steps} steps")


def fit_m3_m1(modes, mu):
    """Least-squares (m3, m1) with Im mu_j ~ -m3 j^3 + m1 j."""
    j = np.asarray(modes, float)
    a = np.stack([-j ** 3, j], axis=1)
    sol, *_ = np.linalg.lstsq(a, np.asarray(mu).imag, rcond=None)
    return float(sol[0]), float(sol[1])


# ---------------------------------------------------------------- Melnikov


def melnikov_membership(omega, modes, mu, gamma, tau, l_range, order="second"):
    """Check |i omega.l + mu_j - mu_k| >= 2 gamma |j^3 - k^3| <l>^-tau over
    |l| <= l_range and j != k in modes plus {0} (mu_0 = 0); the first-order
    condition is the case k = 0.  Returns (member, witnesses)."""
    omega = np.atleast_1d(np.asarray(omega, float))
    nu = len(omega)
    js = np.concatenate([[0], np.asarray(modes, int)])
    mus = np.concatenate([[0.0], np.asarray(mu, complex)])
    lat = lattice(nu, l_range)
    weight = bracket(*lat.T) ** (-tau)
    ol = lat @ omega
    if order == "first":
        ks = [0]
    elif order == "second":
        ks = range(len(js))
    else:
        raise ValueError("order must be 'first' or 'second'")
    witnesses = []
    for kk in ks:
        cubes = np.abs(js ** 3 - js[kk] ** 3).astype(float)
        div = np.abs(1j * ol[:, None] + mus[None, :] - mus[kk])
        bound = 2 * gamma * cubes[None, :] * weight[:, None]
        bad = (div < bound) & (js[None, :] != js[kk])
        for a, b in np.argwhere(bad):
            witnesses.append((lat[a].tolist(), int(js[b]), int(js[kk]), float(div[a, b]),
                              float(bound[a, b])))
    return not witnesses, witnesses


# ---------------------------------------------------------------- inversion


def _diag_solve(space, mu, g, gamma=None, tau=None):
    c = space.fourier(g)
    div = 1j * space.ol[:, None] + mu[None, :]
    if gamma is not None:
        bound = gamma * np.abs(space.modes.astype(float)) ** 3 * bracket(*space.lat.T)[:, None] ** (-tau)
        bad = np.abs(div) < bound
        if np.any(bad):
            a, b = np.argwhere(bad)[0]
            raise MelnikovViolation([(space.lat[a].tolist(), int(space.modes[b]), 0,
                                      float(abs(div[a, b])), float(bound[a, b]))])
    if np.abs(div).min() < 1e-300:
        a, b = np.unravel_index(np.argmin(np.abs(div)), div.shape)
        raise ZeroDivisionError(f"divisor underflow at l={space.lat[a].tolist()}, j={space.modes[b]}")
    return space.values(c / div)


def invert_L_omega(chain, state, g, gamma=None, tau=None):
    """Solve L_omega h = g for grid fields g of shape (P, n_modes)."""
    space = PhaseSpace.from_frame(chain.frame)
    t = state.transform
    v = chain.to_final(g)
    v = np.einsum("pab,pb->pa", np.linalg.inv(t), v)
    v = _diag_solve(space, state.mu, v, gamma, tau)
    v = np.einsum("pab,pb->pa", t, v)
    return chain.from_final(v)


def tame_constant(chain, state, gamma, s, sigma, samples=20, seed=0):
    """max over random g of |L^-1 g|_s / (gamma^-1 |g|_{s+sigma})."""
    f = chain.frame
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        g = f.random_field(rng)
        h = invert_L_omega(chain, state, g)
        worst = max(worst, f.field_norm(h, s) * gamma / f.field_norm(g, s + sigma))
    return worst


def floquet_evolve(omega, mu, v0, times, forcing=None, lat=None):
    """Exact solution of v_j' + mu_j v_j = f_j(omega t).

    forcing, if given, holds time-Fourier coefficients (L, n) on lattice lat."""
    mu = np.asarray(mu, complex)
    t = np.asarray(times, float)[:, None]
    out = np.exp(-mu[None, :] * t) * np.asarray(v0, complex)[None, :]
    if forcing is not None:
        ol = np.asarray(lat) @ np.atleast_1d(np.asarray(omega, float))
        den = 1j * ol[:, None] + mu[None, :]
        for a in range(len(ol)):
            fa = forcing[a] / den[a]
            out += fa[None, :] * (np.exp(1j * ol[a] * t) - np.exp(-mu[None, :] * t))
    return out
