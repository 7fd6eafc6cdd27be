"""Truncated Fourier fields on T^nu x T_x and Toeplitz-in-time operators.

Coefficient arrays are dense and centred: an axis of length 2n+1 holds the
modes -n..n.  Angle axes come first, the x axis is last.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

REALITY_TOL = 1e-11


# ---------------------------------------------------------------- grids


def centred(n):
    return np.arange(-n, n + 1)


def lattice(nu, n):
    """All l in Z^nu with |l|_inf <= n, in C order of a (2n+1,)*nu array."""
    if nu == 0:
        return np.zeros((1, 0), dtype=int)
    axes = np.meshgrid(*([centred(n)] * nu), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=-1)


def bracket(*parts):
    """<i> = sqrt(1 + |i|^2) for broadcastable integer components."""
    total = 1.0
    for p in parts:
        total = total + np.asarray(p, dtype=float) ** 2
    return np.sqrt(total)


def to_grid(c, sizes):
    """Samples on uniform grids of the trigonometric polynomial with centred
    coefficients c; the trailing len(sizes) axes are transformed."""
    c = np.asarray(c)
    k = len(sizes)
    axes = tuple(range(c.ndim - k, c.ndim))
    out = c
    for ax, m in zip(axes, sizes):
        n = (out.shape[ax] - 1) // 2
        if m < 2 * n + 1:
            raise ValueError(f"grid of size {m} cannot hold {2 * n + 1} modes")
        pad = [(0, 0)] * out.ndim
        pad[ax] = (0, m - (2 * n + 1))
        out = np.roll(np.pad(out, pad), -n, axis=ax)
    return np.fft.ifftn(out, axes=axes) * float(np.prod(sizes))


def from_grid(g, nmax):
    """Centred coefficients |k| <= nmax[i] from samples on the trailing axes."""
    g = np.asarray(g)
    k = len(nmax)
    axes = tuple(range(g.ndim - k, g.ndim))
    c = np.fft.fftn(g, axes=axes) / float(np.prod([g.shape[a] for a in axes]))
    for ax, n in zip(axes, nmax):
        c = np.roll(c, n, axis=ax)
        c = np.take(c, np.arange(2 * n + 1), axis=ax)
    return c


def grid_points(m):
    return 2 * np.pi * np.arange(m) / m


def flip(c, axes=None):
    """c(-k) on the given (default: all) axes."""
    axes = range(c.ndim) if axes is None else axes
    return c[tuple(slice(None, None, -1) if a in axes else slice(None) for a in range(c.ndim))]


def reality_defect(c):
    scale = max(np.abs(c).max(), 1e-300)
    return float(np.abs(c - np.conj(flip(c))).max() / scale)


# ---------------------------------------------------------------- fields


@dataclass(frozen=True, eq=False)
class TorusField:
    """Real field on T^nu x T_x stored by truncated Fourier coefficients."""

    nu: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != self.nu + 1:
            raise ValueError("coefficient array must have nu + 1 axes")
        if any(s % 2 == 0 for s in c.shape):
            raise ValueError("every axis must have odd length 2n+1")
        if self.nu and len(set(c.shape[:-1])) > 1:
            raise ValueError("all angle axes share one truncation")
        object.__setattr__(self, "coeffs", c)
        if np.abs(c).max(initial=0.0) > 0:
            if reality_defect(c) > REALITY_TOL:
                raise ValueError("coefficients violate the reality condition")
            nx = (c.shape[-1] - 1) // 2
            if np.abs(c[..., nx]).max() > REALITY_TOL * np.abs(c).max():
                raise ValueError("field has a nonzero x-average")

    @property
    def box(self):
        n_phi = (self.coeffs.shape[0] - 1) // 2 if self.nu else 0
        return n_phi, (self.coeffs.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, nu, box):
        n_phi, nx = box
        return cls(nu, np.zeros((2 * n_phi + 1,) * nu + (2 * nx + 1,), dtype=complex))

    @classmethod
    def from_modes(cls, nu, box, modes):
        """modes: {(l_1..l_nu, j): value}; conjugates are filled in."""
        out = cls.zeros(nu, box).coeffs.copy()
        n_phi, nx = box
        for key, val in modes.items():
            *l, j = key
            idx = tuple(int(x) + n_phi for x in l) + (int(j) + nx,)
            ridx = tuple(-int(x) + n_phi for x in l) + (-int(j) + nx,)
            out[idx] = val
            out[ridx] = np.conj(val)
        return cls(nu, out)

    @classmethod
    def from_grid(cls, nu, box, values):
        c = from_grid(values, [box[0]] * nu + [box[1]])
        c[..., box[1]] = 0.0
        c = 0.5 * (c + np.conj(flip(c)))
        return cls(nu, c)

    def grid(self, m_phi, m_x):
        return to_grid(self.coeffs, [m_phi] * self.nu + [m_x]).real

    def entries(self, tol=0.0):
        n_phi, nx = self.box
        for idx in zip(*np.nonzero(np.abs(self.coeffs) > tol)):
            l = tuple(int(i) - n_phi for i in idx[:-1])
            yield l, int(idx[-1]) - nx, complex(self.coeffs[idx])

    def to_json(self):
        rows = [[*l, j, v.real, v.imag] for l, j, v in self.entries()]
        return json.dumps({"nu": self.nu, "box": list(self.box), "entries": rows})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        nu = int(data["nu"])
        rows = data["entries"]
        if "box" in data:
            box = tuple(int(b) for b in data["box"])
        else:
            box = (max([abs(int(r[i])) for r in rows for i in range(nu)], default=0),
                   max([abs(int(r[nu])) for r in rows], default=1))
        c = cls.zeros(nu, box).coeffs.copy()
        for r in rows:
            idx = tuple(int(x) + box[0] for x in r[:nu]) + (int(r[nu]) + box[1],)
            c[idx] = complex(r[nu + 1], r[nu + 2])
        return cls(nu, c)

    def _same(self, other):
        if self.nu != other.nu or self.coeffs.shape != other.coeffs.shape:
            raise ValueError("fields live on different truncations")

    def __add__(self, other):
        self._same(other)
        return TorusField(self.nu, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._same(other)
        return TorusField(self.nu, self.coeffs - other.coeffs)

    def __neg__(self):
        return TorusField(self.nu, -self.coeffs)

    def __mul__(self, scalar):
        if not np.isrealobj(scalar):
            raise TypeError("only real scalars keep a field real")
        return TorusField(self.nu, self.coeffs * float(scalar))

    __rmul__ = __mul__


def _index_grids(u):
    n_phi, nx = u.box
    shape = u.coeffs.shape
    ls = [np.arange(shape[a]) - n_phi for a in range(u.nu)]
    js = centred(nx)
    grids = np.meshgrid(*ls, js, indexing="ij")
    return grids[:-1], grids[-1]


def sobolev_norm(u, s):
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    ls, j = _index_grids(u)
    w = bracket(*ls, j) ** (2 * s)
    return float(np.sqrt(np.sum(w * np.abs(u.coeffs) ** 2)))


def _plus(sites):
    return tuple(int(j) for j in getattr(sites, "plus", sites))


def project(u, part, sites):
    """Keep the tangential modes (part 'S') or the normal ones ('S_perp')."""
    plus = _plus(sites)
    _, nx = u.box
    js = centred(nx)
    in_s = np.isin(np.abs(js), plus)
    keep = in_s if part == "S" else ~in_s
    if part not in ("S", "S_perp"):
        raise ValueError("part must be 'S' or 'S_perp'")
    return TorusField(u.nu, u.coeffs * keep)


def truncation_mask(u, n):
    ls, j = _index_grids(u)
    return bracket(*ls, j) <= n


def truncate(u, n):
    """Smoothing projector: keeps <l,j> <= n, i.e. |(l,j)| < n for integer n."""
    return TorusField(u.nu, u.coeffs * truncation_mask(u, n))


def dx(u, k=1):
    if k < 0:
        out = u
        for _ in range(-k):
            out = dx_inv(out)
        return out
    _, nx = u.box
    return TorusField(u.nu, u.coeffs * (1j * centred(nx)) ** k)


def dx_inv(u):
    _, nx = u.box
    js = centred(nx).astype(complex)
    inv = np.zeros_like(js)
    inv[js != 0] = 1.0 / (1j * js[js != 0])
    return TorusField(u.nu, u.coeffs * inv)


def convolve(a, b):
    """Full linear convolution of two centred coefficient arrays (all axes)."""
    sizes = [sa + sb - 1 for sa, sb in zip(a.shape, b.shape)]
    ga = to_grid(a, sizes)
    gb = to_grid(b, sizes)
    return from_grid(ga * gb, [(s - 1) // 2 for s in sizes])


# ---------------------------------------------------------------- operators


@dataclass(frozen=True, eq=False)
class DecayOperator:
    """Toeplitz-in-time operator A_j^{j'}(l) on normal-mode fields.

    entries[l..., a, b] is the coefficient mapping mode modes[b] to modes[a]
    with time-frequency shift l.
    """

    nu: int
    modes: np.ndarray
    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.modes, dtype=int)
        e = np.asarray(self.entries, dtype=complex)
        object.__setattr__(self, "modes", m)
        object.__setattr__(self, "entries", e)
        if e.shape[-2:] != (len(m), len(m)) or e.ndim != self.nu + 2:
            raise ValueError("entries must have shape (2L+1,)*nu + (n, n)")
        if not np.array_equal(np.sort(-m), np.sort(m)):
            raise ValueError("mode set must be symmetric under j -> -j")
        if np.abs(e).max(initial=0.0) > 0 and self.reality_defect() > REALITY_TOL:
            raise ValueError("operator does not map real fields to real fields")

    @property
    def l_range(self):
        return (self.entries.shape[0] - 1) // 2 if self.nu else 0

    def _mode_flip(self):
        order = np.argsort(self.modes)
        pos = np.empty_like(order)
        pos[order] = np.arange(len(order))
        return pos[np.searchsorted(self.modes[order], -self.modes)]

    def reality_defect(self):
        p = self._mode_flip()
        e = self.entries
        mirrored = flip(e, axes=range(self.nu))[..., p, :][..., :, p]
        scale = max(np.abs(e).max(), 1e-300)
        return float(np.abs(np.conj(e) - mirrored).max() / scale)

    @classmethod
    def identity(cls, nu, modes, l_range=0):
        n = len(modes)
        e = np.zeros((2 * l_range + 1,) * nu + (n, n), dtype=complex)
        e[(l_range,) * nu] = np.eye(n)
        return cls(nu, modes, e)

    @classmethod
    def multiplication(cls, p, modes, l_range=None):
        """Matrix of h -> Pi(p h) restricted to the given x-modes."""
        modes = np.asarray(modes, dtype=int)
        n_phi, nx = p.box
        l_range = n_phi if l_range is None else l_range
        d = modes[:, None] - modes[None, :]
        e = np.zeros((2 * l_range + 1,) * p.nu + (len(modes), len(modes)), dtype=complex)
        ok = np.abs(d) <= nx
        for l in itertools.product(range(-min(l_range, n_phi), min(l_range, n_phi) + 1), repeat=p.nu):
            row = p.coeffs[tuple(x + n_phi for x in l)]
            block = np.where(ok, row[np.clip(d + nx, 0, 2 * nx)], 0.0)
            e[tuple(x + l_range for x in l)] = block
        return cls(p.nu, modes, e)

    @classmethod
    def from_grid(cls, nu, modes, mats, l_range):
        """Time-Fourier coefficients |l|_inf <= l_range of a per-angle family of
        matrices sampled on a uniform (M,)*nu grid."""
        e = from_grid(np.moveaxis(mats, (-2, -1), (0, 1)), [l_range] * nu)
        return cls(nu, modes, np.moveaxis(e, (0, 1), (-2, -1)))

    def grid(self, m):
        e = np.moveaxis(self.entries, (-2, -1), (0, 1))
        return np.moveaxis(to_grid(e, [m] * self.nu), (0, 1), (-2, -1))

    def apply(self, h):
        """Toeplitz product on coefficients h of shape (2N+1,)*nu + (n,)."""
        n_phi = (h.shape[0] - 1) // 2 if self.nu else 0
        m = 2 * n_phi + self.l_range + 1
        m += m % 2
        hg = to_grid(np.moveaxis(h, -1, 0), [m] * self.nu)
        ag = self.grid(m)
        out = np.einsum("...ab,b...->a...", ag, hg)
        return np.moveaxis(from_grid(out, [n_phi] * self.nu), 0, -1)

    def to_json(self):
        rows = []
        lr = self.l_range
        for idx in zip(*np.nonzero(self.entries)):
            v = self.entries[idx]
            l = [int(i) - lr for i in idx[:-2]]
            rows.append([*l, int(self.modes[idx[-2]]), int(self.modes[idx[-1]]), v.real, v.imag])
        return json.dumps({"nu": self.nu, "modes": self.modes.tolist(), "l_range": lr, "entries": rows})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        nu, modes, lr = int(data["nu"]), np.asarray(data["modes"], dtype=int), int(data["l_range"])
        pos = {int(j): i for i, j in enumerate(modes)}
        e = np.zeros((2 * lr + 1,) * nu + (len(modes), len(modes)), dtype=complex)
        for r in data["entries"]:
            idx = tuple(int(x) + lr for x in r[:nu]) + (pos[int(r[nu])], pos[int(r[nu + 1])])
            e[idx] = complex(r[nu + 2], r[nu + 3])
        return cls(nu, modes, e)


def diagonal_sups(entries, modes, nu):
    """sup over each diagonal (l, j - j') of |A_j^{j'}(l)|; returns (sups, d)."""
    modes = np.asarray(modes)
    d = modes[:, None] - modes[None, :]
    dvals = np.arange(d.min(), d.max() + 1)
    a = np.abs(entries)
    flat = a.reshape(-1, a.shape[-2] * a.shape[-1])
    dflat = d.ravel() - dvals[0]
    sups = np.zeros((flat.shape[0], len(dvals)))
    np.maximum.at(sups.T, dflat, flat.T)
    return sups.reshape(a.shape[:-2] + (len(dvals),)), dvals


def decay_norm(a, s):
    sups, dvals = diagonal_sups(a.entries, a.modes, a.nu)
    lr = a.l_range
    grids = np.meshgrid(*([centred(lr)] * a.nu), dvals, indexing="ij")
    w = bracket(*grids) ** (2 * s)
    return float(np.sqrt(np.sum(w * sups ** 2)))


# ---------------------------------------------------------------- families


@dataclass(frozen=True, eq=False)
class ParamFamily:
    samples: list
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        omegas = [tuple(np.atleast_1d(np.asarray(w, dtype=float))) for w, _ in self.samples]
        if len(set(omegas)) != len(omegas):
            raise ValueError("parameter samples must be pairwise distinct")


def _payload_norm(x, s):
    if isinstance(x, TorusField):
        return sobolev_norm(x, s)
    if isinstance(x, DecayOperator):
        return decay_norm(x, s)
    return float(np.linalg.norm(np.asarray(x)))


def _payload_diff(x, y):
    if isinstance(x, TorusField):
        return x - y
    if isinstance(x, DecayOperator):
        return DecayOperator(x.nu, x.modes, x.entries - y.entries)
    return np.asarray(x) - np.asarray(y)


def lip_gamma_norm(family, s):
    """sup norm plus gamma times the largest difference quotient."""
    if len(family.samples) < 2:
        raise ValueError("the Lipschitz part needs at least two samples")
    sup = max(_payload_norm(x, s) for _, x in family.samples)
    lip = 0.0
    for (w1, x1), (w2, x2) in itertools.combinations(family.samples, 2):
        dw = np.linalg.norm(np.atleast_1d(np.asarray(w1, float) - np.asarray(w2, float)))
        lip = max(lip, _payload_norm(_payload_diff(x1, x2), s) / dw)
    return sup + family.gamma * lip
