"""Tangential sites, the quartic Birkhoff generator and its time-one flow."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import hamiltonian as ham
from .fourier import TorusField, centred, from_grid, to_grid
from .sites import SiteSet

__all__ = [
    "SiteSet", "cube_identity", "admissible", "Admissibility", "build_generator",
    "BirkhoffGenerator", "weak_bnf_flow", "bnf_map", "verify_normal_form",
]


def cube_identity(j1, j2, j3, j4):
    if j1 + j2 + j3 + j4 != 0:
        raise ValueError("indices must sum to zero")
    closed = -3 * (j1 + j2) * (j1 + j3) * (j2 + j3)
    direct = j1 ** 3 + j2 ** 3 + j3 ** 3 + j4 ** 3
    assert closed == direct
    return closed


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    violated_by: tuple | None = None
    target: float | None = None


def _solutions(target_num, den, bound, excluded):
    """Integer pairs j != k, |j|,|k| <= bound, with den*(j^2+jk+k^2) = target_num."""
    if target_num % den:
        return None
    t = target_num // den
    j = np.arange(-bound, bound + 1, dtype=np.int64)
    disc = 4 * t - 3 * j * j
    ok = disc >= 0
    j, disc = j[ok], disc[ok]
    r = np.rint(np.sqrt(disc.astype(float))).astype(np.int64)
    for rr in (r - 1, r, r + 1):
        hit = (rr >= 0) & (rr * rr == disc)
        for jj, root in zip(j[hit], rr[hit]):
            for num in (-jj + root, -jj - root):
                if num % 2:
                    continue
                k = num // 2
                if k != jj and abs(k) not in excluded and abs(jj) not in excluded:
                    return int(jj), int(k)
    return None


def admissible(sites, mass_variant=False):
    """Non-degeneracy of the site set: (2/(2nu-1)) sum j_i^2 must avoid
    j^2 + jk + k^2 for j != k outside S."""
    sites = sites if isinstance(sites, SiteSet) else SiteSet(tuple(sites))
    if mass_variant:
        return Admissibility(True)
    nu = sites.nu
    num = 2 * sum(j * j for j in sites.plus)
    den = 2 * nu - 1
    target = num / den
    bound = math.ceil(math.sqrt(2 * target)) + 1
    witness = _solutions(num, den, bound, set(sites.plus))
    return Admissibility(witness is None, witness, target)


@dataclass(frozen=True, eq=False)
class BirkhoffGenerator:
    """F = sum_A F_{j1 j2 j3 j4} u_j1 u_j2 u_j3 u_j4 and its vector field on E."""

    sites: SiteSet
    sign: int
    coeffs: dict
    cutoff: int
    tensor: np.ndarray = field(repr=False)

    @property
    def support(self):
        return set(self.coeffs)

    @property
    def modes(self):
        return np.array([j for j in range(-self.cutoff, self.cutoff + 1) if j != 0])

    def value(self, u_e):
        """F(u) for batched E-coordinates (ordered like ``modes``)."""
        pos = {j: i for i, j in enumerate(self.modes)}
        out = 0.0
        for q, c in self.coeffs.items():
            term = c
            for j in q:
                term = term * u_e[..., pos[j]]
            out = out + term
        return out


def build_generator(sites, sign):
    sites = sites if isinstance(sites, SiteSet) else SiteSet(tuple(sites))
    full = sites.full
    coeffs = {}
    for triple in itertools.product(full, repeat=3):
        fourth = -sum(triple)
        if fourth == 0:
            continue
        for pos in range(4):
            quad = list(triple)
            quad.insert(pos, fourth)
            quad = tuple(quad)
            cube = sum(j ** 3 for j in quad)
            if cube != 0:
                coeffs[quad] = 1j * sign / (4 * cube)
    cutoff = 3 * max(sites.plus) + 1
    modes = [j for j in range(-cutoff, cutoff + 1) if j != 0]
    pos = {j: i for i, j in enumerate(modes)}
    n = len(modes)
    tensor = np.zeros((n, n, n, n), dtype=complex)
    for (a, b, c, d), val in coeffs.items():
        # X_j = i j dF/du_{-j}: the index carrying -j is differentiated
        tensor[pos[-a], pos[b], pos[c], pos[d]] += 4j * (-a) * val
    # symmetrise over the three input slots (the support is permutation-closed)
    sym = sum(np.transpose(tensor, (0,) + p) for p in itertools.permutations((1, 2, 3))) / 6
    return BirkhoffGenerator(sites, sign, coeffs, cutoff, sym)


class FlowError(RuntimeError):
    pass


def _e_index(n, cutoff):
    return np.array([j + n for j in range(-cutoff, cutoff + 1) if j != 0])


def bnf_map(gen, u_coeffs, order=0, inverse=False, rtol=1e-13):
    """Time-one flow of X_F on batched centred coefficient vectors.

    order 1 also returns the Jacobian of the E-block, order 2 also its second
    derivative K[a, b, c] = d^2 W_a / du_b du_c (both on E-coordinates)."""
    u_coeffs = np.asarray(u_coeffs, dtype=complex)
    n = (u_coeffs.shape[-1] - 1) // 2
    if n < gen.cutoff:
        raise ValueError("truncation must contain the finite space E")
    eidx = _e_index(n, gen.cutoff)
    batch = u_coeffs.shape[:-1]
    flat = u_coeffs.reshape(-1, u_coeffs.shape[-1])
    b = flat.shape[0]
    ne = len(eidx)
    t = gen.tensor
    y0 = [flat[:, eidx]]
    if order >= 1:
        y0.append(np.broadcast_to(np.eye(ne), (b, ne, ne)))
    if order >= 2:
        y0.append(np.zeros((b, ne, ne, ne)))
    sizes = [y.size for y in y0]
    shapes = [y.shape for y in y0]

    def rhs(_, y):
        parts = np.split(y, np.cumsum(sizes)[:-1])
        u = parts[0].reshape(shapes[0])
        out = [np.einsum("abcd,zb,zc,zd->za", t, u, u, u)]
        if order >= 1:
            dx = 3 * np.einsum("abcd,zc,zd->zab", t, u, u)
            jac = parts[1].reshape(shapes[1])
            out.append(dx @ jac)
        if order >= 2:
            kk = parts[2].reshape(shapes[2])
            d2 = 6 * np.einsum("abcd,zd->zabc", t, u)
            out.append(np.einsum("zad,zdbc->zabc", dx, kk)
                       + np.einsum("zade,zdb,zec->zabc", d2, jac, jac))
        return np.concatenate([o.ravel() for o in out])

    y = np.concatenate([np.asarray(v, dtype=complex).ravel() for v in y0])
    scale = np.abs(flat[:, eidx]).max(initial=0.0)
    if scale == 0.0:
        # u_E = 0 is a fixed point and the variational equations are constant there
        end = y
    else:
        sol = solve_ivp(rhs, (0.0, -1.0 if inverse else 1.0), y, method="DOP853",
                        rtol=rtol, atol=1e-3 * rtol * scale)
        if not sol.success:
            raise FlowError(f"Birkhoff flow failed: {sol.message} after {sol.nfev} evaluations")
        end = sol.y[:, -1]
    parts = np.split(end, np.cumsum(sizes)[:-1])
    w = flat.copy()
    w[:, eidx] = parts[0].reshape(shapes[0])
    w = 0.5 * (w + np.conj(w[:, ::-1]))
    out = [w.reshape(batch + (2 * n + 1,))]
    if order >= 1:
        out.append(parts[1].reshape((*batch, ne, ne)))
    if order >= 2:
        out.append(parts[2].reshape((*batch, ne, ne, ne)))
    return out[0] if order == 0 else tuple(out)


def weak_bnf_flow(gen, u, direction="forward"):
    """Phi_B (or its inverse) applied to a field, pointwise in the angles."""
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    c = u.coeffs
    n_phi, nx = u.box
    if u.nu == 0:
        w = bnf_map(gen, c, inverse=direction == "inverse")
        w[nx] = 0.0
        return TorusField(0, w)
    m = 4 * n_phi + 2
    g = np.moveaxis(to_grid(np.moveaxis(c, -1, 0), [m] * u.nu), 0, -1)
    w = bnf_map(gen, g, inverse=direction == "inverse")
    out = np.moveaxis(from_grid(np.moveaxis(w, -1, 0), [n_phi] * u.nu), 0, -1)
    out[..., nx] = 0.0
    return TorusField(u.nu, 0.5 * (out + np.conj(out[(slice(None, None, -1),) * (u.nu + 1)])))


# ------------------------------------------------------------ normal form check


def quadratic_part(u_coeffs):
    n = (u_coeffs.shape[-1] - 1) // 2
    return 0.5 * np.sum(centred(n) ** 2 * np.abs(u_coeffs) ** 2, axis=-1)


def quartic_coefficient(model, gen, w, base=0.02):
    """Degree-four Taylor coefficient of t -> H(Phi_B(t w)) - t^2 H_2(w), by
    Richardson extrapolation over t in base*(1/2, 1/4, 1/8)."""
    ts = base * np.array([0.5, 0.25, 0.125])
    batch = np.stack([t * w for t in ts])
    vals = ham.value(model, bnf_map(gen, batch)) - ts ** 2 * quadratic_part(w)
    g = vals / ts ** 4
    # g(t) = c4 + c5 t + c6 t^2 + ...
    vander = np.vander(ts, 3, increasing=True)
    return float(np.linalg.solve(vander, g)[0])


def expected_quartic(model, v, z):
    """Sector coefficients (v^4, v^3 z, v^2 z^2, v z^3, z^4) of the normalized
    quartic Hamiltonian for u = v + z."""
    n = (v.shape[-1] - 1) // 2
    s = model.sign
    plus = model.sites.plus
    amps = np.array([abs(v[n + j]) ** 2 for j in plus])
    full4 = 2 * np.sum(amps ** 2)
    cross = (2 * np.sum(amps)) ** 2
    m = ham.grid_size(model, n)
    vg = to_grid(v, [m]).real
    zg = to_grid(z, [m]).real
    mv, mz = np.mean(vg ** 2), np.mean(zg ** 2)
    lam = model.lam
    return np.array([
        0.75 * s * (full4 - cross) + lam * mv ** 2,
        0.0,
        -1.5 * s * np.mean(vg ** 2 * zg ** 2) + 2 * lam * mv * mz,
        -s * np.mean(vg * zg ** 3),
        -0.25 * s * np.mean(zg ** 4) + lam * mz ** 2,
    ])


def verify_normal_form(model, gen, v, z, base=0.02, scale_amplitudes=(0.04, 0.02, 0.01)):
    """Fit the quartic sectors of H o Phi_B on u = s v + z and the scaling of
    what is left after the quartic truncation.

    v must be tangential and z normal; both are centred coefficient vectors."""
    s_vals = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    qs = np.array([quartic_coefficient(model, gen, s * v + z, base) for s in s_vals])
    vander = np.vander(s_vals, 5, increasing=True)
    cond = float(np.linalg.cond(vander))
    fitted = np.linalg.solve(vander, qs)[::-1]
    expected = expected_quartic(model, v, z)
    scale = max(np.abs(expected).max(), 1e-300)
    sector_err = np.abs(fitted - expected) / scale
    # remainder H o Phi_B - H_2 - H4tilde along the ray t (v + z)
    u = v + z
    ts = np.asarray(scale_amplitudes)
    batch = np.stack([t * u for t in ts])
    quartic_total = np.sum(expected)
    rest = np.abs(ham.value(model, bnf_map(gen, batch)) - ts ** 2 * quadratic_part(u)
                  - ts ** 4 * quartic_total)
    slope = float(np.polyfit(np.log(ts), np.log(rest), 1)[0])
    return {
        "fitted": fitted.tolist(),
        "expected": expected.tolist(),
        "sector_error": sector_err.tolist(),
        "v3z": float(abs(fitted[1])),
        "residual_slope": slope,
        "condition": cond,
    }
