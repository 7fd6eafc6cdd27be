"""Newton iteration with smoothing for invariant tori, and its Cantor-set
bookkeeping.

Each step rebuilds the approximate inverse at the current torus and applies

    U_{n+1} = U_n + Pi_n ( -T_0(U_n) Pi_n F(U_n) ),

where Pi_n keeps angle modes |l| <= N_n and space modes |j| <= N_n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .approx_inverse import ApproximateInverse
from .fourier import bracket, centred, lattice
from .reducibility import melnikov_membership
from .reduction import assemble_L_omega, constant_coefficients
from .torus import TorusEmbedding, TorusSystem, s0_of

__all__ = [
    "NMConstants", "nm_constants", "IterationState", "StepRecord", "NMResult",
    "Divergence", "project", "log_norm", "analytic_eigenvalues", "first_set_check",
    "nm_iterate", "cantor_trace", "superlinear_order", "residual_floor",
]


class Divergence(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class NMConstants:
    mu: float
    mu1: float
    alpha: float
    alpha1: float
    kappa: float
    beta1: float
    rho: float
    c1: float


def nm_constants(tau, nu, a, rho=None, c1=20.0):
    if not 0 < a < 1 / 6:
        raise ValueError("a must lie in the open interval (0, 1/6)")
    bound = (1 - 3 * a) / (c1 * (2 + 3 * a))
    rho = 0.5 * bound if rho is None else rho
    if not 0 < rho < bound:
        raise ValueError(f"rho = {rho} outside (0, {bound:.6g})")
    mu = tau + 2
    mu1 = 3 * mu + 9
    alpha = 3 * mu1 + 1
    return NMConstants(mu, mu1, alpha, (alpha - 3 * mu) / 2, 3 * (mu1 + 1 / rho) + 1,
                       6 * mu1 + 3 / rho + 3, rho, c1)


def project(emb, n_scale):
    """Keep angle modes |l|_inf <= N and space modes |j| <= N."""
    nu = emb.nu
    n_phi, nx = emb.box
    lat = lattice(nu, n_phi).reshape((2 * n_phi + 1,) * nu + (nu,))
    keep_l = np.abs(lat).max(axis=-1) <= n_scale if nu else np.ones((), bool)
    keep_j = np.abs(centred(nx)) <= n_scale
    kl = keep_l[..., None]
    return TorusEmbedding(emb.theta * kl, emb.y * kl,
                          emb.z * (kl & keep_j), emb.zeta.copy())


def log_norm(emb, s):
    """log of the s-norm, safe for very large s; -inf for the zero embedding."""
    nu = emb.nu
    n_phi, nx = emb.box
    lat = lattice(nu, n_phi)
    wl = np.log(bracket(*lat.T))
    wz = np.log(bracket(*lat.T[:, :, None], centred(nx)[None, :]))
    parts = []
    for c, w in ((emb.theta, wl[:, None]), (emb.y, wl[:, None]), (emb.z, wz)):
        a = np.abs(c.reshape(len(lat), -1))
        w = np.broadcast_to(w, a.shape)
        nz = a > 0
        parts.append(2 * np.log(a[nz]) + 2 * s * w[nz])
    flat = np.concatenate(parts)
    if flat.size == 0:
        return -math.inf
    top = flat.max()
    return 0.5 * (top + math.log(np.exp(flat - top).sum()))


def analytic_eigenvalues(model, params, emb, omega, n_op=None):
    """mu_j = i(-m3 j^3 + m1 j) on the normal modes |j| <= N_x."""
    frame, st = assemble_L_omega(model, params, emb, omega, n_op, with_matrix=False)
    m3, m1 = constant_coefficients(frame, st)
    modes = frame.system.sites.normal_modes(params.n_x)
    return modes, 1j * (-m3 * modes ** 3 + m1 * modes), m3, m1


def first_set_check(omega, gamma, tau, l_range):
    """Diophantine bound |omega . l| >= gamma <l>^-tau; returns witnesses."""
    omega = np.atleast_1d(np.asarray(omega, float))
    lat = lattice(len(omega), l_range)
    nz = np.any(lat != 0, axis=1)
    div = np.abs(lat @ omega)
    bound = gamma * bracket(*lat.T) ** (-tau)
    bad = nz & (div < bound)
    margin = float(np.min(div[nz] / bound[nz])) if np.any(nz) else math.inf
    wit = [(lat[i].tolist(), float(div[i]), float(bound[i])) for i in np.nonzero(bad)[0]]
    return wit, margin


@dataclass
class StepRecord:
    n: int
    scale: float
    residual: float
    log_high: float
    zeta: float
    gamma_n: float
    margin: float
    checked: int
    witnesses: list = field(default_factory=list)
    m3: float = float("nan")
    m1: float = float("nan")

    def as_row(self):
        return {"n": self.n, "scale": self.scale, "residual": self.residual,
                "log_high_norm": self.log_high, "zeta": self.zeta, "gamma_n": self.gamma_n,
                "margin": self.margin, "checked": self.checked,
                "excised": len(self.witnesses), "m3": self.m3, "m1": self.m1}


@dataclass
class IterationState:
    n: int
    U: TorusEmbedding
    scale: float
    history: list = field(default_factory=list)


@dataclass
class NMResult:
    solution: TorusEmbedding
    history: list
    converged: bool
    excluded: bool
    witnesses: list
    constants: NMConstants
    defect: float = float("nan")


def superlinear_order(residuals, below=1e-4, floor=0.0):
    """Smallest order log r_{n+1} / log r_n over the steps landing below the
    threshold.  Steps ending within a factor 10 of the roundoff floor carry no
    information about the order and are skipped.  None when nothing is left."""
    orders = [math.log(b) / math.log(a) for a, b in zip(residuals, residuals[1:])
              if 10 * floor < b < below and 0 < a < 1]
    return min(orders) if orders else None


def nm_iterate(model, params, omega, max_steps=6, tol=1e-10, n0=4.0, chi=1.5, U0=None,
               check_melnikov=True, rho=None, c1=20.0, defect_samples=2, seed=0):
    nu = model.sites.nu
    consts = nm_constants(params.tau, nu, params.a, rho, c1)
    system = TorusSystem(model, params, omega)
    s0 = s0_of(nu)
    gamma = params.gamma
    wit, margin0 = first_set_check(system.omega, gamma, params.tau, params.n_phi)
    U = system.trivial() if U0 is None else U0
    if wit:
        rec = StepRecord(0, n0, float("nan"), float("nan"), 0.0, 2 * gamma, margin0, 0,
                         [("G0",) + tuple(w) for w in wit])
        return NMResult(U, [rec], False, True, rec.witnesses, consts)
    history = []
    increases = 0
    scale = n0
    for n in range(max_steps + 1):
        F = system.residual(U)
        res = F.norm(s0)
        gamma_n = gamma * (1 + 2.0 ** (-n))
        rec = StepRecord(n, scale, res, log_norm(U, s0 + consts.beta1), float(np.abs(U.zeta).max()),
                         gamma_n, margin0, 0)
        if check_melnikov and n >= 1:
            modes, mu, m3, m1 = analytic_eigenvalues(model, params, U, system.omega)
            ok, wits = melnikov_membership(system.omega, modes, mu, gamma_n, params.tau, params.n_phi)
            rec.m3, rec.m1 = m3, m1
            rec.checked = (len(modes) + 1) ** 2 * (2 * params.n_phi + 1) ** nu
            rec.witnesses = [("second",) + tuple(w) for w in wits]
            rec.margin = min(margin0, _melnikov_margin(system.omega, modes, mu, gamma_n, params.tau,
                                                       params.n_phi))
            if not ok:
                history.append(rec)
                return NMResult(U, history, False, True, rec.witnesses, consts)
        history.append(rec)
        if len(history) > 1 and res > history[-2].residual:
            increases += 1
            if increases >= 2:
                raise Divergence(f"residual increased twice (now {res:.3g})", history)
        if res <= tol or n == max_steps:
            break
        inv = ApproximateInverse(system, U)
        step = inv.apply(project(F, scale))
        U = (U + project(step.scale(-1.0), scale)).realified()
        scale = scale ** chi
    converged = history[-1].residual <= tol
    out = NMResult(U, history, converged, False, [], consts)
    if defect_samples:
        out.defect = _terminal_defect(system, U, defect_samples, seed)
    return out


def _terminal_defect(system, U, samples, seed):
    rng = np.random.default_rng(seed)
    inv = ApproximateInverse(system, U)
    worst = 0.0
    box = U.box
    for _ in range(samples):
        g = TorusEmbedding.zeros(system.nu, box)
        lat = lattice(system.nu, box[0])
        decay = bracket(*lat.T).reshape((2 * box[0] + 1,) * system.nu) ** (-4.0)
        th = decay[..., None] * rng.standard_normal(g.theta.shape)
        yy = decay[..., None] * rng.standard_normal(g.y.shape)
        zz = decay[..., None] * rng.standard_normal(g.z.shape) * bracket(centred(box[1])) ** -4.0
        zz[..., system.n] = 0.0
        zz[..., system.n + system.splus] = 0.0
        zz[..., system.n - system.splus] = 0.0
        g = TorusEmbedding(th, yy, zz, np.zeros(system.nu)).realified()
        worst = max(worst, inv.defect(g))
    return worst


def _melnikov_margin(omega, modes, mu, gamma, tau, l_range):
    js = np.concatenate([[0], modes])
    mus = np.concatenate([[0.0], mu])
    lat = lattice(len(omega), l_range)
    ol = lat @ omega
    w = bracket(*lat.T) ** (-tau)
    div = np.abs(1j * ol[:, None, None] + mus[None, :, None] - mus[None, None, :])
    cubes = np.abs(js[:, None] ** 3 - js[None, :] ** 3).astype(float)
    bound = 2 * gamma * cubes[None] * w[:, None, None]
    ok = bound > 0
    return float(np.min(div[ok] / bound[ok]))


def residual_floor(model, params, omega, U, steps=1):
    """Residual level reached by restarting the iteration at a converged torus."""
    try:
        out = nm_iterate(model, params, omega, max_steps=steps, tol=0.0, U0=U,
                         check_melnikov=False, n0=max(params.n_phi, params.n_x) + 1.0,
                         defect_samples=0)
        hist = out.history
    except Divergence as err:
        hist = err.history
    return max(h.residual for h in hist)


def cantor_trace(history):
    """Per-step record of the checked bounds, the inflated gamma_n and margins."""
    if not history:
        raise ValueError("empty history")
    rows = []
    for rec in history:
        rows.append({"n": rec.n, "gamma_n": rec.gamma_n, "checked": rec.checked,
                     "margin": rec.margin, "excised": [list(w) for w in rec.witnesses]})
    return rows
