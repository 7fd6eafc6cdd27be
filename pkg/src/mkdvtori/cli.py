"""Command line front door.

Every subcommand writes its tables into --out together with manifest.json
listing the config digest, library versions and the sha256 of each file.

Exit codes: 0 success, 2 invalid input, 3 frequency excluded by a
non-resonance test (witnesses written), 4 numerical failure.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config, parse_density

EXIT_OK, EXIT_INVALID, EXIT_EXCLUDED, EXIT_NUMERICAL = 0, 2, 3, 4


class Excluded(Exception):
    def __init__(self, message, witnesses):
        super().__init__(message)
        self.witnesses = witnesses


class Run:
    def __init__(self, cfg, out, seed, tol_scale, command):
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        self.tol_scale = tol_scale
        self.command = command
        self.files = []
        self.out.mkdir(parents=True, exist_ok=True)

    # model objects are built lazily so --threads takes effect before numpy loads
    @property
    def model(self):
        return self.cfg.model()

    @property
    def params(self):
        return self.cfg.params()

    def omega(self):
        import numpy as np
        from .torus import freq_amp
        run = self.cfg.run
        if run["omega"] is not None:
            return np.asarray(run["omega"], float)
        xi = run["xi"] or (1.0,) * len(self.cfg.sites)
        m = self.model
        return freq_amp(m.sites, m.sign, self.cfg.eps, np.asarray(xi), m.mass_variant)

    def write_json(self, name, data):
        path = self.out / name
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n")
        self.files.append(path)

    def write_csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(path)

    def write_text(self, name, text):
        path = self.out / name
        path.write_text(text)
        self.files.append(path)

    def manifest(self, status):
        import numpy
        import scipy
        from . import __version__
        outputs = [{"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                   for p in self.files]
        data = {"subcommand": self.command, "config_sha256": self.cfg.digest(), "seed": self.seed,
                "tol_scale": self.tol_scale, "exit_code": status, "outputs": outputs,
                "versions": {"mkdvtori": __version__, "python": platform.python_version(),
                             "numpy": numpy.__version__, "scipy": scipy.__version__,
                             "click": _click_version()}}
        (self.out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _click_version():
    from importlib.metadata import version
    return version("click")


def _fmt(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, float) or type(v).__module__ == "numpy":
        return repr(float(v)) if not isinstance(v, (int,)) else v
    return v


def _plain(v):
    import numpy as np
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _torus(run, path):
    from .torus import TorusEmbedding, TorusSystem
    if path is None:
        return TorusSystem(run.model, run.params, run.omega()).trivial()
    return TorusEmbedding.from_json(Path(path).read_text())


def _execute(ctx, command, body, **overrides):
    obj = ctx.obj
    try:
        cfg = load_config(obj["config"])
        if overrides.get("density_file"):
            overrides["density"] = parse_density(Path(overrides.pop("density_file")).read_text(),
                                                 "density_file")
        overrides.pop("density_file", None)
        if overrides.get("sites") is not None:
            overrides["sites"] = tuple(int(s) for s in overrides["sites"].replace(",", " ").split())
        for key in ("xi", "omega"):
            if overrides.get(key) is not None:
                overrides[key] = tuple(float(s) for s in overrides[key].replace(",", " ").split())
        scale = obj["tol_scale"]
        cfg = cfg.with_overrides(**overrides)
        if scale != 1.0:
            cfg = cfg.with_overrides(tol=cfg.run["tol"] * scale, kam_tol=cfg.run["kam_tol"] * scale)
        run = Run(cfg, obj["out"], obj["seed"], scale, command)
    except (ConfigError, OSError, ValueError) as err:
        click.echo(f"invalid input: {err}", err=True)
        ctx.exit(EXIT_INVALID)
    status = EXIT_OK
    try:
        body(run)
    except Excluded as err:
        run.write_json("witnesses.json", {"reason": str(err), "witnesses": err.witnesses})
        click.echo(f"excluded: {err}", err=True)
        status = EXIT_EXCLUDED
    except ConfigError as err:
        click.echo(f"invalid input: {err}", err=True)
        status = EXIT_INVALID
    except (ValueError, TypeError) as err:
        click.echo(f"invalid input: {err}", err=True)
        status = EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - any numerical breakdown maps to one exit code
        from .reducibility import MelnikovViolation
        if isinstance(err, MelnikovViolation):
            run.write_json("witnesses.json", {"reason": str(err), "witnesses": err.witnesses})
            status = EXIT_EXCLUDED
        else:
            status = EXIT_NUMERICAL
        click.echo(f"{type(err).__name__}: {err}", err=True)
    run.manifest(status)
    ctx.exit(status)


def model_options(fn):
    opts = [
        click.option("--sites", help="Tangential sites, comma separated."),
        click.option("--epsilon", "eps", type=float, help="Amplitude parameter eps."),
        click.option("--a", "a", type=float, help="Exponent a in (0, 1/6)."),
        click.option("--tau", type=float, help="Diophantine exponent."),
        click.option("--n-phi", type=int, help="Angle truncation."),
        click.option("--n-x", type=int, help="Space truncation."),
        click.option("--density-file", type=click.Path(exists=True, dir_okay=False),
                     help="Density monomials, one 'c kind m p q' per line."),
        click.option("--xi", help="Amplitudes xi, comma separated."),
        click.option("--omega", help="Frequency override, comma separated."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False),
              help="INI file with [model], [params] and [run] sections.")
@click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--threads", default=None, type=int, help="BLAS/FFT threads.")
@click.option("--tol-scale", default=1.0, show_default=True, type=float,
              help="Multiplies the iteration tolerances.")
@click.pass_context
def main(ctx, config, out, seed, threads, tol_scale):
    """Quasi-periodic tori of quasi-linear mKdV perturbations."""
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    if tol_scale <= 0:
        raise click.BadParameter("must be positive", param_hint="--tol-scale")
    ctx.obj = {"config": config, "out": out, "seed": seed, "threads": threads,
               "tol_scale": tol_scale}


@main.command("sites-check")
@model_options
@click.pass_context
def sites_check(ctx, **kw):
    """Non-degeneracy of the tangential sites."""
    def body(run):
        from .weak_bnf import admissible
        res = admissible(run.model.sites, run.model.mass_variant)
        verdict = "admissible" if res.admissible else "inadmissible"
        run.write_json("sites.json", {"sites": list(run.cfg.sites), "verdict": verdict,
                                      "target": res.target, "witness": res.violated_by})
        click.echo(verdict)
        if not res.admissible:
            raise Excluded("site set is degenerate", [list(res.violated_by)])
    _execute(ctx, "sites-check", body, **kw)


@main.command("bnf")
@model_options
@click.pass_context
def bnf(ctx, **kw):
    """Fit the quartic sectors of the normalized Hamiltonian."""
    def body(run):
        import numpy as np
        from .fourier import centred
        from .weak_bnf import build_generator, verify_normal_form
        model = run.model
        gen = build_generator(model.sites, model.sign)
        n = max(run.cfg.n_x, gen.cutoff)
        rng = np.random.default_rng(run.seed)
        js = centred(n)
        v = np.zeros(2 * n + 1, complex)
        for j in model.sites.plus:
            v[n + j] = np.exp(1j * rng.uniform(0, 2 * np.pi))
            v[n - j] = np.conj(v[n + j])
        z = np.zeros(2 * n + 1, complex)
        normal = (js > 0) & ~model.sites.in_s(js) & (js <= gen.cutoff)
        for j in js[normal]:
            z[n + j] = 0.3 * (rng.standard_normal() + 1j * rng.standard_normal()) / j ** 2
            z[n - j] = np.conj(z[n + j])
        rep = verify_normal_form(model, gen, v, z)
        run.write_json("bnf.json", rep)
        sectors = ("v4", "v3z", "v2z2", "vz3", "z4")
        run.write_csv("bnf_sectors.csv", ["sector", "fitted_re", "fitted_im", "expected_re",
                                          "expected_im", "relative_error"],
                      [(s, complex(f).real, complex(f).imag, complex(e).real, complex(e).imag, err)
                       for s, f, e, err in zip(sectors, rep["fitted"], rep["expected"],
                                               rep["sector_error"])])
    _execute(ctx, "bnf", body, **kw)


@main.command("residual")
@model_options
@click.option("--torus-file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def residual(ctx, torus_file, **kw):
    """Torus functional F at the trivial torus or a stored solution."""
    def body(run):
        from .torus import TorusSystem, s0_of
        system = TorusSystem(run.model, run.params, run.omega())
        emb = _torus(run, torus_file)
        f = system.residual(emb)
        s0 = s0_of(system.nu)
        run.write_json("residual.json", {
            "omega": system.omega, "xi": system.xi, "norm_s0": f.norm(s0),
            "theta": float(abs(f.theta).max()), "y": float(abs(f.y).max()),
            "z": float(abs(f.z).max())})
    _execute(ctx, "residual", body, **kw)


@main.command("solve")
@model_options
@click.option("--max-steps", type=int)
@click.pass_context
def solve(ctx, max_steps, **kw):
    """Nash-Moser iteration for an invariant torus."""
    def body(run):
        from .nash_moser import Divergence, cantor_trace, nm_iterate
        r = run.cfg.run
        try:
            res = nm_iterate(run.model, run.params, run.omega(), max_steps=r["max_steps"],
                             tol=r["tol"], n0=r["n0"], chi=r["chi"], seed=run.seed)
        except Divergence as err:
            _history(run, err.history)
            raise
        _history(run, res.history)
        run.write_json("cantor.json", cantor_trace(res.history))
        if res.excluded:
            raise Excluded("frequency removed from the Cantor set", [list(w) for w in res.witnesses])
        run.write_text("solution.json", res.solution.to_json() + "\n")
        last = res.history[-1]
        run.write_json("solve.json", {"converged": res.converged, "steps": len(res.history) - 1,
                                      "residual": last.residual, "zeta": last.zeta,
                                      "inverse_defect": res.defect,
                                      "constants": res.constants.__dict__})
        if not res.converged:
            raise RuntimeError(f"no convergence in {r['max_steps']} steps "
                               f"(residual {last.residual:.3g})")
    _execute(ctx, "solve", body, max_steps=max_steps, **kw)


def _history(run, history):
    rows = [h.as_row() for h in history]
    keys = list(rows[0])
    run.write_csv("history.csv", keys, [[row[k] for k in keys] for row in rows])


@main.command("reduce")
@model_options
@click.option("--torus-file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def reduce(ctx, torus_file, **kw):
    """Five-step reduction of the linearized operator."""
    def body(run):
        from .reduction import reduce_operator, stage_report
        chain = reduce_operator(run.model, run.params, _torus(run, torus_file), run.omega())
        rows = stage_report(chain, n_samples=run.cfg.run["samples"])
        keys = list(rows[0])
        run.write_csv("stages.csv", keys, [[row[k] for k in keys] for row in rows])
        run.write_json("reduce.json", {"m3": chain.m3, "m1": chain.m1})
    _execute(ctx, "reduce", body, **kw)


@main.command("floquet")
@model_options
@click.option("--torus-file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def floquet(ctx, torus_file, **kw):
    """Floquet exponents of the linearized operator."""
    def body(run):
        import numpy as np
        from .reducibility import PhaseSpace, default_n0, fit_m3_m1, reduce_to_constant
        from .reduction import reduce_operator
        p = run.params
        chain = reduce_operator(run.model, p, _torus(run, torus_file), run.omega())
        space = PhaseSpace.from_frame(chain.frame)
        state = reduce_to_constant(space, chain.final.delta, chain.final.X, p.gamma, p.tau,
                                   default_n0(p.eps, p.gamma, p.a), tol=run.cfg.run["kam_tol"])
        modes = chain.frame.modes
        keep = np.abs(modes) <= p.n_x
        j, mu = modes[keep], state.mu[keep]
        r = mu - 1j * (-chain.m3 * j ** 3 + chain.m1 * j)
        run.write_csv("floquet.csv", ["j", "re_mu", "im_mu", "abs_r"],
                      [(int(a), float(b.real), float(b.imag), float(abs(c)))
                       for a, b, c in zip(j, mu, r)])
        m3f, m1f = fit_m3_m1(j, mu)
        run.write_json("floquet.json", {"m3_fit": m3f, "m1_fit": m1f, "m3": chain.m3,
                                        "m1": chain.m1, "steps": len(state.history),
                                        "max_re": float(np.abs(mu.real).max()),
                                        "sup_r": float(np.abs(r).max())})
    _execute(ctx, "floquet", body, **kw)


@main.command("measure")
@model_options
@click.option("--method", type=click.Choice(["midpoint", "cell"]))
@click.option("--n-grid", type=int)
@click.option("--l-max", type=int)
@click.pass_context
def measure(ctx, method, n_grid, l_max, **kw):
    """Excluded fraction of the frequency set and its gamma slope."""
    def body(run):
        from .measure import (excluded_fraction, excluded_mask, fit_eigen_model, omega_grid,
                              pair_list)
        r = run.cfg.run
        model, p = run.model, run.params
        gammas = list(r["gammas"]) if r["gammas"] else [p.gamma, 2 * p.gamma, 4 * p.gamma]
        eigen = fit_eigen_model(model, p)
        summ = excluded_fraction(model, p, r["n_grid"], gammas, l_max=r["l_max"], eigen=eigen,
                                 method=r["measure_method"])
        omegas, _ = omega_grid(model, p.eps, r["n_grid"])
        m3, m1 = eigen.constants(omegas)
        wits = []
        mask = excluded_mask(omegas, m3, m1, gammas[0], p.tau, summ["l_max"],
                             pair_list(model.sites, summ["d_max"]), wits)
        first = {tuple(w.omega): w for w in wits}
        rows = []
        for om, ex in zip(omegas, mask):
            w = first.get(tuple(om))
            rows.append([*map(float, om), bool(ex),
                         "" if w is None else f"l={list(w.l)} j={w.j} k={w.k}"])
        header = [f"omega_{i + 1}" for i in range(len(model.sites.plus))] + ["excluded", "witness"]
        run.write_csv("measure.csv", header, rows)
        summ.pop("witnesses")
        summ["eigen_fit_error"] = eigen.fit_error
        run.write_json("measure.json", summ)
        click.echo(f"fractions {summ['fractions']} slope {summ['slope']}")
    _execute(ctx, "measure", body, measure_method=method, n_grid=n_grid, l_max=l_max, **kw)


@main.command("evolve")
@model_options
@click.option("--torus-file", type=click.Path(exists=True, dir_okay=False))
@click.option("--t", "t", type=float, help="Time horizon.")
@click.option("--dt", type=float)
@click.option("--scheme", type=click.Choice(["etdrk4", "midpoint"]))
@click.option("--every", type=int, help="Steps between snapshots.")
@click.pass_context
def evolve(ctx, torus_file, t, dt, scheme, every, **kw):
    """Integrate the PDE from the torus at phi = 0."""
    def body(run):
        import numpy as np
        from .evolve import EvolutionConfig, torus_defect
        from .fourier import to_grid
        r = run.cfg.run
        cfg = EvolutionConfig(dt=r["dt"], T=r["t"], scheme=r["scheme"], every=r["every"])
        rep = torus_defect(run.model, run.params, run.omega(), _torus(run, torus_file), cfg)
        traj = rep["trajectory"]
        n = (traj.u.shape[-1] - 1) // 2
        m = 2 * n + 2
        vals = to_grid(traj.u, [m]).real
        x = 2 * np.pi * np.arange(m) / m
        run.write_csv("trajectory.csv", ["t"] + [f"x={xi:.6f}" for xi in x],
                      [[float(tt), *map(float, row)] for tt, row in zip(traj.t, vals)])
        run.write_csv("defect.csv", ["t", "defect", "phase_error", "energy", "mass"],
                      [(float(a), float(b), float(c), float(d), float(e)) for a, b, c, d, e in
                       zip(traj.t, rep["defect"], rep["phase_error"], traj.energy, traj.mass)])
        run.write_json("evolve.json", {k: rep[k] for k in ("max_defect", "relative", "energy_drift",
                                                          "mass_drift", "interpolation_error")})
    _execute(ctx, "evolve", body, t=t, dt=dt, scheme=scheme, every=every, **kw)


if __name__ == "__main__":
    sys.exit(main())
