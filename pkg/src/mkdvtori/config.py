"""Run configuration: an INI file with [model], [params] and [run] sections.

    [model]
    sites = 1
    sign = 1
    lambda = false
    density =
        1e-6 const 0 5 0
        0.5 cos 1 3 2

    [params]
    eps = 0.05
    a = 0.1
    tau = 3
    n_phi = 16
    n_x = 32

Density lines read ``c kind m p q`` for the monomial c h_m(x) u^p u_x^q with
h_m one of cos(mx), sin(mx) or 1 (kind ``const``).
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_density", "RUN_DEFAULTS"]


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


RUN_DEFAULTS = {
    "xi": None,
    "omega": None,
    "max_steps": 6,
    "tol": 1e-10,
    "n0": 4.0,
    "chi": 1.5,
    "kam_tol": 1e-8,
    "n_grid": 1000,
    "gammas": None,
    "l_max": None,
    "measure_method": "midpoint",
    "dt": 0.01,
    "t": 10.0,
    "scheme": "etdrk4",
    "every": 10,
    "samples": 3,
}

_MODEL_KEYS = {"sites", "sign", "lambda", "density"}
_PARAM_KEYS = {"eps", "a", "tau", "n_phi", "n_x"}


@dataclass(frozen=True)
class RunConfig:
    sites: tuple = (1,)
    sign: int = 1
    mass_variant: bool = False
    density: tuple = ()
    eps: float = 0.05
    a: float = 0.1
    tau: float = 3.0
    n_phi: int = 16
    n_x: int = 32
    run: dict = field(default_factory=lambda: dict(RUN_DEFAULTS))
    source: str = ""

    def model(self):
        from .hamiltonian import Model, Monomial, PolynomialDensity
        from .sites import SiteSet
        dens = PolynomialDensity(tuple(Monomial(c, kind, m, p, q) for c, kind, m, p, q in self.density))
        lam = 0.75 * self.sign if self.mass_variant else 0.0
        return Model(self.sign, dens, lam, SiteSet(self.sites))

    def params(self):
        from .torus import Params
        return Params(self.eps, self.a, self.tau, self.n_phi, self.n_x)

    def with_overrides(self, **kw):
        run = dict(self.run)
        top = {}
        for key, val in kw.items():
            if val is None:
                continue
            if key in RUN_DEFAULTS:
                run[key] = val
            else:
                top[key] = val
        return _validate(replace(self, run=run, **top))

    def as_dict(self):
        return {"model": {"sites": list(self.sites), "sign": self.sign,
                          "lambda": self.mass_variant, "density": [list(m) for m in self.density]},
                "params": {"eps": self.eps, "a": self.a, "tau": self.tau,
                           "n_phi": self.n_phi, "n_x": self.n_x},
                "run": {k: v for k, v in self.run.items()}}

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_density(text, path="model.density"):
    out = []
    for n, line in enumerate(l.strip() for l in text.splitlines()):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        where = f"{path}[{len(out)}]"
        if len(parts) != 5:
            raise ConfigError(where, f"expected 'c kind m p q', got {line!r}")
        try:
            c, kind, m, p, q = float(parts[0]), parts[1], int(parts[2]), int(parts[3]), int(parts[4])
        except ValueError as err:
            raise ConfigError(where, str(err)) from None
        if kind not in ("cos", "sin", "const"):
            raise ConfigError(where + ".kind", f"unknown harmonic {kind!r}")
        if p < 0 or q < 0:
            raise ConfigError(where, "powers must be nonnegative")
        if p + q < 5:
            raise ConfigError(where, f"order p + q = {p + q} is below five")
        out.append((c, kind, m, p, q))
    return tuple(out)


def _floats(text, path):
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(path, f"expected numbers, got {text!r}") from None


def _ints(text, path):
    try:
        return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(path, f"expected integers, got {text!r}") from None


def _bool(text, path):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(path, f"expected a boolean, got {text!r}")


def _coerce_run(key, text):
    path = f"run.{key}"
    default = RUN_DEFAULTS[key]
    if key in ("xi", "omega", "gammas"):
        return _floats(text, path)
    if key in ("measure_method", "scheme"):
        return text.strip()
    if key in ("max_steps", "n_grid", "every", "samples", "l_max"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(path, f"expected an integer, got {text!r}") from None
    try:
        return type(default)(text) if default is not None else float(text)
    except ValueError:
        raise ConfigError(path, f"expected a number, got {text!r}") from None


def load_config(path=None, text=None):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    text = text or ""
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError("config", str(err).splitlines()[0]) from None
    for sec in cp.sections():
        if sec not in ("model", "params", "run"):
            raise ConfigError(sec, "unknown section")
    kw = {}
    run = dict(RUN_DEFAULTS)
    if cp.has_section("model"):
        sec = cp["model"]
        for key in sec:
            if key not in _MODEL_KEYS:
                raise ConfigError(f"model.{key}", "unknown key")
        if "sites" in sec:
            kw["sites"] = _ints(sec["sites"], "model.sites")
        if "sign" in sec:
            kw["sign"] = _ints(sec["sign"], "model.sign")[0]
        if "lambda" in sec:
            kw["mass_variant"] = _bool(sec["lambda"], "model.lambda")
        if "density" in sec:
            kw["density"] = parse_density(sec["density"])
    if cp.has_section("params"):
        sec = cp["params"]
        for key in sec:
            if key not in _PARAM_KEYS:
                raise ConfigError(f"params.{key}", "unknown key")
            conv = int if key in ("n_phi", "n_x") else float
            try:
                kw[key] = conv(sec[key])
            except ValueError:
                raise ConfigError(f"params.{key}", f"bad value {sec[key]!r}") from None
    if cp.has_section("run"):
        for key in cp["run"]:
            if key not in RUN_DEFAULTS:
                raise ConfigError(f"run.{key}", "unknown key")
            run[key] = _coerce_run(key, cp["run"][key])
    return _validate(RunConfig(run=run, source=text, **kw))


def _validate(cfg):
    sites = tuple(cfg.sites)
    if not sites:
        raise ConfigError("model.sites", "at least one site is required")
    if any(j <= 0 for j in sites):
        raise ConfigError("model.sites", "sites must be positive")
    if len(set(sites)) != len(sites):
        raise ConfigError("model.sites", "sites must be distinct")
    if cfg.sign not in (1, -1):
        raise ConfigError("model.sign", "sign must be 1 or -1")
    if not 0 < cfg.a < 1 / 6:
        raise ConfigError("params.a", "a must lie in (0, 1/6)")
    if cfg.eps <= 0:
        raise ConfigError("params.eps", "eps must be positive")
    if cfg.tau < len(sites) + 2:
        raise ConfigError("params.tau", f"tau must be at least nu + 2 = {len(sites) + 2}")
    if cfg.n_phi < 1 or cfg.n_x < 1:
        raise ConfigError("params.n_x" if cfg.n_x < 1 else "params.n_phi", "truncations must be positive")
    if cfg.n_x < 3 * max(sites) + 1:
        raise ConfigError("params.n_x", f"x truncation must be at least {3 * max(sites) + 1}")
    for i, mono in enumerate(cfg.density):
        if mono[3] + mono[4] < 5:
            raise ConfigError(f"model.density[{i}]", "order p + q is below five")
    run = cfg.run
    for key in ("xi", "omega"):
        if run.get(key) is not None and len(run[key]) != len(sites):
            raise ConfigError(f"run.{key}", f"needs {len(sites)} entries")
    if run.get("xi") is not None and any(x <= 0 for x in run["xi"]):
        raise ConfigError("run.xi", "amplitudes must be positive")
    if run["measure_method"] not in ("midpoint", "cell"):
        raise ConfigError("run.measure_method", "must be 'midpoint' or 'cell'")
    if run["scheme"] not in ("etdrk4", "midpoint"):
        raise ConfigError("run.scheme", "must be 'etdrk4' or 'midpoint'")
    if run["dt"] == 0:
        raise ConfigError("run.dt", "dt must be nonzero")
    if run["max_steps"] < 0:
        raise ConfigError("run.max_steps", "must be nonnegative")
    return replace(cfg, sites=sites)
