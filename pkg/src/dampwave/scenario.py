"""INI scenario files: parsing, validation and the derived model objects."""

from __future__ import annotations

import ast
import configparser
import hashlib
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nonlinearity import ZERO, NonlinearitySpec, exponential, polynomial
from .operator_core import CoefficientField, DomainSpec, build_model

SECTIONS = ("domain", "coefficients", "nonlinearity", "run", "decay", "regularity", "attractor")


class ConfigError(ValueError):
    """Invalid scenario; the CLI maps it to exit code 2."""


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _number(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _number(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_number(node.left), _number(node.right))
    raise ValueError("not a numeric expression")


def parse_value(text: str):
    """Numbers (with 'pi' and arithmetic), lists/tuples of those, or a bare string."""
    text = text.strip()
    try:
        tree = ast.parse(text, mode="eval").body
    except SyntaxError:
        return text
    try:
        if isinstance(tree, (ast.List, ast.Tuple)):
            return [_number(e) for e in tree.elts]
        return _number(tree)
    except ValueError:
        return text


@dataclass
class Scenario:
    raw: dict
    base_dir: Path
    seed: int = 0
    out: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    # -- access helpers
    def get(self, section, key, default=None):
        return self.raw.get(section, {}).get(key, default)

    def require(self, section, key):
        if key not in self.raw.get(section, {}):
            raise ConfigError(f"[{section}] is missing required key '{key}'")
        return self.raw[section][key]

    def number(self, section, key, default=None, *, positive=False, nonneg=False):
        val = self.get(section, key, default)
        if val is None:
            raise ConfigError(f"[{section}] is missing required key '{key}'")
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"[{section}] {key} must be a number, got {val!r}")
        if positive and not val > 0:
            raise ConfigError(f"[{section}] {key} must be positive")
        if nonneg and val < 0:
            raise ConfigError(f"[{section}] {key} must be nonnegative")
        return float(val)

    def number_list(self, section, key, default=None):
        val = self.get(section, key, default)
        if isinstance(val, (int, float)):
            val = [val]
        if not isinstance(val, list) or not val or not all(isinstance(x, (int, float)) for x in val):
            raise ConfigError(f"[{section}] {key} must be a nonempty list of numbers")
        return [float(x) for x in val]

    def path(self, value) -> Path:
        p = Path(value)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            raise ConfigError(f"referenced file does not exist: {p}")
        return p

    @property
    def hash(self) -> str:
        blob = json.dumps({"config": self.raw, "seed": self.seed}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    # -- domain and coefficients
    def domain(self) -> DomainSpec:
        d = int(self.number("domain", "dimension", 1))
        lengths = self.get("domain", "lengths", math.pi)
        lengths = tuple(float(x) for x in (lengths if isinstance(lengths, list) else [lengths] * d))
        try:
            return DomainSpec(d, lengths, int(self.number("domain", "grid_n", positive=True)),
                              int(self.number("domain", "modes_N", positive=True)))
        except ValueError as exc:
            raise ConfigError(f"[domain] {exc}") from None

    def _grid_field(self, section, stem, default, domain):
        if f"{stem}_file" in self.raw.get(section, {}):
            data = np.loadtxt(self.path(self.raw[section][f"{stem}_file"]))
            if data.size != int(np.prod(domain.shape)):
                raise ConfigError(f"[{section}] {stem}_file has {data.size} values, grid needs {np.prod(domain.shape)}")
            return data.reshape(domain.shape)
        return self.number(section, f"{stem}_const", default)

    def coefficients(self, domain: DomainSpec) -> CoefficientField:
        a = self._grid_field("coefficients", "a", 1.0, domain)
        beta = self._grid_field("coefficients", "beta", 0.0, domain)
        d = domain.dimension
        tensor = np.zeros(domain.shape + (d, d))
        for i in range(d):
            tensor[..., i, i] = a
        if d == 2:
            axy = self.number("coefficients", "a_xy_const", 0.0)
            tensor[..., 0, 1] = tensor[..., 1, 0] = axy
        return CoefficientField(tensor, np.broadcast_to(np.asarray(beta, float), domain.shape).copy())

    def model(self):
        if "model" not in self._cache:
            domain = self.domain()
            # declared ellipticity bounds are optional; otherwise read off the field
            bounds = {k: self.number("coefficients", k, positive=True)
                      for k in ("a0", "a1") if k in self.raw.get("coefficients", {})}
            self._cache["model"] = build_model(domain, self.coefficients(domain), **bounds)
        return self._cache["model"]

    # -- nonlinearity
    def nonlinearity(self, need_dissipative: bool = False) -> NonlinearitySpec:
        sec = self.raw.get("nonlinearity", {})
        kind = sec.get("kind", "polynomial")
        mu = sec.get("mu")
        if need_dissipative and mu is None:
            raise ConfigError("[nonlinearity] mu is required for attractor and regularity commands")
        c = None
        if "c_file" in sec:
            c = self._grid_field("nonlinearity", "c", None, self.domain()).ravel()
        elif "c_const" in sec:
            c = self.number("nonlinearity", "c_const")
        alpha = self.number("nonlinearity", "alpha", 1.0)
        beta_h = self.number("nonlinearity", "beta_h", 1.0)
        try:
            if kind == "zero":
                return ZERO
            if kind == "exponential":
                return exponential(mu, c)
            if kind != "polynomial":
                raise ConfigError(f"[nonlinearity] unknown kind '{kind}'")
            coeffs = {}
            domain = self.domain()
            for key, val in sec.items():
                if key.startswith("p") and key[1:].split("_")[0].isdigit():
                    p = int(key[1:].split("_")[0])
                    if key.endswith("_file"):
                        coeffs[p] = self._grid_field("nonlinearity", f"p{p}", None, domain).ravel()
                    elif isinstance(val, (int, float)):
                        coeffs[p] = float(val)
                    else:
                        raise ConfigError(f"[nonlinearity] {key} must be a number")
            if not coeffs:
                return ZERO
            return polynomial(coeffs, mu=mu, c=c, alpha=alpha, beta_h=beta_h)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[nonlinearity] {exc}") from None

    # -- run
    def run_params(self) -> dict:
        eps = self.number("run", "epsilon", 1.0)
        if not 0 < eps <= 1:
            raise ConfigError("[run] epsilon must lie in (0, 1]")
        return {
            "eps": eps,
            "theta": self.number("run", "theta", 0.0, nonneg=True),
            "h": self.number("run", "h", 0.01, positive=True),
            "T": self.number("run", "T", 40.0, positive=True),
            "T0": self.number("run", "transient_T0", 0.0, nonneg=True),
            "initial": str(self.get("run", "initial", "unstable 1e-4")),
        }

    def initial_state(self, model):
        """Parse [run] initial: zero | mode k a | unstable a | file path."""
        text = self.run_params()["initial"].split()
        kind = text[0] if text else "zero"
        u = np.zeros(model.N)
        if kind == "zero":
            return "field", u
        if kind == "mode" and len(text) == 3:
            return "field", model.mode(int(text[1]), float(text[2]))
        if kind == "unstable" and len(text) == 2:
            return "unstable", float(text[1])
        if kind == "file" and len(text) == 2:
            data = np.loadtxt(self.path(text[1]))
            if data.size != model.N:
                raise ConfigError(f"[run] initial file must hold {model.N} coefficients")
            return "field", data.ravel()
        raise ConfigError(f"[run] cannot parse initial = {' '.join(text)!r}")

    # -- decay / regularity / attractor
    def decay_params(self) -> dict:
        level = str(self.get("decay", "level", "Z0"))
        if level not in ("Z0", "Zm1", "both"):
            raise ConfigError("[decay] level must be Z0, Zm1 or both")
        rho = self.number("decay", "rho", 0.5)
        if not 0 < rho <= 0.5:
            raise ConfigError("[decay] rho must lie in (0, 1/2]")
        delta = self.number("decay", "delta", 0.25, positive=True)
        basis = self.get("decay", "basis_size", "full")
        R = self.get("decay", "R", "auto")
        if R != "auto" and not (isinstance(R, (int, float)) and R > 0):
            raise ConfigError("[decay] R must be 'auto' or a positive number")
        eta_max = self.get("decay", "eta_max", "auto")
        return {"rho": rho, "delta": delta, "level": level, "basis_size": basis, "R": R,
                "eta_max": eta_max,
                "theta_mode": str(self.get("decay", "theta_mode", "chain"))}

    def regularity_params(self) -> dict:
        theta = self.get("regularity", "theta", "auto")
        if theta != "auto" and not (isinstance(theta, (int, float)) and theta >= 0):
            raise ConfigError("[regularity] theta must be 'auto' or a nonnegative number")
        eps_list = self.number_list("regularity", "epsilon_list", [1.0, 0.5, 0.25, 0.125, 0.0625])
        if not all(0 < e <= 1 for e in eps_list):
            raise ConfigError("[regularity] epsilon_list entries must lie in (0, 1]")
        return {"theta": theta, "tail_Tw": self.number("regularity", "tail_Tw", 10.0, positive=True),
                "epsilon_list": eps_list,
                "uniformity_factor": self.number("regularity", "uniformity_factor", 2.0, positive=True)}

    def attractor_params(self) -> dict:
        eps_list = self.number_list("attractor", "epsilon_list", [1.0, 0.5, 0.25, 0.125])
        if not all(0 < e <= 1 for e in eps_list):
            raise ConfigError("[attractor] epsilon_list entries must lie in (0, 1]")
        tol = self.get("attractor", "tolerance", "auto")
        if tol != "auto" and not (isinstance(tol, (int, float)) and tol > 0):
            raise ConfigError("[attractor] tolerance must be 'auto' or a positive number")
        return {"ensemble": int(self.number("attractor", "ensemble", 32, positive=True)),
                "T_transient": self.number("attractor", "T_transient", 30.0, nonneg=True),
                "T_sample": self.number("attractor", "T_sample", 5.0, positive=True),
                "h": self.number("attractor", "h", 0.01, positive=True),
                "epsilon_list": eps_list,
                "trend_threshold": self.number("attractor", "trend_threshold", -0.9),
                "tolerance": None if tol == "auto" else float(tol),
                "robustness": bool(self.get("attractor", "robustness", 0))}

    def validate(self, command: str) -> None:
        """Check every section a command touches before any computation."""
        self.domain()
        self.coefficients(self.domain())
        needs_mu = command in ("attractor-sweep", "regularity")
        self.nonlinearity(need_dissipative=needs_mu)
        self.run_params()
        if command != "verify-hypotheses":
            self.decay_params()
        if command == "regularity":
            self.regularity_params()
        if command == "attractor-sweep":
            self.attractor_params()


def load_scenario(path, seed: int = 0, out=None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    if "domain" not in cp.sections():
        raise ConfigError("config needs a [domain] section")
    raw = {s: {k: parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}
    return Scenario(raw, path.parent, seed, Path(out) if out else None)


def from_dict(raw: dict, seed: int = 0, base_dir=".") -> Scenario:
    return Scenario({s: dict(v) for s, v in raw.items()}, Path(base_dir), seed)
