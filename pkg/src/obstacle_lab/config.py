"""Experiment configuration: flat ``key = value`` INI text with sections."""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

from .grid import GridError, ProblemParams

EXPERIMENTS = ("solve", "diagnostics", "blowup", "epiperimetric", "verify-oracle")
DATUM_KINDS = ("cone", "perturbation", "modes", "field", "family")

SCHEMA: dict[str, dict[str, str]] = {
    "params": {
        "n": "dimension, 2 or 3 (default 2)",
        "s": "fractional order in (0,1) (default 0.5); the weight exponent is a = 1 - 2s",
        "h": "grid spacing, a float or a fraction such as 1/64 (default 1/64)",
        "R_dom": "domain radius, an integer multiple of h (default 1)",
    },
    "experiment": {
        "name": "one of " + ", ".join(EXPERIMENTS),
    },
    "datum": {
        "kind": "cone | perturbation | modes | field | family (default depends on the experiment)",
        "lambda": "cone scale (kind=cone, default 1)",
        "e": "comma-separated unit plane direction (kind=cone/perturbation, default e_1)",
        "k": "Chebyshev degree of the perturbation (kind=perturbation, default 2)",
        "eps": "perturbation amplitude (kind=perturbation, default 0.1)",
        "id": "index 0..19 into the shipped perturbation family (kind=perturbation; overrides e/k/eps)",
        "coefficients": "comma-separated amplitudes of the modes r^(3/2+2m) cos((3/2+2m)θ), m=1,2,.. (kind=modes; n=2, s=1/2)",
        "path": "field snapshot file (kind=field)",
    },
    "radii": {
        "center": "comma-separated plane point; 'auto' picks the free-boundary node nearest the origin (default auto)",
        "r_min": "smallest radius (default 8h)",
        "r_max": "largest radius (default: trusted reach minus 2h)",
        "list": "comma-separated radii for blow-up fits (default 0.125, 0.1875, 0.25, 0.375, 0.5 clipped to the window)",
        "decay_window": "two radii bounding the decay fit (default 0.1, 0.5)",
    },
    "output": {
        "dir": "output directory, relative to the config file (default: out)",
    },
    "tolerances": {
        "tol": "PSOR update tolerance (default 1e-10, relative to max|g|)",
        "omega": "PSOR relaxation in (0,2) or 'auto' for the near-optimal value (default auto)",
        "max_iter": "PSOR sweep cap (default 200000)",
        "kkt": "tolerance for the KKT report (default 1e-5)",
        "mono": "relative monotonicity tolerance (default 1e-6)",
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, section: str | None = None, key: str | None = None, line: int | None = None):
        where = ""
        if section:
            where = f"[{section}]" + (f" {key}" if key else "")
            if line:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.section, self.key, self.line = section, key, line


@dataclass
class ExperimentConfig:
    params: ProblemParams
    experiment: str
    datum: dict[str, str] = field(default_factory=dict)
    radii: dict[str, str] = field(default_factory=dict)
    output_dir: str = "out"
    tol: float = 1e-10
    omega: float | None = None
    max_iter: int = 200_000
    kkt_tol: float = 1e-5
    mono_tol: float = 1e-6
    source: str | None = None

    def floats(self, section: str, key: str, default=None) -> list[float] | None:
        raw = getattr(self, section).get(key)
        if raw is None:
            return default
        try:
            return [parse_number(v) for v in raw.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(str(exc), section, key, self._line(section, key)) from None

    def _line(self, section: str, key: str) -> int | None:
        return locate(self.source, section, key) if self.source else None


def parse_number(text: str) -> float:
    t = text.strip()
    try:
        v = float(Fraction(t)) if "/" in t else float(t)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {text!r}")
    return v


def locate(path: str | None, section: str, key: str) -> int | None:
    """1-based line of ``key`` inside ``[section]`` of the config file, if present."""
    if not path or not os.path.exists(path):
        return None
    cur = None
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            s = line.strip()
            if s.startswith("[") and s.endswith("]"):
                cur = s[1:-1].strip()
            elif cur == section and "=" in s and s.split("=", 1)[0].strip() == key:
                return i
    return None


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}", line=line) from None
    return config_from_parser(cp, path)


def config_from_parser(cp: configparser.ConfigParser, path: str | None = None) -> ExperimentConfig:
    known = set(SCHEMA)
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section (expected one of {sorted(known)})", sec, line=_section_line(path, sec))
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError("unknown key", sec, key, locate(path, sec, key))

    def num(sec, key, default):
        if not cp.has_option(sec, key):
            return default
        try:
            return parse_number(cp[sec][key])
        except ValueError as exc:
            raise ConfigError(str(exc), sec, key, locate(path, sec, key)) from None

    if not cp.has_option("experiment", "name"):
        raise ConfigError("missing experiment name", "experiment", "name")
    name = cp["experiment"]["name"].strip()
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}", "experiment", "name", locate(path, "experiment", "name"))

    n = num("params", "n", 2)
    if n != int(n):
        raise ConfigError("dimension must be an integer", "params", "n", locate(path, "params", "n"))
    s = num("params", "s", 0.5)
    h = num("params", "h", 1 / 64)
    R = num("params", "R_dom", 1.0)
    try:
        params = ProblemParams(n=int(n), s=s, h=h, R_dom=R)
    except GridError as exc:
        key = _guess_param_key(str(exc))
        raise ConfigError(str(exc), "params", key, locate(path, "params", key) if key else None) from None

    if 2 * params.half_cells < 16:
        raise ConfigError(
            f"grid too coarse: {2 * params.half_cells} cells across the domain (< 16)",
            "params", "h", locate(path, "params", "h"),
        )

    tol = num("tolerances", "tol", 1e-10)
    kkt = num("tolerances", "kkt", 1e-5)
    mono = num("tolerances", "mono", 1e-6)
    for key, v in (("tol", tol), ("kkt", kkt), ("mono", mono)):
        if not v > 0:
            raise ConfigError("tolerance must be positive", "tolerances", key, locate(path, "tolerances", key))
    omega = None
    if cp.has_option("tolerances", "omega") and cp["tolerances"]["omega"].strip() != "auto":
        omega = num("tolerances", "omega", None)
        if not 0 < omega < 2:
            raise ConfigError("omega must lie in (0, 2)", "tolerances", "omega", locate(path, "tolerances", "omega"))
    max_iter = num("tolerances", "max_iter", 200_000)
    if max_iter < 1 or max_iter != int(max_iter):
        raise ConfigError("max_iter must be a positive integer", "tolerances", "max_iter", locate(path, "tolerances", "max_iter"))

    datum = dict(cp["datum"]) if cp.has_section("datum") else {}
    kind = datum.get("kind")
    if kind is not None and kind not in DATUM_KINDS:
        raise ConfigError(f"unknown datum kind {kind!r}", "datum", "kind", locate(path, "datum", "kind"))
    if kind == "field":
        fp = datum.get("path")
        if not fp:
            raise ConfigError("kind=field needs a path", "datum", "path", locate(path, "datum", "kind"))
        if path and not os.path.isabs(fp):
            fp = os.path.join(os.path.dirname(os.path.abspath(path)), fp)
        if not os.path.exists(fp):
            raise ConfigError(f"field file not found: {fp}", "datum", "path", locate(path, "datum", "path"))
        datum["path"] = fp
    out = cp["output"].get("dir", "out") if cp.has_section("output") else "out"
    if path and not os.path.isabs(out):
        out = os.path.join(os.path.dirname(os.path.abspath(path)), out)
    cfg = ExperimentConfig(
        params=params,
        experiment=name,
        datum=datum,
        radii=dict(cp["radii"]) if cp.has_section("radii") else {},
        output_dir=out,
        tol=tol,
        omega=omega,
        max_iter=int(max_iter),
        kkt_tol=kkt,
        mono_tol=mono,
        source=path,
    )
    # validate numeric lists eagerly so errors surface before any work
    for sec in ("datum", "radii"):
        for key, raw in getattr(cfg, sec).items():
            if key in ("kind", "path") or (key == "center" and raw.strip() == "auto"):
                continue
            cfg.floats(sec, key)
    return cfg


def _section_line(path, section):
    if not path or not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip() == f"[{section}]":
                return i
    return None


def _guess_param_key(msg: str) -> str | None:
    if msg.startswith("dimension"):
        return "n"
    if msg.startswith("s must"):
        return "s"
    if msg.startswith("R_dom"):
        return "R_dom"
    if msg.startswith("grid spacing") or msg.startswith("h="):
        return "h"
    return None


def describe_schema() -> str:
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for k, doc in keys.items():
            lines.append(f"    {k:<13} {doc}")
    return "\n".join(lines)
