"""INI-style experiment configuration with strict validation.

Every key is declared once in ``KEYS`` with its type, default and admissible
range; the README key table mirrors this dictionary.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError
from .sde_core import STEPS_PER_YEAR, default_threads

KINDS = ("band", "welfare", "scaling", "price", "hedge", "semistatic", "shadow-check")
REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: type
    default: object = None
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    choices: tuple | None = None
    help: str = ""


KEYS: dict[str, dict[str, Key]] = {
    "market": {
        "model": Key(str, "black-scholes", choices=("black-scholes", "basis-risk"), help="market model"),
        "S0": Key(float, REQUIRED, 0.0, lo_open=True, help="initial price of the traded asset"),
        "mu": Key(float, REQUIRED, help="drift of the traded asset per year"),
        "sigma": Key(float, REQUIRED, 0.0, lo_open=True, help="volatility of the traded asset"),
        "Y0": Key(float, None, 0.0, lo_open=True, help="initial value of the non-traded asset (basis-risk)"),
        "mu_Y": Key(float, None, help="drift of the non-traded asset (basis-risk)"),
        "sigma_Y": Key(float, None, 0.0, lo_open=True, help="volatility of the non-traded asset (basis-risk)"),
        "rho": Key(float, None, -1.0, 1.0, help="correlation of the two assets (basis-risk)"),
    },
    "preference": {
        "p": Key(float, REQUIRED, 0.0, lo_open=True, help="absolute risk aversion"),
        "x0": Key(float, 0.0, help="initial wealth"),
    },
    "claim": {
        "kind": Key(str, "call", choices=("call", "put"), help="claim type"),
        "strike": Key(float, None, 0.0, lo_open=True, help="strike"),
        "maturity": Key(float, None, 0.0, lo_open=True, help="maturity in years (default: numerics.T)"),
        "n": Key(float, 1.0, 0.0, lo_open=True, help="number of claims sold"),
        "hedge_kind": Key(str, "call", choices=("call", "put"), help="semistatic: type of the hedge claim"),
        "hedge_strike": Key(float, None, 0.0, lo_open=True, help="semistatic: strike of the hedge claim"),
    },
    "numerics": {
        "seed": Key(int, REQUIRED, 0, help="random seed"),
        "T": Key(float, 1.0, 0.0, lo_open=True, help="horizon in years"),
        "n_steps": Key(int, None, 1, help=f"time steps (default {STEPS_PER_YEAR} per year)"),
        "n_paths": Key(int, 10_000, 1, help="Monte-Carlo paths"),
        "eps": Key(float, None, 0.0, 1.0, help="relative half-spread"),
        "eps_list": Key(list, None, help="comma-separated half-spreads for scaling"),
        "threads": Key(int, None, 1, help="worker threads (default: available cores)"),
        "start": Key(str, "uniform", choices=("uniform", "center"), help="initial position within the band"),
        "chunk_size": Key(int, 2000, 1, help="paths simulated per chunk"),
        "search_lo": Key(float, -10.0, help="semistatic: lower end of the search interval"),
        "search_hi": Key(float, 10.0, help="semistatic: upper end of the search interval"),
    },
    "output": {
        "dir": Key(str, ".", help="output directory (overridden by --out)"),
        "ledger_paths": Key(int, 0, 0, help="welfare: paths dumped to ledger.csv"),
    },
}

NEEDS = {
    "band": ("eps",),
    "welfare": ("eps",),
    "scaling": ("eps_list",),
    "price": ("eps", "strike"),
    "hedge": ("strike",),
    "semistatic": ("strike", "hedge_strike"),
    "shadow-check": ("eps",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def echo(self) -> dict:
        return {"kind": self.kind, **{s: dict(v) for s, v in self.sections.items()}}


def _convert(section: str, name: str, key: Key, raw: str):
    try:
        if key.kind is list:
            value = [float(v) for v in raw.split(",") if v.strip()]
        elif key.kind is int:
            value = int(raw)
        elif key.kind is float:
            value = float(raw)
        else:
            value = raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {name}: cannot parse {raw!r} as {key.kind.__name__}") from None
    _check_range(section, name, key, value)
    return value


def _check_range(section, name, key: Key, value):
    if key.choices is not None and value not in key.choices:
        raise ConfigError(f"[{section}] {name} must be one of {', '.join(key.choices)}, got {value!r}")
    vals = value if isinstance(value, list) else [value]
    for v in vals:
        if isinstance(v, str):
            continue
        if v != v:
            raise ConfigError(f"[{section}] {name} must be a number")
        if key.lo is not None and (v < key.lo or (key.lo_open and v == key.lo)):
            bound = f"> {key.lo}" if key.lo_open else f">= {key.lo}"
            raise ConfigError(f"[{section}] {name} = {v} out of range: must be {bound}")
        if key.hi is not None and v > key.hi:
            raise ConfigError(f"[{section}] {name} = {v} out of range: must be <= {key.hi}")


def parse_config(text: str, kind: str, *, overrides: dict | None = None) -> ExperimentConfig:
    """Validate an INI document for experiment ``kind`` and fill defaults.

    ``overrides`` maps ``(section, key)`` to values applied after parsing.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None

    unknown = [s for s in cp.sections() if s not in KEYS]
    unknown += [f"{s}.{k}" for s in cp.sections() if s in KEYS for k in cp[s] if k not in KEYS[s]]
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")

    sections = {}
    missing = []
    for sec, keys in KEYS.items():
        vals = {}
        for name, key in keys.items():
            if cp.has_option(sec, name):
                vals[name] = _convert(sec, name, key, cp[sec][name])
            elif key.default is REQUIRED:
                missing.append(f"{sec}.{name}")
            else:
                vals[name] = key.default
        sections[sec] = vals
    for (sec, name), value in (overrides or {}).items():
        if value is not None:
            _check_range(sec, name, KEYS[sec][name], value)
            sections[sec][name] = value
            if f"{sec}.{name}" in missing:
                missing.remove(f"{sec}.{name}")
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    num, mkt, claim = sections["numerics"], sections["market"], sections["claim"]
    if num["n_steps"] is None:
        num["n_steps"] = max(1, int(round(STEPS_PER_YEAR * num["T"])))
    if num["threads"] is None:
        num["threads"] = default_threads()
    if claim["maturity"] is None:
        claim["maturity"] = num["T"]
    elif claim["maturity"] > num["T"]:
        raise ConfigError(f"[claim] maturity = {claim['maturity']} exceeds the horizon T = {num['T']}")

    need = {k: num.get(k, claim.get(k)) for k in NEEDS[kind]}
    absent = [k for k, v in need.items() if v is None]
    if absent:
        raise ConfigError(f"experiment {kind!r} needs: {', '.join(absent)}")
    if kind == "scaling" and len(num["eps_list"]) < 3:
        raise ConfigError("[numerics] eps_list needs at least 3 values for a scaling study")
    if kind == "scaling" and any(not 0.0 <= e <= 1.0 for e in num["eps_list"]):
        raise ConfigError("[numerics] eps_list values must lie in [0, 1]")
    if kind == "hedge":
        if mkt["model"] != "basis-risk":
            raise ConfigError("experiment 'hedge' needs [market] model = basis-risk")
        absent = [k for k in ("Y0", "mu_Y", "sigma_Y", "rho") if mkt[k] is None]
        if absent:
            raise ConfigError(f"basis-risk market needs: {', '.join('market.' + k for k in absent)}")
    elif mkt["model"] != "black-scholes":
        raise ConfigError(f"experiment {kind!r} needs [market] model = black-scholes")
    if kind == "semistatic" and not num["search_lo"] < num["search_hi"]:
        raise ConfigError("[numerics] search_lo must be below search_hi")
    return ExperimentConfig(kind, sections)
