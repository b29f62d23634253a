"""Run configuration: flat sectioned ``key = value`` files.

Files are read with :mod:`configparser`; surrounding quotes and TOML-style
brackets around lists are tolerated, so a flat TOML file with numeric and
string values reads the same way.  Every default is written out when a
configuration is persisted, so a stored run never depends on defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .errors import ConfigError, InvalidParameters

_SECTIONS = ("problem", "domain", "flow", "constants", "minimax", "initial", "io")


def _strip(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        v = v[1:-1]
    return v


def _floats(v: str) -> tuple:
    v = _strip(v).strip("[]()")
    return tuple(float(x) for x in v.replace(";", ",").split(",") if x.strip())


def _bool(v: str) -> bool:
    s = _strip(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class Problem:
    n: int = 2
    p: float = 1.5
    q: float = 3.0
    epsilon: float = 0.05


@dataclass
class Domain:
    lengths: tuple = (1.0, 1.0)
    # cells per axis; 0 means choose from h_y
    cells: tuple = (0, 0)
    h_y: float = 0.2


@dataclass
class FlowSection:
    scheme: str = "semi_implicit"
    dt_safety: float = 0.9
    dt_max: float = 0.1
    t_end: float = 20.0
    membership_every: float = 0.25
    threshold: Optional[float] = None
    conv_tol: float = 1e-6
    conv_steps: int = 100


@dataclass
class Constants:
    # ideal values are e^{-1/eps^2} for sigma and e^{-1/eps^4} for s, which underflow
    N: float = 2.0
    delta_bar_factor: float = 0.1
    delta_hat: float = 0.1
    sigma: float = 0.0          # 0 means 1e-4 * S0
    s_bar: float = 1e-8         # regularizer in stretched coordinates
    energy_cap_factor: float = 3.0
    holder_gamma: float = 0.5
    holder_cap_factor: float = 3.0
    descent_tol: float = 1e-8
    tail_tol: float = 1e-14


@dataclass
class MinimaxSection:
    k: int = 1
    l: int = 0
    pos_res: int = 8
    coef_res: int = 3
    t_horizon: float = 5.0
    t_track: float = 5.0
    t_final: float = 100.0
    residual_tol: float = 1e-3
    prune: bool = True


@dataclass
class Initial:
    interior: str = ""      # "x1,x2; x1,x2"
    boundary: str = ""      # "edge:s; edge:s"
    a: str = ""
    b: str = ""
    peaks: str = ""         # path to a peak configuration file
    snapshot: str = ""      # path to a PKFLD snapshot


@dataclass
class IO:
    out: str = "peakflow_out"
    snapshot_every: float = 0.0
    seed: int = 0


@dataclass
class RunConfig:
    problem: Problem = field(default_factory=Problem)
    domain: Domain = field(default_factory=Domain)
    flow: FlowSection = field(default_factory=FlowSection)
    constants: Constants = field(default_factory=Constants)
    minimax: MinimaxSection = field(default_factory=MinimaxSection)
    initial: Initial = field(default_factory=Initial)
    io: IO = field(default_factory=IO)


def _convert(default, raw: str, name: str):
    try:
        if isinstance(default, bool):
            return _bool(raw)
        if isinstance(default, int):
            return int(float(_strip(raw)))
        if isinstance(default, float) or default is None:
            s = _strip(raw)
            return None if s.lower() in ("", "none") else float(s)
        if isinstance(default, tuple):
            vals = _floats(raw)
            return tuple(int(v) for v in vals) if all(isinstance(x, int) for x in default) else vals
        return _strip(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        known = {f.name: f for f in fields(obj)}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            setattr(obj, key, _convert(getattr(obj, key), raw, f"{sec}.{key}"))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read())


def validate(cfg: RunConfig) -> None:
    pr = cfg.problem
    if pr.n not in (1, 2, 3):
        raise InvalidParameters(f"n must be 1, 2 or 3, got {pr.n}")
    if not pr.p > 1:
        raise InvalidParameters(f"p must exceed 1, got {pr.p}")
    if not pr.q > pr.p:
        raise InvalidParameters(f"q must exceed p, got p={pr.p}, q={pr.q}")
    if not pr.epsilon > 0:
        raise InvalidParameters("epsilon must be positive")
    if cfg.flow.scheme not in ("explicit", "semi_implicit"):
        raise InvalidParameters(f"unknown scheme {cfg.flow.scheme!r}")
    if cfg.minimax.k < 0 or cfg.minimax.l < 0 or cfg.minimax.k + cfg.minimax.l < 1:
        raise InvalidParameters("minimax needs k + l >= 1")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: RunConfig) -> str:
    out = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        out.append(f"[{sec}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def materialize(cfg: RunConfig, S0: float) -> RunConfig:
    """Copy with data-dependent defaults replaced by their values."""
    c = replace(cfg, constants=replace(cfg.constants), domain=replace(cfg.domain))
    if c.constants.sigma <= 0:
        c.constants.sigma = 1e-4 * S0
    return c


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))
