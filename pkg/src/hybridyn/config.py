"""Scenario configuration files.

INI format, read with :mod:`configparser`::

    [model]
    h = 1, 1
    v = 1, -1
    c0 = 0.7071067811865476,0; 0.7071067811865476,0
    hbar = 1
    t0 = 0
    q0 = 1
    p0 = 0
    H_cm = 0, 0, 0, 0.5, 0, 0.5
    V_cm = 0, 1

    [grid]
    q_min = -6
    q_max = 6
    n_q = 64
    p_min = -6
    p_max = 6
    n_p = 64
    sigma_q = 0.5625
    sigma_p = 0.5625

    [run]
    dt = 2e-3
    T = 1
    every = 50

Complex amplitudes are ``re,im`` pairs separated by ``;`` (a bare ``re``
is accepted).  Polynomials are coefficient lists in graded order
``1, q, p, q^2, qp, p^2, q^3, q^2p, qp^2, p^3, q^4, ...``.  Omitted sigmas
default to three cells.  See :data:`DEFAULTS` for every key.
"""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (CANDIDATE_DT, CONVENTIONS, DERIVATIVES, FD_STEP, GRID_DERIVATIVE, GridGenerator,
                       MeasurementModel)
from .errors import ConfigError
from .hybrid import MAX_DENSE_DIM
from .phase_space import BOUNDARY_TOL, PhaseSpaceGrid
from .polynomial import Polynomial
from .quantum import MeasuredBasisModel

DEFAULTS = {
    "model": {
        "h": "1, 1",
        "v": "1, -1",
        "c0": "0.70710678118654757,0; 0.70710678118654757,0",
        "hbar": "1",
        "t0": "0",
        "q0": "1",
        "p0": "0",
        "H_cm": "0, 0, 0, 0.5, 0, 0.5",
        "V_cm": "0, 1",
    },
    "grid": {
        "q_min": "-6", "q_max": "6", "n_q": "64",
        "p_min": "-6", "p_max": "6", "n_p": "64",
        "sigma_q": "", "sigma_p": "",
    },
    "run": {
        "dt": "2e-3",
        "T": "1",
        "every": "50",
        "representation": "grid",
        "derivative": GRID_DERIVATIVE,
        "boundary_tol": repr(BOUNDARY_TOL),
        "assemble": "true",
        "threads": "1",
        "snapshots": "ends",
        "seed": "0",
        "out": "",
    },
    "validate": {
        "t": "1",
        "fd_step": repr(FD_STEP),
        "candidate_dt": repr(CANDIDATE_DT),
        "convention": "endpoint",
    },
}


def parse_floats(text: str) -> list[float]:
    text = text.strip()
    return [float(x) for x in text.split(",")] if text else []


def parse_complex_list(text: str) -> list[complex]:
    out = []
    for item in text.split(";"):
        parts = [float(x) for x in item.split(",")]
        if len(parts) == 1:
            parts.append(0.0)
        if len(parts) != 2:
            raise ValueError(f"complex value {item.strip()!r} is not 're,im'")
        out.append(complex(parts[0], parts[1]))
    return out


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    h: np.ndarray
    v: np.ndarray
    c0: np.ndarray
    H_cm: Polynomial
    V_cm: Polynomial
    grid: PhaseSpaceGrid
    hbar: float = 1.0
    t0: float = 0.0
    q0: float = 1.0
    p0: float = 0.0
    sigma_q: float | None = None
    sigma_p: float | None = None
    dt: float = 2e-3
    T: float = 1.0
    every: int = 50
    representation: str = "grid"
    derivative: str = GRID_DERIVATIVE
    boundary_tol: float | None = BOUNDARY_TOL
    assemble: bool = True
    threads: int = 1
    snapshots: str = "ends"
    seed: int = 0
    out: str = ""
    validate_t: float = 1.0
    fd_step: float = FD_STEP
    candidate_dt: float = CANDIDATE_DT
    convention: str = "endpoint"

    @property
    def dim(self) -> int:
        return len(self.h)

    @property
    def widths(self) -> tuple[float, float]:
        sq = 3 * self.grid.dq if self.sigma_q is None else self.sigma_q
        sp = 3 * self.grid.dp if self.sigma_p is None else self.sigma_p
        return sq, sp

    def model(self) -> MeasurementModel:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return MeasurementModel(MeasuredBasisModel(self.h, self.v, self.c0), self.H_cm, self.V_cm,
                                    self.hbar, self.t0, self.q0, self.p0)


def _build(cp: configparser.ConfigParser) -> ScenarioConfig:
    md, gd, rd, vd = cp["model"], cp["grid"], cp["run"], cp["validate"]
    sq, sp = gd["sigma_q"].strip(), gd["sigma_p"].strip()
    btol = rd["boundary_tol"].strip().lower()
    return ScenarioConfig(
        h=np.array(parse_floats(md["h"])),
        v=np.array(parse_floats(md["v"])),
        c0=np.array(parse_complex_list(md["c0"])),
        H_cm=Polynomial.from_coefficients(parse_floats(md["H_cm"])),
        V_cm=Polynomial.from_coefficients(parse_floats(md["V_cm"])),
        grid=PhaseSpaceGrid(float(gd["q_min"]), float(gd["q_max"]), int(gd["n_q"]),
                            float(gd["p_min"]), float(gd["p_max"]), int(gd["n_p"])),
        hbar=float(md["hbar"]), t0=float(md["t0"]), q0=float(md["q0"]), p0=float(md["p0"]),
        sigma_q=float(sq) if sq else None, sigma_p=float(sp) if sp else None,
        dt=float(rd["dt"]), T=float(rd["T"]), every=int(rd["every"]),
        representation=rd["representation"].strip(), derivative=rd["derivative"].strip(),
        boundary_tol=None if btol in ("none", "off", "") else float(btol),
        assemble=rd.getboolean("assemble"), threads=int(rd["threads"]),
        snapshots=rd["snapshots"].strip(), seed=int(rd["seed"]), out=rd["out"].strip(),
        validate_t=float(vd["t"]), fd_step=float(vd["fd_step"]),
        candidate_dt=float(vd["candidate_dt"]), convention=vd["convention"].strip(),
    )


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as H_cm are case sensitive
    cp.read_dict(DEFAULTS)
    return cp


def loads(text: str) -> ScenarioConfig:
    cp = _parser()
    try:
        cp.read_string(text)
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            unknown = set(cp[section]) - set(DEFAULTS[section])
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        cfg = _build(cp)
    except ConfigError:
        raise
    except (configparser.Error, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    validate(cfg)
    return cfg


def load(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return loads(text)


def golden() -> ScenarioConfig:
    """The default measurement scenario."""
    return loads("")


def validate(cfg: ScenarioConfig) -> None:
    """Reject configs whose module preconditions cannot hold; the message names the guard."""
    n = cfg.dim
    if n < 1 or len(cfg.v) != n or len(cfg.c0) != n:
        raise ConfigError("h, v and c0 need the same positive length", guard="dim_mismatch")
    if abs(np.sum(np.abs(cfg.c0) ** 2) - 1.0) > 1e-12:
        raise ConfigError("c0 must be normalized", guard="normalization")
    if cfg.hbar <= 0:
        raise ConfigError("hbar must be positive")
    if cfg.dt <= 0 or cfg.T <= 0 or cfg.every < 1:
        raise ConfigError("dt and T must be positive and every >= 1")
    if cfg.representation not in ("grid", "points"):
        raise ConfigError(f"representation must be grid or points, got {cfg.representation!r}")
    if cfg.derivative not in DERIVATIVES:
        raise ConfigError(f"derivative must be one of {DERIVATIVES}")
    if cfg.convention not in CONVENTIONS:
        raise ConfigError(f"convention must be one of {CONVENTIONS}")
    if cfg.snapshots not in ("none", "ends", "all"):
        raise ConfigError("snapshots must be none, ends or all")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.fd_step <= 0 or cfg.candidate_dt <= 0:
        raise ConfigError("fd_step and candidate_dt must be positive")
    g = cfg.grid
    if not g.contains(cfg.q0, cfg.p0):
        raise ConfigError("initial pointer position lies outside the grid", guard="out_of_domain")
    if cfg.representation == "grid":
        sq, sp = cfg.widths
        if sq <= 0 or sp <= 0:
            raise ConfigError("sigma must be positive", guard="non_positive_width")
        if (cfg.q0 - 6 * sq < g.q_min or cfg.q0 + 6 * sq > g.q_max
                or cfg.p0 - 6 * sp < g.p_min or cfg.p0 + 6 * sp > g.p_max):
            raise ConfigError("6-sigma box around (q0, p0) leaves the grid", guard="sigma_box")
        limit = GridGenerator(cfg.model(), g).stable_dt()
        if cfg.dt > limit:
            raise ConfigError(f"dt={cfg.dt} exceeds the stability bound {limit:.6g}", guard="cfl")
        largest_block = n
    else:
        # N branch points plus N(N-1)/2 midpoints, each carrying up to N quantum levels
        largest_block = n * (n + n * (n - 1) // 2)
    if cfg.assemble and largest_block > MAX_DENSE_DIM:
        raise ConfigError(f"eigensolve block of size {largest_block} exceeds {MAX_DENSE_DIM}; "
                          "disable assembly or reduce N", guard="assembly_size_cap")
    if math.isnan(cfg.validate_t):
        raise ConfigError("validate t must be a number")
