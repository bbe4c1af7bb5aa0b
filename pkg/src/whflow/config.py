"""Plain-text experiment configuration.

One ``key = value`` per line; ``#`` starts a comment.  The ``scenario`` key picks a
preset whose defaults any other key may override.  Any of the keys in
:data:`SWEEP_KEYS` turns the file into a beta/tau sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .weights import WeightRule


class ConfigError(ValueError):
    """Invalid configuration; ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


# --- initial data catalog ---------------------------------------------------

DENSITIES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "uniform": lambda x: np.ones_like(x),
    "gaussian": lambda x: np.exp(-10.0 * (x - 0.5) ** 2),
}

POTENTIALS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda x: np.zeros_like(x),
    "logcosh": lambda x: -0.2 * np.log(np.cosh(5.0 * (x - 0.5))),
    "sin2pi_eighth": lambda x: np.sin(2.0 * np.pi * x) / 8.0,
    "sin2pi_half": lambda x: 0.5 * np.sin(2.0 * np.pi * x),
    "sinpi_over_pi": lambda x: np.sin(np.pi * x) / np.pi,
}

SCHEMES = ("midpoint", "symplectic_euler", "explicit_euler", "prk:gauss2", "prk:midpoint",
           "prk:symplectic_euler", "viscosity")
SCENARIOS = ("geodesic_gaussian", "geodesic_flat", "geodesic_sine", "madelung", "two_node", "custom")


@dataclass(frozen=True)
class ScenarioConfig:
    """A single run.  ``n`` and ``h`` always satisfy ``n * h == domain_length``.

    ``rho0`` and ``s0`` are catalog names or explicit per-node tuples.  ``alpha``
    of ``None`` means automatic viscosity selection.  ``W`` is ``none``,
    ``diag:c`` or ``const:c``.
    """

    scenario: str = "custom"
    domain_length: float = 1.0
    n: int = 100
    tau: float = 1e-3
    T: float = 1.0
    scheme: str = "midpoint"
    beta: float = 0.0
    alpha: float | None = None
    theta: str = "average"
    theta_tilde: str = "logmean"
    V: float | tuple = 0.0
    W: str = "none"
    rho0: str | tuple = "uniform"
    s0: str | tuple = "zero"
    boundary: str = "periodic"
    record_every: int = 1
    snapshot_times: tuple = ()
    output_path: str = "."
    newton_tol: float = 1e-12
    max_iterations: int = 50
    upwind_freeze: str = "step_start"
    jacobian_mode: str = "analytic"
    chord: bool = False

    @property
    def h(self) -> float:
        return self.domain_length / self.n

    @property
    def n_steps(self) -> int:
        """Number of steps; the last one lands on ``T`` exactly (see :attr:`tau_eff`)."""
        return max(1, math.ceil(self.T / self.tau - 1e-9))

    @property
    def tau_eff(self) -> float:
        """``T / n_steps``: equals ``tau`` when ``T/tau`` is an integer, slightly smaller otherwise."""
        return self.T / self.n_steps

    @property
    def is_viscosity(self) -> bool:
        return self.scheme == "viscosity"


@dataclass(frozen=True)
class SweepConfig:
    """Largest successful ``tau`` per ``beta``: upward scan to the first failure, then bisection."""

    base: ScenarioConfig
    beta_values: tuple
    tau_lo: float = 1e-3
    tau_hi: float = 0.1
    bisection_tol: float = 5e-4
    scan_points: int = 16
    energy_rel_tol: float = 0.01
    require_positivity: bool = True
    require_newton_convergence: bool = True
    workers: int = 1


SWEEP_KEYS = {"beta_values", "tau_lo", "tau_hi", "bisection_tol", "scan_points", "energy_rel_tol",
              "require_positivity", "require_newton_convergence", "workers"}

PRESETS: dict[str, dict] = {
    "geodesic_gaussian": dict(domain_length=1.0, h=5e-3, tau=1e-4, T=0.315, scheme="midpoint",
                              beta=1e-5, alpha=1.0 / 12.0, theta="upwind", theta_tilde="logmean",
                              rho0="gaussian", s0="logcosh",
                              snapshot_times=(0.05, 0.1, 0.15, 0.2, 0.3), record_every=10),
    "geodesic_flat": dict(domain_length=1.0, h=1.5e-3, tau=1.3863e-5, T=0.315, scheme="midpoint",
                          beta=5e-7, alpha=0.08, theta="upwind", theta_tilde="logmean",
                          rho0="uniform", s0="logcosh",
                          snapshot_times=(0.0347, 0.0693, 0.1386, 0.2079, 0.2773), record_every=100),
    "geodesic_sine": dict(domain_length=2.0, h=1e-2, tau=1e-4, T=0.5, scheme="midpoint",
                          beta=1e-4, alpha=0.05, theta="upwind", theta_tilde="logmean",
                          rho0="uniform", s0="sin2pi_eighth",
                          snapshot_times=(0.1, 0.2, 0.3, 0.4), record_every=10),
    "madelung": dict(domain_length=1.0, h=1e-2, tau=1e-3, T=50.0, scheme="midpoint", beta=1.0,
                     theta="average", theta_tilde="logmean", rho0="uniform", s0="sin2pi_half",
                     snapshot_times=(0.5,), record_every=10),
    "two_node": dict(domain_length=2.0, n=2, tau=1e-3, T=math.pi, scheme="midpoint", beta=0.0,
                     theta="average", theta_tilde="logmean", boundary="path", W="diag:1",
                     rho0=(0.7, 0.3), s0=(0.0, 0.0)),
    "custom": dict(),
}

SWEEP_DEFAULTS = dict(scenario="custom", domain_length=1.0, h=5e-2, T=4.0, scheme="midpoint",
                      theta="average", theta_tilde="logmean", rho0="uniform", s0="sinpi_over_pi",
                      record_every=1000)

# --- value parsing ----------------------------------------------------------


def _float(key, raw, line):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}", line, key) from None
    if not math.isfinite(v):
        raise ConfigError("must be finite", line, key)
    return v


def _int(key, raw, line):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", line, key) from None


def _bool(key, raw, line):
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected true/false, got {raw!r}", line, key)


def _float_list(key, raw, line):
    parts = [p for p in raw.replace(",", " ").split() if p]
    if not parts:
        raise ConfigError("expected at least one number", line, key)
    return tuple(_float(key, p, line) for p in parts)


def _name_or_list(catalog):
    def parse(key, raw, line):
        if raw in catalog:
            return raw
        try:
            return _float_list(key, raw, line)
        except ConfigError:
            raise ConfigError(f"expected one of {sorted(catalog)} or a list of numbers, "
                              f"got {raw!r}", line, key) from None
    return parse


def _number_or_list(key, raw, line):
    vals = _float_list(key, raw, line)
    return vals[0] if len(vals) == 1 else vals


def _alpha(key, raw, line):
    return None if raw.lower() == "auto" else _float(key, raw, line)


def _choice(options):
    def parse(key, raw, line):
        if raw not in options:
            raise ConfigError(f"expected one of {list(options)}, got {raw!r}", line, key)
        return raw
    return parse


def _weight(key, raw, line):
    try:
        return WeightRule.from_token(raw).kind.value
    except ValueError as exc:
        raise ConfigError(str(exc), line, key) from None


def _interaction(key, raw, line):
    low = raw.lower()
    if low == "none":
        return "none"
    kind, _, val = low.partition(":")
    if kind in ("diag", "const") and val:
        _float(key, val, line)
        return low
    raise ConfigError(f"expected none, diag:<c> or const:<c>, got {raw!r}", line, key)


def _str(key, raw, line):
    return raw


PARSERS = {
    "scenario": _choice(SCENARIOS),
    "domain_length": _float, "n": _int, "h": _float, "tau": _float, "T": _float,
    "scheme": _choice(SCHEMES), "beta": _float, "alpha": _alpha,
    "theta": _weight, "theta_tilde": _weight, "V": _number_or_list, "W": _interaction,
    "rho0": _name_or_list(DENSITIES), "s0": _name_or_list(POTENTIALS),
    "boundary": _choice(("periodic", "path")), "record_every": _int,
    "snapshot_times": _float_list, "output_path": _str, "newton_tol": _float,
    "max_iterations": _int, "upwind_freeze": _choice(("step_start", "per_iterate")),
    "jacobian_mode": _choice(("analytic", "finite_difference")), "chord": _bool,
    "beta_values": _float_list, "tau_lo": _float, "tau_hi": _float, "bisection_tol": _float,
    "scan_points": _int,
    "energy_rel_tol": _float, "require_positivity": _bool, "require_newton_convergence": _bool,
    "workers": _int,
}


def _tokenize(text: str):
    """Yield ``(key, raw_value, line_number)``; rejects malformed, unknown and repeated keys."""
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError("expected 'key = value'", lineno)
        if key not in PARSERS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", lineno, key)
        if not value:
            raise ConfigError("missing value", lineno, key)
        seen[key] = lineno
        yield key, value, lineno


# --- validation -------------------------------------------------------------


def _resolve_grid(values: dict, lines: dict) -> dict:
    """Fill ``n`` from ``h`` (or the reverse) so that ``n * h == domain_length``."""
    L = values.get("domain_length", 1.0)
    if not L > 0:
        raise ConfigError("must be positive", lines.get("domain_length"), "domain_length")
    explicit_n = "n" in lines
    explicit_h = "h" in lines
    if explicit_n and explicit_h:
        if abs(values["n"] * values["h"] - L) > 1e-9 * L:
            raise ConfigError(f"n * h = {values['n'] * values['h']!r} does not equal "
                              f"domain_length = {L!r}", lines["h"], "h")
    elif "h" in values and not explicit_n:
        h = values["h"]
        if not h > 0:
            raise ConfigError("must be positive", lines.get("h"), "h")
        # snap to the nearest whole number of cells
        values["n"] = max(1, int(round(L / h)))
    values.pop("h", None)
    return values


def _validate_scenario(cfg: ScenarioConfig, lines: dict) -> None:
    def fail(name, msg):
        raise ConfigError(msg, lines.get(name), name)

    for name in ("tau", "T"):
        if not getattr(cfg, name) > 0:
            fail(name, "must be positive")
    if cfg.beta < 0:
        fail("beta", "must be nonnegative")
    if cfg.n < 2:
        fail("n", "need at least two nodes")
    if cfg.boundary == "periodic" and cfg.n < 3:
        fail("n", "a periodic lattice needs at least three nodes")
    if cfg.record_every < 1:
        fail("record_every", "must be at least 1")
    if cfg.newton_tol <= 0:
        fail("newton_tol", "must be positive")
    if cfg.max_iterations < 1:
        fail("max_iterations", "must be at least 1")
    if cfg.alpha is not None and not 0 <= cfg.alpha < 0.5:
        fail("alpha", "must lie in [0, 1/2) or be 'auto'")
    if cfg.is_viscosity and cfg.boundary != "periodic":
        fail("scheme", "the viscosity scheme needs a periodic lattice")
    for name in ("rho0", "s0", "V"):
        val = getattr(cfg, name)
        if isinstance(val, tuple) and len(val) != cfg.n:
            fail(name, f"expected {cfg.n} values, got {len(val)}")
    if isinstance(cfg.rho0, tuple) and min(cfg.rho0) <= 0:
        fail("rho0", "densities must be positive")
    if any(t < 0 or t > cfg.T for t in cfg.snapshot_times):
        fail("snapshot_times", "times must lie in [0, T]")


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ScenarioConfig | SweepConfig:
    """Parse configuration text into a validated :class:`ScenarioConfig` or :class:`SweepConfig`.

    ``overrides`` maps keys to raw value strings that replace (or add to) the
    file's entries, as with ``--set key=value`` on the command line.
    """
    values, lines = {}, {}
    for key, raw, lineno in _tokenize(text):
        values[key] = PARSERS[key](key, raw, lineno)
        lines[key] = lineno
    for key, raw in (overrides or {}).items():
        key, raw = key.strip(), str(raw).strip()
        if key not in PARSERS:
            raise ConfigError(f"unknown key {key!r}", field=key)
        if not raw:
            raise ConfigError("missing value", field=key)
        # an override of one grid parameter releases the other
        other = {"n": "h", "h": "n"}.get(key)
        if other:
            values.pop(other, None)
            lines.pop(other, None)
        values[key] = PARSERS[key](key, raw, None)
        lines[key] = None

    sweep_values = {k: values.pop(k) for k in list(values) if k in SWEEP_KEYS}
    is_sweep = bool(sweep_values)

    scenario = values.get("scenario", "custom")
    merged = dict(SWEEP_DEFAULTS) if is_sweep and "scenario" not in values else {}
    merged.update(PRESETS[scenario])
    if "n" in values:
        merged.pop("h", None)
    if "h" in values:
        merged.pop("n", None)
    merged.update(values)
    merged["scenario"] = scenario
    if "snapshot_times" not in values and "snapshot_times" in merged:
        # preset snapshot times past a shortened T are dropped rather than rejected
        T = merged.get("T", ScenarioConfig.T)
        merged["snapshot_times"] = tuple(t for t in merged["snapshot_times"] if t <= T)
    merged = _resolve_grid(merged, lines)
    try:
        cfg = ScenarioConfig(**merged)
    except TypeError as exc:  # pragma: no cover - guarded by PARSERS
        raise ConfigError(str(exc)) from None
    _validate_scenario(cfg, lines)
    if not is_sweep:
        return cfg

    if "beta_values" not in sweep_values:
        raise ConfigError("a sweep needs beta_values", field="beta_values")
    sweep = SweepConfig(base=cfg, **{k: (tuple(v) if k == "beta_values" else v)
                                     for k, v in sweep_values.items()})
    if any(b <= 0 for b in sweep.beta_values):
        raise ConfigError("all betas must be positive", lines.get("beta_values"), "beta_values")
    if not 0 < sweep.tau_lo <= sweep.tau_hi:
        raise ConfigError("need 0 < tau_lo <= tau_hi", lines.get("tau_lo"), "tau_lo")
    if not sweep.bisection_tol > 0:
        raise ConfigError("must be positive", lines.get("bisection_tol"), "bisection_tol")
    if sweep.scan_points < 2:
        raise ConfigError("must be at least 2", lines.get("scan_points"), "scan_points")
    if not sweep.energy_rel_tol > 0:
        raise ConfigError("must be positive", lines.get("energy_rel_tol"), "energy_rel_tol")
    if sweep.workers < 1:
        raise ConfigError("must be at least 1", lines.get("workers"), "workers")
    return sweep


def load_config(path, overrides: dict[str, str] | None = None) -> ScenarioConfig | SweepConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def with_overrides(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(cfg, **changes)
