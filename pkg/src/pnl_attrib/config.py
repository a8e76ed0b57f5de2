"""TOML scenario files: parsing, validation, serialization and the factory
that turns a scenario plus a seed into a revaluation surface."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .revaluation import (
    RevaluationSurface,
    surface_black_box,
    surface_first_order,
    surface_risk_neutral,
    surface_std_dev,
    terminal_product,
    terminal_sum,
)
from .stochastics import ModelParams, Policy, Rate, SimulatedBasis, simulate_basis
from .timepaths import RiskBasis, StepPath, TimeGrid

CLOSED_FORM = {"risk_neutral": "Q", "std_dev": "P", "first_order": "first-order"}
BLACK_BOX = {"additive": terminal_sum, "product": terminal_product}
SURFACES = tuple(CLOSED_FORM) + tuple(BLACK_BOX)
DELAY_KINDS = ("phased-dyadic", "continuous-lag")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid scenario; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {msg}" for k, msg in errors))


@dataclass
class PolicyConfig:
    premium: float
    benefit: float
    hazard: Any
    hazard_q: Any
    hazard_star: Any


@dataclass
class PathConfig:
    initial: float
    jumps: list[list[float]] = field(default_factory=list)


@dataclass
class ModelConfig:
    surface: str
    T: float
    mu: float = 0.0
    r: float = 0.0
    sigma: float = 0.0
    alpha: float = 0.0
    phi_star: Any = 0.0
    phi_rate: Any = 0.0
    policies: list[PolicyConfig] = field(default_factory=list)
    paths: list[PathConfig] = field(default_factory=list)


@dataclass
class GridConfig:
    horizon: float
    base_mesh_exponent: int


@dataclass
class EngineConfig:
    partition_levels: list[int]
    orders: list[list[int]]
    tol: float
    eval_times: list[float]


@dataclass
class StabilityConfig:
    delay_kind: str
    delay_levels: int
    eps: float = 0.05
    max_fraction: float = 0.05


@dataclass
class McConfig:
    n_paths: int
    seed: int


@dataclass
class OutputsConfig:
    directory: str
    formats: list[str]


@dataclass
class ScenarioConfig:
    model: ModelConfig
    grid: GridConfig
    engine: EngineConfig
    mc: McConfig
    outputs: OutputsConfig
    stability: StabilityConfig | None = None

    # ------------------------------------------------------------------ io

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["stability"] is None:
            del d["stability"]
        if not d["model"]["policies"]:
            del d["model"]["policies"]
        if not d["model"]["paths"]:
            del d["model"]["paths"]
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    # ------------------------------------------------------------- derived

    @property
    def is_closed_form(self) -> bool:
        return self.model.surface in CLOSED_FORM

    @property
    def m(self) -> int:
        return 2 if self.is_closed_form else len(self.model.paths)

    @property
    def order_perms(self) -> list[tuple[int, ...]]:
        """Update orders as zero-based permutations."""
        return [tuple(k - 1 for k in o) for o in self.engine.orders]

    def seeds(self) -> list[int]:
        return [self.mc.seed + i for i in range(self.mc.n_paths)]

    def sim_grid(self) -> TimeGrid:
        g = TimeGrid.dyadic(self.grid.horizon, self.grid.base_mesh_exponent)
        if not self.is_closed_form:
            jumps = [j[0] for p in self.model.paths for j in p.jumps]
            g = g.union(jumps) if jumps else g
        return g

    def partitions(self) -> list[TimeGrid]:
        return [TimeGrid.dyadic(self.grid.horizon, n) for n in self.engine.partition_levels]

    def params(self) -> ModelParams:
        m = self.model
        return ModelParams(
            mu=m.mu, r=m.r, sigma=m.sigma, T=m.T, alpha=m.alpha,
            phi_star=_rate(m.phi_star), phi_rate=_rate(m.phi_rate),
            policies=tuple(Policy(p.premium, p.benefit, _rate(p.hazard), _rate(p.hazard_q), _rate(p.hazard_star))
                           for p in m.policies),
        )

    def realization(self, seed: int) -> SimulatedBasis:
        return simulate_basis(self.params(), self.sim_grid(), seed, CLOSED_FORM[self.model.surface])

    def surface(self, seed: int) -> RevaluationSurface:
        kind = self.model.surface
        if kind in CLOSED_FORM:
            params = self.params()
            real = self.realization(seed)
            return {"risk_neutral": surface_risk_neutral, "std_dev": surface_std_dev,
                    "first_order": surface_first_order}[kind](params, real)
        grid = self.sim_grid()
        comps = tuple(StepPath.from_jumps(grid, p.initial, [tuple(j) for j in p.jumps]) for p in self.model.paths)
        return surface_black_box(RiskBasis(comps), BLACK_BOX[kind], horizon=self.model.T, label=kind)


def _rate(value) -> Rate:
    if isinstance(value, dict):
        return Rate(value["breaks"], value["values"])
    return Rate.coerce(value)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SECTIONS = {
    "model": ModelConfig, "grid": GridConfig, "engine": EngineConfig,
    "mc": McConfig, "outputs": OutputsConfig, "stability": StabilityConfig,
}
_REQUIRED = ("model", "grid", "engine", "mc", "outputs")


def _fields(cls) -> dict:
    return cls.__dataclass_fields__


def _required(cls) -> list[str]:
    from dataclasses import MISSING
    return [k for k, f in _fields(cls).items() if f.default is MISSING and f.default_factory is MISSING]


def _build(cls, raw, where: str, errors: list) -> Any:
    if not isinstance(raw, dict):
        errors.append((where, "expected a table"))
        return None
    known = _fields(cls)
    for k in raw:
        if k not in known:
            errors.append((f"{where}.{k}", "unknown key"))
    for k in _required(cls):
        if k not in raw:
            errors.append((f"{where}.{k}", "missing required key"))
    if any(e[0].startswith(where + ".") for e in errors):
        return None
    try:
        return cls(**raw)
    except TypeError as exc:
        errors.append((where, str(exc)))
        return None


def parse_config(data: dict) -> ScenarioConfig:
    """Validate a raw mapping (as read from TOML) into a ScenarioConfig."""
    errors: list[tuple[str, str]] = []
    for k in data:
        if k not in _SECTIONS:
            errors.append((k, "unknown section"))
    for k in _REQUIRED:
        if k not in data:
            errors.append((k, "missing required section"))
    if errors:
        raise ConfigError(errors)
    built = {k: _build(cls, data[k], k, errors) for k, cls in _SECTIONS.items() if k in data}
    model = built.get("model")
    if model is not None:
        pols = []
        for n, p in enumerate(model.policies):
            pols.append(_build(PolicyConfig, p, f"model.policies[{n}]", errors))
        paths = []
        for n, p in enumerate(model.paths):
            paths.append(_build(PathConfig, p, f"model.paths[{n}]", errors))
        model.policies, model.paths = pols, paths
    if errors:
        raise ConfigError(errors)
    cfg = ScenarioConfig(**built)
    _normalize(cfg)
    validate(cfg)
    return cfg


def _normalize(cfg: ScenarioConfig) -> None:
    m = cfg.model
    for name in ("T", "mu", "r", "sigma", "alpha"):
        v = getattr(m, name)
        if isinstance(v, int) and not isinstance(v, bool):
            setattr(m, name, float(v))
    cfg.grid.horizon = float(cfg.grid.horizon) if isinstance(cfg.grid.horizon, int) else cfg.grid.horizon
    cfg.engine.tol = float(cfg.engine.tol) if isinstance(cfg.engine.tol, int) else cfg.engine.tol
    cfg.engine.eval_times = [float(t) if isinstance(t, int) else t for t in cfg.engine.eval_times]


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _check_rate(v, where, errors):
    try:
        _rate(v)
    except (ValueError, TypeError, KeyError) as exc:
        errors.append((where, f"invalid rate ({exc})"))


def validate(cfg: ScenarioConfig) -> None:
    errors: list[tuple[str, str]] = []
    m, g, e = cfg.model, cfg.grid, cfg.engine
    if m.surface not in SURFACES:
        errors.append(("model.surface", f"must be one of {', '.join(SURFACES)}"))
    for name in ("T", "mu", "r", "sigma", "alpha"):
        if not _is_num(getattr(m, name)):
            errors.append((f"model.{name}", "must be a finite number"))
    if _is_num(m.T) and m.T <= 0:
        errors.append(("model.T", "must be > 0"))
    if _is_num(m.sigma) and m.sigma < 0:
        errors.append(("model.sigma", "must be >= 0"))
    if _is_num(m.alpha) and m.alpha < 0:
        errors.append(("model.alpha", "must be >= 0"))
    _check_rate(m.phi_star, "model.phi_star", errors)
    _check_rate(m.phi_rate, "model.phi_rate", errors)
    if m.surface in CLOSED_FORM:
        if not m.policies:
            errors.append(("model.policies", "at least one policy is required"))
        for n, p in enumerate(m.policies):
            for name in ("premium", "benefit"):
                if not _is_num(getattr(p, name)):
                    errors.append((f"model.policies[{n}].{name}", "must be a finite number"))
            for name in ("hazard", "hazard_q", "hazard_star"):
                _check_rate(getattr(p, name), f"model.policies[{n}].{name}", errors)
        if m.paths:
            errors.append(("model.paths", "only used by black-box surfaces"))
    elif m.surface in BLACK_BOX:
        if not 1 <= len(m.paths) <= 3:
            errors.append(("model.paths", "black-box surfaces need 1 to 3 component paths"))
        for n, p in enumerate(m.paths):
            if not _is_num(p.initial):
                errors.append((f"model.paths[{n}].initial", "must be a finite number"))
            for jmp in p.jumps:
                if not (isinstance(jmp, list) and len(jmp) == 2 and all(_is_num(x) for x in jmp)):
                    errors.append((f"model.paths[{n}].jumps", "entries must be [time, size] pairs"))
                elif _is_num(g.horizon) and not 0 < jmp[0] <= g.horizon:
                    errors.append((f"model.paths[{n}].jumps", "jump times must lie in (0, horizon]"))
    if not _is_num(g.horizon) or g.horizon <= 0:
        errors.append(("grid.horizon", "must be a positive number"))
    elif _is_num(m.T) and g.horizon < m.T:
        errors.append(("grid.horizon", "must cover model.T"))
    if not isinstance(g.base_mesh_exponent, int) or not 0 <= g.base_mesh_exponent <= 20:
        errors.append(("grid.base_mesh_exponent", "must be an integer in [0, 20]"))
    lv = e.partition_levels
    if not (isinstance(lv, list) and lv and all(isinstance(x, int) and x >= 0 for x in lv)):
        errors.append(("engine.partition_levels", "must be a non-empty list of non-negative integers"))
    elif any(b <= a for a, b in zip(lv[:-1], lv[1:])):
        errors.append(("engine.partition_levels", "must be strictly increasing"))
    elif isinstance(g.base_mesh_exponent, int) and lv[-1] > g.base_mesh_exponent:
        errors.append(("engine.partition_levels", "finest level exceeds grid.base_mesh_exponent"))
    mm = cfg.m
    if not (isinstance(e.orders, list) and e.orders):
        errors.append(("engine.orders", "must be a non-empty list of permutations"))
    else:
        for o in e.orders:
            if not isinstance(o, list) or sorted(o) != list(range(1, mm + 1)):
                errors.append(("engine.orders", f"{o!r} is not a permutation of 1..{mm}"))
    if not _is_num(e.tol) or e.tol <= 0:
        errors.append(("engine.tol", "must be a positive number"))
    if not (isinstance(e.eval_times, list) and e.eval_times and all(_is_num(t) for t in e.eval_times)):
        errors.append(("engine.eval_times", "must be a non-empty list of numbers"))
    elif _is_num(g.horizon) and isinstance(lv, list) and lv and all(isinstance(x, int) for x in lv):
        coarse = TimeGrid.dyadic(g.horizon, lv[0]) if g.horizon > 0 else None
        if coarse is not None:
            if any(not 0 <= t <= g.horizon for t in e.eval_times):
                errors.append(("engine.eval_times", "must lie in [0, horizon]"))
            elif not np.all(coarse.contains(e.eval_times)):
                errors.append(("engine.eval_times", "must be points of the coarsest partition"))
    if cfg.stability is not None:
        s = cfg.stability
        if s.delay_kind not in DELAY_KINDS:
            errors.append(("stability.delay_kind", f"must be one of {', '.join(DELAY_KINDS)}"))
        if not isinstance(s.delay_levels, int) or s.delay_levels < 1:
            errors.append(("stability.delay_levels", "must be a positive integer"))
        if not _is_num(s.eps) or s.eps <= 0:
            errors.append(("stability.eps", "must be a positive number"))
        if not _is_num(s.max_fraction) or not 0 <= s.max_fraction <= 1:
            errors.append(("stability.max_fraction", "must lie in [0, 1]"))
    if not isinstance(cfg.mc.n_paths, int) or isinstance(cfg.mc.n_paths, bool) or cfg.mc.n_paths < 1:
        errors.append(("mc.n_paths", "must be a positive integer"))
    if not isinstance(cfg.mc.seed, int) or cfg.mc.seed < 0:
        errors.append(("mc.seed", "must be a non-negative integer"))
    if not isinstance(cfg.outputs.directory, str) or not cfg.outputs.directory:
        errors.append(("outputs.directory", "must be a non-empty string"))
    if not (isinstance(cfg.outputs.formats, list) and cfg.outputs.formats
            and all(f in FORMATS for f in cfg.outputs.formats)):
        errors.append(("outputs.formats", f"must be a non-empty subset of {list(FORMATS)}"))
    if not errors:
        try:
            cfg.params() if cfg.is_closed_form else None
        except (ValueError, TypeError) as exc:
            errors.append(("model", str(exc)))
    if errors:
        raise ConfigError(errors)


def loads(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<file>", f"TOML syntax error: {exc}")]) from exc
    return parse_config(data)


def load(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([("<file>", str(exc))]) from exc
    return loads(text)
