"""Seeded simulation of the risk basis (Brownian investment return, single-jump
death counters) and left-point discretizations of the integrals used by the
closed-form decompositions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .timepaths import ATOL, DomainError, RiskBasis, StepPath, TimeGrid

MEASURES = ("P", "Q", "first-order")

_BROWNIAN_STREAM = 0
_DEATH_STREAM = 1


@dataclass(frozen=True, eq=False)
class Rate:
    """Non-negative piecewise-constant rate (1/yr), constant after the last break."""

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.breaks, dtype=float))
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if b.shape != v.shape or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ValueError("breaks must start at 0 and increase, one value each")
        if np.any(v < 0):
            raise ValueError("rates must be non-negative")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "values", v)
        cum = np.concatenate([[0.0], np.cumsum(np.diff(b) * v[:-1])])
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def constant(cls, value: float) -> "Rate":
        return cls(np.array([0.0]), np.array([float(value)]))

    @classmethod
    def coerce(cls, value) -> "Rate":
        if isinstance(value, Rate):
            return value
        if np.isscalar(value):
            return cls.constant(value)
        breaks, values = value
        return cls(breaks, values)

    @property
    def is_constant(self) -> bool:
        return self.values.size == 1

    def __call__(self, t):
        idx = np.searchsorted(self.breaks, np.asarray(t, dtype=float) + ATOL, side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def cumulative(self, t):
        """``int_0^t rate``."""
        t = np.asarray(t, dtype=float)
        idx = np.maximum(np.searchsorted(self.breaks, t, side="right") - 1, 0)
        return self._cum[idx] + self.values[idx] * (t - self.breaks[idx])

    def integral(self, a, b):
        return self.cumulative(b) - self.cumulative(a)

    def inverse_cumulative(self, level: float) -> float:
        """Smallest ``t`` with ``int_0^t rate >= level``; ``inf`` if never."""
        if level <= 0:
            return 0.0
        k = np.searchsorted(self._cum, level, side="left") - 1
        k = max(int(k), 0)
        while k < self.breaks.size:
            nxt = self._cum[k + 1] if k + 1 < self.breaks.size else np.inf
            if level <= nxt:
                if self.values[k] == 0:
                    k += 1
                    continue
                return float(self.breaks[k] + (level - self._cum[k]) / self.values[k])
            k += 1
        return np.inf


@dataclass(frozen=True)
class Policy:
    """Endowment contract: lump premium at 0, benefit on survival to ``T``."""

    premium: float
    benefit: float
    hazard: Rate  # real-world mortality
    hazard_q: Rate  # valuation-measure mortality
    hazard_star: Rate  # first-order (technical) mortality

    def __post_init__(self):
        for name in ("hazard", "hazard_q", "hazard_star"):
            object.__setattr__(self, name, Rate.coerce(getattr(self, name)))

    def hazard_for(self, measure: str) -> Rate:
        return {"P": self.hazard, "Q": self.hazard_q, "first-order": self.hazard_star}[measure]


@dataclass(frozen=True)
class ModelParams:
    mu: float
    r: float
    sigma: float
    policies: tuple[Policy, ...]
    T: float
    alpha: float = 0.0
    phi_star: Rate | float = 0.0
    phi_rate: Rate | float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "phi_star", Rate.coerce(self.phi_star))
        object.__setattr__(self, "phi_rate", Rate.coerce(self.phi_rate))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.T <= 0:
            raise ValueError("T must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.policies:
            raise ValueError("at least one policy is required")

    @property
    def premiums(self) -> np.ndarray:
        return np.array([p.premium for p in self.policies])

    @property
    def benefits(self) -> np.ndarray:
        return np.array([p.benefit for p in self.policies])

    def hazards(self, measure: str) -> list[Rate]:
        return [p.hazard_for(measure) for p in self.policies]

    def drift(self, measure: str) -> float:
        return {"P": self.r, "Q": self.mu}[measure]


def path_rng(seed: int, path_index: int = 0, stream: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, path, stream) triple."""
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=(int(path_index), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


def simulate_phi(params: ModelParams, grid: TimeGrid, seed: int, drift: float, path_index: int = 0):
    """Brownian return process ``Phi(t) = drift*t + sigma*W(t)`` on the grid."""
    if params.sigma == 0:
        w = np.zeros(len(grid))
    else:
        rng = path_rng(seed, path_index, _BROWNIAN_STREAM)
        dt = np.diff(grid.points)
        dw = rng.standard_normal(dt.size) * np.sqrt(dt)
        w = np.concatenate([[0.0], np.cumsum(dw)])
    phi = drift * grid.points + params.sigma * w
    return StepPath(grid, phi), StepPath(grid, w)


def kappa_from_phi(phi: StepPath, sigma: float) -> StepPath:
    """Stochastic exponential of a continuous Brownian return with volatility sigma."""
    return StepPath(phi.grid, np.exp(phi.values - 0.5 * sigma**2 * phi.grid.points))


@dataclass(frozen=True, eq=False)
class DeathSample:
    death_times: np.ndarray  # snapped to the grid; inf if no death within the horizon
    counts: np.ndarray  # (n, J) N_j
    compensators: np.ndarray  # (n, J) C_j


def _exp_draw(seed, path_index, policy, attempt) -> float:
    return float(path_rng(seed, path_index, _DEATH_STREAM + 1 + 1000 * attempt + policy).exponential())


def simulate_deaths(params: ModelParams, grid: TimeGrid, seed: int, measure: str, path_index: int = 0,
                    max_attempts: int = 100) -> DeathSample:
    """Inverse-hazard death times snapped up to the grid, no two at one grid time."""
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    hazards = params.hazards(measure)
    pts = grid.points
    J = len(hazards)
    idx = np.full(J, -1)
    for j, haz in enumerate(hazards):
        for attempt in range(max_attempts):
            tau = haz.inverse_cumulative(_exp_draw(seed, path_index, j, attempt))
            k = -1
            if tau <= grid.horizon + ATOL:
                k = max(int(np.searchsorted(pts, tau - ATOL, side="left")), 1)
            # collisions with earlier policies are redrawn with a perturbed substream
            if k < 0 or k not in idx[:j]:
                idx[j] = k
                break
        else:
            raise RuntimeError("could not resolve simultaneous deaths")
    death_times = np.where(idx >= 0, pts[np.maximum(idx, 0)], np.inf)
    counts = np.zeros((pts.size, J))
    comp = np.zeros((pts.size, J))
    for j, haz in enumerate(hazards):
        if idx[j] >= 0:
            counts[idx[j]:, j] = 1.0
        comp[:, j] = haz.cumulative(np.minimum(pts, death_times[j]))
    return DeathSample(death_times, counts, comp)


@dataclass(frozen=True, eq=False)
class SimulatedBasis:
    """One realization of the risk basis plus auxiliary paths.

    ``basis`` holds component 1 = ``Phi`` (``Phi - Phi*`` for the first-order
    basis) and component 2 = the compensated death counters ``N_j - C_j``.
    """

    params: ModelParams
    grid: TimeGrid
    measure: str
    phi: np.ndarray
    w: np.ndarray
    kappa: np.ndarray
    counts: np.ndarray
    compensators: np.ndarray
    death_times: np.ndarray
    x1: np.ndarray
    seed: int | None = None
    path_index: int = 0
    stop_times: tuple[float, float] | None = None
    basis: RiskBasis = field(init=False)

    def __post_init__(self):
        for name in ("phi", "w", "kappa", "counts", "compensators", "death_times", "x1"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        basis = RiskBasis(
            (StepPath(self.grid, self.x1), StepPath(self.grid, self.counts - self.compensators)),
            ("investment", "mortality"),
        )
        object.__setattr__(self, "basis", basis)

    @property
    def survival(self) -> np.ndarray:
        """``I_j = 1 - N_j`` on the grid, shape (n, J)."""
        return 1.0 - self.counts

    def stopped(self, times: Sequence[float]) -> "SimulatedBasis":
        """Investment-side paths stopped at ``times[0]``, mortality side at ``times[1]``."""
        k1, k2 = (int(self.grid.index_of(min(t, self.grid.horizon))) for t in times)

        def freeze(a, k):
            a = np.array(a)
            a[k + 1:] = a[k]
            return a

        dead = np.where(self.death_times <= self.grid.points[k2] + ATOL, self.death_times, np.inf)
        return SimulatedBasis(
            self.params, self.grid, self.measure,
            freeze(self.phi, k1), freeze(self.w, k1), freeze(self.kappa, k1),
            freeze(self.counts, k2), freeze(self.compensators, k2), dead,
            freeze(self.x1, k1), self.seed, self.path_index, tuple(times),
        )


def simulate_basis(params: ModelParams, grid: TimeGrid, seed: int, measure: str,
                   path_index: int = 0) -> SimulatedBasis:
    """Full realization under ``measure`` in {"P", "Q", "first-order"}.

    Under "first-order" the return is deterministic, ``dPhi = phi_rate dt``,
    deaths follow the real-world hazards (the first-order decomposition is
    pathwise, so any death law may be used) and the counters are compensated
    with the technical hazards.
    """
    if grid.horizon < params.T - ATOL:
        raise ValueError("grid horizon must cover the contract term T")
    if measure == "first-order":
        phi = params.phi_rate.cumulative(grid.points)
        w = np.zeros_like(phi)
        kappa = np.exp(phi)
        x1 = phi - params.phi_star.cumulative(grid.points)
        deaths = simulate_deaths(params, grid, seed, "P", path_index)
        # the technical basis compensates with the first-order intensities
        stop = np.minimum(grid.points[:, None], deaths.death_times[None, :])
        comp = np.stack([h.cumulative(stop[:, j]) for j, h in enumerate(params.hazards("first-order"))], axis=1)
        deaths = DeathSample(deaths.death_times, deaths.counts, comp)
    else:
        phi_path, w_path = simulate_phi(params, grid, seed, params.drift(measure), path_index)
        phi, w = phi_path.values, w_path.values
        kappa = kappa_from_phi(phi_path, params.sigma).values
        x1 = phi
        deaths = simulate_deaths(params, grid, seed, measure, path_index)
    return SimulatedBasis(params, grid, measure, phi, w, kappa, deaths.counts, deaths.compensators,
                          deaths.death_times, x1, seed, path_index)


# --------------------------------------------------------------------------
# integral kernels (left-point)
# --------------------------------------------------------------------------


def _values(p) -> np.ndarray:
    return p.values if isinstance(p, StepPath) else np.asarray(p, dtype=float)


def _window(grid: TimeGrid, window) -> tuple[int, int]:
    a, b = window
    if a < -ATOL or b > grid.horizon + ATOL or b < a - ATOL:
        raise DomainError(f"window ({a}, {b}] outside [0, {grid.horizon}]")
    return int(grid.index_of(a)), int(grid.index_of(b))


def _cumulate(cell_terms: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(cell_terms)])


def ito_integral(integrand, w, grid: TimeGrid, sensitivity=None) -> np.ndarray:
    """Running left-point sum ``sum_k f(s_k) (W(s_{k+1}) - W(s_k))``.

    With ``sensitivity`` (the derivative of the integrand with respect to W,
    sampled on the grid) the Milstein term ``1/2 f_W(s_k) (dW_k^2 - ds_k)``
    is added to every cell, which removes the leading half-order error for
    integrands that are smooth functions of W.
    """
    f = _values(integrand)
    dw = np.diff(_values(w))
    terms = f[:-1] * dw
    if sensitivity is not None:
        terms = terms + 0.5 * _values(sensitivity)[:-1] * (dw**2 - np.diff(grid.points))
    return _cumulate(terms)


def lebesgue_integral(integrand, grid: TimeGrid, cell_weights=None) -> np.ndarray:
    """Running left-point sum ``sum_k f(s_k) w_k`` with ``w_k = ds_k`` by default."""
    f = _values(integrand)
    wts = np.diff(grid.points) if cell_weights is None else np.asarray(cell_weights)
    return _cumulate(f[:-1] * wts)


def stieltjes_integral(integrand, integrator) -> np.ndarray:
    """Running left-point sum ``sum_k f(s_k) (A(s_{k+1}) - A(s_k))``."""
    return _cumulate(_values(integrand)[:-1] * np.diff(_values(integrator)))


def jump_integral(integrand, counting) -> np.ndarray:
    """Running sum of ``f(s) dN(s)`` over jumps of ``N``.

    The integrand is read at the grid point where the jump is recorded; the
    caller supplies values built from pre-jump state where it matters.
    """
    f = _values(integrand)
    dn = np.diff(_values(counting))
    return _cumulate(f[1:] * dn)


def ito_sum(integrand, w, grid: TimeGrid, window, sensitivity=None) -> float:
    a, b = _window(grid, window)
    run = ito_integral(integrand, w, grid, sensitivity)
    return float(run[b] - run[a])


def lebesgue_sum(integrand, grid: TimeGrid, window, cell_weights=None) -> float:
    a, b = _window(grid, window)
    run = lebesgue_integral(integrand, grid, cell_weights)
    return float(run[b] - run[a])


def jump_sum(integrand, counting, grid: TimeGrid, window) -> float:
    a, b = _window(grid, window)
    run = jump_integral(integrand, counting)
    return float(run[b] - run[a])


def sqrt_singular_weights(grid: TimeGrid, end: float) -> np.ndarray:
    """Cell weights for integrands blowing up like ``(end - s)**-1/2``.

    Product integration: the regular factor ``f(s) sqrt(end - s)`` is frozen
    at the left point and the singular factor is integrated exactly, which
    gives ``w_k = 2 sqrt(end - s_k) (sqrt(end - s_k) - sqrt(end - s_{k+1}))``.
    Cells past ``end`` get weight 0.
    """
    lo = np.sqrt(np.clip(end - grid.points[:-1], 0.0, None))
    hi = np.sqrt(np.clip(end - grid.points[1:], 0.0, None))
    return 2.0 * lo * (lo - hi)
