"""Revaluation surfaces ``U(t_1, ..., t_m)``: the revaluation mapping applied
to a realization whose risk factors are stopped at asynchronous times."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .stochastics import ModelParams, Rate, SimulatedBasis
from .timepaths import Delay, RiskBasis, apply_delay, stop_multi


class SurfaceEvaluationError(RuntimeError):
    pass


class RevaluationSurface:
    """Per-realization evaluator; ``evaluate`` broadcasts over array times."""

    m: int = 2
    horizon: float
    label: str = "surface"

    def evaluate(self, *times) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, *times):
        return self.evaluate(*times)

    def diagonal(self, t) -> np.ndarray:
        """The revaluation process ``R(t) = U(t, ..., t)``."""
        return self.evaluate(*([t] * self.m))

    @property
    def basis(self) -> RiskBasis:
        raise NotImplementedError

    def delayed(self, delay: Delay) -> "RevaluationSurface":
        return DelayedSurface(self, delay)


class DelayedSurface(RevaluationSurface):
    """Surface of the observed basis ``X o tau`` for a Markov surface:
    stopping the delayed factor at ``t`` reveals the original factor up to
    ``tau(t)``, so ``U_tau(t_1, ..., t_m) = U(tau_1(t_1), ..., tau_m(t_m))``."""

    def __init__(self, base: RevaluationSurface, delay: Delay):
        if delay.m != base.m:
            raise ValueError("delay and surface dimensions differ")
        self.base, self.delay = base, delay
        self.m, self.horizon = base.m, base.horizon
        self.label = f"{base.label}[{delay.label}]"

    def evaluate(self, *times):
        return self.base.evaluate(*self.delay(times))

    @property
    def basis(self) -> RiskBasis:
        return apply_delay(self.base.basis, self.delay)


class _ClosedForm(RevaluationSurface):
    def __init__(self, params: ModelParams, realization: SimulatedBasis):
        self.params, self.realization = params, realization
        self.grid = realization.grid
        self.horizon = params.T
        self.premium_total = float(params.premiums.sum())

    def _idx(self, t):
        return self.grid.index_of(np.minimum(np.asarray(t, dtype=float), self.params.T))

    @property
    def basis(self) -> RiskBasis:
        return self.realization.basis


def _survival_to_term(grid, hazards: list[Rate], T: float) -> np.ndarray:
    """``q_j(s) = exp(-int_s^T lambda_j)`` for every grid point, shape (n, J)."""
    s = np.minimum(grid.points, T)
    return np.stack([np.exp(-h.integral(s, T)) for h in hazards], axis=1)


def _expectation_arrays(params: ModelParams, realization: SimulatedBasis, drift: float, hazards):
    """Discount ``exp(-(T-s)(drift - sigma^2)) / kappa(s)`` and the
    benefit-weighted survival ``sum_j b_j q_j I_j`` on the grid."""
    s = np.minimum(realization.grid.points, params.T)
    disc = np.exp(-(params.T - s) * (drift - params.sigma**2)) / realization.kappa
    q = _survival_to_term(realization.grid, hazards, params.T)
    weights = params.benefits * q * realization.survival
    return disc, q, weights


class RiskNeutralSurface(_ClosedForm):
    """Conditional valuation-measure expectation of the initial own funds."""

    label = "risk_neutral"

    def __init__(self, params, realization, drift=None, hazards=None):
        super().__init__(params, realization)
        drift = params.mu if drift is None else drift
        hazards = params.hazards("Q") if hazards is None else hazards
        self.disc, self.q, self.weights = _expectation_arrays(params, realization, drift, hazards)
        self.liability = self.weights.sum(axis=1)

    def evaluate(self, t1, t2):
        return self.premium_total - self.disc[self._idx(t1)] * self.liability[self._idx(t2)]


class StdDevSurface(RiskNeutralSurface):
    """Real-world expectation plus ``alpha`` times the conditional standard deviation."""

    label = "std_dev"

    def __init__(self, params, realization):
        super().__init__(params, realization, drift=params.r, hazards=params.hazards("P"))
        self.alpha = params.alpha
        s = np.minimum(self.grid.points, params.T)
        self.m_minus_1 = np.expm1((params.T - s) * params.sigma**2)
        self.bernoulli = (params.benefits**2 * self.q * (1.0 - self.q) * self.realization.survival).sum(axis=1)

    def variance(self, t1, t2):
        """Conditional variance of the discounted benefit outgo.

        ``h(t1)^2 [ (e^{(T-t1) sigma^2} - 1) S(t2)^2 + e^{(T-t1) sigma^2} sum_j b_j^2 q_j (1-q_j) I_j ]``
        with ``h = exp(-(T-t1)(r - sigma^2)) / kappa(t1)``, ``S = sum_j b_j q_j I_j``.
        """
        i1, i2 = self._idx(t1), self._idx(t2)
        em1 = self.m_minus_1[i1]
        var = self.disc[i1] ** 2 * (em1 * self.liability[i2] ** 2 + (1.0 + em1) * self.bernoulli[i2])
        return np.maximum(var, 0.0)

    def sd_path(self) -> np.ndarray:
        """``V(s) = sqrt(Var(s, s))`` on the realization grid."""
        pts = self.grid.points
        return np.sqrt(self.variance(pts, pts))

    def evaluate(self, t1, t2):
        base = super().evaluate(t1, t2)
        if self.alpha == 0:
            return base
        return base + self.alpha * np.sqrt(self.variance(t1, t2))


class FirstOrderSurface(_ClosedForm):
    """Classical prospective reserve on the technical basis, written through
    the stopped basis: ``sum p - sum b_j I_j(t2) q*_j(t2) exp(-(Phi*(T) + X_1(t1)))``."""

    label = "first_order"

    def __init__(self, params, realization):
        super().__init__(params, realization)
        T = params.T
        self.q = _survival_to_term(self.grid, params.hazards("first-order"), T)
        self.discount = np.exp(-(params.phi_star.cumulative(T) + realization.x1))
        self.liability = (params.benefits * self.q * realization.survival).sum(axis=1)

    def evaluate(self, t1, t2):
        return self.premium_total - self.discount[self._idx(t1)] * self.liability[self._idx(t2)]


class BlackBoxSurface(RevaluationSurface):
    """``U(t) = functional(stop_multi(basis, t))`` for a user functional."""

    def __init__(self, basis: RiskBasis, functional: Callable[[RiskBasis], float],
                 horizon: float | None = None, label: str = "black_box"):
        self._basis, self.functional = basis, functional
        self.m = basis.m
        self.horizon = basis.grid.horizon if horizon is None else horizon
        self.label = label

    @property
    def basis(self) -> RiskBasis:
        return self._basis

    def _one(self, times) -> float:
        val = float(self.functional(stop_multi(self._basis, [min(t, self.horizon) for t in times])))
        if not np.isfinite(val):
            raise SurfaceEvaluationError(f"{self.label}: non-finite value at times {tuple(times)}")
        return val

    def evaluate(self, *times):
        arrs = np.broadcast_arrays(*[np.asarray(t, dtype=float) for t in times])
        out = np.empty(arrs[0].shape)
        flat = [a.ravel() for a in arrs]
        res = out.ravel()
        for n in range(res.size):
            res[n] = self._one([f[n] for f in flat])
        return out if out.ndim else float(out)

    def delayed(self, delay: Delay) -> "BlackBoxSurface":
        return BlackBoxSurface(apply_delay(self._basis, delay), self.functional, self.horizon,
                               f"{self.label}[{delay.label}]")


def surface_risk_neutral(params: ModelParams, realization: SimulatedBasis) -> RiskNeutralSurface:
    return RiskNeutralSurface(params, realization)


def surface_std_dev(params: ModelParams, realization: SimulatedBasis) -> StdDevSurface:
    return StdDevSurface(params, realization)


def surface_first_order(params: ModelParams, realization: SimulatedBasis) -> FirstOrderSurface:
    return FirstOrderSurface(params, realization)


def surface_black_box(basis: RiskBasis, functional, horizon=None, label="black_box") -> BlackBoxSurface:
    return BlackBoxSurface(basis, functional, horizon, label)


# ready-made functionals of stopped paths
def terminal_sum(basis: RiskBasis) -> float:
    return float(sum(np.sum(c.values[-1]) for c in basis))


def terminal_product(basis: RiskBasis) -> float:
    return float(np.prod([np.sum(c.values[-1]) for c in basis]))


def running_max_first(basis: RiskBasis) -> float:
    """Running maximum of component 1 plus terminal values of the rest."""
    rest = sum(np.sum(c.values[-1]) for c in basis.components[1:])
    return float(np.max(basis[0].values) + rest)
