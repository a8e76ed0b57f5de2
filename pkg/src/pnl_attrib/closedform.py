"""Closed-form decompositions for the three valuation models, discretized
on the realization grid.  They serve as oracles for the SU engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stochastics import (
    ModelParams,
    SimulatedBasis,
    ito_integral,
    jump_integral,
    lebesgue_integral,
    sqrt_singular_weights,
    stieltjes_integral,
)


@dataclass(frozen=True, eq=False)
class KernelSet:
    """Deterministic and path kernels on the grid.

    ``K(s) = exp((T-s)(drift - sigma^2))``, ``q_j(s) = exp(-int_s^T lambda_j)``,
    ``h = 1 / (K kappa)``, ``m = exp((T-s) sigma^2)`` and the standard
    deviation path ``V``.
    """

    times: np.ndarray
    K: np.ndarray
    q: np.ndarray  # (n, J)
    h: np.ndarray
    m: np.ndarray
    m_minus_1: np.ndarray
    survival: np.ndarray  # (n, J), I_j
    benefits: np.ndarray
    V: np.ndarray

    def upsilon(self) -> np.ndarray:
        """``Upsilon_ij(s) = m(s) q_j(s)^{-1_{i=j}}``, shape (n, J, J)."""
        n, J = self.q.shape
        ups = np.repeat(self.m[:, None, None], J, axis=1).repeat(J, axis=2)
        idx = np.arange(J)
        ups[:, idx, idx] = self.m[:, None] / self.q
        return ups

    def psi(self) -> np.ndarray:
        """``Psi_ij = I_i I_j q_i q_j h^2 / V``, zero where ``V = 0``; shape (n, J, J)."""
        iq = self.survival * self.q
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(self.V > 0, self.h**2 / self.V, 0.0)
        return iq[:, :, None] * iq[:, None, :] * scale[:, None, None]


def kernel_set(params: ModelParams, realization: SimulatedBasis, drift: float, hazards) -> KernelSet:
    T, sig = params.T, params.sigma
    s = np.minimum(realization.grid.points, T)
    K = np.exp((T - s) * (drift - sig**2))
    q = np.stack([np.exp(-h.integral(s, T)) for h in hazards], axis=1)
    h = 1.0 / (K * realization.kappa)
    em1 = np.expm1((T - s) * sig**2)
    I = realization.survival
    b = params.benefits
    S = (b * q * I).sum(axis=1)
    B = (b**2 * q * (1.0 - q) * I).sum(axis=1)
    V = np.sqrt(np.maximum(h**2 * (em1 * S**2 + (1.0 + em1) * B), 0.0))
    return KernelSet(s, K, q, h, 1.0 + em1, em1, I, b, V)


@dataclass(frozen=True, eq=False)
class OraclePaths:
    """``D_1``, ``D_2`` on every grid point of the realization."""

    times: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    def at(self, t) -> tuple[float, float]:
        k = int(np.searchsorted(self.times, float(t) + 1e-12, side="right") - 1)
        if k < 0:
            raise ValueError("time before the grid start")
        return float(self.d1[k]), float(self.d2[k])

    @property
    def values(self) -> np.ndarray:
        return np.stack([self.d1, self.d2], axis=1)


def _truncate(params: ModelParams, realization: SimulatedBasis, run: np.ndarray) -> np.ndarray:
    """Freeze a running integral after ``T``."""
    k = int(realization.grid.index_of(params.T))
    out = run.copy()
    out[k + 1:] = out[k]
    return out


def _compensator_increments(realization: SimulatedBasis, hazards) -> np.ndarray:
    """``I_j(s_k) (Lambda_j(s_{k+1}) - Lambda_j(s_k))`` per cell, shape (n-1, J)."""
    pts = realization.grid.points
    dlam = np.stack([np.diff(h.cumulative(pts)) for h in hazards], axis=1)
    return realization.survival[:-1] * dlam


def _expectation_paths(params, realization, drift, hazards):
    """Decomposition of ``sum p - sum b_j h(t1) q_j(t2) I_j(t2)`` where ``h``
    is the discounted-numeraire martingale ``exp(-(T-s)(drift - sigma^2)) / kappa``."""
    ks = kernel_set(params, realization, drift, hazards)
    grid = realization.grid
    b = params.benefits
    liab = (b * ks.q * ks.survival).sum(axis=1)
    f = params.sigma * ks.h * liab
    d1 = ito_integral(f, realization.w, grid, sensitivity=-params.sigma * f)
    weight = b * ks.q * ks.h[:, None]  # (n, J)
    jumps = sum(jump_integral(weight[:, j], realization.counts[:, j]) for j in range(b.size))
    comp = _compensator_increments(realization, hazards)
    d2 = jumps - np.concatenate([[0.0], np.cumsum((weight[:-1] * comp).sum(axis=1))])
    return ks, _truncate(params, realization, d1), _truncate(params, realization, d2)


def oracle_risk_neutral_paths(params: ModelParams, realization: SimulatedBasis) -> OraclePaths:
    """``D_1 = sum_j b_j int I_j q_j h sigma dW`` and
    ``D_2 = sum_j b_j int q_j h d(N_j - C_j)`` under the valuation measure."""
    _, d1, d2 = _expectation_paths(params, realization, params.mu, params.hazards("Q"))
    return OraclePaths(realization.grid.points, d1, d2)


def oracle_risk_neutral(params: ModelParams, realization: SimulatedBasis, t: float) -> tuple[float, float]:
    return oracle_risk_neutral_paths(params, realization).at(min(t, params.T))


def oracle_std_dev_paths(params: ModelParams, realization: SimulatedBasis, drift_term: str = "corrected") -> OraclePaths:
    """Expectation part under the real-world basis plus the safety-margin terms.

    ``drift_term="printed"`` uses ``sigma^2 / 2`` instead of
    ``sigma^2 Upsilon_ij / 2`` in the ``ds`` part of ``D_1``; that variant is
    kept only to show that it breaks additivity.
    """
    if drift_term not in ("corrected", "printed"):
        raise ValueError("drift_term must be 'corrected' or 'printed'")
    hazards = params.hazards("P")
    ks, d1, d2 = _expectation_paths(params, realization, params.r, hazards)
    alpha = params.alpha
    if alpha == 0:
        return OraclePaths(realization.grid.points, d1, d2)
    grid = realization.grid
    b = ks.benefits
    sig = params.sigma
    psi = ks.psi()
    bb = b[:, None] * b[None, :]
    ups = ks.upsilon()
    # sum_ij b_i b_j Psi_ij (Upsilon_ij - 1) collapses to V
    dw_coef = (bb * psi * (ups - 1.0)).sum(axis=(1, 2))
    ds_coef = (bb * psi * (ups if drift_term == "corrected" else 1.0)).sum(axis=(1, 2))
    # integrands blow up like (T - s)^{-1/2}; integrate that factor exactly
    sing = sqrt_singular_weights(grid, params.T)
    ratio = np.divide(sing, np.diff(grid.points), out=np.zeros_like(sing), where=np.diff(grid.points) > 0)
    f = sig * dw_coef
    safety1 = -(ito_integral(f, realization.w, grid, sensitivity=-sig * f)
                + lebesgue_integral(0.5 * sig**2 * ds_coef, grid, cell_weights=sing))

    J = b.size
    offdiag = 1.0 + (1.0 - np.eye(J))
    g = (bb * psi * (ups * offdiag - 2.0) / 2.0).sum(axis=1)  # (n, J): sum over i for each j
    comp = _compensator_increments(realization, hazards)
    cont = np.concatenate([[0.0], np.cumsum((g[:-1] * comp).sum(axis=1) * ratio)])
    jumps = _v_jumps(params, realization, ks)
    safety2 = cont + np.concatenate([[0.0], np.cumsum(jumps[1:])])
    d1 = d1 + alpha * _truncate(params, realization, safety1)
    d2 = d2 + alpha * _truncate(params, realization, safety2)
    return OraclePaths(grid.points, d1, d2)


def _v_jumps(params, realization, ks: KernelSet) -> np.ndarray:
    """``V(s) - V(s-)`` at death grid points, zero elsewhere.  ``V(s-)`` keeps
    the continuous kernels at ``s`` and the survival indicators before the jump."""
    dn = np.vstack([np.zeros((1, ks.q.shape[1])), np.diff(realization.counts, axis=0)])
    out = np.zeros(ks.times.size)
    hit = np.flatnonzero(dn.sum(axis=1) > 0)
    if hit.size == 0:
        return out
    b = ks.benefits
    k = hit
    I_pre = ks.survival[k - 1]
    q = ks.q[k]
    S = (b * q * I_pre).sum(axis=1)
    B = (b**2 * q * (1.0 - q) * I_pre).sum(axis=1)
    v_pre = np.sqrt(np.maximum(ks.h[k] ** 2 * (ks.m_minus_1[k] * S**2 + ks.m[k] * B), 0.0))
    out[k] = ks.V[k] - v_pre
    return out


def oracle_std_dev(params: ModelParams, realization: SimulatedBasis, t: float) -> tuple[float, float]:
    return oracle_std_dev_paths(params, realization).at(min(t, params.T))


def oracle_first_order_paths(params: ModelParams, realization: SimulatedBasis) -> OraclePaths:
    """``D_1 = sum_j b_j int I_j q*_j e^{-int_s^T phi*} / kappa(s) (phi - phi*) ds`` and
    ``D_2 = sum_j b_j int q*_j e^{-int_s^T phi*} / kappa(s) d(N_j - C*_j)``."""
    T = params.T
    grid = realization.grid
    s = np.minimum(grid.points, T)
    hazards = params.hazards("first-order")
    q = np.stack([np.exp(-h.integral(s, T)) for h in hazards], axis=1)
    disc = np.exp(-(params.phi_star.cumulative(T) + realization.x1))
    b = params.benefits
    liab = (b * q * realization.survival).sum(axis=1)
    d1 = stieltjes_integral(disc * liab, realization.x1)
    weight = b * q * disc[:, None]
    jumps = sum(jump_integral(weight[:, j], realization.counts[:, j]) for j in range(b.size))
    comp = _compensator_increments(realization, hazards)
    d2 = jumps - np.concatenate([[0.0], np.cumsum((weight[:-1] * comp).sum(axis=1))])
    return OraclePaths(grid.points, _truncate(params, realization, d1), _truncate(params, realization, d2))


def oracle_first_order(params: ModelParams, realization: SimulatedBasis, t: float) -> tuple[float, float]:
    return oracle_first_order_paths(params, realization).at(min(t, params.T))


ORACLES = {
    "risk_neutral": oracle_risk_neutral_paths,
    "std_dev": oracle_std_dev_paths,
    "first_order": oracle_first_order_paths,
}
