"""Sequential-updating (SU) decompositions, their refinement limit and the
axiom harness: additivity, normalization, order invariance and stability."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .revaluation import RevaluationSurface
from .timepaths import ATOL, Delay, RiskBasis, StepPath, TimeGrid, merge_times, verify_refining


@dataclass(frozen=True, eq=False)
class Decomposition:
    """``D_1..D_m`` at increasing evaluation times, with ``R`` alongside."""

    times: np.ndarray
    values: np.ndarray  # (n, m)
    r_values: np.ndarray  # (n,)
    r0: float
    labels: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def _index(self, t) -> np.ndarray:
        k = np.searchsorted(self.times, np.asarray(t, dtype=float) + ATOL, side="right") - 1
        if np.any(k < 0):
            raise ValueError("time precedes the first evaluation time")
        return k

    def at(self, t) -> np.ndarray:
        """Step-interpolated ``D(t)``, shape ``(..., m)``."""
        return self.values[self._index(t)]

    def left_limit(self, t) -> np.ndarray:
        """``D(t-)`` read at the preceding evaluation time (``D(0)`` at ``t = 0``)."""
        k = np.searchsorted(self.times, np.asarray(t, dtype=float) - ATOL, side="left") - 1
        return self.values[np.maximum(k, 0)]

    def component(self, i: int) -> StepPath:
        return StepPath(TimeGrid(self.times), self.values[:, i])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def _check_order(order, m: int) -> tuple[int, ...]:
    order = tuple(range(m)) if order is None else tuple(int(k) for k in order)
    if sorted(order) != list(range(m)):
        raise ValueError(f"order {order} is not a permutation of 0..{m - 1}")
    return order


def _step_increments(surface: RevaluationSurface, a: np.ndarray, b: np.ndarray, order) -> np.ndarray:
    """Per-step SU increments moving every component from ``a`` to ``b`` in
    ``order``; returns shape ``(len(a), m)``."""
    m = surface.m
    state = [a] * m
    prev = np.asarray(surface.evaluate(*state), dtype=float)
    out = np.zeros((a.size, m))
    for k in order:
        state = list(state)
        state[k] = b
        cur = np.asarray(surface.evaluate(*state), dtype=float)
        out[:, k] = cur - prev
        prev = cur
    return out


def su_decompose(surface: RevaluationSurface, partition, order=None, eval_times=None) -> Decomposition:
    """Telescoping SU decomposition over ``partition``.

    ``order`` is a permutation of ``0..m-1`` giving the update sequence inside
    each partition step.  ``eval_times`` default to the partition points;
    other times ``t`` use the truncated last step ``(s_l, t]``.
    """
    pts = partition.points if isinstance(partition, TimeGrid) else merge_times(partition)
    if pts[0] != 0.0:
        raise ValueError("partition must start at 0")
    order = _check_order(order, surface.m)
    steps = _step_increments(surface, pts[:-1], pts[1:], order)
    cum = np.vstack([np.zeros((1, surface.m)), np.cumsum(steps, axis=0)])
    if eval_times is None:
        times, values = pts, cum
    else:
        times = merge_times(eval_times)
        if times[0] < -ATOL or times[-1] > pts[-1] + ATOL:
            raise ValueError("evaluation times must lie inside the partition range")
        k = np.searchsorted(pts, times + ATOL, side="right") - 1
        values = cum[k].copy()
        partial = np.abs(pts[k] - times) > ATOL
        if np.any(partial):
            values[partial] += _step_increments(surface, pts[k[partial]], times[partial], order)
    r0 = float(np.asarray(surface.diagonal(0.0)))
    r_values = np.asarray(surface.diagonal(times), dtype=float)
    labels = _labels(surface)
    prov = {"surface": surface.label, "partition_size": int(pts.size), "mesh": float(np.max(np.diff(pts))),
            "order": order, "delay": getattr(getattr(surface, "delay", None), "label", "identity")}
    return Decomposition(times, values, r_values, r0, labels, prov)


def _labels(surface) -> tuple[str, ...]:
    base = getattr(surface, "base", surface)
    real = getattr(base, "realization", None)
    if real is not None:
        return tuple(real.basis.labels)
    bb = getattr(base, "_basis", None)
    if bb is not None:
        return tuple(bb.labels)
    return tuple(f"X{i + 1}" for i in range(surface.m))


# --------------------------------------------------------------------------
# refinement limit
# --------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    meshes: np.ndarray  # per level
    distances: np.ndarray  # sup-distance between consecutive levels (len = levels - 1)
    tol: float
    converged: bool
    estimated_order: float
    order_gaps: np.ndarray | None = None  # per level, across update orders
    messages: list[str] = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        d = self.distances
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[:-1] / d[1:]


def _fit_order(meshes, dist) -> float:
    ok = dist > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(meshes[ok]), np.log(dist[ok]), 1)[0])


def isu_approximate(surface: RevaluationSurface, partitions: Sequence[TimeGrid], eval_times=None,
                    tol: float = 1e-3, order=None, with_order_gaps: bool = False):
    """SU along a refining partition sequence; returns the finest level and a
    report.  Non-convergence is flagged in the report, never raised."""
    if len(partitions) < 1:
        raise ValueError("need at least one partition")
    for coarse, fine in zip(partitions[:-1], partitions[1:]):
        if not fine.refines(coarse):
            raise ValueError("partition sequence is not nested")
    if eval_times is None:
        eval_times = partitions[0].points
    elif not np.all(partitions[0].contains(eval_times)):
        raise ValueError("eval_times must be points of the coarsest partition")
    decs = [su_decompose(surface, p, order, eval_times) for p in partitions]
    meshes = np.array([p.mesh for p in partitions])
    dist = np.array([np.max(np.abs(a.values - b.values)) for a, b in zip(decs[:-1], decs[1:])])
    tail = dist[-2:] if dist.size >= 2 else dist
    converged = bool(tail.size > 0 and np.all(tail < tol))
    msgs = [] if converged else ["successive-level distances did not fall below tol; no limit claimed"]
    gaps = None
    if with_order_gaps:
        gaps = np.array([_order_gap(surface, p, eval_times) for p in partitions])
    report = ConvergenceReport(meshes, dist, tol, converged, _fit_order(meshes[1:], dist), gaps, msgs)
    return decs[-1], report


# --------------------------------------------------------------------------
# axiom harness
# --------------------------------------------------------------------------


@dataclass
class AdditivityReport:
    residual: float
    relative: float
    passed: bool


def check_additivity(decomposition: Decomposition, surface: RevaluationSurface, rtol: float = 1e-10) -> AdditivityReport:
    """``max_t |sum_i D_i(t) - (U(t,..,t) - U(0,..,0))|``, recomputing ``R`` from the surface."""
    t = decomposition.times
    r = np.asarray(surface.diagonal(t), dtype=float)
    r0 = float(np.asarray(surface.diagonal(0.0)))
    resid = float(np.max(np.abs(decomposition.values.sum(axis=1) - (r - r0))))
    scale = max(abs(r0), float(np.max(np.abs(r))), float(np.max(np.abs(decomposition.values))))
    rel = resid / scale if scale > 0 else resid
    return AdditivityReport(resid, rel, rel <= rtol)


@dataclass
class NormalizationReport:
    intervals_checked: int
    violations: list[tuple[str, float, float, float]]  # label, a, b, max deviation

    @property
    def passed(self) -> bool:
        return not self.violations


def constancy_intervals(path: StepPath) -> list[tuple[float, float]]:
    """Maximal ``[a, b]`` (grid points, a < b) on which the path does not move."""
    v = path.values.reshape(len(path.grid), -1)
    same = np.all(v[1:] == v[:-1], axis=1)
    pts = path.grid.points
    out, start = [], None
    for k, s in enumerate(same):
        if s and start is None:
            start = k
        elif not s and start is not None:
            out.append((pts[start], pts[k]))
            start = None
    if start is not None:
        out.append((pts[start], pts[-1]))
    return out


def check_normalization(decomposition: Decomposition, basis: RiskBasis, atol: float = 0.0) -> NormalizationReport:
    """Every ``D_i`` must be constant wherever ``X_i`` is constant."""
    t = decomposition.times
    n_int, bad = 0, []
    for i, path in enumerate(basis):
        for a, b in constancy_intervals(path):
            sel = (t >= a - ATOL) & (t <= b + ATOL)
            if sel.sum() < 2:
                continue
            n_int += 1
            d = decomposition.values[sel, i]
            dev = float(np.max(np.abs(d - d[0])))
            if dev > atol:
                bad.append((basis.labels[i], float(a), float(b), dev))
    return NormalizationReport(n_int, bad)


def _orders(m: int):
    if m > 3:
        raise ValueError("order enumeration is limited to m <= 3")
    return list(itertools.permutations(range(m)))


def _order_gap(surface, partition, eval_times) -> float:
    vals = np.stack([su_decompose(surface, partition, o, eval_times).values for o in _orders(surface.m)])
    return float(np.max(vals.max(axis=0) - vals.min(axis=0)))


@dataclass
class OrderInvarianceReport:
    gaps: np.ndarray  # per level, absolute sup-gap across orders
    scale: float
    relative_gaps: np.ndarray
    monotone: bool
    passed: bool
    persistent: bool


def check_order_invariance(surface: RevaluationSurface, partitions: Sequence[TimeGrid], eval_times=None,
                           tol: float = 1e-2, factor: float = 1.2, relative: bool = True) -> OrderInvarianceReport:
    """Sup-gap across all update orders per level.  Passes when gaps never
    grow by more than ``factor`` between levels and the final gap is below
    ``tol`` (relative to ``max_i |D_i(T)|`` when ``relative``)."""
    if eval_times is None:
        eval_times = partitions[0].points
    gaps = np.array([_order_gap(surface, p, eval_times) for p in partitions])
    scale = 1.0
    if relative:
        ref = su_decompose(surface, partitions[-1], None, eval_times)
        scale = float(np.max(np.abs(ref.values[-1]))) or 1.0
    rel = gaps / scale
    monotone = bool(np.all(gaps[1:] <= factor * gaps[:-1] + 1e-15))
    passed = monotone and bool(rel[-1] < tol)
    persistent = bool(rel[-1] >= tol and gaps[-1] * factor >= gaps[0])
    return OrderInvarianceReport(gaps, scale, rel, monotone, passed, persistent)


@dataclass
class StabilityReport:
    labels: list[str]  # per delay level
    distances: np.ndarray  # (n_seeds, n_levels)
    eps: float
    exceedance: np.ndarray  # per level
    non_increasing: bool
    passed: bool
    max_fraction: float = 0.05


def stability_distances(surface: RevaluationSurface, delays: Sequence[Delay], partition: TimeGrid,
                        eval_times, order=None) -> np.ndarray:
    """Left-limit sup-distance between the delayed and undelayed SU decompositions per delay."""
    eval_times = np.atleast_1d(np.asarray(eval_times, dtype=float))
    base = su_decompose(surface, partition, order).left_limit(eval_times)
    out = np.empty(len(delays))
    for n, d in enumerate(delays):
        dec = su_decompose(surface if d.is_identity else surface.delayed(d), partition, order)
        out[n] = float(np.max(np.abs(dec.left_limit(eval_times) - base)))
    return out


def check_stability(surfaces: Sequence[RevaluationSurface], delays: Sequence[Delay], partition: TimeGrid,
                    eval_times, eps: float = 5e-2, max_fraction: float = 0.05, order=None,
                    distances: np.ndarray | None = None) -> StabilityReport:
    """Empirical ``P(|D(X o tau^n)(t-) - D(X)(t-)| > eps)`` over a batch of
    seeds (one surface per seed).  Precomputed ``distances`` may be passed."""
    rep = verify_refining(delays, float(partition.points[-1]))
    if not rep.passed:
        raise ValueError("delay sequence is not refining: " + "; ".join(rep.messages))
    if distances is None:
        distances = np.array([stability_distances(s, delays, partition, eval_times, order) for s in surfaces])
    distances = np.atleast_2d(distances)
    exceed = np.mean(distances > eps, axis=0)
    non_inc = bool(np.all(np.diff(exceed) <= 0))
    return StabilityReport([d.label for d in delays], distances, eps, exceed, non_inc,
                           non_inc and bool(exceed[-1] <= max_fraction), max_fraction)


def interval_increment_decomposition(surface: RevaluationSurface, delay: Delay, eval_times) -> Decomposition:
    """Decomposition of the delayed basis built interval by interval on the
    witness partition: each revaluation increment over a sub-interval goes to
    the single component that moves there."""
    if not delay.is_phased:
        raise ValueError("delay is not phased")
    delayed = surface.delayed(delay)
    w = delay.witness
    times = merge_times(eval_times)
    m = surface.m
    r_w = np.asarray(delayed.diagonal(w), dtype=float)
    owner = np.full(w.size - 1, -1)
    for l in range(w.size - 1):
        mv = delay.moving_components(w[l], w[l + 1])
        if mv:
            owner[l] = mv[0]
    full = np.zeros((w.size, m))
    for l in range(w.size - 1):
        full[l + 1] = full[l]
        if owner[l] >= 0:
            full[l + 1, owner[l]] += r_w[l + 1] - r_w[l]
    k = np.searchsorted(w, times + ATOL, side="right") - 1
    k = np.minimum(k, w.size - 1)
    values = full[k].copy()
    r_t = np.asarray(delayed.diagonal(times), dtype=float)
    for n, (kk, t) in enumerate(zip(k, times)):
        if t > w[kk] + ATOL and kk < owner.size and owner[kk] >= 0:
            values[n, owner[kk]] += r_t[n] - r_w[kk]
    r0 = float(np.asarray(delayed.diagonal(0.0)))
    return Decomposition(times, values, r_t, r0, _labels(surface),
                         {"surface": delayed.label, "method": "interval-increments", "delay": delay.label})
