"""Deterministic path algebra: time grids, right-continuous step paths,
stopping, delays (time changes with lag) and refining delay sequences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ATOL = 1e-12


class DomainError(ValueError):
    """A time argument lies outside the horizon of a grid."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def merge_times(*arrays: Sequence[float], atol: float = ATOL) -> np.ndarray:
    """Sorted union of time arrays, collapsing points closer than ``atol``."""
    pts = np.sort(np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays]))
    if pts.size == 0:
        return pts
    keep = np.concatenate([[True], np.diff(pts) > atol])
    return pts[keep]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing finite set of times starting at 0 (years)."""

    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a grid needs at least two points")
        if abs(pts[0]) > ATOL:
            raise ValueError(f"grid must start at 0, got {pts[0]}")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def dyadic(cls, horizon: float, exponent: int) -> "TimeGrid":
        """Uniform grid of mesh ``2**-exponent`` on ``[0, horizon]``."""
        n = horizon * 2.0**exponent
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"horizon {horizon} is not a multiple of 2^-{exponent}")
        return cls(np.arange(int(round(n)) + 1) * 2.0**-exponent)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.points)))

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.all(np.abs(self.points - other.points) <= ATOL)
        )

    __hash__ = object.__hash__

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -ATOL) or np.any(t > self.horizon + ATOL):
            raise DomainError(f"time outside [0, {self.horizon}]")
        return t

    def index_of(self, t):
        """Index of the largest grid point ``<= t`` (vectorized)."""
        t = self._check(t)
        return np.searchsorted(self.points, t + ATOL, side="right") - 1

    def index_before(self, t):
        """Index of the largest grid point strictly ``< t``; 0 at ``t = 0``."""
        t = self._check(t)
        return np.maximum(np.searchsorted(self.points, t - ATOL, side="left") - 1, 0)

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.points, t), 0, len(self) - 1)
        lo = np.clip(idx - 1, 0, len(self) - 1)
        return (np.abs(self.points[idx] - t) <= ATOL) | (np.abs(self.points[lo] - t) <= ATOL)

    def refines(self, other: "TimeGrid") -> bool:
        """True if every point of ``other`` is a point of this grid."""
        return bool(np.all(self.contains(other.points)))

    def union(self, *times) -> "TimeGrid":
        return TimeGrid(merge_times(self.points, *times))

    def restrict(self, end: float) -> "TimeGrid":
        return TimeGrid(merge_times(self.points[self.points < end - ATOL], [end]))


@dataclass(frozen=True, eq=False)
class StepPath:
    """Right-continuous path, constant on ``[s_k, s_{k+1})`` of its grid.

    ``values`` has shape ``(len(grid),)`` for scalar paths or
    ``(len(grid), d)`` for small vector-valued ones.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape[0] != len(self.grid):
            raise ValueError("one value per grid point required")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_jumps(cls, grid: TimeGrid, initial, jumps: Sequence[tuple[float, float]] = ()) -> "StepPath":
        """Path starting at ``initial`` with additive jumps ``(time, size)``."""
        vals = np.full(len(grid), float(initial))
        for when, size in jumps:
            if not grid.contains(when):
                raise ValueError(f"jump time {when} is not a grid point")
            vals[grid.index_of(when):] += size
        return cls(grid, vals)

    def __call__(self, t):
        return self.values[self.grid.index_of(t)]

    value_at = __call__

    def left_limit(self, t):
        """Value at the largest grid point strictly before ``t``."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise DomainError("left limits need t > 0")
        return self.values[self.grid.index_before(t)]

    def stop(self, t: float) -> "StepPath":
        return stop(self, t)

    def resample(self, grid: TimeGrid) -> "StepPath":
        """Same path viewed on another grid covering the same horizon."""
        return StepPath(grid, self.values[self.grid.index_of(grid.points)])

    def equals(self, other: "StepPath", atol: float = 0.0) -> bool:
        return self.grid == other.grid and bool(np.all(np.abs(self.values - other.values) <= atol))


def stop(path: StepPath, t: float) -> StepPath:
    """The path stopped at ``t``: unchanged on ``[0, t]``, frozen afterwards."""
    k = int(path.grid.index_of(t))
    vals = np.array(path.values)
    vals[k + 1:] = vals[k]
    return StepPath(path.grid, vals)


@dataclass(frozen=True, eq=False)
class RiskBasis:
    """Ordered risk factors sharing one master grid."""

    components: tuple[StepPath, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a risk basis needs at least one component")
        grid = comps[0].grid
        if any(c.grid != grid for c in comps[1:]):
            raise ValueError("all components must share the master grid")
        labels = tuple(self.labels) or tuple(f"X{i + 1}" for i in range(len(comps)))
        if len(labels) != len(comps):
            raise ValueError("one label per component")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "labels", labels)

    @property
    def grid(self) -> TimeGrid:
        return self.components[0].grid

    @property
    def m(self) -> int:
        return len(self.components)

    def __getitem__(self, i: int) -> StepPath:
        return self.components[i]

    def __iter__(self):
        return iter(self.components)


def stop_multi(basis: RiskBasis, times: Sequence[float]) -> RiskBasis:
    """Stop component ``i`` at ``times[i]``."""
    if len(times) != basis.m:
        raise ValueError(f"expected {basis.m} stopping times, got {len(times)}")
    return RiskBasis(tuple(stop(c, t) for c, t in zip(basis, times)), basis.labels)


# --------------------------------------------------------------------------
# delays
# --------------------------------------------------------------------------


class TimeMap:
    """Non-decreasing right-continuous map with ``tau(t) <= t``, ``tau(0) = 0``."""

    is_continuous = True

    def __call__(self, t):
        raise NotImplementedError

    def pseudo_inverse(self, s):
        """``inf {u >= 0 : tau(u) >= s}``; ``inf`` if never reached."""
        raise NotImplementedError

    def sup_lag(self, horizon: float) -> float:
        raise NotImplementedError

    def image(self, t: float) -> list[tuple[float, float]]:
        """``tau([0, t])`` as closed intervals (points are degenerate ones)."""
        return [(0.0, float(self(t)))]

    def breakpoints(self, horizon: float) -> np.ndarray:
        """Times where the map is not locally linear."""
        return np.array([0.0, horizon])


class IdentityMap(TimeMap):
    def __call__(self, t):
        return np.asarray(t, dtype=float)

    def pseudo_inverse(self, s):
        return np.maximum(np.asarray(s, dtype=float), 0.0)

    def sup_lag(self, horizon):
        return 0.0

    def __repr__(self):
        return "IdentityMap()"


@dataclass(frozen=True, eq=False)
class FloorMap(TimeMap):
    """Floor to a set of observation times (time quantization)."""

    points: np.ndarray

    is_continuous = False

    def __post_init__(self):
        pts = merge_times([0.0], self.points)
        if pts[0] < -ATOL:
            raise ValueError("observation times must be non-negative")
        object.__setattr__(self, "points", _frozen(pts))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.points, t + ATOL, side="right") - 1
        return self.points[np.maximum(idx, 0)]

    def pseudo_inverse(self, s):
        s = np.asarray(s, dtype=float)
        idx = np.searchsorted(self.points, s - ATOL, side="left")
        out = np.where(idx < self.points.size, self.points[np.minimum(idx, self.points.size - 1)], np.inf)
        return np.where(s <= 0, 0.0, out)

    def sup_lag(self, horizon):
        pts = self.points[self.points <= horizon + ATOL]
        gaps = np.diff(pts)
        tail = horizon - pts[-1]
        return float(max(gaps.max(initial=0.0), tail))

    def image(self, t):
        return [(float(p), float(p)) for p in self.points[self.points <= t + ATOL]]

    def breakpoints(self, horizon):
        return merge_times(self.points[self.points <= horizon + ATOL], [horizon])

    def __repr__(self):
        return f"FloorMap({self.points.size} points)"


@dataclass(frozen=True)
class ShiftMap(TimeMap):
    """Constant observation lag, ``tau(t) = max(0, t - lag)`` (continuous)."""

    lag: float

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError("lag must be non-negative")

    def __call__(self, t):
        return np.maximum(np.asarray(t, dtype=float) - self.lag, 0.0)

    def pseudo_inverse(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= 0, 0.0, s + self.lag)

    def sup_lag(self, horizon):
        return float(min(self.lag, horizon))

    def breakpoints(self, horizon):
        return merge_times([0.0, horizon], [self.lag] if self.lag < horizon else [])


@dataclass(frozen=True, eq=False)
class PiecewiseLinearMap(TimeMap):
    """Continuous piecewise-linear map through ``knots``; constant after the last."""

    knot_times: np.ndarray
    knot_values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.knot_times)
        v = _frozen(self.knot_values)
        if t.shape != v.shape or t.size < 2:
            raise ValueError("need matching knot arrays of length >= 2")
        if abs(t[0]) > ATOL or abs(v[0]) > ATOL:
            raise ValueError("map must start at (0, 0)")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(v) < 0):
            raise ValueError("knots must be increasing / values non-decreasing")
        if np.any(v > t + ATOL):
            raise ValueError("a delay never looks ahead: tau(t) <= t")
        object.__setattr__(self, "knot_times", t)
        object.__setattr__(self, "knot_values", v)

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self.knot_times, self.knot_values)

    def pseudo_inverse(self, s):
        s = np.asarray(s, dtype=float)
        t, v = self.knot_times, self.knot_values
        out = np.full(s.shape, np.inf)
        flat_s, flat_out = s.ravel(), out.ravel()
        for n, target in enumerate(flat_s):
            if target <= 0:
                flat_out[n] = 0.0
                continue
            k = np.searchsorted(v, target - ATOL, side="left")
            if k >= v.size:
                continue
            if k == 0 or v[k] == v[k - 1]:
                flat_out[n] = t[k]
            else:
                frac = (target - v[k - 1]) / (v[k] - v[k - 1])
                flat_out[n] = t[k - 1] + frac * (t[k] - t[k - 1])
        return flat_out.reshape(s.shape)

    def sup_lag(self, horizon):
        probe = merge_times(self.knot_times[self.knot_times <= horizon], [horizon])
        return float(np.max(probe - self(probe)))

    def breakpoints(self, horizon):
        return merge_times(self.knot_times[self.knot_times <= horizon], [0.0, horizon])


@dataclass(frozen=True, eq=False)
class Delay:
    """Component-wise time changes; ``witness`` is a partition on whose
    intervals at most one component moves (present iff phased)."""

    maps: tuple[TimeMap, ...]
    witness: np.ndarray | None = None
    label: str = "delay"

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))
        if self.witness is not None:
            w = _frozen(merge_times(self.witness))
            object.__setattr__(self, "witness", w)
            if not self.phased_on(w):
                raise ValueError("witness partition does not make the delay phased")

    @classmethod
    def identity(cls, m: int) -> "Delay":
        return cls(tuple(IdentityMap() for _ in range(m)), label="identity")

    @property
    def m(self) -> int:
        return len(self.maps)

    @property
    def is_continuous(self) -> bool:
        return all(mp.is_continuous for mp in self.maps)

    @property
    def is_phased(self) -> bool:
        return self.witness is not None

    @property
    def is_identity(self) -> bool:
        return all(isinstance(mp, IdentityMap) for mp in self.maps)

    def __call__(self, times: Sequence) -> tuple:
        return tuple(mp(t) for mp, t in zip(self.maps, times))

    def moving_components(self, a: float, b: float) -> list[int]:
        """Components whose map is non-constant on ``(a, b]``."""
        return [i for i, mp in enumerate(self.maps) if float(mp(b)) > float(mp(a)) + ATOL]

    def phased_on(self, partition) -> bool:
        pts = np.asarray(partition, dtype=float)
        return all(len(self.moving_components(a, b)) <= 1 for a, b in zip(pts[:-1], pts[1:]))


def apply_delay(basis: RiskBasis, delay: Delay) -> RiskBasis:
    """Observed basis ``X_i o tau_i`` on a grid refined by all crossing times."""
    if delay.m != basis.m:
        raise ValueError(f"delay has {delay.m} components, basis has {basis.m}")
    grid = basis.grid
    extra = []
    for mp in delay.maps:
        cross = np.asarray(mp.pseudo_inverse(grid.points), dtype=float)
        extra.append(cross[np.isfinite(cross) & (cross <= grid.horizon + ATOL)])
    new_grid = grid.union(*extra)
    comps = []
    for path, mp in zip(basis, delay.maps):
        comps.append(StepPath(new_grid, path(mp(new_grid.points))))
    return RiskBasis(tuple(comps), basis.labels)


def delay_pseudo_inverse(delay_component: TimeMap, s: float) -> float:
    return float(delay_component.pseudo_inverse(s))


def dyadic_partitions(horizon: float, levels: Sequence[int]) -> list[TimeGrid]:
    """Nested dyadic partitions of ``[0, horizon]`` with mesh ``2**-n``."""
    out = [TimeGrid.dyadic(horizon, n) for n in levels]
    validate_partition_sequence(out)
    return out


def validate_partition_sequence(partitions: Sequence[TimeGrid]) -> None:
    for coarse, fine in zip(partitions[:-1], partitions[1:]):
        if not fine.refines(coarse):
            raise ValueError("partition sequence is not nested")
        if not fine.mesh < coarse.mesh:
            raise ValueError("partition meshes must strictly decrease")


def make_refining_delays(kind: str, n_levels: int, horizon: float, m: int = 2) -> list[Delay]:
    """Refining delay families that increase to the identity.

    ``phased-dyadic``: component ``i`` floors to the dyadic grid of mesh
    ``2**-n`` shifted by a fixed offset ``i * 2**-(n_levels + ceil(log2 m))``.
    The offset does not depend on the level, so observation sets are nested,
    and it is never a multiple of ``2**-n`` for ``n <= n_levels``, so no two
    components jump together and the delay is phased.

    ``continuous-lag``: every component lags by ``2**-n``.
    """
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    delays = []
    if kind == "phased-dyadic":
        unit = 2.0 ** -(n_levels + int(np.ceil(np.log2(m))))
        for n in range(1, n_levels + 1):
            mesh = 2.0**-n
            maps, jumps = [], []
            for i in range(m):
                pts = i * unit + mesh * np.arange(int(np.floor((horizon - i * unit) / mesh + ATOL)) + 1)
                pts = pts[(pts > 0) & (pts <= horizon + ATOL)]
                maps.append(FloorMap(np.concatenate([[0.0], pts])))
                jumps.append(pts)
            witness = merge_times([0.0, horizon], *jumps)
            delays.append(Delay(tuple(maps), witness=witness, label=f"phased-dyadic-{n}"))
    elif kind == "continuous-lag":
        for n in range(1, n_levels + 1):
            delays.append(Delay(tuple(ShiftMap(2.0**-n) for _ in range(m)), label=f"continuous-lag-{n}"))
    else:
        raise ValueError(f"unknown delay kind {kind!r}")
    return delays


def _images_nested(cur: TimeMap, nxt: TimeMap, horizon: float) -> float | None:
    """First probe time where ``cur([0, t])`` is not inside ``nxt([0, t])``, else None."""
    if isinstance(cur, FloorMap) and isinstance(nxt, FloorMap):
        pts = cur.points[cur.points <= horizon + ATOL]
        k = np.clip(np.searchsorted(nxt.points, pts), 0, nxt.points.size - 1)
        lo = np.maximum(k - 1, 0)
        hit = (np.abs(nxt.points[k] - pts) <= ATOL) | (np.abs(nxt.points[lo] - pts) <= ATOL)
        return float(pts[~hit][0]) if not np.all(hit) else None
    probe = merge_times(cur.breakpoints(horizon), nxt.breakpoints(horizon))
    a, b = np.asarray(cur(probe), dtype=float), np.asarray(nxt(probe), dtype=float)
    if isinstance(nxt, FloorMap):
        # a continuum [0, a] fits inside a finite set only when a = 0
        bad = a > ATOL
    else:
        bad = a > b + ATOL
    return float(probe[bad][0]) if np.any(bad) else None


@dataclass
class RefiningReport:
    sup_lags: np.ndarray  # (levels, m)
    nested: list[bool]  # per consecutive pair of levels
    passed: bool
    messages: list[str] = field(default_factory=list)


def verify_refining(delays: Sequence[Delay], horizon: float) -> RefiningReport:
    """Check nested observation sets and sup-lags decreasing toward zero."""
    if not delays:
        raise ValueError("empty delay sequence")
    m = delays[0].m
    lags = np.array([[mp.sup_lag(horizon) for mp in d.maps] for d in delays])
    nested, msgs = [], []
    for n, (cur, nxt) in enumerate(zip(delays[:-1], delays[1:])):
        ok = True
        for i in range(m):
            t = _images_nested(cur.maps[i], nxt.maps[i], horizon)
            if t is not None:
                ok = False
                msgs.append(f"level {n + 1}->{n + 2}, component {i + 1}: image not nested at t={t:.6g}")
        nested.append(ok)
    monotone = bool(np.all(np.diff(lags, axis=0) <= ATOL))
    shrinking = bool(np.all((lags[1:] < lags[:-1] - ATOL) | (lags[:-1] <= ATOL)))
    if not monotone or not shrinking:
        msgs.append("sup-lags do not decrease toward zero")
    return RefiningReport(lags, nested, bool(all(nested) and monotone and shrinking), msgs)
