import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnl_attrib.decomposition import (
    Decomposition,
    check_additivity,
    check_normalization,
    check_order_invariance,
    check_stability,
    constancy_intervals,
    interval_increment_decomposition,
    isu_approximate,
    stability_distances,
    su_decompose,
)
from pnl_attrib.revaluation import surface_black_box, surface_risk_neutral, terminal_product, terminal_sum
from pnl_attrib.stochastics import ModelParams, Policy, simulate_basis
from pnl_attrib.timepaths import (
    Delay,
    FloorMap,
    RiskBasis,
    StepPath,
    TimeGrid,
    apply_delay,
    dyadic_partitions,
    make_refining_delays,
)

GRID = TimeGrid.dyadic(1.0, 10).union([0.3, 0.7])


def two_paths(j1, j2, x0=(1.0, 1.0)):
    return RiskBasis((StepPath.from_jumps(GRID, x0[0], j1), StepPath.from_jumps(GRID, x0[1], j2)))


ADDITIVE = two_paths([(0.3, 2.0)], [(0.7, -1.0)], x0=(0.0, 0.0))
SAME_TIME = two_paths([(0.3, 1.0)], [(0.3, 2.0)])
DISTINCT = two_paths([(0.3, 1.0)], [(0.7, 2.0)])


def brute_force(u, partition, order, t_end):
    """Telescoping sums written out one term at a time."""
    d = [0.0, 0.0]
    pts = [s for s in partition if s < t_end] + [t_end]
    for a, b in zip(pts[:-1], pts[1:]):
        state = [a, a]
        for i in order:
            before = u(*state)
            state[i] = b
            d[i] += u(*state) - before
    return d


def product_u(basis):
    return lambda t1, t2: basis[0](t1) * basis[1](t2)


# ------------------------------------------------------------- su examples


class TestSU:
    @pytest.mark.parametrize("partition", [[0.0, 1.0], [0.0, 0.5, 1.0], list(np.linspace(0, 1, 11))])
    @pytest.mark.parametrize("order", [(0, 1), (1, 0)])
    def test_additive_collapses_to_marginals(self, partition, order):
        dec = su_decompose(surface_black_box(ADDITIVE, terminal_sum), partition, order,
                           eval_times=np.linspace(0, 1, 21))
        t = dec.times
        np.testing.assert_array_equal(dec.values[:, 0], 2.0 * (t >= 0.3))
        np.testing.assert_array_equal(dec.values[:, 1], -1.0 * (t >= 0.7))

    @pytest.mark.parametrize("basis, partition, order, expect", [
        (SAME_TIME, [0.0, 1.0], (0, 1), (1.0, 4.0)),
        (SAME_TIME, [0.0, 1.0], (1, 0), (3.0, 2.0)),
        (DISTINCT, [0.0, 0.5, 1.0], (0, 1), (1.0, 4.0)),
    ])
    def test_product_examples(self, basis, partition, order, expect):
        dec = su_decompose(surface_black_box(basis, terminal_product), TimeGrid(np.array(partition)), order)
        assert tuple(dec.terminal) == expect
        assert brute_force(product_u(basis), partition, order, 1.0) == list(expect)
        assert dec.terminal.sum() == 5.0 == dec.r_values[-1] - dec.r0

    def test_truncated_last_step(self):
        s = surface_black_box(DISTINCT, terminal_product)
        dec = su_decompose(s, [0.0, 0.5, 1.0], (1, 0), eval_times=[0.0, 0.4, 0.8, 1.0])
        for t, row in zip(dec.times, dec.values):
            assert list(row) == brute_force(product_u(DISTINCT), [0.0, 0.5, 1.0], (1, 0), t)

    def test_bad_inputs(self):
        s = surface_black_box(ADDITIVE, terminal_sum)
        with pytest.raises(ValueError):
            su_decompose(s, [0.0, 1.0], (0, 0))
        with pytest.raises(ValueError):
            su_decompose(s, [0.1, 1.0])

    def test_labels_and_provenance(self):
        p = ModelParams(0.03, 0.05, 0.2, [Policy(1, 1, 0.1, 0.1, 0.1)], 1.0)
        dec = su_decompose(surface_risk_neutral(p, simulate_basis(p, TimeGrid.dyadic(1.0, 6), 0, "Q")),
                           TimeGrid.dyadic(1.0, 3))
        assert len(dec.labels) == 2 and dec.provenance["order"] == (0, 1)
        assert dec.provenance["mesh"] == 0.125


# ------------------------------------------------------------- ISU


class TestISU:
    def test_additive_distances_zero(self):
        dec, rep = isu_approximate(surface_black_box(ADDITIVE, terminal_sum), dyadic_partitions(1.0, range(1, 9)),
                                   eval_times=[0.0, 0.5, 1.0], tol=1e-9)
        assert rep.converged and np.all(rep.distances == 0)
        np.testing.assert_array_equal(dec.terminal, [2.0, -1.0])

    def test_product_distinct_converges(self):
        dec, rep = isu_approximate(surface_black_box(DISTINCT, terminal_product), dyadic_partitions(1.0, range(1, 9)),
                                   eval_times=[0.0, 0.5, 1.0], tol=1e-9)
        assert rep.converged
        np.testing.assert_array_equal(dec.terminal, [1.0, 4.0])
        assert check_additivity(dec, surface_black_box(DISTINCT, terminal_product)).residual == 0.0

    def test_stall_is_flagged_not_raised(self):
        p = ModelParams(0.03, 0.05, 0.3, [Policy(1, 1, 0.5, 0.5, 0.5)], 1.0)
        s = surface_risk_neutral(p, simulate_basis(p, TimeGrid.dyadic(1.0, 10), 1, "Q"))
        _, rep = isu_approximate(s, dyadic_partitions(1.0, [2, 3, 4]), tol=1e-14)
        assert not rep.converged and rep.messages
        assert rep.ratios.shape == (1,)

    def test_eval_times_must_be_coarse_points(self):
        with pytest.raises(ValueError):
            isu_approximate(surface_black_box(ADDITIVE, terminal_sum), dyadic_partitions(1.0, [1, 2]), eval_times=[0.3])

    def test_risk_neutral_distances_shrink(self):
        p = ModelParams(0.03, 0.03, 0.1, [Policy(0.4, 0.3, 0.01, 0.015, 0.02), Policy(0.5, 0.4, 0.02, 0.025, 0.03)], 1.0)
        s = surface_risk_neutral(p, simulate_basis(p, TimeGrid.dyadic(1.0, 14), 3, "Q"))
        _, rep = isu_approximate(s, dyadic_partitions(1.0, range(6, 11)), eval_times=[0.5, 1.0], tol=1e-3)
        assert rep.converged
        assert rep.distances[-1] < rep.distances[0]


# ------------------------------------------------------------- axioms


class TestAdditivity:
    def test_exact_for_su(self):
        s = surface_black_box(DISTINCT, terminal_product)
        assert check_additivity(su_decompose(s, dyadic_partitions(1.0, [3])[0]), s).passed

    def test_corrupted(self):
        s = surface_black_box(DISTINCT, terminal_product)
        dec = su_decompose(s, [0.0, 0.5, 1.0])
        vals = dec.values.copy()
        vals[:, 0] += 1.0
        bad = dataclasses.replace(dec, values=vals)
        rep = check_additivity(bad, s)
        assert rep.residual == 1.0 and not rep.passed


class TestNormalization:
    def test_constancy_intervals(self):
        assert constancy_intervals(DISTINCT[0]) == [(0.0, GRID.points[GRID.index_before(0.3)]), (0.3, 1.0)]

    def test_constant_component_gives_constant_d(self):
        b = two_paths([(0.3, 1.0)], [(0.5, 1.0), (0.7, 1.0)])  # X1 constant on (0.3, 1]
        s = surface_black_box(b, terminal_product)
        dec = su_decompose(s, dyadic_partitions(1.0, [6])[0], eval_times=np.linspace(0, 1, 65))
        rep = check_normalization(dec, b)
        assert rep.passed and rep.intervals_checked >= 2
        sel = dec.times > 0.3
        assert np.all(dec.values[sel, 0] == dec.values[sel, 0][0])

    def test_floor_delayed_basis(self):
        b = two_paths([(0.3, 1.0)], [(0.7, 2.0)])
        d = Delay((FloorMap(np.array([0.0, 0.25, 0.5, 0.75])), FloorMap(np.array([0.0, 0.5]))))
        s = surface_black_box(b, terminal_product).delayed(d)
        dec = su_decompose(s, dyadic_partitions(1.0, [5])[0])
        rep = check_normalization(dec, apply_delay(b, d))
        assert rep.passed

    def test_violation_reported(self):
        s = surface_black_box(ADDITIVE, terminal_sum)
        dec = su_decompose(s, dyadic_partitions(1.0, [4])[0])
        vals = dec.values.copy()
        vals[:, 0] += dec.times * 1e-3
        rep = check_normalization(dataclasses.replace(dec, values=vals), ADDITIVE)
        assert not rep.passed
        assert any(v[0] == ADDITIVE.labels[0] and v[3] > 0 for v in rep.violations)


class TestOrderInvariance:
    def test_additive_zero(self):
        rep = check_order_invariance(surface_black_box(ADDITIVE, terminal_sum), dyadic_partitions(1.0, range(1, 7)))
        assert np.all(rep.gaps == 0) and rep.passed

    def test_same_time_product_persists(self):
        rep = check_order_invariance(surface_black_box(SAME_TIME, terminal_product), dyadic_partitions(1.0, range(1, 9)),
                                     relative=False)
        np.testing.assert_allclose(rep.gaps, 2.0, atol=1e-12, rtol=0)
        assert rep.persistent and not rep.passed

    def test_risk_neutral_gaps_shrink(self):
        p = ModelParams(0.03, 0.03, 0.1, [Policy(0.4, 0.3, 0.01, 0.015, 0.02), Policy(0.5, 0.4, 0.02, 0.025, 0.03)], 1.0)
        s = surface_risk_neutral(p, simulate_basis(p, TimeGrid.dyadic(1.0, 14), 4, "Q"))
        rep = check_order_invariance(s, dyadic_partitions(1.0, range(6, 11)), eval_times=[1.0])
        assert rep.gaps[-1] < rep.gaps[0] and rep.passed


class TestStability:
    def test_identity_delays_zero(self):
        s = surface_black_box(DISTINCT, terminal_product)
        rep = check_stability([s], [Delay.identity(2)] * 4, dyadic_partitions(1.0, [6])[0], [0.5, 1.0])
        assert np.all(rep.distances == 0) and rep.passed

    def test_non_refining_rejected(self):
        s = surface_black_box(DISTINCT, terminal_product)
        stuck = [Delay((FloorMap(np.array([0.0])), FloorMap(np.array([0.0]))))] * 3
        with pytest.raises(ValueError):
            check_stability([s], stuck, dyadic_partitions(1.0, [4])[0], [1.0])

    def test_distinct_product_stable(self):
        s = surface_black_box(DISTINCT, terminal_product)
        dist = stability_distances(s, make_refining_delays("phased-dyadic", 6, 1.0, m=2), dyadic_partitions(1.0, [9])[0],
                                   [0.5, 1.0])
        assert dist[-1] == 0.0

    def test_same_time_product_discrepancy_persists(self):
        s = surface_black_box(SAME_TIME, terminal_product)
        delays = make_refining_delays("phased-dyadic", 6, 1.0, m=2)
        part = dyadic_partitions(1.0, [9])[0]
        # each delay reveals one of the simultaneous jumps first, so exactly one
        # update order disagrees with the delayed decomposition, by 2
        a = stability_distances(s, delays, part, [1.0], order=(0, 1))
        b = stability_distances(s, delays, part, [1.0], order=(1, 0))
        np.testing.assert_allclose(np.sort(np.stack([a, b]), axis=0), [[0.0] * 6, [2.0] * 6], atol=1e-12, rtol=0)
        assert a[-1] == 2.0 or b[-1] == 2.0
        worst = (0, 1) if a[-1] > 0 else (1, 0)
        rep = check_stability([s], delays, part, [1.0], eps=0.5, order=worst)
        assert not rep.passed and rep.exceedance[-1] == 1.0


class TestIntervalIncrements:
    @pytest.mark.parametrize("level", [1, 2, 4])
    @pytest.mark.parametrize("basis", [DISTINCT, SAME_TIME])
    def test_matches_su_on_refining_partition(self, basis, level):
        (d,) = make_refining_delays("phased-dyadic", level, 1.0, m=2)[-1:]
        s = surface_black_box(basis, terminal_product)
        part = TimeGrid(np.union1d(d.witness, dyadic_partitions(1.0, [level + 3])[0].points))
        ev = part.points
        su = su_decompose(s.delayed(d), part, eval_times=ev)
        ii = interval_increment_decomposition(s, d, ev)
        assert np.max(np.abs(su.values - ii.values)) <= 1e-12
        assert ii.labels == su.labels

    def test_requires_phased(self):
        d = make_refining_delays("continuous-lag", 1, 1.0)[0]
        with pytest.raises(ValueError):
            interval_increment_decomposition(surface_black_box(DISTINCT, terminal_product), d, [1.0])


def test_decomposition_queries():
    dec = Decomposition(np.array([0.0, 0.5, 1.0]), np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]),
                        np.zeros(3), 0.0, ("a", "b"))
    np.testing.assert_array_equal(dec.at(0.7), [1.0, 2.0])
    np.testing.assert_array_equal(dec.left_limit(1.0), [1.0, 2.0])
    np.testing.assert_array_equal(dec.left_limit(0.0), [0.0, 0.0])
    assert dec.component(1)(1.0) == 4.0


# ------------------------------------------------------------- properties


@st.composite
def random_basis(draw):
    g = TimeGrid.dyadic(1.0, 5)
    paths = []
    for _ in range(2):
        steps = draw(st.lists(st.sampled_from([0.0, 0.0, 0.0, 1.0, -0.5, 2.0]), min_size=32, max_size=32))
        paths.append(StepPath(g, 1.0 + np.concatenate([[0.0], np.cumsum(steps)])))
    return RiskBasis(tuple(paths))


@st.composite
def random_partition(draw):
    inner = draw(st.lists(st.integers(1, 31), max_size=10, unique=True))
    return TimeGrid(np.array(sorted({0.0, 1.0, *(k / 32 for k in inner)})))


FUNCTIONALS = [terminal_sum, terminal_product, lambda b: float(np.exp(-0.1 * b[0].values[-1]) * b[1].values[-1])]


@settings(max_examples=60, deadline=None)
@given(random_basis(), random_partition(), st.sampled_from([(0, 1), (1, 0)]), st.integers(0, 2))
def test_su_additive_and_normalized(basis, part, order, f):
    s = surface_black_box(basis, FUNCTIONALS[f])
    dec = su_decompose(s, part, order)
    assert check_additivity(dec, s).relative <= 1e-10
    assert check_normalization(dec, basis).passed


@settings(max_examples=30, deadline=None)
@given(random_partition(), random_partition())
def test_additive_refinement_consistency(p1, p2):
    s = surface_black_box(ADDITIVE, terminal_sum)
    ev = np.union1d(p1.points, p2.points)
    ref = su_decompose(s, p1, (0, 1), ev).values
    for part, order in itertools.product([p1, p2], [(0, 1), (1, 0)]):
        np.testing.assert_array_equal(su_decompose(s, part, order, ev).values, ref)
