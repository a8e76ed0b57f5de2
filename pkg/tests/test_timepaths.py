import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnl_attrib.timepaths import (
    Delay,
    DomainError,
    FloorMap,
    IdentityMap,
    PiecewiseLinearMap,
    RiskBasis,
    ShiftMap,
    StepPath,
    TimeGrid,
    apply_delay,
    delay_pseudo_inverse,
    dyadic_partitions,
    make_refining_delays,
    merge_times,
    stop,
    stop_multi,
    validate_partition_sequence,
    verify_refining,
)


@pytest.fixture
def grid2():
    return TimeGrid(np.array([0.0, 0.5, 1.0, 1.5, 2.0]))


@pytest.fixture
def path13(grid2):
    # 1 on [0, 1), 3 on [1, 2]
    return StepPath.from_jumps(grid2, 1.0, [(1.0, 2.0)])


class TestTimeGrid:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.1, 1.0]))
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.5, 0.5]))
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0]))

    def test_dyadic_mesh(self):
        g = TimeGrid.dyadic(1.0, 4)
        assert len(g) == 17 and g.mesh == 2.0**-4 and g.horizon == 1.0

    def test_index_queries(self, grid2):
        assert grid2.index_of(0.7) == 1
        assert grid2.index_of(1.0) == 2
        assert grid2.index_before(1.0) == 1
        with pytest.raises(DomainError):
            grid2.index_of(2.5)
        with pytest.raises(DomainError):
            grid2.index_of(-0.1)

    def test_refines_and_union(self):
        coarse, fine = TimeGrid.dyadic(1.0, 2), TimeGrid.dyadic(1.0, 3)
        assert fine.refines(coarse) and not coarse.refines(fine)
        u = coarse.union([0.3])
        assert u.contains(0.3) and len(u) == len(coarse) + 1


class TestStepPath:
    def test_right_continuous_value_and_left_limit(self, path13):
        assert path13(0.99) == 1.0
        assert path13(1.0) == 3.0
        assert path13.left_limit(1.0) == 1.0
        assert path13.left_limit(1.2) == 3.0
        with pytest.raises(DomainError):
            path13.left_limit(0.0)

    def test_stop_before_jump_freezes_initial_value(self, path13):
        s = stop(path13, 0.5)
        assert np.all(s.values == 1.0)

    def test_stop_at_horizon_is_identity(self, path13):
        assert stop(path13, 2.0).equals(path13)

    def test_stop_at_jump_includes_it(self, path13):
        assert stop(path13, 1.0).equals(path13)

    def test_stop_outside_horizon(self, path13):
        with pytest.raises(DomainError):
            stop(path13, 2.5)

    def test_jump_must_be_grid_point(self, grid2):
        with pytest.raises(ValueError):
            StepPath.from_jumps(grid2, 0.0, [(0.3, 1.0)])


class TestStopMulti:
    def test_examples(self):
        g = TimeGrid.dyadic(1.0, 3)
        b = RiskBasis((StepPath.from_jumps(g, 0, [(0.25, 1), (0.75, 1)]),
                       StepPath.from_jumps(g, 5, [(0.625, -2)])))
        full = stop_multi(b, (1.0, 1.0))
        assert all(x.equals(y) for x, y in zip(full, b))
        zero = stop_multi(b, (0.0, 0.0))
        assert np.all(zero[0].values == 0) and np.all(zero[1].values == 5)
        mixed = stop_multi(b, (0.5, 1.0))
        assert mixed[0](0.9) == 1 and mixed[0](0.25) == 1 and mixed[1].equals(b[1])

    def test_dimension_mismatch(self):
        g = TimeGrid.dyadic(1.0, 1)
        b = RiskBasis((StepPath(g, np.zeros(3)),))
        with pytest.raises(ValueError):
            stop_multi(b, (0.5, 0.5))

    def test_shared_grid_required(self):
        with pytest.raises(ValueError):
            RiskBasis((StepPath(TimeGrid.dyadic(1.0, 1), np.zeros(3)), StepPath(TimeGrid.dyadic(1.0, 2), np.zeros(5))))


class TestDelays:
    def test_pseudo_inverse_examples(self):
        assert delay_pseudo_inverse(IdentityMap(), 0.7) == pytest.approx(0.7)
        unit_floor = FloorMap(np.arange(0.0, 4.0))
        assert delay_pseudo_inverse(unit_floor, 0.5) == 1.0
        half = PiecewiseLinearMap(np.array([0.0, 2.0]), np.array([0.0, 1.0]))
        assert delay_pseudo_inverse(half, 0.4) == pytest.approx(0.8)
        assert delay_pseudo_inverse(half, 1.5) == np.inf

    def test_identity_delay_leaves_basis(self):
        g = TimeGrid.dyadic(1.0, 3)
        b = RiskBasis((StepPath.from_jumps(g, 0, [(0.375, 1)]), StepPath.from_jumps(g, 0, [(0.5, 2)])))
        d = apply_delay(b, Delay.identity(2))
        assert d.grid == g and all(x.equals(y) for x, y in zip(d, b))

    def test_unit_floor_moves_jump_to_next_integer(self):
        g = TimeGrid(merge_times(np.linspace(0, 2, 21), [0.3]))
        b = RiskBasis((StepPath.from_jumps(g, 0.0, [(0.3, 1.0)]),))
        d = apply_delay(b, Delay((FloorMap(np.arange(0.0, 3.0)),)))
        assert d[0](0.99) == 0.0 and d[0](1.0) == 1.0

    def test_phased_pair_example(self):
        tau = Delay((FloorMap(np.array([0.0, 0.5, 1.0])), FloorMap(np.array([0.0, 0.25, 0.75]))),
                    witness=np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
        assert tau.is_phased and not tau.is_continuous
        for a, b in zip(tau.witness[:-1], tau.witness[1:]):
            assert len(tau.moving_components(a, b)) <= 1

    def test_bad_witness_rejected(self):
        with pytest.raises(ValueError):
            Delay((FloorMap(np.array([0.0, 0.5])), FloorMap(np.array([0.0, 0.5]))), witness=np.array([0.0, 1.0]))

    def test_phased_dyadic_level_one(self):
        (d,) = make_refining_delays("phased-dyadic", 1, 1.0, m=2)
        assert d.is_phased
        np.testing.assert_allclose(d.maps[0].points, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(d.maps[1].points, [0.0, 0.25, 0.75])
        assert float(d.maps[0](0.0)) == 0.0 and float(d.maps[1](0.0)) == 0.0

    def test_continuous_lag_sup_lag(self):
        for n, d in enumerate(make_refining_delays("continuous-lag", 5, 1.0), start=1):
            assert d.is_continuous
            assert d.maps[0].sup_lag(1.0) == pytest.approx(2.0**-n)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_refining_delays("random", 2, 1.0)

    @pytest.mark.parametrize("kind", ["phased-dyadic", "continuous-lag"])
    def test_refining_up_to_twelve_levels(self, kind):
        rep = verify_refining(make_refining_delays(kind, 12, 1.0), 1.0)
        assert rep.passed, rep.messages
        assert np.all(np.diff(rep.sup_lags, axis=0) <= 0)

    def test_phased_dyadic_lags_halve(self):
        rep = verify_refining(make_refining_delays("phased-dyadic", 4, 1.0), 1.0)
        np.testing.assert_allclose(rep.sup_lags[:, 0], [0.5, 0.25, 0.125, 0.0625])

    def test_constant_zero_delay_fails(self):
        stuck = [Delay((FloorMap(np.array([0.0])),)) for _ in range(3)]
        rep = verify_refining(stuck, 1.0)
        assert not rep.passed and np.all(rep.sup_lags == 1.0)

    def test_identity_only_passes(self):
        rep = verify_refining([Delay.identity(2)] * 3, 1.0)
        assert rep.passed and np.all(rep.sup_lags == 0)

    def test_non_nested_images_fail(self):
        a = Delay((FloorMap(np.array([0.0, 0.5])),))
        b = Delay((FloorMap(np.array([0.0, 0.3, 0.6, 0.9])),))
        rep = verify_refining([a, b], 1.0)
        assert not rep.passed and not rep.nested[0]


def test_partition_sequences():
    parts = dyadic_partitions(1.0, [1, 2, 3])
    assert [p.mesh for p in parts] == [0.5, 0.25, 0.125]
    with pytest.raises(ValueError):
        validate_partition_sequence([TimeGrid(np.array([0.0, 0.3, 1.0])), TimeGrid.dyadic(1.0, 2)])


# ---------------------------------------------------------------- properties

times_on_grid = st.integers(min_value=0, max_value=32).map(lambda k: k / 32)


@st.composite
def step_paths(draw):
    g = TimeGrid.dyadic(1.0, 5)
    vals = draw(st.lists(st.integers(-3, 3), min_size=33, max_size=33))
    return StepPath(g, np.cumsum(vals).astype(float))


@settings(max_examples=60, deadline=None)
@given(step_paths(), times_on_grid, times_on_grid)
def test_stop_idempotent_and_monotone_information(p, s, t):
    s, t = min(s, t), max(s, t)
    assert stop(stop(p, t), t).equals(stop(p, t))
    assert stop(p, s).equals(stop(stop(p, t), s))


@st.composite
def time_maps(draw):
    kind = draw(st.sampled_from(["floor", "shift", "linear"]))
    if kind == "floor":
        pts = draw(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
        return FloorMap(np.array(pts))
    if kind == "shift":
        return ShiftMap(draw(st.floats(0.0, 0.5)))
    xs = np.sort(draw(st.lists(st.floats(0.05, 1.0), min_size=1, max_size=4, unique=True)))
    frac = np.sort(draw(st.lists(st.floats(0.0, 1.0), min_size=xs.size, max_size=xs.size)))
    return PiecewiseLinearMap(np.concatenate([[0.0], xs]), np.concatenate([[0.0], xs * frac]))


@settings(max_examples=80, deadline=None)
@given(time_maps(), st.floats(0.0, 1.0), st.floats(0.001, 1.0))
def test_pseudo_inverse_galois(tau, t, s):
    assert float(tau(t)) <= t + 1e-12
    assert float(tau.pseudo_inverse(tau(t))) <= t + 1e-9
    inv = float(tau.pseudo_inverse(s))
    if np.isfinite(inv):
        assert float(tau(inv)) >= s - 1e-9


@settings(max_examples=40, deadline=None)
@given(step_paths(), time_maps(), times_on_grid)
def test_apply_delay_never_looks_ahead(p, tau, t):
    b = RiskBasis((p,))
    seen = apply_delay(b, Delay((tau,)))
    cut = apply_delay(stop_multi(b, (t,)), Delay((tau,)))
    pts = seen.grid.points[seen.grid.points <= t]
    np.testing.assert_array_equal(seen[0](pts), cut[0](pts))
