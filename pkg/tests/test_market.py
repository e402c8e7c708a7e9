import math

import numpy as np
import pytest

import flexmarket as fm
from flexmarket import MalformedConfig, NoNonnegativePoint, NoSolution, OffGridValue
from flexmarket.market import ValuationGrid, validate_config

from conftest import tabulated_config


def analytic_w(x, a):
    """Closed-form virtual valuation of the truncated exponential family."""
    return x - (1.0 - math.exp(a * (x - 1.0))) / a


def bisect_root(f, lo, hi, iters=80):
    """Sign-change bisection; the test-side root oracle."""
    flo = f(lo)
    assert flo < 0 < f(hi)
    for _ in range(iters):
        mid = (lo + hi) / 2.0
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


# -- grid ---------------------------------------------------------------------

def test_grid_invariants():
    g = ValuationGrid.uniform(0.0, 1.0, 11)
    assert g.size == 11
    assert g.points[0] == 0.0 and g.points[-1] == 1.0
    assert np.all(np.diff(g.points) > 0)
    assert g.index_of(0.3) == 3
    with pytest.raises(OffGridValue):
        g.index_of(0.3501)


def test_grid_rejects_degenerate():
    with pytest.raises(MalformedConfig):
        ValuationGrid.uniform(0.0, 1.0, 1)
    with pytest.raises(MalformedConfig):
        ValuationGrid.uniform(1.0, 0.0, 5)


# -- virtual valuation --------------------------------------------------------

def test_virtual_valuation_matches_closed_form(example_cfg):
    """Tabulated (1-CDF)/pdf agrees with the analytic truncated-exponential form."""
    for j, a in ((1, 2.0), (2, 3.0)):
        for x in (0.0, 0.25, 0.5, 0.75, 0.99):
            got = fm.virtual_valuation(example_cfg, 1, x, j)
            assert got == pytest.approx(analytic_w(x, a), abs=1e-12)


def test_virtual_valuation_at_top_is_exact(example_cfg, small_cfg):
    for cfg in (example_cfg, small_cfg):
        for t in (1, 2):
            for j in (1, 2):
                assert fm.virtual_valuation(cfg, t, 1.0, j) == 1.0


def test_virtual_valuation_near_zero_at_reported_reserve(example_cfg):
    """w(0.36, 1) vanishes within grid resolution."""
    w = fm.virtual_valuation(example_cfg, 1, 0.36, 1)
    assert abs(w) < 2 * example_cfg.grid.step


def test_virtual_valuation_rejects_off_grid(example_cfg):
    with pytest.raises(OffGridValue):
        fm.virtual_valuation(example_cfg, 1, 0.36001, 1)


def test_virtual_valuation_monotone_in_value_and_level(example_cfg):
    """Non-decreasing along the grid; strictly higher for the more flexible level."""
    for t in (1, 2):
        w1 = example_cfg.virtual_value_row(t, 1)
        w2 = example_cfg.virtual_value_row(t, 2)
        assert np.all(np.diff(w1) > 0)
        assert np.all(np.diff(w2) > 0)
        assert np.all(w2[:-1] > w1[:-1])
        assert w2[-1] == w1[-1] == 1.0


# -- reserve price and inverse -------------------------------------------------

def test_reserve_prices_match_root_oracle(example_cfg):
    """Grid reserves sit within one step of the continuous roots 0.36 / 0.29."""
    step = example_cfg.grid.step
    for j, a in ((1, 2.0), (2, 3.0)):
        root = bisect_root(lambda x: analytic_w(x, a), 0.01, 0.99)
        res = fm.reserve_price(example_cfg, 2, j)
        assert 0 <= res - root <= step  # smallest grid point at or above the root
    assert fm.reserve_price(example_cfg, 2, 1) == pytest.approx(0.36, abs=0.005)
    assert fm.reserve_price(example_cfg, 2, 2) == pytest.approx(0.29, abs=0.005)


def test_reserve_non_increasing_in_level(example_cfg):
    assert fm.reserve_price(example_cfg, 2, 1) > fm.reserve_price(example_cfg, 2, 2)


def test_reserve_endpoint_only():
    """Two-point grid where only theta_max has non-negative w: reserve = theta_max."""
    cfg = tabulated_config([1.0, 1.0], grid=(0.0, 1.0, 2))
    assert fm.virtual_valuation(cfg, 1, 0.0, 1) < 0
    assert fm.virtual_valuation(cfg, 1, 1.0, 1) == 1.0
    assert fm.reserve_price(cfg, 1, 1) == 1.0


def test_reserve_no_nonnegative_point():
    """w < 0 on the whole grid (negative valuations): degenerate instance."""
    cfg = tabulated_config([1.0] * 5, grid=(-1.0, -0.5, 5))
    assert fm.virtual_valuation(cfg, 1, -0.5, 1) == -0.5  # even the top point fails
    with pytest.raises(NoNonnegativePoint):
        fm.reserve_price(cfg, 1, 1)


def test_inverse_virtual(example_cfg):
    assert fm.inverse_virtual(example_cfg, 1, 0.037, 1) == pytest.approx(0.39, abs=0.01)
    assert fm.inverse_virtual(example_cfg, 1, 0.0, 2) == pytest.approx(0.29, abs=0.01)
    assert fm.inverse_virtual(example_cfg, 1, 1.0, 1) == 1.0  # w(1, j) = 1 analytically
    with pytest.raises(NoSolution):
        fm.inverse_virtual(example_cfg, 1, 1.0 + 1e-9, 1)


# -- example builder ------------------------------------------------------------

def test_build_example_config_shape(example_cfg):
    assert example_cfg.horizon == 2 and example_cfg.varieties == 2
    lam = example_cfg.arrivals.pmf(1)
    assert lam.tolist() == [0.5, 0.5]
    assert example_cfg.types.flex_pmf.tolist() == [[0.5, 0.5]] * 2
    # one good of each variety arrives in period 1, none afterwards
    assert example_cfg.supply.pmf(1, 1).tolist() == [0.0, 1.0]
    assert example_cfg.supply.pmf(2, 1).tolist() == [1.0]


def test_build_example_degenerate_cases():
    cfg = fm.build_example_config((2.0,), 0.0, 2, 11)
    assert cfg.arrivals.pmf(1).tolist() == [1.0, 0.0]
    assert cfg.types.flex_pmf.tolist() == [[1.0]] * 2
    with pytest.raises(MalformedConfig):
        fm.build_example_config((3.0, 2.0), 0.5)  # rates must increase
    with pytest.raises(MalformedConfig):
        fm.build_example_config((2.0, 3.0), 1.5)


def test_binned_pmf_normalizes(example_cfg):
    sums = example_cfg.types.binned_pmf.sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-9)


# -- validation ------------------------------------------------------------------

def test_example_config_passes_regularity(example_cfg):
    report = validate_config(example_cfg)
    assert report.passed
    assert report.notes  # grid-only caveat is stated


def test_uniform_single_level_passes():
    """Uniform on [0,1]: hazard 1/(1-x) non-decreasing, w(0) = -1 < 0."""
    cfg = tabulated_config([1.0] * 11, grid=(0.0, 1.0, 11))
    report = validate_config(cfg)
    assert report.passed
    hz = report.hazard[(1, 1)]
    expected = 1.0 / (1.0 - cfg.grid.points[:-1])
    assert np.allclose(hz[:-1], expected, rtol=1e-12)
    assert np.isinf(hz[-1])
    assert fm.virtual_valuation(cfg, 1, 0.0, 1) == -1.0


def test_flex_pmf_not_normalized_is_malformed():
    cfg = tabulated_config([1.0] * 11, flex=[[0.9]])
    with pytest.raises(MalformedConfig):
        validate_config(cfg)


def test_arrival_pmf_not_normalized_is_malformed(small_cfg):
    import dataclasses
    from flexmarket.market import ArrivalDistribution
    bad = dataclasses.replace(
        small_cfg, arrivals=ArrivalDistribution.from_lists([[0.6, 0.5]] * 2)
    )
    with pytest.raises(MalformedConfig):
        validate_config(bad)


def test_decreasing_hazard_is_reported_not_raised():
    """A mid-grid hazard drop is a regularity finding, not an error."""
    cfg = tabulated_config([2.0, 0.5, 2.0], grid=(0.0, 1.0, 3))
    report = validate_config(cfg)
    assert not report.passed
    assert any(v.kind == "hazard_in_x" for v in report.violations)


def test_nonnegative_w_at_bottom_is_reported():
    cfg = tabulated_config([1.0] * 5, grid=(2.0, 3.0, 5))
    report = validate_config(cfg)
    assert any(v.kind == "w_min_sign" for v in report.violations)


def test_cross_level_strictness_violation_flagged():
    """Two identical levels cannot satisfy the strict cross condition."""
    cfg = tabulated_config([[1.0] * 11, [1.0] * 11], k=2, flex=[[0.5, 0.5]])
    report = validate_config(cfg)
    assert any(v.kind == "hazard_strict_cross" for v in report.violations)
    assert not any(v.kind == "hazard_in_x" for v in report.violations)
