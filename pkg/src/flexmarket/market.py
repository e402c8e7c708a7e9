"""Market primitives: valuation grid, distributions, virtual valuations, regularity.

The market sells k varieties of durable goods over a finite horizon T.
A consumer of flexibility level b accepts any variety in 1..b and reports a
valuation drawn from a level-conditional density. All quantities here are
tabulated on a uniform valuation grid; virtual valuations are computed from
the continuous pdf/CDF sampled at the grid points, while sampling and exact
expectations use a midpoint-binned PMF that preserves normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    MalformedConfig,
    NoNonnegativePoint,
    NoSolution,
    OffGridValue,
)

PMF_TOL = 1e-9        # distribution normalization
CDF_END_TOL = 1e-6    # CDF must reach 1 at the top of the grid
MONO_SLACK = 1e-12    # monotonicity slack separating modeling error from fp noise


def _readonly(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ValuationGrid:
    """Uniform grid of G valuation points with both endpoints included."""

    theta_min: float
    theta_max: float
    points: np.ndarray

    @classmethod
    def uniform(cls, theta_min: float, theta_max: float, size: int) -> "ValuationGrid":
        if size < 2:
            raise MalformedConfig(f"grid needs at least 2 points, got {size}")
        if not theta_min < theta_max:
            raise MalformedConfig(f"grid bounds out of order: [{theta_min}, {theta_max}]")
        pts = np.linspace(theta_min, theta_max, size)
        return cls(theta_min=float(theta_min), theta_max=float(theta_max), points=_readonly(pts))

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def step(self) -> float:
        return (self.theta_max - self.theta_min) / (self.size - 1)

    def index_of(self, x: float) -> int:
        """Index of grid point x; raises OffGridValue for values not on the grid."""
        i = int(np.clip(np.rint((x - self.theta_min) / self.step), 0, self.size - 1))
        if abs(self.points[i] - x) > 1e-9 * max(1.0, abs(self.step)):
            raise OffGridValue(f"{x} is not a grid point (nearest: {self.points[i]})")
        return i

    def snap(self, x: float) -> float:
        """Nearest grid value to x (clamped to the grid range)."""
        i = int(np.clip(np.rint((x - self.theta_min) / self.step), 0, self.size - 1))
        return float(self.points[i])

@dataclass(frozen=True)
class TypeDistribution:
    """Per-period type model: level PMF plus level-conditional valuation tables.

    Arrays are indexed ``[t-1, level-1, grid_index]`` (``flex_pmf`` drops the
    grid axis). ``binned_pmf`` is the induced grid PMF: CDF mass between cell
    midpoints, with the endpoint cells absorbing their outer half-cells, so
    each row telescopes to ``cdf[..., -1] - cdf[..., 0]``.
    """

    flex_pmf: np.ndarray   # (T, k)
    pdf: np.ndarray        # (T, k, G)
    cdf: np.ndarray        # (T, k, G)
    binned_pmf: np.ndarray  # (T, k, G)
    family: dict | None = None   # named-family provenance, e.g. truncated exponential

    @classmethod
    def from_tables(cls, flex_pmf, pdf, cdf, family: dict | None = None) -> "TypeDistribution":
        """Build from tabulated pdf/CDF.

        The binned PMF always derives from the tabulated CDF (midpoints by
        linear interpolation) so that configs with identical tables behave
        identically no matter how they were constructed.
        """
        pdf = np.asarray(pdf, dtype=float)
        cdf = np.asarray(cdf, dtype=float)
        mid = (cdf[..., :-1] + cdf[..., 1:]) / 2.0
        return cls(
            flex_pmf=_readonly(flex_pmf),
            pdf=_readonly(pdf),
            cdf=_readonly(cdf),
            binned_pmf=_readonly(_bin_from_midpoints(cdf, mid)),
            family=family,
        )

    @classmethod
    def from_family(
        cls,
        flex_pmf,
        pdf_fn: Callable[[int, int, np.ndarray], np.ndarray],
        cdf_fn: Callable[[int, int, np.ndarray], np.ndarray],
        grid: ValuationGrid,
        horizon: int,
        levels: int,
        family: dict | None = None,
    ) -> "TypeDistribution":
        """Tabulate closed-form pdf/CDF callables on the grid."""
        pts = grid.points
        pdf = np.empty((horizon, levels, grid.size))
        cdf = np.empty_like(pdf)
        for t in range(horizon):
            for b in range(levels):
                pdf[t, b] = pdf_fn(t + 1, b + 1, pts)
                cdf[t, b] = cdf_fn(t + 1, b + 1, pts)
        return cls.from_tables(flex_pmf, pdf, cdf, family=family)


def _bin_from_midpoints(cdf: np.ndarray, mid: np.ndarray) -> np.ndarray:
    binned = np.empty_like(cdf)
    binned[..., 0] = mid[..., 0] - cdf[..., 0]
    binned[..., 1:-1] = mid[..., 1:] - mid[..., :-1]
    binned[..., -1] = cdf[..., -1] - mid[..., -1]
    return binned


@dataclass(frozen=True)
class ArrivalDistribution:
    """Per-period PMF of the consumer arrival count over {0..n_max}."""

    pmfs: tuple  # tuple of (n_max+1,) arrays, one per period

    @classmethod
    def from_lists(cls, rows: Sequence[Sequence[float]]) -> "ArrivalDistribution":
        return cls(pmfs=tuple(_readonly(r) for r in rows))

    @property
    def n_max(self) -> int:
        return max(len(p) - 1 for p in self.pmfs)

    def pmf(self, t: int) -> np.ndarray:
        return self.pmfs[t - 1]


@dataclass(frozen=True)
class SupplyDistribution:
    """Per-period, per-variety PMF of arriving goods over {0..x_max}."""

    pmfs: tuple  # pmfs[t-1][j-1] -> array over {0..x_max_tj}

    @classmethod
    def from_lists(cls, rows: Sequence[Sequence[Sequence[float]]]) -> "SupplyDistribution":
        return cls(pmfs=tuple(tuple(_readonly(p) for p in row) for row in rows))

    def pmf(self, t: int, j: int) -> np.ndarray:
        return self.pmfs[t - 1][j - 1]

    def x_max(self, t: int, j: int) -> int:
        return len(self.pmfs[t - 1][j - 1]) - 1

    def cumulative_max(self, t: int, j: int) -> int:
        """Largest possible unallocated stock of variety j at time t."""
        return sum(self.x_max(s, j) for s in range(1, t + 1))


@dataclass(frozen=True)
class MarketConfig:
    """Full stochastic description of one market instance."""

    horizon: int
    varieties: int
    grid: ValuationGrid
    types: TypeDistribution
    arrivals: ArrivalDistribution
    supply: SupplyDistribution

    @cached_property
    def virtual_values(self) -> np.ndarray:
        """w[t-1, b-1, i] = x_i - (1 - CDF) / pdf, with w = x exactly where CDF = 1."""
        one_minus = 1.0 - self.types.cdf
        with np.errstate(divide="ignore", invalid="ignore"):
            w = self.grid.points - one_minus / self.types.pdf
        w = np.where(one_minus == 0.0, self.grid.points, w)
        return _readonly(w)

    def virtual_value_row(self, t: int, b: int) -> np.ndarray:
        return self.virtual_values[t - 1, b - 1]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def virtual_valuation(cfg: MarketConfig, t: int, x: float, b: int) -> float:
    """Virtual valuation of a type-(x, b) report at time t; x must be on the grid."""
    if not 1 <= b <= cfg.varieties:
        raise OffGridValue(f"flexibility level {b} outside 1..{cfg.varieties}")
    i = cfg.grid.index_of(x)
    return float(cfg.virtual_values[t - 1, b - 1, i])


def reserve_price(cfg: MarketConfig, t: int, j: int) -> float:
    """Smallest grid point whose virtual valuation is non-negative for level j at t."""
    w = cfg.virtual_values[t - 1, j - 1]
    nonneg = np.flatnonzero(w >= 0.0)
    if len(nonneg) == 0:
        raise NoNonnegativePoint(f"virtual valuation negative on the whole grid (t={t}, j={j})")
    return float(cfg.grid.points[nonneg[0]])


def inverse_virtual(cfg: MarketConfig, t: int, value: float, j: int) -> float:
    """Smallest grid point whose virtual valuation reaches `value` for level j at t."""
    w = cfg.virtual_values[t - 1, j - 1]
    hits = np.flatnonzero(w >= value)
    if len(hits) == 0:
        raise NoSolution(f"no grid point reaches virtual valuation {value} (t={t}, j={j})")
    return float(cfg.grid.points[hits[0]])


def build_example_config(
    alpha: Sequence[float],
    p: float,
    horizon: int = 2,
    grid_size: int = 1001,
) -> MarketConfig:
    """Truncated-exponential worked instance.

    Bernoulli(p) arrivals each period, uniform flexibility over the k levels,
    and level-j valuations with density a_j exp(-a_j x) / (1 - exp(-a_j)) on
    [0, 1]. One good of each variety arrives deterministically in period 1 and
    none afterwards.
    """
    alpha = [float(a) for a in alpha]
    if any(a <= 0 for a in alpha):
        raise MalformedConfig("alpha parameters must be positive")
    if any(a2 <= a1 for a1, a2 in zip(alpha, alpha[1:])):
        raise MalformedConfig("alpha parameters must be strictly increasing")
    if not 0.0 <= p <= 1.0:
        raise MalformedConfig(f"arrival probability {p} outside [0, 1]")
    if horizon < 1:
        raise MalformedConfig("horizon must be positive")

    k = len(alpha)
    grid = ValuationGrid.uniform(0.0, 1.0, grid_size)

    def pdf_fn(t, b, x):
        a = alpha[b - 1]
        return a * np.exp(-a * np.asarray(x)) / (1.0 - math.exp(-a))

    def cdf_fn(t, b, x):
        a = alpha[b - 1]
        return (1.0 - np.exp(-a * np.asarray(x))) / (1.0 - math.exp(-a))

    types = TypeDistribution.from_family(
        flex_pmf=np.full((horizon, k), 1.0 / k),
        pdf_fn=pdf_fn,
        cdf_fn=cdf_fn,
        grid=grid,
        horizon=horizon,
        levels=k,
        family={"family": "truncated_exponential", "alpha": list(alpha)},
    )
    arrivals = ArrivalDistribution.from_lists([[1.0 - p, p]] * horizon)
    supply = SupplyDistribution.from_lists(
        [[[0.0, 1.0]] * k] + [[[1.0]] * k] * (horizon - 1)
    )
    return MarketConfig(
        horizon=horizon,
        varieties=k,
        grid=grid,
        types=types,
        arrivals=arrivals,
        supply=supply,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularityViolation:
    kind: str          # "hazard_in_x" | "hazard_in_level" | "hazard_strict_cross" | "w_min_sign"
    t: int
    level: int
    other_level: int | None = None
    grid_index: int | None = None
    detail: str = ""


@dataclass
class ValidationReport:
    """Outcome of the regularity audit (generalized monotone hazard condition).

    ``hazard[(t, level)]`` holds the hazard rates pdf/(1-CDF) at every grid
    point; violations list every index where the condition fails. The check
    certifies the condition at grid points only; strictness between grid
    points cannot be established numerically.
    """

    hazard: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    notes: tuple = (
        "regularity certified at grid points only; behaviour between grid "
        "points is not checked",
    )

    @property
    def passed(self) -> bool:
        return not self.violations


def check_structure(cfg: MarketConfig) -> None:
    """Raise MalformedConfig for structural defects (PMF sums, grid shape, ...)."""
    g = cfg.grid
    if g.size < 2:
        raise MalformedConfig("valuation grid has fewer than 2 points")
    if not g.theta_min < g.theta_max:
        raise MalformedConfig("grid bounds out of order")
    if not np.all(np.diff(g.points) > 0):
        raise MalformedConfig("grid points not strictly increasing")
    if g.points[0] != g.theta_min or g.points[-1] != g.theta_max:
        raise MalformedConfig("grid endpoints do not match declared bounds")
    if cfg.horizon < 1 or cfg.varieties < 1:
        raise MalformedConfig("horizon and variety count must be positive")

    T, k = cfg.horizon, cfg.varieties
    if len(cfg.arrivals.pmfs) != T:
        raise MalformedConfig("arrival PMFs must cover every period")
    if cfg.arrivals.n_max < 1:
        raise MalformedConfig("arrival support must allow at least one consumer")
    for t in range(1, T + 1):
        lam = cfg.arrivals.pmf(t)
        if np.any(lam < 0) or abs(float(np.sum(lam)) - 1.0) > PMF_TOL:
            raise MalformedConfig(f"arrival PMF at t={t} does not sum to 1")

    if len(cfg.supply.pmfs) != T or any(len(row) != k for row in cfg.supply.pmfs):
        raise MalformedConfig("supply PMFs must cover every (period, variety)")
    for t in range(1, T + 1):
        for j in range(1, k + 1):
            gam = cfg.supply.pmf(t, j)
            if np.any(gam < 0) or abs(float(np.sum(gam)) - 1.0) > PMF_TOL:
                raise MalformedConfig(f"supply PMF at t={t}, variety {j} does not sum to 1")

    ty = cfg.types
    if ty.flex_pmf.shape != (T, k) or ty.pdf.shape != (T, k, g.size) or ty.cdf.shape != (T, k, g.size):
        raise MalformedConfig("type tables do not match (horizon, varieties, grid)")
    for t in range(1, T + 1):
        gt = ty.flex_pmf[t - 1]
        if np.any(gt < 0) or abs(float(np.sum(gt)) - 1.0) > PMF_TOL:
            raise MalformedConfig(f"flexibility PMF at t={t} does not sum to 1")
        for b in range(1, k + 1):
            cdf = ty.cdf[t - 1, b - 1]
            if np.any(np.diff(cdf) < -MONO_SLACK):
                raise MalformedConfig(f"CDF decreasing at t={t}, level {b}")
            if abs(float(cdf[-1]) - 1.0) > CDF_END_TOL:
                raise MalformedConfig(f"CDF does not reach 1 at t={t}, level {b}")
            if np.any(ty.pdf[t - 1, b - 1, 1:-1] <= 0):
                raise MalformedConfig(f"pdf not positive on grid interior at t={t}, level {b}")


def validate_config(cfg: MarketConfig) -> ValidationReport:
    """Structural check plus the regularity audit of the hazard-rate condition.

    Structural defects raise MalformedConfig. Regularity failures are findings
    reported on the returned object, not errors: flagged are (a) hazard rates
    decreasing along the grid, (b) hazard rates decreasing in the flexibility
    level, (c) non-strict cross-level comparisons where x >= x' and c > c',
    and (d) a non-negative virtual valuation at theta_min.
    """
    check_structure(cfg)
    report = ValidationReport()
    T, k, G = cfg.horizon, cfg.varieties, cfg.grid.size

    for t in range(1, T + 1):
        hz = np.empty((k, G))
        for b in range(1, k + 1):
            pdf = cfg.types.pdf[t - 1, b - 1]
            one_minus = 1.0 - cfg.types.cdf[t - 1, b - 1]
            with np.errstate(divide="ignore", invalid="ignore"):
                h = np.where(one_minus > 0, pdf / one_minus, np.inf)
            hz[b - 1] = h
            report.hazard[(t, b)] = _readonly(h)

        for b in range(1, k + 1):
            bad = np.flatnonzero(np.diff(hz[b - 1]) < -MONO_SLACK)
            for i in bad:
                report.violations.append(RegularityViolation(
                    kind="hazard_in_x", t=t, level=b, grid_index=int(i) + 1,
                    detail=f"hazard drops from {hz[b - 1][i]:.6g} to {hz[b - 1][i + 1]:.6g}",
                ))
        for b in range(1, k):
            with np.errstate(invalid="ignore"):
                bad = np.flatnonzero(hz[b] - hz[b - 1] < -MONO_SLACK)
            for i in bad:
                report.violations.append(RegularityViolation(
                    kind="hazard_in_level", t=t, level=b + 1, other_level=b,
                    grid_index=int(i),
                    detail=f"hazard({b + 1}) < hazard({b}) at grid index {i}",
                ))
            # strict cross condition: against the running max of the lower level,
            # which covers every x' <= x in one pass; skipped where the lower
            # hazard is already infinite (undecidable at grid resolution)
            lower_running = np.maximum.accumulate(hz[b - 1])
            bad = np.flatnonzero((hz[b] <= lower_running) & np.isfinite(lower_running))
            for i in bad:
                report.violations.append(RegularityViolation(
                    kind="hazard_strict_cross", t=t, level=b + 1, other_level=b,
                    grid_index=int(i),
                    detail="strict hazard dominance fails against lower level",
                ))

        for b in range(1, k + 1):
            w0 = float(cfg.virtual_values[t - 1, b - 1, 0])
            if w0 >= 0:
                report.violations.append(RegularityViolation(
                    kind="w_min_sign", t=t, level=b, grid_index=0,
                    detail=f"virtual valuation at theta_min is {w0:.6g} (must be < 0)",
                ))
    return report
