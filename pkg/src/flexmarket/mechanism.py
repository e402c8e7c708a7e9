"""Online allocation and threshold payments of the optimal mechanism.

Each period the mechanism solves the per-period problem for (u*, v*), lines
the v* goods up in non-decreasing variety order, and walks flexibility levels
1..k giving the top u*^j consumers of level j (by virtual valuation) the next
u*^j goods. A served consumer pays its critical value: the highest grid
report at or above the reserve price at which it would still have lost.

Ties between equal virtual valuations default to lowest arrival index first;
a seeded random mode is available. Interim allocation/payment expectations
condition on the period's arrival count, enumerate exactly where the period-1
state allows it, and otherwise estimate by seeded forward simulation of the
mechanism under truthful play.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import config_io
from .dp import SortedReportSummary, ValueTables, stage_value
from .errors import (
    InconsistentAllocation,
    NegativeSupply,
    NoNonnegativePoint,
    TableMismatch,
)
from .market import MarketConfig, reserve_price


class _NotServed:
    """Sentinel: the probed consumer wins at no grid point."""

    __slots__ = ()

    def __repr__(self):
        return "NOT_SERVED"


NOT_SERVED = _NotServed()


@dataclass(frozen=True)
class Report:
    """One consumer's report within a period."""

    valuation: float
    flexibility: int
    arrival_index: int


def make_reports(pairs: Sequence[tuple]) -> tuple[Report, ...]:
    """Reports from (valuation, flexibility) pairs, arrival-indexed from 1."""
    return tuple(Report(float(v), int(b), i + 1) for i, (v, b) in enumerate(pairs))


def _check_reports(reports: Sequence[Report], k: int) -> None:
    if [r.arrival_index for r in reports] != list(range(1, len(reports) + 1)):
        raise ValueError("arrival indices must be contiguous from 1")
    if any(not 1 <= r.flexibility <= k for r in reports):
        raise ValueError(f"flexibility levels must lie in 1..{k}")


class AllocationResult(NamedTuple):
    matrix: np.ndarray     # n x k binary
    u_star: tuple
    v_star: tuple


@dataclass(frozen=True)
class MechanismOutcome:
    """One period's allocation, payments and supply bookkeeping."""

    allocation: np.ndarray
    payments: tuple
    u_star: tuple
    v_star: tuple
    next_supply: tuple   # supply left after allocation, before new arrivals

    def variety_received(self, row: int) -> int:
        """1-based variety given to a consumer row, 0 if unserved."""
        hits = np.flatnonzero(self.allocation[row])
        return int(hits[0]) + 1 if len(hits) else 0


class Mechanism:
    """Session over one config/table pair with memoized allocation decisions.

    The default tie-break (lowest arrival index) makes every decision a pure
    function of the inputs, which the critical-value payments rely on: the
    threshold scan must reproduce the allocation's knife-edge choices. The
    seeded random tie mode re-randomizes per call and is meant for studying
    allocation distributions; payments under it can reject tied outcomes as
    InconsistentAllocation.
    """

    def __init__(self, tables: ValueTables, tie_break: str = "arrival", tie_seed: int | None = None):
        if tables.fingerprint != config_io.fingerprint(tables.config):
            raise TableMismatch("tables carry a fingerprint their config does not hash to")
        if tie_break not in ("arrival", "random"):
            raise ValueError(f"unknown tie_break {tie_break!r}")
        self.tables = tables
        self.cfg: MarketConfig = tables.config
        self.tie_break = tie_break
        self._tie_rng = np.random.default_rng(tie_seed) if tie_break == "random" else None
        self._alloc_memo: dict = {}
        self._threshold_memo: dict = {}
        self._samplers: dict = {}

    # -- allocation ----------------------------------------------------------

    def _ranked_rows(self, t: int, reports: Sequence[Report]) -> tuple[SortedReportSummary, list]:
        """Summary plus per-level row order (virtual valuation desc, ties broken)."""
        k = self.cfg.varieties
        per_level: list[list[tuple]] = [[] for _ in range(k)]
        if self.tie_break == "random":
            perm = self._tie_rng.permutation(len(reports))
        for row, r in enumerate(reports):
            w = float(self.cfg.virtual_values[t - 1, r.flexibility - 1,
                                              self.cfg.grid.index_of(r.valuation)])
            tiebreak = perm[row] if self.tie_break == "random" else r.arrival_index
            per_level[r.flexibility - 1].append((-w, tiebreak, row, w))
        for bucket in per_level:
            bucket.sort()
        summary = SortedReportSummary(
            counts=tuple(len(b) for b in per_level),
            w_sorted=tuple(tuple(item[3] for item in b) for b in per_level),
        )
        return summary, [[item[2] for item in b] for b in per_level]

    def allocate(self, t: int, reports: Sequence[Report], y: Sequence[int]) -> AllocationResult:
        """Optimal allocation matrix for one period."""
        y = tuple(y)
        _check_reports(reports, self.cfg.varieties)
        if y not in self.tables.values[min(t, self.cfg.horizon)]:
            raise TableMismatch(f"supply vector {y} is not a reachable state at t={t}")
        key = None
        if self.tie_break == "arrival":
            key = (t, y, tuple((r.valuation, r.flexibility) for r in reports))
            got = self._alloc_memo.get(key)
            if got is not None:
                return got

        if len(self._alloc_memo) > 500_000:
            self._alloc_memo.clear()
        summary, ranked = self._ranked_rows(t, reports)
        res = stage_value(t, summary, y, lambda m: self.tables.continuation(t, m))
        k = self.cfg.varieties
        goods = [j + 1 for j in range(k) for _ in range(res.v_star[j])]
        matrix = np.zeros((len(reports), k), dtype=np.int8)
        pos = 0
        for level in range(k):
            for row in ranked[level][: res.u_star[level]]:
                matrix[row, goods[pos] - 1] = 1
                pos += 1
        matrix.setflags(write=False)
        out = AllocationResult(matrix, res.u_star, res.v_star)
        if key is not None:
            self._alloc_memo[key] = out
        return out

    # -- payments -------------------------------------------------------------

    def payment_threshold(
        self,
        t: int,
        others: Sequence[Report],
        j: int,
        y: Sequence[int],
        probe_index: int | None = None,
    ):
        """Critical value for a level-j report against the others' reports.

        Scans the grid upward from the reserve price for the largest point at
        which the probe still loses. A probe that wins already at the reserve
        pays the reserve (the supremum over an empty set); one that never
        wins gets the NOT_SERVED sentinel.
        """
        y = tuple(y)
        n = len(others) + 1
        probe_index = n if probe_index is None else probe_index
        key = (t, y, j, probe_index, tuple((r.valuation, r.flexibility) for r in others))
        if self.tie_break == "arrival" and key in self._threshold_memo:
            return self._threshold_memo[key]

        try:
            reserve = reserve_price(self.cfg, t, j)
        except NoNonnegativePoint:
            return NOT_SERVED
        grid = self.cfg.grid
        reserve_idx = grid.index_of(reserve)

        pairs = [(r.valuation, r.flexibility) for r in others]
        result = NOT_SERVED
        for idx in range(reserve_idx, grid.size):
            probe_pairs = list(pairs)
            probe_pairs.insert(probe_index - 1, (float(grid.points[idx]), j))
            alloc = self.allocate(t, make_reports(probe_pairs), y)
            if alloc.matrix[probe_index - 1].any():
                result = float(grid.points[max(idx - 1, reserve_idx)])
                break
        if self.tie_break == "arrival":
            self._threshold_memo[key] = result
        return result

    def payments(
        self,
        t: int,
        reports: Sequence[Report],
        y: Sequence[int],
        allocation: AllocationResult | None = None,
    ) -> tuple:
        """Per-consumer payments: the critical value if served, else zero."""
        if allocation is None:
            allocation = self.allocate(t, reports, y)
        out = []
        for row, r in enumerate(reports):
            if not allocation.matrix[row].any():
                out.append(0.0)
                continue
            others = [x for x in reports if x is not r]
            tau = self.payment_threshold(t, others, r.flexibility, y, probe_index=row + 1)
            if tau is NOT_SERVED:
                raise InconsistentAllocation(
                    f"consumer {r.arrival_index} is served but wins at no grid point"
                )
            if tau > r.valuation + 1e-12:
                raise InconsistentAllocation(
                    f"critical value {tau} exceeds the served report {r.valuation}"
                )
            out.append(float(tau))
        return tuple(out)

    def step(
        self,
        t: int,
        y: Sequence[int],
        reports: Sequence[Report],
        x_next: Sequence[int],
    ) -> tuple[MechanismOutcome, tuple]:
        """Run one period and advance the supply dynamics."""
        y = tuple(y)
        alloc = self.allocate(t, reports, y)
        pays = self.payments(t, reports, y, alloc)
        spent = tuple(int(c) for c in alloc.matrix.sum(axis=0))
        left = tuple(a - b for a, b in zip(y, spent))
        if any(c < 0 for c in left):
            raise NegativeSupply(f"allocation spent {spent} from supply {y}")
        outcome = MechanismOutcome(
            allocation=alloc.matrix, payments=pays,
            u_star=alloc.u_star, v_star=alloc.v_star, next_supply=left,
        )
        return outcome, tuple(a + b for a, b in zip(left, x_next))

    # -- sampling helpers ------------------------------------------------------

    def _sampler(self, t: int):
        got = self._samplers.get(t)
        if got is None:
            got = (
                np.cumsum(self.cfg.arrivals.pmf(t)),
                np.cumsum(self.cfg.types.flex_pmf[t - 1]),
                np.cumsum(self.cfg.types.binned_pmf[t - 1], axis=1),
            )
            self._samplers[t] = got
        return got

    def sample_arrival_count(self, rng, t: int) -> int:
        lam_cum, _, _ = self._sampler(t)
        return min(int(np.searchsorted(lam_cum, rng.random(), side="right")), len(lam_cum) - 1)

    def sample_type(self, rng, t: int) -> tuple[float, int]:
        _, flex_cum, val_cum = self._sampler(t)
        b = min(int(np.searchsorted(flex_cum, rng.random(), side="right")) + 1, self.cfg.varieties)
        i = min(int(np.searchsorted(val_cum[b - 1], rng.random(), side="right")),
                self.cfg.grid.size - 1)
        return float(self.cfg.grid.points[i]), b

    def sample_supply_arrivals(self, rng, t: int) -> tuple:
        out = []
        for j in range(1, self.cfg.varieties + 1):
            cum = np.cumsum(self.cfg.supply.pmf(t, j))
            out.append(min(int(np.searchsorted(cum, rng.random(), side="right")), len(cum) - 1))
        return tuple(out)

    def sample_supply_state(self, rng, t: int) -> tuple:
        """Supply vector at period t under truthful play of periods 1..t-1.

        Draw order per period: supply arrivals, then the arrival count, then
        each consumer's (level, valuation).
        """
        y = self.sample_supply_arrivals(rng, 1)
        for s in range(1, t):
            n = self.sample_arrival_count(rng, s)
            reports = make_reports([self.sample_type(rng, s) for _ in range(n)])
            alloc = self.allocate(s, reports, y)
            spent = tuple(int(c) for c in alloc.matrix.sum(axis=0))
            x_next = self.sample_supply_arrivals(rng, s + 1)
            y = tuple(a - b + c for a, b, c in zip(y, spent, x_next))
        return y

    # -- interim quantities ----------------------------------------------------

    def _evaluate_probe(self, t, y, others_pairs, i, report) -> tuple[int, float]:
        """(served indicator, payment) for the probe at slot i among n consumers."""
        pairs = list(others_pairs)
        pairs.insert(i - 1, report)
        reports = make_reports(pairs)
        alloc = self.allocate(t, reports, y)
        if not alloc.matrix[i - 1].any():
            return 0, 0.0
        tau = self.payment_threshold(t, [r for r in reports if r.arrival_index != i],
                                     report[1], y, probe_index=i)
        if tau is NOT_SERVED or tau > report[0] + 1e-12:
            raise InconsistentAllocation("served probe has no consistent critical value")
        return 1, float(tau)

    def interim_quantities(
        self,
        t: int,
        n_t: int,
        i: int,
        report: tuple,
        backend: str = "auto",
        replications: int = 2000,
        seed: int = 0,
    ) -> "InterimEstimate":
        """Expected allocation probability and payment for one probed report.

        Conditions on n_t arrivals with the probe at slot i; the other n_t - 1
        consumers and the supply state are integrated out — exactly at t = 1
        (supply PMF times full type-profile enumeration), by seeded forward
        simulation otherwise.
        """
        if not 1 <= i <= n_t:
            raise ValueError("probe slot must lie in 1..n_t")
        report = (float(report[0]), int(report[1]))
        if backend == "auto":
            cheap = (t == 1 and
                     len(_type_atoms(self.cfg, 1)) ** (n_t - 1)
                     * len(_supply_atoms(self.cfg, 1)) <= 50_000)
            backend = "exact" if cheap else "simulate"
        if backend == "exact":
            if t != 1:
                raise ValueError("exact interim enumeration is only available at t = 1")
            atoms = _type_atoms(self.cfg, t)
            q_parts, p_parts = [], []
            for prob_y, y in _supply_atoms(self.cfg, 1):
                for combo in itertools.product(atoms, repeat=n_t - 1):
                    prob = prob_y
                    for _pair, p in combo:
                        prob *= p
                    others = [pair for pair, _p in combo]
                    served, pay = self._evaluate_probe(t, y, others, i, report)
                    q_parts.append(prob * served)
                    p_parts.append(prob * pay)
            return InterimEstimate(math.fsum(q_parts), math.fsum(p_parts), 0.0, 0.0, None)
        if backend != "simulate":
            raise ValueError(f"unknown backend {backend!r}")

        served = np.empty(replications)
        paid = np.empty(replications)
        for rep in range(replications):
            rng = np.random.default_rng(np.random.SeedSequence([seed, t, rep]))
            y = self.sample_supply_state(rng, t)
            others = [self.sample_type(rng, t) for _ in range(n_t - 1)]
            served[rep], paid[rep] = self._evaluate_probe(t, y, others, i, report)
        q, p = float(served.mean()), float(paid.mean())
        q_se = float(served.std(ddof=1) / math.sqrt(replications))
        p_se = float(paid.std(ddof=1) / math.sqrt(replications))
        return InterimEstimate(q, p, q_se, p_se, replications)


class InterimEstimate(NamedTuple):
    allocation: float      # Q, in [0, 1]
    payment: float         # P
    allocation_se: float
    payment_se: float
    replications: int | None  # None for exact enumeration


def _type_atoms(cfg: MarketConfig, t: int) -> list[tuple[tuple, float]]:
    """(valuation, level) atoms with positive probability, lexicographic order."""
    out = []
    for b in range(1, cfg.varieties + 1):
        g = float(cfg.types.flex_pmf[t - 1, b - 1])
        if g == 0.0:
            continue
        pmf = cfg.types.binned_pmf[t - 1, b - 1]
        for i in range(cfg.grid.size):
            p = g * float(pmf[i])
            if p > 0.0:
                out.append(((float(cfg.grid.points[i]), b), p))
    return out


def _supply_atoms(cfg: MarketConfig, t: int) -> list[tuple[float, tuple]]:
    per_variety = [cfg.supply.pmf(t, j) for j in range(1, cfg.varieties + 1)]
    out = []
    for xs in itertools.product(*(range(len(p)) for p in per_variety)):
        p = math.prod(pmf[x] for pmf, x in zip(per_variety, xs))
        if p > 0.0:
            out.append((p, xs))
    return out


# ---------------------------------------------------------------------------
# Module-level wrappers matching the operation signatures
# ---------------------------------------------------------------------------

def allocate(t: int, reports: Sequence[Report], y: Sequence[int], tables: ValueTables) -> AllocationResult:
    return Mechanism(tables).allocate(t, reports, y)


def payment_threshold(t: int, others: Sequence[Report], j: int, y: Sequence[int], tables: ValueTables):
    return Mechanism(tables).payment_threshold(t, others, j, y)


def payments(t: int, reports: Sequence[Report], y: Sequence[int], tables: ValueTables,
             allocation: AllocationResult | None = None) -> tuple:
    return Mechanism(tables).payments(t, reports, y, allocation)


def interim_quantities(cfg: MarketConfig, tables: ValueTables, t: int, n_t: int, i: int,
                       report: tuple, backend: str = "auto", **kwargs) -> InterimEstimate:
    if config_io.fingerprint(cfg) != tables.fingerprint:
        raise TableMismatch("tables were built for a different config")
    return Mechanism(tables).interim_quantities(t, n_t, i, report, backend=backend, **kwargs)


def step(t: int, state: tuple, reports: Sequence[Report], tables: ValueTables) -> tuple[MechanismOutcome, tuple]:
    y, x_next = state
    return Mechanism(tables).step(t, y, reports, x_next)
