"""Finite-horizon dynamic program over supply vectors.

The solver works on the simplified per-period problem: given the multiset of
reports, pick how many consumers of each flexibility level to serve (the
service vector u), spend goods according to the closed-form variety recursion
v*, and add the expected continuation value of the remaining supply. Backward
induction stores, for every period t and supply vector y, the expectation
C_t(y) of the period value over the random report set; the report space never
needs to be enumerated outside one period because reports are independent of
history.

Exact expectations enumerate consumer profiles in lexicographic (level, grid
index) order with compensated accumulation, which makes table values
reproducible bit for bit. Per-profile sums use ``math.fsum`` (correctly
rounded), so two pipelines that agree on the served multiset and continuation
value produce identical floats.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import config_io
from .errors import InfeasibleU, StateSpaceTooLarge, TableMismatch
from .market import MarketConfig

Vector = tuple  # length-k tuples of non-negative ints (supply / service / variety)

_MAGIC = b"FMTABLE1"
_VERSION = 1
DEFAULT_PROFILE_BUDGET = 10_000_000


class KahanSum:
    """Compensated accumulator; deterministic for a fixed addition order."""

    __slots__ = ("total", "_c")

    def __init__(self):
        self.total = 0.0
        self._c = 0.0

    def add(self, x: float) -> None:
        y = x - self._c
        t = self.total + y
        self._c = (t - self.total) - y
        self.total = t


# ---------------------------------------------------------------------------
# Feasible sets and the variety recursion
# ---------------------------------------------------------------------------

def feasible_service_set(counts: Sequence[int], y: Sequence[int]) -> list[Vector]:
    """All service vectors u with u^j <= counts^j and cumulative u <= cumulative y.

    Returned in lexicographic order. With no consumers present the only
    member is the zero vector.
    """
    k = len(y)
    cum_y = list(itertools.accumulate(y))
    out: list[Vector] = []

    def extend(prefix: list[int], j: int, cum_u: int) -> None:
        if j == k:
            out.append(tuple(prefix))
            return
        cap = min(counts[j], cum_y[j] - cum_u)
        for uj in range(cap + 1):
            prefix.append(uj)
            extend(prefix, j + 1, cum_u + uj)
            prefix.pop()

    extend([], 0, 0)
    return out


def feasible_variety_set(u: Sequence[int], y: Sequence[int]) -> list[Vector]:
    """All variety vectors that can fulfil service vector u from supply y.

    v^j <= y^j per variety, cumulative v covers cumulative u at every prefix,
    and total v equals total u. Returned in lexicographic order.
    """
    k = len(y)
    total_u = sum(u)
    cum_u = list(itertools.accumulate(u))
    tail_y = [sum(y[j:]) for j in range(k)] + [0]
    out: list[Vector] = []

    def extend(prefix: list[int], j: int, cum_v: int) -> None:
        if j == k:
            if cum_v == total_u:
                out.append(tuple(prefix))
            return
        for vj in range(y[j] + 1):
            c = cum_v + vj
            if c > total_u:
                break
            if j < k - 1 and c < cum_u[j]:
                continue
            if c + tail_y[j + 1] < total_u:
                continue
            prefix.append(vj)
            extend(prefix, j + 1, c)
            prefix.pop()

    extend([], 0, 0)
    return out


def _check_u_supply_feasible(u: Sequence[int], y: Sequence[int]) -> None:
    cum_u = cum_y = 0
    for uj, yj in zip(u, y):
        if uj < 0:
            raise InfeasibleU(f"negative service count in {tuple(u)}")
        cum_u += uj
        cum_y += yj
        if cum_u > cum_y:
            raise InfeasibleU(f"service vector {tuple(u)} exceeds cumulative supply of {tuple(y)}")


def vstar(u: Sequence[int], y: Sequence[int]) -> Vector:
    """Variety recursion: spend high-index varieties first, preserving low ones.

    v*^k = min(u^k, y^k); descending j, v*^j = min(y^j, u^j + carryover),
    where the carryover is the demand from levels above j not yet covered.
    """
    _check_u_supply_feasible(u, y)
    k = len(y)
    v = [0] * k
    carry = 0  # sum of u above j minus sum of v* above j
    for j in range(k - 1, -1, -1):
        v[j] = min(y[j], u[j] + carry)
        carry += u[j] - v[j]
    return tuple(v)


# ---------------------------------------------------------------------------
# Stage optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SortedReportSummary:
    """Per-level arrival counts plus non-increasing virtual-valuation lists."""

    counts: Vector
    w_sorted: tuple  # tuple (one per level) of non-increasing float tuples

    def __post_init__(self):
        if any(len(ws) != n for ws, n in zip(self.w_sorted, self.counts)):
            raise ValueError("per-level counts do not match w list lengths")
        if any(any(a < b for a, b in zip(ws, ws[1:])) for ws in self.w_sorted):
            raise ValueError("per-level w lists must be non-increasing")

    @classmethod
    def from_consumers(cls, consumers: Iterable[tuple], k: int) -> "SortedReportSummary":
        """Build from (level, grid_index, w) triples."""
        per_level: list[list[float]] = [[] for _ in range(k)]
        for level, _gi, w in consumers:
            per_level[level - 1].append(w)
        for ws in per_level:
            ws.sort(reverse=True)
        return cls(
            counts=tuple(len(ws) for ws in per_level),
            w_sorted=tuple(tuple(ws) for ws in per_level),
        )

    @property
    def total(self) -> int:
        return sum(self.counts)


class StageResult(NamedTuple):
    value: float
    u_star: Vector
    v_star: Vector


def stage_value(
    t: int,
    summary: SortedReportSummary,
    y: Sequence[int],
    cont: Callable[[Vector], float],
) -> StageResult:
    """Maximize served virtual surplus plus continuation over service vectors.

    `cont(m)` must give the expected next-period value of carrying supply m
    forward (identically zero in the final period). Ties between service
    vectors go to the lexicographically smallest, so service at exactly zero
    net gain never happens.
    """
    y = tuple(y)
    best: StageResult | None = None
    for u in feasible_service_set(summary.counts, y):
        v = vstar(u, y)
        parts = [w for ws, uj in zip(summary.w_sorted, u) for w in ws[:uj]]
        parts.append(cont(tuple(a - b for a, b in zip(y, v))))
        value = math.fsum(parts)
        if best is None or value > best.value:
            best = StageResult(value, u, v)
    assert best is not None  # zero vector is always feasible
    return best


def _optimal_stage(t: int, consumers: tuple, y: Vector, cont, k: int) -> float:
    return stage_value(t, SortedReportSummary.from_consumers(consumers, k), y, cont).value


# ---------------------------------------------------------------------------
# Value tables
# ---------------------------------------------------------------------------

@dataclass
class ValueTables:
    """Report-expected value functions C_t(y), frozen after construction."""

    config: MarketConfig
    fingerprint: str
    backend: str                   # "exact" | "mc"
    samples: int | None
    seed: int | None
    states: dict                   # t -> sorted list of supply vectors
    values: dict                   # t -> {y: C_t(y)}
    stderrs: dict                  # t -> {y: standard error} (zero for exact)
    _cont_memo: dict = field(default_factory=dict, repr=False)

    def value(self, t: int, y: Sequence[int]) -> float:
        return self.values[t][tuple(y)]

    def stderr(self, t: int, y: Sequence[int]) -> float:
        return self.stderrs[t][tuple(y)]

    def supply_outcomes(self, t: int) -> list[tuple[float, Vector]]:
        """Joint supply-arrival outcomes (prob, x) for period t, zero-prob skipped."""
        key = ("outcomes", t)
        got = self._cont_memo.get(key)
        if got is None:
            per_variety = [self.config.supply.pmf(t, j) for j in range(1, self.config.varieties + 1)]
            got = [
                (math.prod(pmf[x] for pmf, x in zip(per_variety, xs)), xs)
                for xs in itertools.product(*(range(len(p)) for p in per_variety))
            ]
            got = [(p, xs) for p, xs in got if p > 0.0]
            self._cont_memo[key] = got
        return got

    def continuation(self, t: int, m: Sequence[int]) -> float:
        """Expected next-period value of carrying supply m out of period t."""
        if t >= self.config.horizon:
            return 0.0
        m = tuple(m)
        key = (t, m)
        got = self._cont_memo.get(key)
        if got is None:
            nxt = self.values[t + 1]
            got = math.fsum(p * nxt[tuple(a + b for a, b in zip(m, xs))]
                            for p, xs in self.supply_outcomes(t + 1))
            self._cont_memo[key] = got
        return got

    def continuation_stderr(self, t: int, m: Sequence[int]) -> float:
        """Propagated standard error of continuation(t, m); entries are independent."""
        if t >= self.config.horizon:
            return 0.0
        m = tuple(m)
        nxt = self.stderrs[t + 1]
        var = math.fsum((p * nxt[tuple(a + b for a, b in zip(m, xs))]) ** 2
                        for p, xs in self.supply_outcomes(t + 1))
        return math.sqrt(var)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        T, k = self.config.horizon, self.config.varieties
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(self.fingerprint.encode("ascii"))
            backend = self.backend.encode("utf-8")
            fh.write(struct.pack("<H", len(backend)))
            fh.write(backend)
            fh.write(struct.pack("<Q", self.samples or 0))
            fh.write(struct.pack("<BQ", int(self.seed is not None), self.seed or 0))
            fh.write(struct.pack("<II", T, k))
            for t in range(1, T + 2):
                states = self.states[t]
                fh.write(struct.pack("<I", len(states)))
                for y in states:
                    fh.write(struct.pack(f"<{k}I", *y))
                    fh.write(struct.pack("<dd", self.values[t][y], self.stderrs[t][y]))

    @classmethod
    def load(cls, path, cfg: MarketConfig) -> "ValueTables":
        fp = config_io.fingerprint(cfg)
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                raise TableMismatch("not a value-table cache file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != _VERSION:
                raise TableMismatch(f"unsupported cache version {version}")
            file_fp = fh.read(64).decode("ascii")
            if file_fp != fp:
                raise TableMismatch(
                    f"cache fingerprint {file_fp[:12]}... does not match config {fp[:12]}..."
                )
            (blen,) = struct.unpack("<H", fh.read(2))
            backend = fh.read(blen).decode("utf-8")
            (samples,) = struct.unpack("<Q", fh.read(8))
            has_seed, seed = struct.unpack("<BQ", fh.read(9))
            T, k = struct.unpack("<II", fh.read(8))
            if T != cfg.horizon or k != cfg.varieties:
                raise TableMismatch("cache dimensions do not match config")
            states, values, stderrs = {}, {}, {}
            for t in range(1, T + 2):
                (n,) = struct.unpack("<I", fh.read(4))
                layer_states, layer_vals, layer_errs = [], {}, {}
                for _ in range(n):
                    y = struct.unpack(f"<{k}I", fh.read(4 * k))
                    c, se = struct.unpack("<dd", fh.read(16))
                    layer_states.append(y)
                    layer_vals[y] = c
                    layer_errs[y] = se
                states[t], values[t], stderrs[t] = layer_states, layer_vals, layer_errs
        return cls(
            config=cfg, fingerprint=fp, backend=backend,
            samples=samples or None, seed=seed if has_seed else None,
            states=states, values=values, stderrs=stderrs,
        )


def reachable_states(cfg: MarketConfig, t: int) -> list[Vector]:
    """Supply vectors possible at period t (box up to the cumulative maxima)."""
    t_eff = min(t, cfg.horizon)  # no arrivals beyond the horizon
    bounds = [cfg.supply.cumulative_max(t_eff, j) for j in range(1, cfg.varieties + 1)]
    return [tuple(y) for y in itertools.product(*(range(b + 1) for b in bounds))]


def _consumer_atoms(cfg: MarketConfig, t: int) -> list[tuple[int, int, float, float]]:
    """Positive-probability (level, grid_index, prob, w) atoms in lex order."""
    atoms = []
    for b in range(1, cfg.varieties + 1):
        g = float(cfg.types.flex_pmf[t - 1, b - 1])
        if g == 0.0:
            continue
        pmf = cfg.types.binned_pmf[t - 1, b - 1]
        w_row = cfg.virtual_values[t - 1, b - 1]
        for i in range(cfg.grid.size):
            p = g * float(pmf[i])
            if p > 0.0:
                atoms.append((b, i, p, float(w_row[i])))
    return atoms


def exact_profile_count(cfg: MarketConfig, t: int) -> int:
    """Number of consumer profiles the exact backend enumerates at period t."""
    m = len(_consumer_atoms(cfg, t))
    lam = cfg.arrivals.pmf(t)
    return sum(m ** n for n in range(len(lam)) if lam[n] > 0.0)


def _expected_stage_exact(cfg, t, y, cont, stage_fn, atoms) -> float:
    lam = cfg.arrivals.pmf(t)
    acc = KahanSum()
    k = cfg.varieties
    for n in range(len(lam)):
        lam_n = float(lam[n])
        if lam_n == 0.0:
            continue
        if n == 0:
            acc.add(lam_n * stage_fn(t, (), y, cont, k))
            continue
        for combo in itertools.product(atoms, repeat=n):
            prob = lam_n
            for _b, _i, p, _w in combo:
                prob *= p
            consumers = tuple((b, i, w) for b, i, _p, w in combo)
            acc.add(prob * stage_fn(t, consumers, y, cont, k))
    return acc.total


def _sampled_stage(cfg, t, y, cont, stage_fn, rng, samples) -> tuple[float, float]:
    lam = np.cumsum(cfg.arrivals.pmf(t))
    flex_cum = np.cumsum(cfg.types.flex_pmf[t - 1])
    val_cum = np.cumsum(cfg.types.binned_pmf[t - 1], axis=1)
    w_rows = cfg.virtual_values[t - 1]
    k = cfg.varieties
    vals = np.empty(samples)
    for s in range(samples):
        n = min(int(np.searchsorted(lam, rng.random(), side="right")), len(lam) - 1)
        consumers = []
        for _ in range(n):
            b = min(int(np.searchsorted(flex_cum, rng.random(), side="right")) + 1, k)
            i = int(np.searchsorted(val_cum[b - 1], rng.random(), side="right"))
            i = min(i, cfg.grid.size - 1)
            consumers.append((b, i, float(w_rows[b - 1, i])))
        vals[s] = stage_fn(t, tuple(consumers), y, cont, k)
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return mean, se


def build_value_tables(
    cfg: MarketConfig,
    backend: str = "exact",
    samples: int | None = None,
    seed: int | None = None,
    profile_budget: int = DEFAULT_PROFILE_BUDGET,
    stage_fn: Callable | None = None,
) -> ValueTables:
    """Backward induction over every reachable supply vector.

    The exact backend enumerates all (arrival count, type profile)
    combinations per table entry and refuses instances whose per-entry
    enumeration exceeds `profile_budget`. The Monte Carlo backend averages
    `samples` seeded draws per entry, with an independent substream per
    (period, state) so results do not depend on evaluation order, and records
    each entry's standard error.

    `stage_fn(t, consumers, y, cont, k)` computes one period value from the
    (level, grid_index, w) consumer triples; the default is the optimal
    service-vector stage. Alternative stage rules (brute-force oracle, myopic
    baseline) share all expectation machinery, which keeps comparisons free
    of summation-order effects.
    """
    if backend not in ("exact", "mc"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "mc":
        if not samples or samples < 2:
            raise ValueError("mc backend needs samples >= 2")
        if seed is None:
            raise ValueError("mc backend needs a seed")
    stage_fn = stage_fn or _optimal_stage

    T = cfg.horizon
    fp = config_io.fingerprint(cfg)
    states = {t: reachable_states(cfg, t) for t in range(1, T + 2)}
    values: dict[int, dict] = {T + 1: {y: 0.0 for y in states[T + 1]}}
    stderrs: dict[int, dict] = {T + 1: {y: 0.0 for y in states[T + 1]}}

    if backend == "exact":
        for t in range(1, T + 1):
            count = exact_profile_count(cfg, t)
            if count > profile_budget:
                raise StateSpaceTooLarge(
                    f"exact backend would evaluate {count} profiles per entry at t={t} "
                    f"(budget {profile_budget})"
                )

    for t in range(T, 0, -1):
        if t == T:
            cont = lambda m: 0.0  # noqa: E731 - terminal layer
        else:
            nxt = values[t + 1]
            outcomes = _supply_outcomes(cfg, t + 1)
            memo: dict[Vector, float] = {}

            def cont(m, _nxt=nxt, _out=outcomes, _memo=memo):
                got = _memo.get(m)
                if got is None:
                    got = math.fsum(p * _nxt[tuple(a + b for a, b in zip(m, xs))] for p, xs in _out)
                    _memo[m] = got
                return got

        layer_vals, layer_errs = {}, {}
        atoms = _consumer_atoms(cfg, t) if backend == "exact" else None
        for idx, y in enumerate(states[t]):
            if backend == "exact":
                layer_vals[y] = _expected_stage_exact(cfg, t, y, cont, stage_fn, atoms)
                layer_errs[y] = 0.0
            else:
                rng = np.random.default_rng(np.random.SeedSequence([seed, t, idx]))
                layer_vals[y], layer_errs[y] = _sampled_stage(
                    cfg, t, y, cont, stage_fn, rng, samples
                )
        values[t], stderrs[t] = layer_vals, layer_errs

    return ValueTables(
        config=cfg, fingerprint=fp, backend=backend,
        samples=samples if backend == "mc" else None,
        seed=seed if backend == "mc" else None,
        states=states, values=values, stderrs=stderrs,
    )


def _supply_outcomes(cfg: MarketConfig, t: int) -> list[tuple[float, Vector]]:
    per_variety = [cfg.supply.pmf(t, j) for j in range(1, cfg.varieties + 1)]
    out = [
        (math.prod(pmf[x] for pmf, x in zip(per_variety, xs)), xs)
        for xs in itertools.product(*(range(len(p)) for p in per_variety))
    ]
    return [(p, xs) for p, xs in out if p > 0.0]


def continuation_gap(tables: ValueTables, t: int, y: Sequence[int], j: int) -> float:
    """Opportunity cost of serving one level-j consumer from supply y at period t.

    The expected continuation with y intact minus the expected continuation
    after spending a good via the variety recursion; zero in the final period.
    """
    y = tuple(y)
    e_j = tuple(1 if lvl == j - 1 else 0 for lvl in range(len(y)))
    _check_u_supply_feasible(e_j, y)  # raises InfeasibleU when no good is reachable
    if t >= tables.config.horizon:
        return 0.0
    kept = y
    spent = tuple(a - b for a, b in zip(y, vstar(e_j, y)))
    nxt = tables.values[t + 1]
    return math.fsum(
        p * (nxt[tuple(a + b for a, b in zip(kept, xs))] - nxt[tuple(a + b for a, b in zip(spent, xs))])
        for p, xs in tables.supply_outcomes(t + 1)
    )
