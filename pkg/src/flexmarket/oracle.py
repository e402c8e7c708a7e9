"""Brute-force ground truth for the solver.

Everything here enumerates: feasible allocation matrices row by row, the
full-matrix per-period maximization, the greedy constructive allocation, and
the variety-shift transformation with its convergence loop. These routines
are test fixtures at desk scale, deliberately independent of the service/
variety-vector shortcuts they certify, and they refuse (rather than truncate)
when an enumeration budget is hit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dp
from .dp import ValueTables, feasible_service_set, feasible_variety_set
from .errors import BudgetExceeded, InfeasibleU, NotApplicable
from .market import (
    ArrivalDistribution,
    MarketConfig,
    SupplyDistribution,
    TypeDistribution,
    ValuationGrid,
)

DEFAULT_MATRIX_BUDGET = 1_000_000


# ---------------------------------------------------------------------------
# Feasible allocation matrices
# ---------------------------------------------------------------------------

def enumerate_feasible_matrices(
    flexibilities: Sequence[int],
    y: Sequence[int],
    budget: int = DEFAULT_MATRIX_BUDGET,
) -> list[tuple]:
    """Every feasible allocation, one choice per consumer row.

    A matrix is encoded as a tuple with entry 0 (no good) or a variety index
    1..flexibility for each consumer; column sums never exceed the supply y.
    Raises BudgetExceeded instead of returning a truncated set.
    """
    upper = math.prod(b + 1 for b in flexibilities) if flexibilities else 1
    if upper > budget * 16:
        raise BudgetExceeded(f"row-choice space {upper} far exceeds budget {budget}")

    out: list[tuple] = []
    remaining = list(y)

    def extend(row: int, prefix: list[int]) -> None:
        if row == len(flexibilities):
            if len(out) >= budget:
                raise BudgetExceeded(f"feasible matrix count exceeds budget {budget}")
            out.append(tuple(prefix))
            return
        for choice in range(flexibilities[row] + 1):
            if choice > 0:
                if remaining[choice - 1] == 0:
                    continue
                remaining[choice - 1] -= 1
            prefix.append(choice)
            extend(row + 1, prefix)
            prefix.pop()
            if choice > 0:
                remaining[choice - 1] += 1

    extend(0, [])
    return out


def choices_to_matrix(choices: Sequence[int], k: int) -> np.ndarray:
    mat = np.zeros((len(choices), k), dtype=np.int8)
    for i, c in enumerate(choices):
        if c > 0:
            mat[i, c - 1] = 1
    return mat


def service_of(choices: Sequence[int], flexibilities: Sequence[int], k: int) -> tuple:
    """Consumers served per flexibility level under one matrix."""
    u = [0] * k
    for c, b in zip(choices, flexibilities):
        if c > 0:
            u[b - 1] += 1
    return tuple(u)


def varieties_of(choices: Sequence[int], k: int) -> tuple:
    """Goods spent per variety under one matrix."""
    v = [0] * k
    for c in choices:
        if c > 0:
            v[c - 1] += 1
    return tuple(v)


# ---------------------------------------------------------------------------
# Full-matrix stage maximization
# ---------------------------------------------------------------------------

def brute_stage_value(
    t: int,
    consumers: Sequence[tuple],
    y: Sequence[int],
    cont: Callable[[tuple], float],
    budget: int = DEFAULT_MATRIX_BUDGET,
) -> float:
    """Maximize served virtual surplus plus continuation over all matrices.

    `consumers` lists (flexibility, virtual valuation) pairs in arrival
    order; with no consumers the value is the continuation of y untouched.
    """
    y = tuple(y)
    if not consumers:
        return cont(y)
    flexibilities = [b for b, _w in consumers]
    best = None
    for choices in enumerate_feasible_matrices(flexibilities, y, budget=budget):
        spent = varieties_of(choices, len(y))
        parts = [w for (c, (_b, w)) in zip(choices, consumers) if c > 0]
        parts.append(cont(tuple(a - b for a, b in zip(y, spent))))
        value = math.fsum(parts)
        if best is None or value > best:
            best = value
    return best


def _brute_stage(t, consumers, y, cont, k, budget=DEFAULT_MATRIX_BUDGET):
    return brute_stage_value(t, tuple((b, w) for b, _i, w in consumers), y, cont, budget=budget)


def build_brute_tables(cfg: MarketConfig, matrix_budget: int = DEFAULT_MATRIX_BUDGET, **kwargs) -> ValueTables:
    """Value tables from the unsimplified full-matrix recursion.

    Shares the profile enumeration and accumulation of the solver build, so
    any difference from the solver's tables is a stage-maximization bug.
    """
    def stage(t, consumers, y, cont, k):
        return _brute_stage(t, consumers, y, cont, k, budget=matrix_budget)

    tables = dp.build_value_tables(cfg, stage_fn=stage, **kwargs)
    tables.backend = "exact-brute"
    return tables


# ---------------------------------------------------------------------------
# Constructive procedures
# ---------------------------------------------------------------------------

def constructive_allocation(u: Sequence[int], counts: Sequence[int], y: Sequence[int]) -> tuple:
    """Feasible matrix serving exactly u^j consumers per level.

    Consumers are laid out in level blocks (all level-1 rows first, then
    level-2, ...); within each block the lowest rows are selected and each
    selected consumer receives the lowest-index variety still in stock among
    those it accepts. Returns the per-row choice encoding.
    """
    k = len(y)
    cum_u = cum_y = 0
    for uj, cj, yj in zip(u, counts, y):
        if uj < 0 or uj > cj:
            raise InfeasibleU(f"cannot serve {uj} of {cj} consumers at a level")
        cum_u += uj
        cum_y += yj
        if cum_u > cum_y:
            raise InfeasibleU(f"service vector {tuple(u)} exceeds cumulative supply {tuple(y)}")

    stock = list(y)
    choices: list[int] = []
    for level in range(1, k + 1):
        served = 0
        for _row in range(counts[level - 1]):
            if served < u[level - 1]:
                variety = next(j for j in range(1, level + 1) if stock[j - 1] > 0)
                stock[variety - 1] -= 1
                choices.append(variety)
                served += 1
            else:
                choices.append(0)
    return tuple(choices)


def transform_T(
    v: Sequence[int],
    v_star: Sequence[int],
    u: Sequence[int],
    y: Sequence[int],
) -> tuple:
    """One variety-shift step toward v*: move a good from a lower variety up.

    Picks the highest variety j still under-spent relative to v*, then the
    highest variety i < j with a good to give back; increments v^j and
    decrements v^i. The result stays feasible for (u, y) and the remaining
    supply it leaves behind is weakly better ordered.
    """
    v, v_star = tuple(v), tuple(v_star)
    if v == v_star:
        raise NotApplicable("vector already equals the recursion's optimum")
    j = max(idx for idx in range(len(v)) if v[idx] < v_star[idx])
    candidates = [idx for idx in range(j) if v[idx] > 0]
    if not candidates:
        raise InfeasibleU(f"no donor variety below {j + 1}; {v} is not feasible for ({u}, {y})")
    i = max(candidates)
    out = list(v)
    out[j] += 1
    out[i] -= 1
    return tuple(out)


def transform_chain(v: Sequence[int], u: Sequence[int], y: Sequence[int]) -> list[tuple]:
    """All intermediate vectors from v to v*(u, y), inclusive of both ends."""
    target = dp.vstar(u, y)
    chain = [tuple(v)]
    guard = sum(y) + 1
    while chain[-1] != target:
        if len(chain) > guard:
            raise AssertionError(f"transform loop did not terminate from {v}")
        chain.append(transform_T(chain[-1], target, u, y))
    return chain


# ---------------------------------------------------------------------------
# Table audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonotonicityViolation:
    kind: str      # "single_shift" | "cumulative_dominance"
    t: int
    better: tuple  # supply vector that should dominate
    worse: tuple
    deficit: float  # C(worse) - C(better) beyond tolerance


def _dominates(y: tuple, z: tuple) -> bool:
    cy = cz = 0
    for a, b in zip(y, z):
        cy += a
        cz += b
        if cy < cz:
            return False
    return True


def check_monotonicity(tables: ValueTables, tol: float | None = None) -> list[MonotonicityViolation]:
    """Scan every table layer for supply-order monotonicity violations.

    Checks both the single-shift order (one good moved from a higher to a
    lower variety index) and cumulative dominance. Exact tables are held to
    1e-12; Monte Carlo tables get three combined standard errors of slack.
    """
    out: list[MonotonicityViolation] = []
    exact = tables.backend != "mc"
    k = tables.config.varieties
    for t, layer_states in tables.states.items():
        vals = tables.values[t]
        errs = tables.stderrs[t]
        in_layer = set(layer_states)
        for z in layer_states:
            for j in range(1, k):
                if z[j] == 0:
                    continue
                for i in range(j):
                    yvec = tuple(
                        c + (1 if l == i else -1 if l == j else 0) for l, c in enumerate(z)
                    )
                    if yvec not in in_layer:
                        continue
                    slack = tol if tol is not None else (
                        1e-12 if exact else 1e-12 + 3.0 * math.hypot(errs[yvec], errs[z])
                    )
                    deficit = vals[z] - vals[yvec]
                    if deficit > slack:
                        out.append(MonotonicityViolation("single_shift", t, yvec, z, deficit))
        for yvec in layer_states:
            for z in layer_states:
                if yvec == z or not _dominates(yvec, z):
                    continue
                slack = tol if tol is not None else (
                    1e-12 if exact else 1e-12 + 3.0 * math.hypot(errs[yvec], errs[z])
                )
                deficit = vals[z] - vals[yvec]
                if deficit > slack:
                    out.append(MonotonicityViolation("cumulative_dominance", t, yvec, z, deficit))
    return out


# ---------------------------------------------------------------------------
# Random desk-scale instances and the verification suite
# ---------------------------------------------------------------------------

def random_instance(seed: int, master_seed: int = 0) -> MarketConfig:
    """Seeded desk-scale instance: k <= 3, T <= 3, n <= 2, one good at most per draw.

    Even seeds get truncated-exponential type families (rates drawn without
    ordering, so regularity across levels is not guaranteed); odd seeds get
    random tabulated densities. The dynamic-program identities under test do
    not require regularity.
    """
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, seed]))
    k = int(rng.integers(1, 4))
    T = int(rng.integers(1, 4))
    n_max = int(rng.integers(1, 3))
    G = int(rng.integers(2, 6))
    grid = ValuationGrid.uniform(0.0, 1.0, G)

    arrivals = ArrivalDistribution.from_lists(
        [rng.dirichlet(np.ones(n_max + 1)) for _ in range(T)]
    )
    supply = SupplyDistribution.from_lists(
        [[_bernoulli(rng) for _ in range(k)] for _ in range(T)]
    )
    flex = np.vstack([rng.dirichlet(np.ones(k)) for _ in range(T)])

    if seed % 2 == 0:
        alpha = rng.uniform(0.5, 4.0, size=k)

        def pdf_fn(t, b, x):
            a = alpha[b - 1]
            return a * np.exp(-a * np.asarray(x)) / (1.0 - math.exp(-a))

        def cdf_fn(t, b, x):
            a = alpha[b - 1]
            return (1.0 - np.exp(-a * np.asarray(x))) / (1.0 - math.exp(-a))

        types = TypeDistribution.from_family(flex, pdf_fn, cdf_fn, grid, T, k)
    else:
        raw = rng.uniform(0.2, 2.0, size=(T, k, G))
        widths = np.diff(grid.points)
        cdf = np.zeros_like(raw)
        cdf[..., 1:] = np.cumsum((raw[..., :-1] + raw[..., 1:]) / 2.0 * widths, axis=-1)
        norm = cdf[..., -1:].copy()
        types = TypeDistribution.from_tables(flex, raw / norm, cdf / norm)

    return MarketConfig(horizon=T, varieties=k, grid=grid,
                        types=types, arrivals=arrivals, supply=supply)


def _bernoulli(rng) -> list[float]:
    q = float(rng.uniform(0.05, 0.95))
    return [1.0 - q, q]


@dataclass
class CheckResult:
    name: str
    instance_seed: int
    passed: bool
    worst: float = 0.0
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "instance_seed": self.instance_seed,
            "passed": self.passed,
            "worst": self.worst,
            "detail": self.detail,
        }


def _count_vectors(k: int, n_max: int) -> list[tuple]:
    return [c for c in itertools.product(range(n_max + 1), repeat=k) if sum(c) <= n_max]


def verify_instance(cfg: MarketConfig, seed: int, matrix_budget: int = DEFAULT_MATRIX_BUDGET) -> list[CheckResult]:
    """Run every oracle check on one instance; returns one result per check."""
    results: list[CheckResult] = []
    tables = dp.build_value_tables(cfg)
    brute = build_brute_tables(cfg, matrix_budget=matrix_budget)
    k = cfg.varieties

    # master equivalence of the two recursions, bit for bit
    worst = 0.0
    equal = True
    for t in tables.states:
        for y in tables.states[t]:
            a, b = tables.values[t][y], brute.values[t][y]
            if a != b:
                equal = False
                worst = max(worst, abs(a - b))
    results.append(CheckResult("master_equivalence", seed, equal, worst))

    all_states = sorted({y for states in tables.states.values() for y in states})
    counts_family = _count_vectors(k, cfg.arrivals.n_max)

    # service/variety set projections against full matrix enumeration
    svc_ok = var_ok = True
    for counts in counts_family:
        flexibilities = [lvl + 1 for lvl, c in enumerate(counts) for _ in range(c)]
        for y in all_states:
            matrices = enumerate_feasible_matrices(flexibilities, y, budget=matrix_budget)
            projected = {service_of(m, flexibilities, k) for m in matrices}
            if projected != set(feasible_service_set(counts, y)):
                svc_ok = False
            for u in feasible_service_set(counts, y):
                via_matrices = {
                    varieties_of(m, k) for m in matrices if service_of(m, flexibilities, k) == u
                }
                if via_matrices != set(feasible_variety_set(u, y)):
                    var_ok = False
    results.append(CheckResult("service_set_projection", seed, svc_ok))
    results.append(CheckResult("variety_set_projection", seed, var_ok))

    # variety recursion: membership plus exact optimality under the built tables
    # (dp.vstar looked up dynamically: it is the unit under audit here)
    vs_ok = True
    worst = 0.0
    chain_ok = True
    constructive_ok = True
    for t in range(1, cfg.horizon + 1):
        for y in tables.states[t]:
            for counts in counts_family:
                for u in feasible_service_set(counts, y):
                    vset = feasible_variety_set(u, y)
                    try:
                        v_opt = dp.vstar(u, y)
                    except InfeasibleU:
                        vs_ok = False
                        continue
                    if v_opt not in vset:
                        vs_ok = False
                        continue
                    remainders = [tuple(a - b for a, b in zip(y, v)) for v in vset]
                    conts = [tables.continuation(t, m) for m in remainders]
                    got = tables.continuation(t, tuple(a - b for a, b in zip(y, v_opt)))
                    if got != max(conts):
                        vs_ok = False
                        worst = max(worst, abs(max(conts) - got))
                    for v in vset:
                        try:
                            chain = transform_chain(v, u, y)
                        except (InfeasibleU, NotApplicable, AssertionError):
                            chain_ok = False
                            continue
                        if chain[-1] != v_opt or len(chain) - 1 > sum(y):
                            chain_ok = False
                        seen = [tables.continuation(t, tuple(a - b for a, b in zip(y, step)))
                                for step in chain]
                        if any(b < a for a, b in zip(seen, seen[1:])):
                            chain_ok = False
                        if any(step not in vset for step in chain):
                            chain_ok = False
                    mat = constructive_allocation(u, counts, y)
                    flexibilities = [lvl + 1 for lvl, c in enumerate(counts) for _ in range(c)]
                    if service_of(mat, flexibilities, k) != u:
                        constructive_ok = False
                    if any(a > b for a, b in zip(varieties_of(mat, k), y)):
                        constructive_ok = False
    results.append(CheckResult("vstar_optimality", seed, vs_ok, worst))
    results.append(CheckResult("transform_chain", seed, chain_ok))
    results.append(CheckResult("constructive_allocation", seed, constructive_ok))

    violations = check_monotonicity(tables)
    results.append(CheckResult(
        "monotonicity", seed, not violations,
        max((v.deficit for v in violations), default=0.0),
    ))
    return results


def run_verification(
    instances: int = 200,
    master_seed: int = 0,
    matrix_budget: int = DEFAULT_MATRIX_BUDGET,
) -> dict:
    """Oracle suite over the seeded instance family; JSON-ready report."""
    checks: list[CheckResult] = []
    for seed in range(instances):
        cfg = random_instance(seed, master_seed=master_seed)
        checks.extend(verify_instance(cfg, seed, matrix_budget=matrix_budget))
    failed = [c for c in checks if not c.passed]
    return {
        "instances": instances,
        "master_seed": master_seed,
        "passed": not failed,
        "failed_seeds": sorted({c.instance_seed for c in failed}),
        "checks": [c.to_json() for c in checks],
    }
