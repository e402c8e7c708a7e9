"""Config file ingestion and canonical serialization.

A market is described by a single JSON document::

    {
      "horizon": 2,
      "varieties": 2,
      "grid": {"min": 0.0, "max": 1.0, "points": 1001},
      "arrivals": [[0.5, 0.5], [0.5, 0.5]],          # per-period PMF of N_t
      "supply": [[[0,1],[0,1]], [[1],[1]]],          # per-period, per-variety PMF
      "types": {"family": "truncated_exponential", "alpha": [2.0, 3.0]}
    }

`types` may instead tabulate `flexibility` (per-period level PMF) together
with `pdf` and `cdf` arrays shaped [period][level][grid point]. Unknown
fields are rejected at every level.

The canonical serialization always tabulates the type distributions, so a
family-built config and its tabulated equivalent share one fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np

from .errors import MalformedConfig
from .market import (
    ArrivalDistribution,
    MarketConfig,
    SupplyDistribution,
    TypeDistribution,
    ValuationGrid,
    check_structure,
)


def _expect_keys(obj: dict, required: set[str], where: str, optional: set[str] = frozenset()) -> None:
    if not isinstance(obj, dict):
        raise MalformedConfig(f"{where}: expected an object")
    unknown = set(obj) - required - set(optional)
    if unknown:
        raise MalformedConfig(f"{where}: unknown fields {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise MalformedConfig(f"{where}: missing fields {sorted(missing)}")


def parse_config(doc: dict) -> MarketConfig:
    """Build and structurally validate a MarketConfig from a parsed JSON document."""
    _expect_keys(doc, {"horizon", "varieties", "grid", "arrivals", "supply", "types"}, "config")

    horizon = doc["horizon"]
    varieties = doc["varieties"]
    if not isinstance(horizon, int) or not isinstance(varieties, int):
        raise MalformedConfig("horizon and varieties must be integers")

    gspec = doc["grid"]
    _expect_keys(gspec, {"min", "max", "points"}, "grid")
    if not isinstance(gspec["points"], int):
        raise MalformedConfig("grid.points must be an integer count (uniform grid)")
    grid = ValuationGrid.uniform(float(gspec["min"]), float(gspec["max"]), gspec["points"])

    try:
        arrivals = ArrivalDistribution.from_lists(doc["arrivals"])
        supply = SupplyDistribution.from_lists(doc["supply"])
    except (TypeError, ValueError) as exc:
        raise MalformedConfig(f"bad arrival/supply PMF arrays: {exc}") from exc

    types = _parse_types(doc["types"], grid, horizon, varieties)
    cfg = MarketConfig(
        horizon=horizon, varieties=varieties, grid=grid,
        types=types, arrivals=arrivals, supply=supply,
    )
    check_structure(cfg)
    return cfg


def _parse_types(spec: dict, grid: ValuationGrid, horizon: int, varieties: int) -> TypeDistribution:
    if not isinstance(spec, dict):
        raise MalformedConfig("types: expected an object")
    if "family" in spec:
        _expect_keys(spec, {"family", "alpha"}, "types")
        if spec["family"] != "truncated_exponential":
            raise MalformedConfig(f"unknown type family {spec['family']!r}")
        alpha = [float(a) for a in spec["alpha"]]
        if len(alpha) != varieties:
            raise MalformedConfig("types.alpha must list one rate per variety")
        if any(a <= 0 for a in alpha):
            raise MalformedConfig("types.alpha entries must be positive")
        lo, span = grid.theta_min, grid.theta_max - grid.theta_min

        def pdf_fn(t, b, x):
            a = alpha[b - 1]
            z = (np.asarray(x) - lo) / span
            return a * np.exp(-a * z) / (1.0 - math.exp(-a)) / span

        def cdf_fn(t, b, x):
            a = alpha[b - 1]
            z = (np.asarray(x) - lo) / span
            return (1.0 - np.exp(-a * z)) / (1.0 - math.exp(-a))

        return TypeDistribution.from_family(
            flex_pmf=np.full((horizon, varieties), 1.0 / varieties),
            pdf_fn=pdf_fn, cdf_fn=cdf_fn, grid=grid,
            horizon=horizon, levels=varieties,
            family={"family": "truncated_exponential", "alpha": alpha},
        )

    _expect_keys(spec, {"flexibility", "pdf", "cdf"}, "types")
    try:
        return TypeDistribution.from_tables(
            flex_pmf=np.asarray(spec["flexibility"], dtype=float),
            pdf=np.asarray(spec["pdf"], dtype=float),
            cdf=np.asarray(spec["cdf"], dtype=float),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedConfig(f"bad type tables: {exc}") from exc


def load_config(path) -> MarketConfig:
    """Load and validate a config file; parse failures raise MalformedConfig."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise MalformedConfig(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedConfig("config root must be a JSON object")
    return parse_config(doc)


def canonical_dict(cfg: MarketConfig) -> dict[str, Any]:
    """Fully tabulated, order-stable dict representation of a config."""
    return {
        "horizon": cfg.horizon,
        "varieties": cfg.varieties,
        "grid": {
            "min": cfg.grid.theta_min,
            "max": cfg.grid.theta_max,
            "points": cfg.grid.size,
        },
        "arrivals": [list(map(float, cfg.arrivals.pmf(t))) for t in range(1, cfg.horizon + 1)],
        "supply": [
            [list(map(float, cfg.supply.pmf(t, j))) for j in range(1, cfg.varieties + 1)]
            for t in range(1, cfg.horizon + 1)
        ],
        "types": {
            "flexibility": cfg.types.flex_pmf.tolist(),
            "pdf": cfg.types.pdf.tolist(),
            "cdf": cfg.types.cdf.tolist(),
        },
    }


def canonical_json(cfg: MarketConfig) -> str:
    return json.dumps(canonical_dict(cfg), sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: MarketConfig) -> str:
    """SHA-256 of the canonical config serialization."""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def dump_config(cfg: MarketConfig, path) -> None:
    """Write the tabulated canonical form to a config file."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(canonical_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
