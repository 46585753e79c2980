"""Carbon sequestration estimates from residue-level maps.

Level areas are converted to annual carbon mass through a per-level
rate table (Mg carbon per hectare per year).  The default table is a
monotone placeholder whose no-till-representative levels sit inside
the published 0.3 to 0.5 Mg/ha/yr band for cropland residue
management; real deployments should supply calibrated rates.  All
arithmetic runs in 64-bit floats because national-scale areas (1e8 ha)
leave little headroom in f32.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .field import N_LEVELS, LEVEL_NAMES
from .metrics import ResidueDistributionMap, _check_level_map

__all__ = [
    "DEFAULT_RATES",
    "CarbonParams",
    "CarbonEstimate",
    "DeltaReport",
    "area_per_level",
    "sequestration_potential",
    "achieved_vs_potential",
]

M2_PER_HA = 1e4

# Mg carbon / ha / yr for none, low, moderate, heavy, ponding
DEFAULT_RATES = (0.0, 0.1, 0.2, 0.4, 0.5)


@dataclass(frozen=True)
class CarbonParams:
    """Per-level sequestration rates plus an optional adjustment map."""

    rates: tuple = DEFAULT_RATES
    adjustment: Optional[np.ndarray] = None  # unitless multiplier per pixel

    def __post_init__(self) -> None:
        if len(self.rates) != N_LEVELS:
            raise ValueError(f"rates must have {N_LEVELS} entries, got {len(self.rates)}")
        for r in self.rates:
            if not np.isfinite(r) or r < 0:
                raise ValueError(f"rates must be finite and >= 0, got {r}")
        if self.adjustment is not None:
            adj = np.asarray(self.adjustment, dtype=np.float64)
            if adj.size == 0:
                raise ValueError("adjustment map has zero extent")
            if not np.all(np.isfinite(adj)) or adj.min() < 0:
                raise ValueError("adjustment values must be finite and >= 0")
            object.__setattr__(self, "adjustment", adj)

    def mean_adjustment(self) -> float:
        if self.adjustment is None:
            return 1.0
        return float(np.mean(self.adjustment))


@dataclass(frozen=True)
class CarbonEstimate:
    """Annual sequestration broken down by residue level."""

    area_ha: tuple          # 5 values
    carbon_mg_yr: tuple     # 5 values, Mg/yr
    total_mg_yr: float
    total_tg_yr: float

    def __post_init__(self) -> None:
        if len(self.area_ha) != N_LEVELS or len(self.carbon_mg_yr) != N_LEVELS:
            raise ValueError(f"per-level fields must have {N_LEVELS} entries")
        if abs(self.total_mg_yr - sum(self.carbon_mg_yr)) > 1e-6 * max(1.0, abs(self.total_mg_yr)):
            raise ValueError("total_mg_yr does not equal the per-level sum")
        if self.total_tg_yr != self.total_mg_yr * 1e-6:
            raise ValueError("total_tg_yr must equal total_mg_yr * 1e-6")

    def to_json(self) -> str:
        payload = {
            "levels": list(LEVEL_NAMES),
            "area_ha": list(self.area_ha),
            "carbon_Mg_yr": list(self.carbon_mg_yr),
            "total_Mg_yr": self.total_mg_yr,
            "total_Tg_yr": self.total_tg_yr,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self, rates: tuple = DEFAULT_RATES) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "area_ha", "rate", "carbon_Mg_yr"])
        for k in range(N_LEVELS):
            w.writerow([LEVEL_NAMES[k], repr(self.area_ha[k]), repr(rates[k]),
                        repr(self.carbon_mg_yr[k])])
        return buf.getvalue()


@dataclass(frozen=True)
class DeltaReport:
    """Achieved versus potential sequestration for one field."""

    current: CarbonEstimate
    scenario: CarbonEstimate
    delta_mg_yr: float

    def to_json(self) -> str:
        payload = {
            "current": json.loads(self.current.to_json()),
            "scenario": json.loads(self.scenario.to_json()),
            "delta_Mg_yr": self.delta_mg_yr,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def area_per_level(
    m: Union[np.ndarray, ResidueDistributionMap],
    resolution: float,
) -> np.ndarray:
    """Hectares covered by each level at a given resolution (m/pixel).

    Distribution maps contribute probability-weighted (expected) area,
    so the per-level total always sums to the full tile area.
    """
    if not np.isfinite(resolution) or resolution <= 0:
        raise ValueError(f"resolution must be > 0, got {resolution}")
    px_ha = float(resolution) ** 2 / M2_PER_HA
    if isinstance(m, ResidueDistributionMap):
        counts = m.probabilities.reshape(N_LEVELS, -1).sum(axis=1, dtype=np.float64)
    else:
        m = _check_level_map(m, "map")
        counts = np.bincount(m.ravel(), minlength=N_LEVELS).astype(np.float64)
    return counts * px_ha


def sequestration_potential(areas: np.ndarray, params: CarbonParams) -> CarbonEstimate:
    """Annual carbon mass for the given per-level areas (ha)."""
    areas = np.asarray(areas, dtype=np.float64)
    if areas.shape != (N_LEVELS,):
        raise ValueError(f"areas must have shape ({N_LEVELS},), got {areas.shape}")
    if not np.all(np.isfinite(areas)) or areas.min() < 0:
        raise ValueError("areas must be finite and >= 0")
    adj = params.mean_adjustment()
    carbon = areas * np.asarray(params.rates, dtype=np.float64) * adj
    total = float(carbon.sum())
    return CarbonEstimate(
        area_ha=tuple(float(a) for a in areas),
        carbon_mg_yr=tuple(float(c) for c in carbon),
        total_mg_yr=total,
        total_tg_yr=total * 1e-6,
    )


def achieved_vs_potential(
    current: np.ndarray,
    scenario: np.ndarray,
    resolution: float,
    params: CarbonParams,
) -> DeltaReport:
    """Compare a mapped field against a management scenario.

    The scenario map typically reassigns till-suppressed pixels to the
    level they could reach under residue-retaining management.
    """
    current = _check_level_map(current, "current")
    scenario = _check_level_map(scenario, "scenario")
    if current.shape != scenario.shape:
        raise ValueError(
            f"extent mismatch: current {current.shape} vs scenario {scenario.shape}"
        )
    est_cur = sequestration_potential(area_per_level(current, resolution), params)
    est_scn = sequestration_potential(area_per_level(scenario, resolution), params)
    return DeltaReport(
        current=est_cur,
        scenario=est_scn,
        delta_mg_yr=est_scn.total_mg_yr - est_cur.total_mg_yr,
    )
