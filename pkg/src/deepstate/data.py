"""Containers shared by the preprocessing, modelling and analysis code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

ITEM_KINDS = ("lab", "vital", "anthro", "gender")

OBSERVATION_COLUMNS = ["patient_id", "date", "item", "value"]
PATIENT_COLUMNS = ["patient_id", "gender", "death_flag", "drug_tags"]
ITEM_COLUMNS = ["item", "kind", "ref_low", "ref_high", "units"]


class DataContractError(ValueError):
    """Input data violates a documented precondition."""


class ConfigurationError(ValueError):
    """A setting or catalog entry is missing or invalid."""


@dataclass(frozen=True)
class ItemSpec:
    name: str
    kind: str
    ref_low: float | None = None
    ref_high: float | None = None
    units: str = ""

    def __post_init__(self):
        if self.kind not in ITEM_KINDS:
            raise DataContractError(f"item {self.name!r}: unknown kind {self.kind!r}")

    @property
    def has_range(self):
        return (
            self.ref_low is not None
            and self.ref_high is not None
            and np.isfinite(self.ref_low)
            and np.isfinite(self.ref_high)
        )


@dataclass
class RawCohort:
    """Three tables: dated observations, static patient fields, item catalog.

    ``drug_tags`` in the patients table is a ``;``-separated string.
    """

    observations: pd.DataFrame
    patients: pd.DataFrame
    items: pd.DataFrame

    def item_specs(self):
        out = {}
        for row in self.items.itertuples(index=False):
            lo = None if pd.isna(row.ref_low) else float(row.ref_low)
            hi = None if pd.isna(row.ref_high) else float(row.ref_high)
            units = "" if pd.isna(row.units) else str(row.units)
            out[row.item] = ItemSpec(row.item, row.kind, lo, hi, units)
        return out


@dataclass
class ObservationSeries:
    """One patient's item x time data.

    ``values`` and ``mask`` are (T, D).  ``codes`` holds signal codes
    (+1 high, 0 normal, -1 low) for lab items and NaN elsewhere or where the
    value was imputed.  ``raw`` keeps the observed raw values (NaN when
    missing) so a cohort can be re-ingested.
    """

    patient_id: str
    values: np.ndarray
    mask: np.ndarray
    codes: np.ndarray | None = None
    raw: np.ndarray | None = None
    dates: list = field(default_factory=list)
    death: bool = False
    drugs: tuple = ()
    gender: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DataContractError(
                f"patient {self.patient_id}: values {self.values.shape} and mask {self.mask.shape} differ"
            )
        if self.codes is None:
            self.codes = np.full(self.values.shape, np.nan)
        if self.raw is None:
            self.raw = np.where(self.mask > 0, self.values, np.nan)

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def n_items(self):
        return self.values.shape[1]


@dataclass
class Cohort:
    """Model-ready cohort: per-patient series sharing one item catalog."""

    items: list
    patients: list
    missing_rate: float = float("nan")
    exclusions: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def item_names(self):
        return [it.name for it in self.items]

    def __len__(self):
        return len(self.patients)

    def subset(self, predicate):
        return Cohort(
            self.items,
            [p for p in self.patients if predicate(p)],
            self.missing_rate,
            dict(self.exclusions),
            list(self.warnings),
        )

    def death_flags(self):
        return np.array([p.death for p in self.patients], dtype=bool)

    def lab_indices(self):
        return [j for j, it in enumerate(self.items) if it.kind == "lab"]


def cohort_from_arrays(values, masks=None, ids=None, deaths=None):
    """Wrap plain (T, D) arrays as a :class:`Cohort` with generic items."""
    values = [np.asarray(v, dtype=float) for v in values]
    D = values[0].shape[1]
    items = [ItemSpec(f"x{j}", "vital") for j in range(D)]
    patients = []
    for i, v in enumerate(values):
        m = np.ones_like(v) if masks is None else np.asarray(masks[i], dtype=float)
        pid = str(i) if ids is None else str(ids[i])
        dead = False if deaths is None else bool(deaths[i])
        patients.append(ObservationSeries(pid, v, m, death=dead))
    return Cohort(items, patients)
