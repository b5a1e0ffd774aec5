"""Turn dated raw records into model-ready per-patient tensors.

Pipeline: same-day repeats collapse to the daily mode, labs are ranked by
how often they are abnormal (dropping any lab too correlated with a kept
one), patients that are too short or never observe some item are dropped,
long series keep their most recent steps, labs are encoded relative to
their reference ranges, everything else is min-max normalized, and gaps
are filled with a zero-order hold while a mask records what was observed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import (
    ITEM_COLUMNS,
    OBSERVATION_COLUMNS,
    PATIENT_COLUMNS,
    Cohort,
    ConfigurationError,
    DataContractError,
    ItemSpec,
    ObservationSeries,
    RawCohort,
)

log = logging.getLogger(__name__)

KIND_ORDER = ("anthro", "gender", "vital", "lab")


@dataclass(frozen=True)
class PreprocessRules:
    min_steps: int = 50
    max_steps: int = 238
    max_lab_items: int = 50
    corr_threshold: float = 0.7
    # "code": labs enter the model as {0, 0.5, 1}; "minmax": as scaled raw values
    lab_encoding: str = "code"

    def __post_init__(self):
        if self.lab_encoding not in ("code", "minmax"):
            raise ConfigurationError(f"unknown lab_encoding {self.lab_encoding!r}")
        if self.min_steps < 1 or self.max_steps < self.min_steps:
            raise ConfigurationError("need 1 <= min_steps <= max_steps")


def daily_mode(observations: pd.DataFrame) -> pd.DataFrame:
    """Collapse same-day repeats of an item to their mode (ties -> smaller value)."""
    counts = observations.groupby(["patient_id", "date", "item", "value"], sort=False).size()
    counts = counts.rename("n").reset_index()
    counts = counts.sort_values(["patient_id", "date", "item", "n", "value"], ascending=[True, True, True, False, True])
    return counts.drop_duplicates(["patient_id", "date", "item"])[OBSERVATION_COLUMNS].reset_index(drop=True)


def encode_abnormality(value, spec: ItemSpec):
    """Return ``(model_code, signal_code)`` for one lab value.

    Above the reference range -> (1, +1), below -> (0, -1), otherwise
    (0.5, 0).  Range boundaries count as normal.
    """
    if spec.kind != "lab" or not spec.has_range or not spec.ref_low < spec.ref_high:
        raise ConfigurationError(f"item {spec.name!r} has no valid reference range")
    if value > spec.ref_high:
        return 1.0, 1
    if value < spec.ref_low:
        return 0.0, -1
    return 0.5, 0


def _signal_codes(values, spec):
    """Vectorized signal codes; NaN stays NaN."""
    if not spec.has_range or not spec.ref_low < spec.ref_high:
        raise ConfigurationError(f"item {spec.name!r} has no valid reference range")
    v = np.asarray(values, dtype=float)
    out = np.where(v > spec.ref_high, 1.0, np.where(v < spec.ref_low, -1.0, 0.0))
    return np.where(np.isnan(v), np.nan, out)


def impute_zero_order(series):
    """Fill NaN gaps with the most recent observed value.

    Leading gaps take the first observed value.  Returns ``(filled, mask)``
    with mask 1 at observed positions.
    """
    x = np.asarray(series, dtype=float)
    mask = ~np.isnan(x)
    if not mask.any():
        raise DataContractError("cannot impute an item with no observed value")
    idx = np.where(mask, np.arange(x.size), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = x[idx]
    first = np.flatnonzero(mask)[0]
    filled[:first] = x[first]
    return filled, mask.astype(float)


def minmax_normalize(values, lo, hi):
    """Scale to [0, 1] with the given extrema; a constant item maps to 0.5."""
    v = np.asarray(values, dtype=float)
    if not hi > lo:
        return np.where(np.isnan(v), np.nan, 0.5)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def abnormal_counts(observations: pd.DataFrame, specs: dict) -> pd.Series:
    obs = observations[observations["item"].isin(specs)]
    lo = obs["item"].map({k: s.ref_low for k, s in specs.items()})
    hi = obs["item"].map({k: s.ref_high for k, s in specs.items()})
    abnormal = (obs["value"] > hi) | (obs["value"] < lo)
    counts = abnormal.groupby(obs["item"]).sum()
    return counts.reindex(sorted(specs), fill_value=0).astype(int)


def _pearson(a, b):
    ok = ~(np.isnan(a) | np.isnan(b))
    if ok.sum() < 3:
        return np.nan
    a, b = a[ok] - a[ok].mean(), b[ok] - b[ok].mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return np.nan if den == 0 else float((a * b).sum() / den)


def select_lab_items(raw: RawCohort, max_items: int = 50, corr_threshold: float = 0.7):
    """Rank labs by abnormal-observation count and keep them greedily.

    A candidate is skipped when its absolute Pearson correlation with an
    already kept lab exceeds ``corr_threshold``.  Correlations use
    (patient, date) pairs where both labs were recorded.

    Returns
    -------
    (list[ItemSpec], list[str])
        Kept labs in rank order, and warnings.
    """
    specs = {k: s for k, s in raw.item_specs().items() if s.kind == "lab"}
    for s in specs.values():
        if not s.has_range or not s.ref_low < s.ref_high:
            raise ConfigurationError(f"lab {s.name!r} has no valid reference range")
    obs = daily_mode(raw.observations)
    obs = obs[obs["item"].isin(specs)]
    counts = abnormal_counts(obs, specs)
    ranked = sorted(specs, key=lambda n: (-counts[n], n))
    wide = (
        obs.sort_values(["patient_id", "date", "item"])
        .pivot_table(index=["patient_id", "date"], columns="item", values="value", aggfunc="first")
        .sort_index()
    )
    kept = []
    for name in ranked:
        if len(kept) >= max_items:
            break
        col = wide[name].to_numpy(float) if name in wide else np.full(len(wide), np.nan)
        too_close = False
        for other in kept:
            r = _pearson(col, wide[other].to_numpy(float))
            if np.isfinite(r) and abs(r) > corr_threshold:
                too_close = True
                break
        if not too_close:
            kept.append(name)
    warnings = []
    if len(kept) < max_items:
        msg = f"only {len(kept)} lab items available (requested {max_items})"
        log.warning(msg)
        warnings.append(msg)
    return [specs[n] for n in kept], warnings


def tensor_items(raw: RawCohort, labs):
    """Item order of the tensor: anthro, gender, vitals, then the selected labs."""
    specs = raw.item_specs()
    by_kind = {k: [s for s in specs.values() if s.kind == k] for k in KIND_ORDER}
    lab_names = [lab.name if isinstance(lab, ItemSpec) else lab for lab in labs]
    missing = [n for n in lab_names if n not in specs]
    if missing:
        raise DataContractError(f"selected labs not in catalog: {missing}")
    return by_kind["anthro"] + by_kind["gender"] + by_kind["vital"] + [specs[n] for n in lab_names]


def _gender_value(g):
    g = str(g).strip().upper()
    if g in ("M", "MALE", "1"):
        return 1.0
    if g in ("F", "FEMALE", "0"):
        return 0.0
    raise DataContractError(f"unrecognized gender {g!r}")


def build_cohort(raw: RawCohort, labs, rules: PreprocessRules = PreprocessRules()) -> Cohort:
    """Build the model-ready cohort from raw records and a lab selection."""
    items = tensor_items(raw, labs)
    names = [it.name for it in items]
    col_of = {n: j for j, n in enumerate(names)}
    D = len(items)
    g_col = [j for j, it in enumerate(items) if it.kind == "gender"]

    obs = daily_mode(raw.observations)
    obs = obs[obs["item"].isin(col_of) & ~obs["item"].isin([names[j] for j in g_col])]
    obs = obs.sort_values(["patient_id", "date"], kind="stable")
    patients = raw.patients.set_index(raw.patients["patient_id"].astype(str))

    exclusions = {"too_short": 0, "all_missing_item": 0, "no_records": 0}
    grids = []
    obs_by_pid = dict(tuple(obs.groupby(obs["patient_id"].astype(str), sort=True)))
    for pid in sorted(patients.index):
        g = obs_by_pid.get(pid)
        if g is None:
            exclusions["no_records"] += 1
            continue
        dates = sorted(g["date"].unique())
        if len(dates) < rules.min_steps:
            exclusions["too_short"] += 1
            continue
        dates = dates[-rules.max_steps:]
        step_of = {d: t for t, d in enumerate(dates)}
        g = g[g["date"].isin(step_of)]
        raw_grid = np.full((len(dates), D), np.nan)
        raw_grid[g["date"].map(step_of).to_numpy(), g["item"].map(col_of).to_numpy()] = g["value"].to_numpy(float)
        row = patients.loc[pid]
        gender = _gender_value(row["gender"])
        # gender is a patient attribute, not a dated measurement: observed once
        for j in g_col:
            raw_grid[0, j] = gender
        if np.isnan(raw_grid).all(axis=0).any():
            exclusions["all_missing_item"] += 1
            continue
        tags = row["drug_tags"]
        drugs = tuple(sorted(t for t in str(tags).split(";") if t)) if isinstance(tags, str) else ()
        grids.append((pid, dates, raw_grid, bool(int(row["death_flag"])), drugs, gender))

    if not grids:
        raise DataContractError(f"no patients left after exclusions: {exclusions}")

    pooled = np.concatenate([g[2] for g in grids])
    lo = np.nanmin(pooled, axis=0)
    hi = np.nanmax(pooled, axis=0)

    out = []
    observed = 0
    cells = 0
    tv = np.array([it.kind != "gender" for it in items])
    for pid, dates, raw_grid, dead, drugs, gender in grids:
        T = len(dates)
        values = np.empty((T, D))
        mask = np.empty((T, D))
        codes = np.full((T, D), np.nan)
        for j, it in enumerate(items):
            col = raw_grid[:, j]
            if it.kind == "lab":
                codes[:, j] = _signal_codes(col, it)
                if rules.lab_encoding == "code":
                    model = np.where(np.isnan(col), np.nan, (codes[:, j] + 1.0) / 2.0)
                else:
                    model = minmax_normalize(col, lo[j], hi[j])
            elif it.kind == "gender":
                model = col
            else:
                model = minmax_normalize(col, lo[j], hi[j])
            values[:, j], mask[:, j] = impute_zero_order(model)
        observed += mask[:, tv].sum()
        cells += mask[:, tv].size
        out.append(ObservationSeries(pid, values, mask, codes, raw_grid, list(dates), dead, drugs, gender))

    cohort = Cohort(items, out, 1.0 - observed / cells if cells else 0.0, exclusions)
    log.info("built cohort: %d patients, D=%d, missing rate %.4f, exclusions %s", len(out), D, cohort.missing_rate, exclusions)
    return cohort


def preprocess(raw: RawCohort, rules: PreprocessRules = PreprocessRules()) -> Cohort:
    """Lab selection followed by :func:`build_cohort`."""
    labs, warnings = select_lab_items(raw, rules.max_lab_items, rules.corr_threshold)
    cohort = build_cohort(raw, labs, rules)
    cohort.warnings.extend(warnings)
    return cohort


def cohort_to_raw(cohort: Cohort) -> RawCohort:
    """Re-emit a cohort's observed raw values as raw tables."""
    obs = []
    pats = []
    time_varying = [j for j, it in enumerate(cohort.items) if it.kind != "gender"]
    for p in cohort.patients:
        for t, date in enumerate(p.dates):
            for j in time_varying:
                if p.mask[t, j] > 0:
                    obs.append((p.patient_id, date, cohort.items[j].name, p.raw[t, j]))
        pats.append((p.patient_id, "M" if p.gender == 1.0 else "F", int(p.death), ";".join(p.drugs)))
    items = [
        (it.name, it.kind, np.nan if it.ref_low is None else it.ref_low, np.nan if it.ref_high is None else it.ref_high, it.units)
        for it in cohort.items
    ]
    return RawCohort(
        pd.DataFrame(obs, columns=OBSERVATION_COLUMNS),
        pd.DataFrame(pats, columns=PATIENT_COLUMNS),
        pd.DataFrame(items, columns=ITEM_COLUMNS),
    )
