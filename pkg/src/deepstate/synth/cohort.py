"""Synthetic clinical cohort with a known linear-Gaussian latent process.

Each patient carries a two-dimensional latent state: a *risk* coordinate
and a nuisance coordinate.  Three regimes (stable, declining, terminal)
switch as a Markov chain that never skips a stage.  The regime sets the
level the risk coordinate relaxes toward, so within a regime the latent
path is an LGSSM with a regime-dependent offset.  Death can only happen in
the terminal regime, with a logistic hazard in the risk coordinate, and a
patient's record stops at the death step.

Items are generated on a standardized scale ``s`` where the reference
range maps to [-1, 1]; ``|s| > 1`` means abnormal.  Three anemia-like labs
get an extra downward shift in the terminal regime, and each anticancer
drug activates its own signature item in the terminal regime.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..data import (
    ITEM_COLUMNS,
    OBSERVATION_COLUMNS,
    PATIENT_COLUMNS,
    RawCohort,
    cohort_from_arrays,
)
from .lgssm import LgssmSpec

REGIMES = ("stable", "declining", "terminal")

DRUGS = (
    "nivolumab",
    "trastuzumab",
    "cisplatin",
    "bicalutamide",
    "imatinib",
    "osimertinib",
    "afatinib",
    "erlotinib",
)


@dataclass(frozen=True)
class LabDesign:
    """Standardized-scale model ``base + risk*r + nuisance*n + terminal*[terminal] + noise``."""

    name: str
    base: float = 0.0
    risk: float = 0.0
    nuisance: float = 0.0
    terminal: float = 0.0
    noise: float = 0.4
    ref: tuple = (0.0, 1.0)
    units: str = ""
    drug: str | None = None
    drug_shift: float = 0.0
    twin_of: str | None = None


ANEMIA_ITEMS = ("RBC", "HGB", "HCT")

DESK_LABS = (
    LabDesign("RBC", -0.1, -0.6, 0.0, -1.0, 1.0, (3.9, 5.2), "10^6/uL"),
    LabDesign("HGB", -0.1, -0.6, 0.0, -1.0, 1.0, (12.0, 16.0), "g/dL"),
    LabDesign("HCT", -0.1, -0.6, 0.0, -1.0, 1.0, (36.0, 48.0), "%"),
    LabDesign("CRP", 0.5, 0.6, 0.0, 0.0, 1.0, (0.0, 0.3), "mg/dL"),
    LabDesign("DDIMER", 0.4, 0.6, 0.0, 0.0, 1.0, (0.0, 1.0), "ug/mL"),
    LabDesign("LDH", 0.2, 0.6, 0.0, 0.0, 1.0, (120.0, 245.0), "U/L"),
    LabDesign("ALB", -0.3, -0.6, 0.0, 0.0, 1.0, (3.8, 5.2), "g/dL"),
    LabDesign("ALT", 0.0, 0.0, 1.2, 0.0, 0.35, (7.0, 40.0), "U/L"),
    LabDesign("AST", 0.0, 0.0, 1.2, 0.0, 0.35, (13.0, 33.0), "U/L", twin_of="ALT"),
    LabDesign("LYMPH", 0.0, -0.6, 0.0, 0.0, 1.0, (20.0, 45.0), "%", "nivolumab", -1.2),
    LabDesign("CEA", 0.3, 0.6, 0.0, 0.0, 1.0, (0.0, 5.0), "ng/mL", "trastuzumab", 1.2),
    LabDesign("CK", 0.0, -0.6, 0.0, 0.0, 1.0, (60.0, 250.0), "U/L", "bicalutamide", -1.2),
    LabDesign("CRE", 0.0, 0.6, 0.0, 0.0, 1.0, (0.6, 1.1), "mg/dL", "imatinib", 1.2),
    LabDesign("GLU", 0.2, 0.6, 0.5, 0.0, 1.0, (70.0, 110.0), "mg/dL"),
    LabDesign("NA", 0.0, 0.0, 0.0, 0.0, 0.3, (135.0, 145.0), "mmol/L"),
    LabDesign("K", 0.0, 0.0, 0.0, 0.0, 0.3, (3.5, 5.0), "mmol/L"),
)

# name, kind, center, scale, risk loading, nuisance loading, noise, units
DESK_CONTINUOUS = (
    ("HEIGHT", "anthro", 162.0, 8.0, 0.0, 0.0, 0.02, "cm"),
    ("WEIGHT", "anthro", 58.0, 10.0, -0.4, 0.0, 0.1, "kg"),
    ("BT", "vital", 36.6, 0.4, 0.4, 0.0, 1.5, "C"),
    ("PULSE", "vital", 78.0, 12.0, 0.4, 0.3, 1.5, "bpm"),
    ("SBP", "vital", 120.0, 15.0, 0.0, 0.6, 1.5, "mmHg"),
    ("DBP", "vital", 72.0, 10.0, 0.0, 0.6, 1.5, "mmHg"),
)


@dataclass
class CohortSpec:
    n_patients: int = 500
    min_steps: int = 50
    max_steps: int = 238
    missing_rate: float = 0.5923
    labs: tuple = DESK_LABS
    continuous: tuple = DESK_CONTINUOUS
    regime_targets: tuple = (-1.0, 0.5, 1.5)
    relax: float = 0.15
    risk_noise: float = 0.18
    nuisance_ar: float = 0.95
    nuisance_noise: float = 0.1
    # per-step regime switching probabilities
    p_worsen: tuple = (0.02, 0.012)
    p_recover: tuple = (0.03, 0.004)
    initial_regime: tuple = (0.7, 0.3, 0.0)
    hazard_scale: float = 0.07
    terminal_followup: int = 400
    terminal_volatility: float = 1.0
    baseline_sd: float = 0.0
    hazard_slope: float = 4.0
    hazard_center: float = 1.2
    drug_probability: float = 0.25
    duplicate_rate: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.min_steps < 1 or self.max_steps < self.min_steps:
            raise ValueError("need 1 <= min_steps <= max_steps")
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")

    @property
    def n_time_varying(self):
        return len(self.labs) + len(self.continuous)

    def latent_spec(self, regime):
        """LGSSM governing the latent path while in ``regime``."""
        a = 1.0 - self.relax
        return LgssmSpec(
            A=np.diag([a, self.nuisance_ar]),
            C=np.zeros((1, 2)),
            Q=[self.risk_noise**2, self.nuisance_noise**2],
            R=[1.0],
            transition_offset=[self.relax * self.regime_targets[regime], 0.0],
        )


@dataclass
class GroundTruth:
    latents: dict = field(default_factory=dict)
    regimes: dict = field(default_factory=dict)
    death: dict = field(default_factory=dict)
    death_step: dict = field(default_factory=dict)

    def to_frame(self):
        rows = []
        for pid, z in self.latents.items():
            reg = self.regimes[pid]
            for t in range(len(z)):
                rows.append((pid, t, REGIMES[reg[t]], z[t, 0], z[t, 1], int(self.death[pid]), self.death_step[pid]))
        return pd.DataFrame(
            rows, columns=["patient_id", "step", "regime", "risk", "nuisance", "death_flag", "death_step"]
        )

    @classmethod
    def from_frame(cls, df):
        gt = cls()
        for pid, g in df.groupby("patient_id", sort=False):
            g = g.sort_values("step")
            pid = str(pid)
            gt.latents[pid] = g[["risk", "nuisance"]].to_numpy(float)
            gt.regimes[pid] = np.array([REGIMES.index(r) for r in g["regime"]])
            gt.death[pid] = bool(g["death_flag"].iloc[0])
            gt.death_step[pid] = int(g["death_step"].iloc[0])
        return gt


def _regime_path(spec, rng, first):
    worsen, recover = spec.p_worsen, spec.p_recover
    reg = first
    while True:
        yield reg
        u = rng.random()
        if reg < 2 and u < worsen[reg]:
            reg += 1
        elif reg > 0 and u > 1.0 - recover[reg - 1]:
            reg -= 1


def _simulate_latent(spec, rng, length):
    """Latent path, regimes and death step (-1 for survivors).

    Follow-up normally ends after ``length`` steps, but a patient still in
    the terminal regime at that point is followed until death or recovery,
    so surviving records never end inside the terminal regime.
    """
    cap = length + spec.terminal_followup
    regimes = np.empty(cap, dtype=int)
    z = np.empty((cap, 2))
    first = int(rng.choice(3, p=np.asarray(spec.initial_regime) / np.sum(spec.initial_regime)))
    path = _regime_path(spec, rng, first)
    death_step = -1
    a = 1.0 - spec.relax
    t = 0
    while t < cap:
        regimes[t] = next(path)
        target = spec.regime_targets[regimes[t]]
        if t == 0:
            z[0] = [target + 0.3 * rng.normal(), 0.3 * rng.normal()]
        else:
            z[t, 0] = a * z[t - 1, 0] + spec.relax * target + spec.risk_noise * rng.normal()
            z[t, 1] = spec.nuisance_ar * z[t - 1, 1] + spec.nuisance_noise * rng.normal()
        if regimes[t] == 2 and t >= spec.min_steps - 1:
            h = spec.hazard_scale / (1.0 + np.exp(-spec.hazard_slope * (z[t, 0] - spec.hazard_center)))
            if rng.random() < h or t == cap - 1:
                death_step = t
                break
        t += 1
        if t >= length and regimes[t - 1] != 2:
            break
    n = t + 1 if death_step >= 0 else t
    return z[:n], regimes[:n], death_step


def _missing_grid(rng, T, n_items, rate):
    """Mask with exactly round(rate*T) missing cells per item column.

    Steps left with no observation at all get one random item restored so
    every step corresponds to a recording date.
    """
    observed = np.ones((T, n_items), dtype=bool)
    n_miss = int(round(rate * T))
    n_miss = min(n_miss, T - 1)
    if n_miss > 0:
        for j in range(n_items):
            observed[rng.choice(T, size=n_miss, replace=False), j] = False
    empty = np.flatnonzero(~observed.any(axis=1))
    for t in empty:
        observed[t, rng.integers(n_items)] = True
    return observed


def simulate_cohort(spec: CohortSpec, seed: int):
    """Simulate raw records and the matching ground truth.

    Returns
    -------
    (RawCohort, GroundTruth)
    """
    root = np.random.SeedSequence(seed)
    child = root.spawn(spec.n_patients)
    obs_rows = []
    pat_rows = []
    truth = GroundTruth()
    lab_names = [lab.name for lab in spec.labs]
    cont_names = [c[0] for c in spec.continuous]
    twins = {lab.name: lab.twin_of for lab in spec.labs if lab.twin_of}
    for i in range(spec.n_patients):
        rng = np.random.default_rng(child[i])
        pid = f"P{i:05d}"
        length = int(rng.integers(spec.min_steps, spec.max_steps + 1))
        z, regimes, death_step = _simulate_latent(spec, rng, length)
        T = len(z)
        drugs = tuple(d for d in DRUGS if rng.random() < spec.drug_probability)
        if not drugs:
            drugs = (DRUGS[int(rng.integers(len(DRUGS)))],)
        gender = "M" if rng.random() < 0.55 else "F"
        terminal = (regimes == 2).astype(float)

        constitution = spec.baseline_sd * rng.normal()
        standardized = {}
        for lab in spec.labs:
            s = lab.base + lab.risk * z[:, 0] + lab.nuisance * z[:, 1] + lab.terminal * terminal
            s = s + constitution * np.sign(lab.risk)
            if lab.drug is not None and lab.drug in drugs:
                s = s + lab.drug_shift * terminal
            standardized[lab.name] = s + lab.noise * rng.normal(size=T)
        for name, twin in twins.items():
            standardized[name] = standardized[twin] + 0.15 * rng.normal(size=T)
        raw_vals = []
        for lab in spec.labs:
            lo, hi = lab.ref
            raw_vals.append(lo + (hi - lo) * (0.5 + 0.5 * standardized[lab.name]))
        patient_offset = rng.normal(size=len(spec.continuous))
        for k, (name, kind, center, scale, wr, wn, noise, _) in enumerate(spec.continuous):
            if kind == "anthro":
                level = center + scale * (0.8 * patient_offset[k] + wr * z[:, 0] + wn * z[:, 1])
            else:
                level = center + scale * (wr * z[:, 0] + wn * z[:, 1])
            if kind == "vital":
                noise = noise * (1.0 + (spec.terminal_volatility - 1.0) * terminal)
            raw_vals.append(level + scale * noise * rng.normal(size=T))
        values = np.round(np.column_stack(raw_vals), 4)

        observed = _missing_grid(rng, T, values.shape[1], spec.missing_rate)
        start = dt.date(2008, 1, 1) + dt.timedelta(days=int(rng.integers(0, 3000)))
        gaps = rng.integers(1, 15, size=T)
        gaps[0] = 0
        days = np.cumsum(gaps)
        names = lab_names + cont_names
        for t in range(T):
            date = (start + dt.timedelta(days=int(days[t]))).isoformat()
            for j in np.flatnonzero(observed[t]):
                obs_rows.append((pid, date, names[j], values[t, j]))
                if rng.random() < spec.duplicate_rate:
                    obs_rows.append((pid, date, names[j], values[t, j]))

        dead = death_step >= 0
        pat_rows.append((pid, gender, int(dead), ";".join(drugs)))
        truth.latents[pid] = z
        truth.regimes[pid] = regimes
        truth.death[pid] = dead
        truth.death_step[pid] = int(death_step)

    items = [(lab.name, "lab", lab.ref[0], lab.ref[1], lab.units) for lab in spec.labs]
    items += [(c[0], c[1], np.nan, np.nan, c[7]) for c in spec.continuous]
    items.append(("GENDER", "gender", np.nan, np.nan, ""))
    raw = RawCohort(
        observations=pd.DataFrame(obs_rows, columns=OBSERVATION_COLUMNS),
        patients=pd.DataFrame(pat_rows, columns=PATIENT_COLUMNS),
        items=pd.DataFrame(items, columns=ITEM_COLUMNS),
    )
    return raw, truth


def realized_missing_rate(raw: RawCohort):
    """Fraction of missing (step, time-varying item) cells in ``raw``."""
    obs = raw.observations.drop_duplicates(["patient_id", "date", "item"])
    steps = obs.groupby("patient_id")["date"].nunique().sum()
    n_items = int((raw.items["kind"] != "gender").sum())
    return 1.0 - len(obs) / float(steps * n_items)


def signal_codes_by_regime(raw: RawCohort, truth: GroundTruth, items):
    """Mean signal code of each lab per true regime (recount over raw rows)."""
    specs = raw.item_specs()
    obs = raw.observations.drop_duplicates(["patient_id", "date", "item"])
    obs = obs[obs["item"].isin(items)].copy()
    dates = raw.observations.groupby("patient_id")["date"].unique()
    step_of = {pid: {d: k for k, d in enumerate(sorted(ds))} for pid, ds in dates.items()}
    obs["step"] = [step_of[p][d] for p, d in zip(obs["patient_id"], obs["date"])]
    obs["regime"] = [truth.regimes[p][s] for p, s in zip(obs["patient_id"], obs["step"])]
    lo = obs["item"].map(lambda n: specs[n].ref_low)
    hi = obs["item"].map(lambda n: specs[n].ref_high)
    obs["code"] = np.where(obs["value"] > hi, 1, np.where(obs["value"] < lo, -1, 0))
    return obs.groupby(["item", "regime"])["code"].mean().unstack()


def simulate_lgssm_cohort(spec: LgssmSpec, n_patients: int, T: int, seed: int, missing_rate=0.0):
    """Sample ``n_patients`` sequences of length T from one LGSSM.

    Returns the cohort (raw observation scale) and the true latent paths.
    """
    rng = np.random.default_rng(seed)
    values, masks, latents = [], [], []
    for _ in range(n_patients):
        z, x = spec.sample(T, rng)
        m = np.ones_like(x)
        if missing_rate > 0:
            m = (rng.random(x.shape) >= missing_rate).astype(float)
        values.append(x)
        masks.append(m)
        latents.append(z)
    return cohort_from_arrays(values, masks), latents


