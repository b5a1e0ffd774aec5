"""Conversions between domain objects and checkpoint containers."""
from __future__ import annotations

import numpy as np

from ..analyze import ClusterModel, OutcomeLabels
from ..baselines import PcaModel, VaeConfig, VaeModel
from ..data import Cohort, ItemSpec, ObservationSeries
from ..dssm import DssmConfig, ElboBreakdown, LatentTrajectory, StateSpaceModel
from .checkpoint import Checkpoint, CheckpointError


def _stamp(kind, config, arrays, meta):
    return Checkpoint(kind, arrays, meta, config.to_text(), config.hash(), config.seed)


def _split(arr, lengths):
    return np.split(arr, np.cumsum(lengths)[:-1]) if len(lengths) else []


def _lengths(ckpt):
    return ckpt.arrays["lengths"].astype(int)


def _require(ckpt, *names):
    missing = [n for n in names if n not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"{ckpt.kind} container lacks arrays {missing}")


# ---------------------------------------------------------------------------
# cohort


def cohort_to_checkpoint(cohort: Cohort, config) -> Checkpoint:
    pats = cohort.patients
    meta = {
        "items": [[it.name, it.kind, it.ref_low, it.ref_high, it.units] for it in cohort.items],
        "patients": [
            {"id": p.patient_id, "dates": [str(d) for d in p.dates], "death": bool(p.death), "drugs": list(p.drugs), "gender": float(p.gender)}
            for p in pats
        ],
        "missing_rate": float(cohort.missing_rate),
        "exclusions": {k: int(v) for k, v in cohort.exclusions.items()},
        "warnings": [str(w) for w in cohort.warnings],
    }
    D = cohort.n_items
    cat = lambda attr: np.concatenate([getattr(p, attr) for p in pats]) if pats else np.zeros((0, D))  # noqa: E731
    arrays = {
        "lengths": np.array([p.length for p in pats], dtype=float),
        "values": cat("values"),
        "mask": cat("mask"),
        "codes": cat("codes"),
        "raw": cat("raw"),
    }
    return _stamp("cohort", config, arrays, meta)


def cohort_from_checkpoint(ckpt: Checkpoint) -> Cohort:
    _require(ckpt, "lengths", "values", "mask", "codes", "raw")
    items = [ItemSpec(n, k, lo, hi, u) for n, k, lo, hi, u in ckpt.meta["items"]]
    L = _lengths(ckpt)
    parts = {k: _split(ckpt.arrays[k], L) for k in ("values", "mask", "codes", "raw")}
    patients = []
    for i, info in enumerate(ckpt.meta["patients"]):
        patients.append(
            ObservationSeries(
                info["id"],
                parts["values"][i],
                parts["mask"][i],
                parts["codes"][i],
                parts["raw"][i],
                list(info["dates"]),
                bool(info["death"]),
                tuple(info["drugs"]),
                float(info["gender"]),
            )
        )
    return Cohort(items, patients, ckpt.meta["missing_rate"], dict(ckpt.meta["exclusions"]), list(ckpt.meta["warnings"]))


# ---------------------------------------------------------------------------
# models


def model_to_checkpoint(model: StateSpaceModel, config, trace=()) -> Checkpoint:
    meta = {"model": model.config.to_dict(), "trace": [row.as_row() for row in trace]}
    return _stamp("dssm", config, model.state_dict(), meta)


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = DssmConfig(**ckpt.meta["model"])
    try:
        model = StateSpaceModel(cfg, state=ckpt.arrays)
    except ValueError as exc:
        raise CheckpointError(f"model parameters do not fit the stored architecture: {exc}") from exc
    trace = [ElboBreakdown(r["reconstruction"], r["initial_kl"], r["transition_kl"]) for r in ckpt.meta.get("trace", [])]
    return model, trace


def pca_to_checkpoint(model: PcaModel, config) -> Checkpoint:
    arrays = {"mean": model.mean, "components": model.components, "explained_variance": model.explained_variance}
    return _stamp("pca", config, arrays, {})


def pca_from_checkpoint(ckpt: Checkpoint) -> PcaModel:
    _require(ckpt, "mean", "components", "explained_variance")
    return PcaModel(ckpt.arrays["mean"], ckpt.arrays["components"], ckpt.arrays["explained_variance"])


def vae_to_checkpoint(model: VaeModel, config, trace=()) -> Checkpoint:
    meta = {"model": model.config.to_dict(), "input_dim": model.input_dim, "trace": [row.as_row() for row in trace]}
    return _stamp("vae", config, model.state_dict(), meta)


def vae_from_checkpoint(ckpt: Checkpoint) -> VaeModel:
    info = dict(ckpt.meta["model"])
    info["encoder_hidden"] = tuple(info["encoder_hidden"])
    model = VaeModel(int(ckpt.meta["input_dim"]), VaeConfig(**info))
    try:
        model.load_state(ckpt.arrays)
    except KeyError as exc:
        raise CheckpointError(f"vae container lacks parameter {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# analysis results


def latents_to_checkpoint(trajectories, config, method, mode) -> Checkpoint:
    k = trajectories[0].means.shape[1] if trajectories else 0
    arrays = {
        "lengths": np.array([t.length for t in trajectories], dtype=float),
        "means": np.concatenate([t.means for t in trajectories]) if trajectories else np.zeros((0, k)),
        "variances": np.concatenate([t.variances for t in trajectories]) if trajectories else np.zeros((0, k)),
    }
    meta = {"patient_ids": [t.patient_id for t in trajectories], "method": method, "mode": mode}
    return _stamp("latents", config, arrays, meta)


def latents_from_checkpoint(ckpt: Checkpoint):
    _require(ckpt, "lengths", "means", "variances")
    L = _lengths(ckpt)
    means = _split(ckpt.arrays["means"], L)
    variances = _split(ckpt.arrays["variances"], L)
    return [LatentTrajectory(pid, m, v) for pid, m, v in zip(ckpt.meta["patient_ids"], means, variances)]


def clusters_to_checkpoint(model: ClusterModel, outcome: OutcomeLabels | None, trajectories, config) -> Checkpoint:
    arrays = {
        "centroids": model.centroids,
        "labels": model.labels.astype(float),
        "lengths": np.array([t.length for t in trajectories], dtype=float),
        "inertia_trace": np.asarray(model.inertia_trace, dtype=float),
    }
    meta = {
        "patient_ids": [t.patient_id for t in trajectories],
        "silhouette": float(model.silhouette),
        "size_cv": float(model.size_cv),
        "candidates": [[int(k), float(s), float(cv), float(inertia)] for k, (s, cv, inertia) in sorted(model.candidates.items())],
        "outcome": None,
    }
    if outcome is not None:
        arrays["endpoint_counts"] = outcome.counts.astype(float)
        meta["outcome"] = {"names": list(outcome.names), "ties": bool(outcome.ties), "degenerate": bool(outcome.degenerate)}
    return _stamp("clusters", config, arrays, meta)


def clusters_from_checkpoint(ckpt: Checkpoint):
    """Returns ``(ClusterModel, OutcomeLabels or None, per-patient label arrays, patient ids)``."""
    _require(ckpt, "centroids", "labels", "lengths", "inertia_trace")
    labels = ckpt.arrays["labels"].astype(int)
    candidates = {int(k): (s, cv, inertia) for k, s, cv, inertia in ckpt.meta["candidates"]}
    model = ClusterModel(
        ckpt.arrays["centroids"], labels, ckpt.meta["silhouette"], ckpt.meta["size_cv"], list(ckpt.arrays["inertia_trace"]), candidates
    )
    outcome = None
    if ckpt.meta.get("outcome"):
        o = ckpt.meta["outcome"]
        outcome = OutcomeLabels(list(o["names"]), ckpt.arrays["endpoint_counts"].astype(int), o["ties"], o["degenerate"])
    return model, outcome, _split(labels, _lengths(ckpt)), list(ckpt.meta["patient_ids"])
