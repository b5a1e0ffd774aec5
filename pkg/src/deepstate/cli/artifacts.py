"""Text artifacts: provenance-stamped CSV tables, raw cohort tables, plot data and figures."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from ..data import (
    ITEM_COLUMNS,
    OBSERVATION_COLUMNS,
    PATIENT_COLUMNS,
    DataContractError,
    RawCohort,
)
from .checkpoint import FORMAT_VERSION

RAW_FILES = {"observations": "observations.csv", "patients": "patients.csv", "items": "items.csv"}


def provenance(config, command):
    return {"format_version": FORMAT_VERSION, "config_hash": config.hash(), "seed": config.seed, "command": command}


def _stamp_line(config, command):
    p = provenance(config, command)
    return f"# deepstate format_version={p['format_version']} config_hash={p['config_hash']} seed={p['seed']} command={command}\n"


def write_table(path, frame: pd.DataFrame, config, command):
    """CSV with one leading ``#`` provenance line; readers skip it via ``comment='#'``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_stamp_line(config, command))
        frame.to_csv(fh, index=False, lineterminator="\n")


def read_table(path, **kw):
    return pd.read_csv(path, comment="#", **kw)


def write_json(path, payload, config, command):
    doc = {"provenance": provenance(config, command), **payload}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


# ---------------------------------------------------------------------------
# raw cohort tables


def write_raw_cohort(out_dir: Path, raw: RawCohort, config, command):
    write_table(out_dir / RAW_FILES["observations"], raw.observations[OBSERVATION_COLUMNS], config, command)
    write_table(out_dir / RAW_FILES["patients"], raw.patients[PATIENT_COLUMNS], config, command)
    write_table(out_dir / RAW_FILES["items"], raw.items[ITEM_COLUMNS], config, command)


def read_raw_cohort(directory) -> RawCohort:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"raw cohort directory {directory} does not exist")
    tables = {}
    for key, name in RAW_FILES.items():
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"raw cohort table {path} is missing")
        tables[key] = read_table(path, dtype={"patient_id": str, "date": str, "item": str}, keep_default_na=False, na_values=[""])
    expected = {"observations": OBSERVATION_COLUMNS, "patients": PATIENT_COLUMNS, "items": ITEM_COLUMNS}
    for key, cols in expected.items():
        if list(tables[key].columns) != cols:
            raise DataContractError(f"{RAW_FILES[key]}: columns {list(tables[key].columns)}, expected {cols}")
    pats = tables["patients"]
    pats["patient_id"] = pats["patient_id"].astype(str)
    pats["drug_tags"] = pats["drug_tags"].fillna("").astype(str)
    tables["items"]["units"] = tables["items"]["units"].fillna("").astype(str)
    return RawCohort(tables["observations"], pats, tables["items"])


# ---------------------------------------------------------------------------
# plot data and figures


def plot_data(embedding, cluster_labels, cluster_names, deaths_by_patient, patient_ids):
    """Points, endpoint flags, clusters, outcomes and per-patient polylines."""
    coords = embedding.coords
    patient = embedding.patient
    points = {
        "x": coords[:, 0].tolist(),
        "y": coords[:, 1].tolist(),
        "patient": patient.tolist(),
        "step": embedding.step.tolist(),
        "endpoint": embedding.endpoint.astype(int).tolist(),
        "cluster": np.asarray(cluster_labels).tolist(),
        "death": [int(deaths_by_patient[i]) for i in patient],
    }
    starts = np.flatnonzero(np.r_[True, patient[1:] != patient[:-1]])
    ends = np.r_[starts[1:], len(patient)]
    polylines = [{"patient_id": patient_ids[patient[s]], "start": int(s), "stop": int(e)} for s, e in zip(starts, ends)]
    return {"points": points, "polylines": polylines, "cluster_names": list(cluster_names), "patient_ids": list(patient_ids)}


def _figure_metadata(config, command):
    p = provenance(config, command)
    return {"Software": None, "Description": " ".join(f"{k}={v}" for k, v in p.items())}


def _save(fig, path, config, command):
    fig.savefig(path, dpi=100, metadata=_figure_metadata(config, command))


def render_figures(out_dir: Path, config, command, *, embedding, labels, names, deaths_by_patient, transitions, signals, trace=None):
    """Write the report figures as PNG files; returns the file names."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    k = len(names)
    cmap = plt.get_cmap("tab10")

    fig, ax = plt.subplots(figsize=(6, 5))
    for c in range(k):
        sel = labels == c
        ax.scatter(embedding.coords[sel, 0], embedding.coords[sel, 1], s=1, color=cmap(c % 10), label=names[c], rasterized=True)
    ends = np.flatnonzero(embedding.endpoint)
    dead_end = ends[deaths_by_patient[embedding.patient[ends]]]
    ax.scatter(embedding.coords[dead_end, 0], embedding.coords[dead_end, 1], s=12, marker="x", color="black", label="dead endpoint")
    ax.set_xlabel("UMAP 1")
    ax.set_ylabel("UMAP 2")
    ax.legend(markerscale=4, fontsize=8, loc="best")
    ax.set_title("Latent states")
    _save(fig, out_dir / "embedding.png", config, command)
    plt.close(fig)
    written.append("embedding.png")

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(transitions.percent, cmap="viridis")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{transitions.percent[i, j]:.2f}", ha="center", va="center", color="white", fontsize=8)
    ax.set_xticks(range(k), names, rotation=30)
    ax.set_yticks(range(k), names)
    ax.set_xlabel("to")
    ax.set_ylabel("from")
    ax.set_title("Transitions (% of all)")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, out_dir / "transitions.png", config, command)
    plt.close(fig)
    written.append("transitions.png")

    fig, axes = plt.subplots(1, k, figsize=(4 * k, 4), squeeze=False)
    for c in range(k):
        ax = axes[0, c]
        top = signals.rankings[c][: signals.top_n]
        ax.barh([n for n, _ in top][::-1], [v for _, v in top][::-1], color=cmap(c % 10))
        ax.set_xlim(-1, 1)
        ax.axvline(0, color="grey", lw=0.5)
        ax.set_title(names[c])
        ax.tick_params(labelsize=7)
    fig.suptitle("Mean abnormality (+1 high, -1 low)")
    fig.tight_layout()
    _save(fig, out_dir / "signals.png", config, command)
    plt.close(fig)
    written.append("signals.png")

    if trace:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(range(1, len(trace) + 1), [row.total for row in trace], marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean ELBO per patient")
        fig.tight_layout()
        _save(fig, out_dir / "training.png", config, command)
        plt.close(fig)
        written.append("training.png")
    return written
