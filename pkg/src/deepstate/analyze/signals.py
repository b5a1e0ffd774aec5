"""Per-cluster abnormality signals and per-drug subcohort views."""

from dataclasses import dataclass, field

import numpy as np

from .cluster import label_clusters_by_outcome
from .transitions import transition_tables

TOP_N_ALL = 10
TOP_N_DRUG = 20


@dataclass
class SignalReport:
    """Mean signal code per (cluster, lab item) and the per-cluster rankings.

    ``means[c, j]`` is NaN when cluster c has no observed value of item j;
    such items are left out of ``rankings[c]`` and listed in ``notes``.
    """

    items: list
    means: np.ndarray
    counts: np.ndarray
    rankings: list
    top_n: int
    notes: list = field(default_factory=list)

    def top(self, cluster):
        return [name for name, _ in self.rankings[cluster][: self.top_n]]


def signal_report(cohort, step_labels, k, top_n=TOP_N_ALL):
    """Average the {+1, 0, -1} lab codes over observed in-cluster time points.

    Parameters
    ----------
    cohort : Cohort
    step_labels : sequence of 1-D int arrays
        Cluster of every step, aligned with ``cohort.patients``.
    k : int
        Number of clusters.
    top_n : int
        Ranking length kept by :meth:`SignalReport.top`.
    """
    labs = cohort.lab_indices()
    names = [cohort.items[j].name for j in labs]
    sums = np.zeros((k, len(labs)))
    counts = np.zeros((k, len(labs)), dtype=np.int64)
    for p, lab in zip(cohort.patients, step_labels):
        lab = np.asarray(lab, dtype=np.int64)
        if len(lab) != p.length:
            raise ValueError(f"patient {p.patient_id}: {len(lab)} labels for {p.length} steps")
        codes = p.codes[:, labs]
        seen = (p.mask[:, labs] > 0) & np.isfinite(codes)
        for c in np.unique(lab):
            rows = lab == c
            sums[c] += np.where(seen[rows], codes[rows], 0.0).sum(0)
            counts[c] += seen[rows].sum(0)
    means = np.divide(sums, counts, out=np.full_like(sums, np.nan), where=counts > 0)
    rankings, notes = [], []
    for c in range(k):
        order = sorted(
            (j for j in range(len(labs)) if counts[c, j] > 0),
            key=lambda j: (-abs(means[c, j]), j),
        )
        rankings.append([(names[j], float(means[c, j])) for j in order])
        missing = [names[j] for j in range(len(labs)) if counts[c, j] == 0]
        if missing:
            notes.append(f"cluster {c}: no observed values for {', '.join(missing)}")
    return SignalReport(names, means, counts, rankings, top_n, notes)


@dataclass
class SubcohortResult:
    """Views of one drug subcohort through the globally fitted artifacts."""

    drug: str
    patient_index: np.ndarray
    endpoint_counts: np.ndarray = None
    signals: SignalReport = None
    transitions: dict = None

    @property
    def empty(self):
        return len(self.patient_index) == 0


def subcohort_analysis(cohort, drug, step_labels, outcome, k, top_n=TOP_N_DRUG):
    """Filter patients carrying ``drug`` and reuse the global clustering.

    Nothing is refitted: ``step_labels`` come from the global model and the
    cluster names from the global ``outcome`` labelling.  ``patient_index``
    selects the subcohort's points from a global embedding.
    """
    index = np.array([i for i, p in enumerate(cohort.patients) if drug in p.drugs], dtype=np.int64)
    if len(index) == 0:
        return SubcohortResult(drug, index)
    sub = cohort.subset(lambda p: drug in p.drugs)
    labels = [step_labels[i] for i in index]
    deaths = sub.death_flags()
    ends = np.array([lab[-1] for lab in labels])
    counts = label_clusters_by_outcome(ends, deaths, k).counts
    return SubcohortResult(
        drug,
        index,
        counts,
        signal_report(sub, labels, k, top_n),
        transition_tables(labels, k, deaths),
    )
