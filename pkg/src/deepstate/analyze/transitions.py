"""Markov transition tables between clusters."""

from dataclasses import dataclass

import numpy as np

POPULATIONS = ("all", "dead", "surviving")


@dataclass
class TransitionTable:
    """Consecutive-step cluster transitions.

    Attributes
    ----------
    counts : ndarray (k, k) of int
        ``counts[i, j]`` counts steps from cluster i to cluster j.
    percent : ndarray (k, k)
        Counts as a percentage of the grand total.
    row_stochastic : ndarray (k, k)
        Counts normalized per origin row; rows without transitions are zero.
    """

    counts: np.ndarray
    percent: np.ndarray
    row_stochastic: np.ndarray
    population: str = "all"

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def empty(self):
        return self.total == 0


def transition_table(label_sequences, k, deaths=None, population="all"):
    """Count within-patient transitions for one population.

    Parameters
    ----------
    label_sequences : sequence of 1-D int arrays
        Cluster label per step, one array per patient.
    k : int
        Number of clusters.
    deaths : array_like of bool, optional
        Needed when ``population`` is ``"dead"`` or ``"surviving"``.
    """
    if population not in POPULATIONS:
        raise ValueError(f"population must be one of {POPULATIONS}")
    if population != "all" and deaths is None:
        raise ValueError("death flags are required to filter by outcome")
    counts = np.zeros((k, k), dtype=np.int64)
    for i, seq in enumerate(label_sequences):
        if population == "dead" and not deaths[i]:
            continue
        if population == "surviving" and deaths[i]:
            continue
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) > 1:
            np.add.at(counts, (seq[:-1], seq[1:]), 1)
    total = counts.sum()
    percent = 100.0 * counts / total if total else np.zeros((k, k))
    rows = counts.sum(1, keepdims=True)
    stoch = np.divide(counts, rows, out=np.zeros((k, k)), where=rows > 0)
    return TransitionTable(counts, percent, stoch, population)


def transition_tables(label_sequences, k, deaths):
    """The all / dead / surviving tables keyed by population."""
    return {pop: transition_table(label_sequences, k, deaths, pop) for pop in POPULATIONS}
