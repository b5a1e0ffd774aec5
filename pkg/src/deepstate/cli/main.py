"""``deepstate`` command line: simulate, preprocess, train, infer, analyze, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data-contract
violation, 3 numerical failure (a ``diagnostics.json`` is written to the
output directory).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from ..analyze import (
    POPULATIONS,
    embed_trajectories,
    kmeans_fit,
    label_clusters_by_outcome,
    pool_trajectories,
    probe_auc,
    signal_report,
    subcohort_analysis,
    transition_tables,
)
from ..baselines import fit_linear_ssm, fit_pca, fit_vae, pooled_rows, select_vae_learning_rate
from ..data import ConfigurationError, DataContractError
from ..dssm import NumericalFailure, StateSpaceModel, infer_states, train
from ..preprocess import preprocess
from ..synth import NumericalError, simulate_cohort
from . import store
from .artifacts import plot_data, provenance, read_raw_cohort, render_figures, write_json, write_raw_cohort, write_table
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig

log = logging.getLogger("deepstate")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "DEEPSTATE_LOG_LEVEL"


class UsageError(Exception):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"{args.command} needs --{name.replace('_', '-')}")


def _load_cohort(path):
    return store.cohort_from_checkpoint(load_checkpoint(path, "cohort"))


def _load_latents(path):
    return store.latents_from_checkpoint(load_checkpoint(path, "latents"))


def _align(cohort, patient_ids):
    """Cohort restricted and ordered to ``patient_ids``; every id must exist."""
    by_id = {p.patient_id: p for p in cohort.patients}
    missing = [pid for pid in patient_ids if pid not in by_id]
    if missing:
        raise DataContractError(f"{len(missing)} patients are absent from the cohort, e.g. {missing[:3]}")
    order = {pid: i for i, pid in enumerate(patient_ids)}
    sub = cohort.subset(lambda p: p.patient_id in order)
    sub.patients.sort(key=lambda p: order[p.patient_id])
    return sub


def _display_names(outcome, k):
    names = list(outcome.names) if outcome is not None else [f"cluster_{c}" for c in range(k)]
    return [n if names.count(n) == 1 else f"{n}_{c}" for c, n in enumerate(names)]


def _slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _trace_frame(trace):
    rows = [{"epoch": e + 1, **row.as_row()} for e, row in enumerate(trace)]
    return pd.DataFrame(rows, columns=["epoch", "reconstruction", "initial_kl", "transition_kl", "total"])


def _final_step_probe(trajectories, deaths):
    """Cross-validated AUC of final-step latents; NaN when a class has under 2 patients."""
    counts = np.bincount(np.asarray(deaths, dtype=int), minlength=2)
    if counts.min() < 2:
        return float("nan")
    return probe_auc(np.array([t.means[-1] for t in trajectories]), deaths)


# ---------------------------------------------------------------------------
# table writers shared by the single-step commands and ``report``


def _write_clusters(out, cfg, cmd, model, outcome, names):
    rows = [
        {"k": k, "silhouette": s, "size_cv": cv, "inertia": inertia, "selected": k == model.k}
        for k, (s, cv, inertia) in sorted(model.candidates.items())
    ]
    write_table(out / "cluster_selection.csv", pd.DataFrame(rows), cfg, cmd)
    if outcome is not None:
        ends = pd.DataFrame(
            {"cluster": range(model.k), "name": names, "dead": outcome.counts[0], "surviving": outcome.counts[1]}
        )
        ends["ties"] = outcome.ties
        ends["degenerate"] = outcome.degenerate
        write_table(out / "endpoint_counts.csv", ends, cfg, cmd)


def _write_transitions(out, cfg, cmd, tables, names, prefix=""):
    for pop in POPULATIONS:
        t = tables[pop]
        k = len(names)
        rows = [
            {
                "from": i,
                "to": j,
                "from_name": names[i],
                "to_name": names[j],
                "count": int(t.counts[i, j]),
                "percent": float(t.percent[i, j]),
                "row_probability": float(t.row_stochastic[i, j]),
            }
            for i in range(k)
            for j in range(k)
        ]
        frame = pd.DataFrame(rows, columns=["from", "to", "from_name", "to_name", "count", "percent", "row_probability"])
        frame["empty"] = t.empty
        write_table(out / f"{prefix}transitions_{pop}.csv", frame, cfg, cmd)


def _write_signals(out, cfg, cmd, report, names, prefix=""):
    rows = []
    for c, ranking in enumerate(report.rankings):
        for r, (item, mean) in enumerate(ranking, start=1):
            j = report.items.index(item)
            rows.append(
                {
                    "cluster": c,
                    "cluster_name": names[c],
                    "rank": r,
                    "item": item,
                    "mean_abnormality": mean,
                    "n_observed": int(report.counts[c, j]),
                    "top": r <= report.top_n,
                }
            )
    cols = ["cluster", "cluster_name", "rank", "item", "mean_abnormality", "n_observed", "top"]
    write_table(out / f"{prefix}signals.csv", pd.DataFrame(rows, columns=cols), cfg, cmd)
    write_table(out / f"{prefix}signal_notes.csv", pd.DataFrame({"note": report.notes}, columns=["note"]), cfg, cmd)


def _write_subcohort(out, cfg, cmd, result, names):
    prefix = f"drug_{_slug(result.drug)}_"
    summary = pd.DataFrame({"drug": [result.drug], "n_patients": [len(result.patient_index)], "empty": [result.empty]})
    write_table(out / f"{prefix}summary.csv", summary, cfg, cmd)
    if result.empty:
        return
    ends = pd.DataFrame(
        {"cluster": range(len(names)), "name": names, "dead": result.endpoint_counts[0], "surviving": result.endpoint_counts[1]}
    )
    write_table(out / f"{prefix}endpoint_counts.csv", ends, cfg, cmd)
    _write_signals(out, cfg, cmd, result.signals, names, prefix)
    _write_transitions(out, cfg, cmd, result.transitions, names, prefix)


def _cluster(cfg, trajectories, cohort=None):
    points, _, _, endpoint = pool_trajectories(trajectories)
    a = cfg["analyze"]
    if max(a["k_candidates"]) > len(points):
        raise DataContractError(f"only {len(points)} latent points for k up to {max(a['k_candidates'])}")
    model = kmeans_fit(points, a["k_candidates"], seed=cfg.seed, max_iter=a["max_iter"])
    outcome = None
    if cohort is not None:
        outcome = label_clusters_by_outcome(model.labels[endpoint], cohort.death_flags(), model.k)
    return model, outcome


def _step_labels(model, trajectories):
    return np.split(model.labels, np.cumsum([t.length for t in trajectories])[:-1])


def _embed(cfg, trajectories):
    a = cfg["analyze"]
    return embed_trajectories(trajectories, a["n_neighbors"], cfg.seed, a["trial_downsample"], a["umap_epochs"])


def _write_embedding(out, cfg, cmd, emb, trajectories):
    ids = [t.patient_id for t in trajectories]
    frame = pd.DataFrame(
        {
            "patient_id": [ids[i] for i in emb.patient],
            "step": emb.step,
            "x": emb.coords[:, 0],
            "y": emb.coords[:, 1],
            "endpoint": emb.endpoint.astype(int),
        }
    )
    write_table(out / "embedding.csv", frame, cfg, cmd)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg, out):
    raw, truth = simulate_cohort(cfg.cohort_spec(), cfg.seed)
    write_raw_cohort(out, raw, cfg, "simulate")
    write_table(out / "ground_truth.csv", truth.to_frame(), cfg, "simulate")


def cmd_preprocess(args, cfg, out):
    _need(args, "cohort")
    cohort = preprocess(read_raw_cohort(args.cohort), cfg.preprocess_rules())
    save_checkpoint(store.cohort_to_checkpoint(cohort, cfg), out / "cohort.ckpt")
    summary = [("n_patients", len(cohort)), ("n_items", cohort.n_items), ("missing_rate", cohort.missing_rate)]
    summary += [(f"excluded_{k}", v) for k, v in sorted(cohort.exclusions.items())]
    write_table(out / "preprocess_summary.csv", pd.DataFrame(summary, columns=["metric", "value"]), cfg, "preprocess")
    items = pd.DataFrame(
        [(it.name, it.kind, it.ref_low, it.ref_high, it.units) for it in cohort.items],
        columns=["item", "kind", "ref_low", "ref_high", "units"],
    )
    write_table(out / "selected_items.csv", items, cfg, "preprocess")
    write_table(out / "preprocess_warnings.csv", pd.DataFrame({"warning": cohort.warnings}, columns=["warning"]), cfg, "preprocess")


def cmd_train(args, cfg, out):
    _need(args, "cohort")
    cohort = _load_cohort(args.cohort)
    model = StateSpaceModel(cfg.dssm_config(cohort.n_items))
    result = train(model, cohort)
    save_checkpoint(store.model_to_checkpoint(model, cfg, result.trace), out / "model.ckpt")
    write_table(out / "train_trace.csv", _trace_frame(result.trace), cfg, "train")


def _infer(cfg, model, cohort, mode=None):
    mode = mode or cfg["infer"]["mode"]
    return infer_states(model, cohort, mode=mode, seed=cfg.seed), mode


def cmd_infer(args, cfg, out):
    _need(args, "cohort", "checkpoint")
    cohort = _load_cohort(args.cohort)
    model, _ = store.model_from_checkpoint(load_checkpoint(args.checkpoint, "dssm"))
    trajectories, mode = _infer(cfg, model, cohort)
    save_checkpoint(store.latents_to_checkpoint(trajectories, cfg, "dssm", mode), out / "latents.ckpt")
    _write_final_states(out, cfg, "infer", trajectories, cohort)


def _write_final_states(out, cfg, cmd, trajectories, cohort, name="final_states.csv"):
    z = np.array([t.means[-1] for t in trajectories])
    frame = pd.DataFrame(z, columns=[f"z{j}" for j in range(z.shape[1])])
    frame.insert(0, "death_flag", [int(p.death) for p in cohort.patients])
    frame.insert(0, "patient_id", [t.patient_id for t in trajectories])
    write_table(out / name, frame, cfg, cmd)


def cmd_embed(args, cfg, out):
    _need(args, "checkpoint")
    trajectories = _load_latents(args.checkpoint)
    emb = _embed(cfg, trajectories)
    _write_embedding(out, cfg, "embed", emb, trajectories)


def cmd_cluster(args, cfg, out):
    _need(args, "checkpoint")
    trajectories = _load_latents(args.checkpoint)
    cohort = None if args.cohort is None else _align(_load_cohort(args.cohort), [t.patient_id for t in trajectories])
    model, outcome = _cluster(cfg, trajectories, cohort)
    save_checkpoint(store.clusters_to_checkpoint(model, outcome, trajectories, cfg), out / "clusters.ckpt")
    _write_clusters(out, cfg, "cluster", model, outcome, _display_names(outcome, model.k))


def _load_clusters_with_cohort(args):
    _need(args, "checkpoint", "cohort")
    model, outcome, labels, ids = store.clusters_from_checkpoint(load_checkpoint(args.checkpoint, "clusters"))
    cohort = _align(_load_cohort(args.cohort), ids)
    if [p.length for p in cohort.patients] != [len(lab) for lab in labels]:
        raise DataContractError("cluster labels do not match the cohort's series lengths")
    return model, outcome, labels, cohort


def cmd_transitions(args, cfg, out):
    model, outcome, labels, cohort = _load_clusters_with_cohort(args)
    tables = transition_tables(labels, model.k, cohort.death_flags())
    _write_transitions(out, cfg, "transitions", tables, _display_names(outcome, model.k))


def cmd_signals(args, cfg, out):
    model, outcome, labels, cohort = _load_clusters_with_cohort(args)
    names = _display_names(outcome, model.k)
    report = signal_report(cohort, labels, model.k, cfg["analyze"]["top_n"])
    _write_signals(out, cfg, "signals", report, names)
    if args.drug_tag is not None:
        result = subcohort_analysis(cohort, args.drug_tag, labels, outcome, model.k, cfg["analyze"]["top_n_drug"])
        _write_subcohort(out, cfg, "signals", result, names)


def cmd_baseline(args, cfg, out):
    _need(args, "cohort")
    cohort = _load_cohort(args.cohort)
    cmd = f"baseline {args.method}"
    name = args.method.replace("-", "_")
    trace = []
    if args.method == "pca":
        model = fit_pca(pooled_rows(cohort), cfg["dssm"]["latent_dim"])
        save_checkpoint(store.pca_to_checkpoint(model, cfg), out / "pca.ckpt")
        trajectories = model.trajectories(cohort)
    elif args.method == "vae":
        rows = pooled_rows(cohort)
        if cfg["vae"]["select_rate"]:
            model, report = select_vae_learning_rate(rows, cfg.vae_config())
            frame = pd.DataFrame(sorted(report.items()), columns=["learning_rate", "final_elbo"])
            write_table(out / "vae_rate_selection.csv", frame, cfg, cmd)
        else:
            model, trace = fit_vae(rows, cfg.vae_config())
        save_checkpoint(store.vae_to_checkpoint(model, cfg, trace), out / "vae.ckpt")
        trajectories = model.trajectories(cohort)
    else:
        model, trace = fit_linear_ssm(cohort, cfg.linear_ssm_config(cohort.n_items))
        save_checkpoint(store.model_to_checkpoint(model, cfg, trace), out / "linear_ssm.ckpt")
        trajectories = infer_states(model, cohort)
    if trace:
        write_table(out / f"{name}_trace.csv", _trace_frame(trace), cfg, cmd)
    save_checkpoint(store.latents_to_checkpoint(trajectories, cfg, name, "mean"), out / f"latents_{name}.ckpt")
    auc = _final_step_probe(trajectories, cohort.death_flags())
    write_table(out / f"{name}_probe.csv", pd.DataFrame({"method": [name], "final_step_auc": [auc]}), cfg, cmd)


def cmd_report(args, cfg, out):
    _need(args, "cohort", "checkpoint")
    cmd = "report"
    cohort = _load_cohort(args.cohort)
    model, trace = store.model_from_checkpoint(load_checkpoint(args.checkpoint, "dssm"))
    trajectories, mode = _infer(cfg, model, cohort)
    save_checkpoint(store.latents_to_checkpoint(trajectories, cfg, "dssm", mode), out / "latents.ckpt")

    clusters, outcome = _cluster(cfg, trajectories, cohort)
    names = _display_names(outcome, clusters.k)
    labels = _step_labels(clusters, trajectories)
    save_checkpoint(store.clusters_to_checkpoint(clusters, outcome, trajectories, cfg), out / "clusters.ckpt")
    _write_clusters(out, cfg, cmd, clusters, outcome, names)

    deaths = cohort.death_flags()
    tables = transition_tables(labels, clusters.k, deaths)
    _write_transitions(out, cfg, cmd, tables, names)
    signals = signal_report(cohort, labels, clusters.k, cfg["analyze"]["top_n"])
    _write_signals(out, cfg, cmd, signals, names)

    drugs = [args.drug_tag] if args.drug_tag is not None else list(cfg["report"]["drugs"])
    if not drugs:
        drugs = sorted({d for p in cohort.patients for d in p.drugs})
    for drug in drugs:
        result = subcohort_analysis(cohort, drug, labels, outcome, clusters.k, cfg["analyze"]["top_n_drug"])
        _write_subcohort(out, cfg, cmd, result, names)

    # endpoint separation of posterior means against the PCA baseline
    means, _ = _infer(cfg, model, cohort, mode="mean")
    pca = fit_pca(pooled_rows(cohort), cfg["dssm"]["latent_dim"])
    probes = pd.DataFrame(
        {
            "method": ["dssm", "pca"],
            "final_step_auc": [_final_step_probe(means, deaths), _final_step_probe(pca.trajectories(cohort), deaths)],
        }
    )
    write_table(out / "endpoint_probe.csv", probes, cfg, cmd)

    emb = _embed(cfg, trajectories)
    _write_embedding(out, cfg, cmd, emb, trajectories)
    ids = [t.patient_id for t in trajectories]
    write_json(out / "plot_data.json", plot_data(emb, clusters.labels, names, deaths, ids), cfg, cmd)
    if cfg["report"]["figures"]:
        render_figures(
            out, cfg, cmd,
            embedding=emb, labels=clusters.labels, names=names, deaths_by_patient=deaths,
            transitions=tables["all"], signals=signals, trace=trace,
        )
    _write_manifest(out, cfg, cmd)


def _write_manifest(out, cfg, cmd):
    rows = []
    for path in sorted(out.iterdir()):
        if path.is_file() and path.name != "manifest.csv":
            rows.append((path.name, hashlib.sha256(path.read_bytes()).hexdigest()))
    write_table(out / "manifest.csv", pd.DataFrame(rows, columns=["file", "sha256"]), cfg, cmd)


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "transitions": cmd_transitions,
    "signals": cmd_signals,
    "baseline": cmd_baseline,
    "report": cmd_report,
}

HELP = {
    "simulate": "generate a synthetic raw cohort and its ground truth",
    "preprocess": "turn raw cohort tables (--cohort DIR) into cohort.ckpt",
    "train": "fit the deep state-space model on --cohort",
    "infer": "posterior latent trajectories for --cohort with --checkpoint model",
    "embed": "2-D embedding of latent trajectories (--checkpoint latents)",
    "cluster": "k-means on latent trajectories (--checkpoint latents, optional --cohort)",
    "transitions": "inter-cluster transition tables (--checkpoint clusters --cohort)",
    "signals": "per-cluster abnormality rankings (--checkpoint clusters --cohort)",
    "baseline": "fit a comparison model on --cohort",
    "report": "full interpretation report for --cohort and --checkpoint model",
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI pipeline configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="overrides [pipeline] seed")
    common.add_argument("--out-dir", default=".", help="directory for every artifact (created if needed)")
    common.add_argument("--cohort", help="raw cohort directory (preprocess) or cohort.ckpt")
    common.add_argument("--checkpoint", help="model, latents or clusters container, depending on the command")
    common.add_argument("--drug-tag", help="restrict subcohort output to one drug")
    parser = _Parser(prog="deepstate", description="Deep state-space analysis of clinical time series.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "baseline":
            p.add_argument("method", choices=("pca", "vae", "linear-ssm"))
    return parser


def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    out = cfg = None
    command = "?"
    try:
        args = build_parser().parse_args(argv)
        command = args.command if args.command != "baseline" else f"baseline {args.method}"
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        cfg = cfg.with_seed(args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if out is not None:
            diag = {"error": str(exc), "type": type(exc).__name__, "diagnostics": getattr(exc, "diagnostics", {})}
            if isinstance(exc, NumericalError):
                diag["diagnostics"] = {"step": exc.step}
            if cfg is not None:
                diag["provenance"] = provenance(cfg, command)
            with open(out / "diagnostics.json", "w", encoding="utf-8") as fh:
                json.dump(diag, fh, sort_keys=True, indent=1, default=str)
        return EXIT_NUMERIC
    except ValueError as exc:  # DataContractError and other input violations
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
