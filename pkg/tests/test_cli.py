"""Configuration, checkpoint container, artifact stores and the command line."""
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays, array_shapes

from deepstate.analyze import kmeans_fit, pool_trajectories
from deepstate.baselines import VaeConfig, fit_pca, fit_vae, pooled_rows
from deepstate.cli import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    Checkpoint,
    CheckpointError,
    PipelineConfig,
    load_checkpoint,
    main,
    save_checkpoint,
)
from deepstate.cli import store
from deepstate.cli.artifacts import read_raw_cohort, read_table
from deepstate.cli.checkpoint import MAGIC, from_bytes, to_bytes
from deepstate.data import ConfigurationError
from deepstate.dssm import elbo, infer_states
from deepstate.preprocess import preprocess

from helpers import small_cohort, small_model

SMALL = """
[synth]
n_patients = 60
min_steps = 8
max_steps = 30
[preprocess]
min_steps = 8
max_steps = 30
[dssm]
epochs = 2
hidden = 16
lstm_hidden = 16
[linear_ssm]
epochs = 2
[vae]
epochs = 2
[analyze]
umap_epochs = 20
[report]
drugs = cisplatin, no_such_drug
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    c = ("--config", cfg)
    assert run("simulate", *c, "--out-dir", root / "raw") == EXIT_OK
    assert run("preprocess", *c, "--cohort", root / "raw", "--out-dir", root / "pre") == EXIT_OK
    assert run("train", *c, "--cohort", root / "pre/cohort.ckpt", "--out-dir", root / "tr") == EXIT_OK
    assert run("report", *c, "--cohort", root / "pre/cohort.ckpt", "--checkpoint", root / "tr/model.ckpt",
               "--out-dir", root / "rep") == EXIT_OK
    return root


# ---------------------------------------------------------------------------
# configuration


def test_default_config_round_trips():
    cfg = PipelineConfig()
    again = PipelineConfig.from_text(cfg.to_text())
    assert again.values == cfg.values
    assert again.hash() == cfg.hash()


def test_config_overrides_and_seed():
    cfg = PipelineConfig.from_text("[dssm]\nlatent_dim = 16\n[analyze]\nk_candidates = 3, 4\n")
    assert cfg["dssm"]["latent_dim"] == 16
    assert cfg["analyze"]["k_candidates"] == (3, 4)
    assert cfg.dssm_config(5).latent_dim == 16
    seeded = cfg.with_seed(7)
    assert seeded.seed == 7 and cfg.seed == 0
    assert seeded.hash() != cfg.hash()
    assert cfg.with_seed(None) is cfg


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\na = 1\n",
        "[dssm]\nlatnt_dim = 8\n",
        "[dssm]\nlatent_dim = 7\n",
        "[dssm]\nlearning_rate = 0.1\n",
        "[dssm]\nepochs = many\n",
        "[infer]\nmode = median\n",
        "[analyze]\nk_candidates = 1\n",
        "[synth]\nmissing_rate = 1.0\n",
        "[preprocess]\nmin_steps = 40\nmax_steps = 20\n",
        "not an ini file",
    ],
)
def test_bad_config_is_rejected(text):
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_file(tmp_path / "absent.ini")


# ---------------------------------------------------------------------------
# checkpoint container


def _ckpt(**arrays):
    return Checkpoint("test", arrays, {"note": "x"}, "[pipeline]\nseed = 0\n", "abc", 3)


def test_round_trip_is_bit_exact():
    special = np.array([np.nan, -0.0, np.inf, -np.inf, 5e-324, 1.0 / 3.0])
    ckpt = _ckpt(a=special, b=np.zeros((0, 4)), c=np.arange(24.0).reshape(2, 3, 4), d=np.float64(2.5))
    back = from_bytes(to_bytes(ckpt), "test")
    assert back.kind == "test" and back.meta == {"note": "x"} and back.seed == 3 and back.config_hash == "abc"
    for name, arr in ckpt.arrays.items():
        got = back.arrays[name]
        assert got.shape == np.shape(arr)
        assert got.tobytes() == np.asarray(arr, dtype="<f8").tobytes()
    assert to_bytes(back) == to_bytes(ckpt)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=5)))
def test_round_trip_property(arr):
    back = from_bytes(to_bytes(_ckpt(x=arr)))
    assert back.arrays["x"].tobytes() == arr.astype("<f8").tobytes()


def test_file_round_trip(tmp_path):
    ckpt = _ckpt(w=np.linspace(0, 1, 7))
    save_checkpoint(ckpt, tmp_path / "w.ckpt")
    assert load_checkpoint(tmp_path / "w.ckpt", "test").arrays["w"].tobytes() == ckpt.arrays["w"].tobytes()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_every_truncation_is_detected():
    blob = to_bytes(_ckpt(a=np.arange(3.0), b=np.ones((2, 2))))
    for cut in range(len(blob)):
        with pytest.raises(CheckpointError):
            from_bytes(blob[:cut])


def test_trailing_bytes_detected():
    blob = to_bytes(_ckpt(a=np.arange(3.0)))
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(blob + b"\x00")


def _rewrite_header(blob, edit):
    n = int.from_bytes(blob[len(MAGIC):len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + n])
    edit(header)
    head = json.dumps(header).encode()
    return MAGIC + len(head).to_bytes(8, "little") + head + blob[start + n:]


@pytest.mark.parametrize(
    "edit, message",
    [
        (lambda h: h.update(format_version=2), "format version"),
        (lambda h: h.update(kind="other"), "expected 'test'"),
        (lambda h: h["arrays"][0].update(nbytes=16), "needs"),
        (lambda h: h["arrays"][0].update(shape=[-3]), "negative"),
        (lambda h: h["arrays"][1].update(offset=0), "offset"),
        (lambda h: h["arrays"][0].pop("shape"), "malformed"),
        (lambda h: h.update(arrays="nope"), "not a list"),
        (lambda h: h.pop("kind"), "kind"),
    ],
)
def test_header_corruption_detected(edit, message):
    blob = to_bytes(_ckpt(a=np.arange(3.0), b=np.ones(2)))
    with pytest.raises(CheckpointError, match=message):
        from_bytes(_rewrite_header(blob, edit), "test")


def test_bad_magic_and_garbled_header():
    blob = to_bytes(_ckpt(a=np.arange(3.0)))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"X" + blob[1:])
    garbled = bytearray(blob)
    garbled[len(MAGIC) + 8] = 0xFF
    with pytest.raises(CheckpointError, match="corrupt header"):
        from_bytes(bytes(garbled))


# ---------------------------------------------------------------------------
# stores


def test_cohort_store_round_trip():
    cohort = small_cohort(np.random.default_rng(0))
    back = store.cohort_from_checkpoint(from_bytes(to_bytes(store.cohort_to_checkpoint(cohort, PipelineConfig()))))
    assert [p.patient_id for p in back.patients] == [p.patient_id for p in cohort.patients]
    for a, b in zip(cohort.patients, back.patients):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.death == b.death and tuple(a.drugs) == tuple(b.drugs)


def test_model_store_preserves_elbo():
    cohort = small_cohort(np.random.default_rng(1))
    model = small_model()
    blob = to_bytes(store.model_to_checkpoint(model, PipelineConfig()))
    back, trace = store.model_from_checkpoint(from_bytes(blob, "dssm"))
    assert trace == []
    assert elbo(back, cohort).total == elbo(model, cohort).total
    a, b = infer_states(model, cohort, "sample", seed=4), infer_states(back, cohort, "sample", seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.means, y.means)


def test_model_store_rejects_mismatched_parameters():
    ckpt = store.model_to_checkpoint(small_model(), PipelineConfig())
    ckpt.meta["model"]["latent_dim"] = 8
    with pytest.raises(CheckpointError):
        store.model_from_checkpoint(from_bytes(to_bytes(ckpt)))


def test_baseline_stores():
    cohort = small_cohort(np.random.default_rng(2))
    rows = pooled_rows(cohort)
    cfg = PipelineConfig()
    pca = fit_pca(rows, 3)
    pca2 = store.pca_from_checkpoint(from_bytes(to_bytes(store.pca_to_checkpoint(pca, cfg))))
    np.testing.assert_array_equal(pca.project(rows), pca2.project(rows))
    vae, trace = fit_vae(rows, VaeConfig(latent_dim=4, epochs=2, batch_size=4))
    vae2 = store.vae_from_checkpoint(from_bytes(to_bytes(store.vae_to_checkpoint(vae, cfg, trace))))
    np.testing.assert_array_equal(vae.latent(rows), vae2.latent(rows))


def test_latent_and_cluster_stores():
    cohort = small_cohort(np.random.default_rng(3), lengths=(6, 4, 7, 5))
    trajs = infer_states(small_model(), cohort)
    cfg = PipelineConfig()
    back = store.latents_from_checkpoint(from_bytes(to_bytes(store.latents_to_checkpoint(trajs, cfg, "dssm", "mean"))))
    for a, b in zip(trajs, back):
        assert a.patient_id == b.patient_id
        np.testing.assert_array_equal(a.means, b.means)
    points = pool_trajectories(trajs)[0]
    model = kmeans_fit(points, (2, 3), seed=0)
    m2, outcome, labels, ids = store.clusters_from_checkpoint(
        from_bytes(to_bytes(store.clusters_to_checkpoint(model, None, trajs, cfg)))
    )
    assert outcome is None and ids == [t.patient_id for t in trajs]
    np.testing.assert_array_equal(m2.labels, model.labels)
    assert [len(x) for x in labels] == [t.length for t in trajs]
    assert m2.candidates == model.candidates


# ---------------------------------------------------------------------------
# command line


def test_pipeline_outputs(pipeline):
    rep = pipeline / "rep"
    for name in ("transitions_all.csv", "signals.csv", "embedding.csv", "endpoint_probe.csv", "plot_data.json",
                 "embedding.png", "transitions.png", "signals.png", "training.png", "manifest.csv"):
        assert (rep / name).exists(), name
    first = (rep / "transitions_all.csv").read_text().splitlines()[0]
    assert first.startswith("# deepstate format_version=1 config_hash=")
    table = read_table(rep / "transitions_all.csv")
    assert np.isclose(table["percent"].sum(), 100.0)
    assert len(table) == 9
    absent = read_table(rep / "drug_no_such_drug_summary.csv")
    assert bool(absent["empty"].iloc[0]) and absent["n_patients"].iloc[0] == 0
    plot = json.loads((rep / "plot_data.json").read_text())
    assert set(plot) == {"provenance", "points", "polylines", "cluster_names", "patient_ids"}
    assert len(plot["points"]["x"]) == len(plot["points"]["cluster"])
    manifest = read_table(rep / "manifest.csv")
    assert "plot_data.json" in set(manifest["file"])


def test_report_is_byte_identical(pipeline, tmp_path):
    cfg = pipeline / "small.ini"
    args = ("report", "--config", cfg, "--cohort", pipeline / "pre/cohort.ckpt", "--checkpoint", pipeline / "tr/model.ckpt")
    assert run(*args, "--out-dir", tmp_path / "again") == EXIT_OK
    first = sorted(p.name for p in (pipeline / "rep").iterdir())
    assert first == sorted(p.name for p in (tmp_path / "again").iterdir())
    for name in first:
        assert (pipeline / "rep" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_rerun_of_every_stage_is_byte_identical(pipeline, tmp_path):
    cfg = pipeline / "small.ini"
    assert run("simulate", "--config", cfg, "--out-dir", tmp_path / "raw") == EXIT_OK
    assert run("preprocess", "--config", cfg, "--cohort", tmp_path / "raw", "--out-dir", tmp_path / "pre") == EXIT_OK
    assert run("train", "--config", cfg, "--cohort", tmp_path / "pre/cohort.ckpt", "--out-dir", tmp_path / "tr") == EXIT_OK
    for stage, name in (("raw", "observations.csv"), ("raw", "ground_truth.csv"), ("pre", "cohort.ckpt"),
                        ("tr", "model.ckpt"), ("tr", "train_trace.csv")):
        assert (pipeline / stage / name).read_bytes() == (tmp_path / stage / name).read_bytes(), name


def test_seed_changes_outputs(pipeline, tmp_path):
    assert run("simulate", "--config", pipeline / "small.ini", "--seed", 5, "--out-dir", tmp_path) == EXIT_OK
    assert (tmp_path / "observations.csv").read_bytes() != (pipeline / "raw/observations.csv").read_bytes()
    assert "seed=5" in (tmp_path / "observations.csv").read_text().splitlines()[0]


def test_cohort_checkpoint_matches_in_process_preprocessing(pipeline):
    cfg = PipelineConfig.from_file(pipeline / "small.ini")
    direct = preprocess(read_raw_cohort(pipeline / "raw"), cfg.preprocess_rules())
    loaded = store.cohort_from_checkpoint(load_checkpoint(pipeline / "pre/cohort.ckpt", "cohort"))
    assert [it.name for it in loaded.items] == [it.name for it in direct.items]
    for a, b in zip(direct.patients, loaded.patients):
        assert a.values.tobytes() == b.values.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()


def test_stepwise_commands(pipeline, tmp_path):
    cfg, cohort = pipeline / "small.ini", pipeline / "pre/cohort.ckpt"
    c = ("--config", cfg, "--out-dir", tmp_path)
    assert run("infer", *c, "--cohort", cohort, "--checkpoint", pipeline / "tr/model.ckpt") == EXIT_OK
    assert run("embed", *c, "--checkpoint", tmp_path / "latents.ckpt") == EXIT_OK
    assert run("cluster", *c, "--checkpoint", tmp_path / "latents.ckpt", "--cohort", cohort) == EXIT_OK
    assert run("transitions", *c, "--checkpoint", tmp_path / "clusters.ckpt", "--cohort", cohort) == EXIT_OK
    assert run("signals", *c, "--checkpoint", tmp_path / "clusters.ckpt", "--cohort", cohort, "--drug-tag", "cisplatin") == EXIT_OK
    # the stepwise path reproduces the report's tables
    for name in ("transitions_all.csv", "signals.csv", "cluster_selection.csv", "embedding.csv"):
        assert read_table(tmp_path / name).equals(read_table(pipeline / "rep" / name)), name
    assert (tmp_path / "drug_cisplatin_summary.csv").exists()


@pytest.mark.parametrize("method, name", [("pca", "pca"), ("vae", "vae"), ("linear-ssm", "linear_ssm")])
def test_baseline_command(pipeline, tmp_path, method, name):
    assert run("baseline", method, "--config", pipeline / "small.ini", "--cohort", pipeline / "pre/cohort.ckpt",
               "--out-dir", tmp_path) == EXIT_OK
    probe = read_table(tmp_path / f"{name}_probe.csv")
    assert 0.0 <= probe["final_step_auc"].iloc[0] <= 1.0
    assert load_checkpoint(tmp_path / f"latents_{name}.ckpt", "latents").meta["method"] == name


def test_usage_errors(tmp_path, capsys):
    assert run() == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE
    assert run("train", "--out-dir", tmp_path) == EXIT_USAGE
    assert run("simulate", "--seed", "abc") == EXIT_USAGE
    assert run("baseline", "--cohort", "x") == EXIT_USAGE
    assert run("--help") == EXIT_OK
    capsys.readouterr()


def test_configuration_and_missing_input_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[dssm]\nlatent_dim = 5\n")
    assert run("simulate", "--config", bad, "--out-dir", tmp_path) == EXIT_USAGE
    assert run("simulate", "--config", tmp_path / "none.ini", "--out-dir", tmp_path) == EXIT_USAGE
    assert run("train", "--cohort", tmp_path / "none.ckpt", "--out-dir", tmp_path) == EXIT_USAGE
    assert run("preprocess", "--cohort", tmp_path / "nowhere", "--out-dir", tmp_path) == EXIT_USAGE


def test_data_contract_errors(pipeline, tmp_path):
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes((pipeline / "tr/model.ckpt").read_bytes()[:-5])
    assert run("train", "--cohort", corrupt, "--out-dir", tmp_path) == EXIT_DATA
    # a model container where a cohort is expected
    assert run("train", "--cohort", pipeline / "tr/model.ckpt", "--out-dir", tmp_path) == EXIT_DATA
    raw = tmp_path / "raw"
    raw.mkdir()
    for name in ("observations.csv", "patients.csv", "items.csv"):
        (raw / name).write_text((pipeline / "raw" / name).read_text())
    (raw / "items.csv").write_text("wrong,columns\n1,2\n")
    assert run("preprocess", "--cohort", raw, "--out-dir", tmp_path) == EXIT_DATA


def test_numerical_failure_writes_diagnostics(tmp_path):
    cohort = small_cohort(np.random.default_rng(5))
    cohort.patients[1].values[2, 0] = np.inf
    ckpt = tmp_path / "cohort.ckpt"
    save_checkpoint(store.cohort_to_checkpoint(cohort, PipelineConfig()), ckpt)
    cfg = tmp_path / "tiny.ini"
    cfg.write_text("[dssm]\nepochs = 1\nhidden = 8\nlstm_hidden = 8\nlatent_dim = 2\n")
    with np.errstate(invalid="ignore"):
        code = run("train", "--config", cfg, "--cohort", ckpt, "--out-dir", tmp_path / "out")
    assert code == EXIT_NUMERIC
    diag = json.loads((tmp_path / "out/diagnostics.json").read_text())
    assert diag["type"] == "NumericalFailure"
    assert "epoch" in diag["diagnostics"]
    assert diag["provenance"]["command"] == "train"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "deepstate.cli"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "usage" in proc.stderr.lower() or "error" in proc.stderr.lower()
