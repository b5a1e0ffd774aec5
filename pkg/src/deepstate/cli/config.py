"""Pipeline configuration: one INI file with a section per module.

Every key has a type, a default and (where the method fixes one) a domain.
Unknown sections or keys are rejected so a typo never silently falls back
to a default.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from ..analyze import N_NEIGHBORS_GRID
from ..baselines import VAE_LEARNING_RATES, VaeConfig
from ..data import ConfigurationError
from ..dssm import LATENT_DIM_GRID, LEARNING_RATE_GRID, DssmConfig
from ..preprocess import PreprocessRules
from ..synth import CohortSpec


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _str_list(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _one_of(options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")
    return check


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")
    return check


def _probability(v):
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")


def _rate(v):
    if not 0.0 <= v < 1.0:
        raise ValueError("must lie in [0, 1)")


def _unit_open(v):
    if not 0.0 < v <= 1.0:
        raise ValueError("must lie in (0, 1]")


def _k_list(v):
    if any(k < 2 for k in v):
        raise ValueError("every k must be >= 2")


# section -> key -> (parser, default, validator or None)
SCHEMA = {
    "pipeline": {
        "seed": (int, 0, _at_least(0)),
    },
    "synth": {
        "n_patients": (int, 500, _at_least(1)),
        "min_steps": (int, 50, _at_least(1)),
        "max_steps": (int, 238, _at_least(1)),
        "missing_rate": (float, 0.5923, _rate),
        "drug_probability": (float, 0.25, _probability),
    },
    "preprocess": {
        "min_steps": (int, 50, _at_least(1)),
        "max_steps": (int, 238, _at_least(1)),
        "max_lab_items": (int, 50, _at_least(1)),
        "corr_threshold": (float, 0.7, _probability),
        "lab_encoding": (str, "code", _one_of(("code", "minmax"))),
    },
    "dssm": {
        "latent_dim": (int, 8, _one_of(LATENT_DIM_GRID)),
        "learning_rate": (float, 0.005, _one_of(LEARNING_RATE_GRID)),
        "epochs": (int, 30, _at_least(0)),
        "batch_size": (int, 32, _at_least(1)),
        "hidden": (int, 64, _at_least(1)),
        "lstm_hidden": (int, 64, _at_least(1)),
        "dropout": (float, 0.1, _rate),
        "encoder_direction": (str, "backward", _one_of(("backward", "forward"))),
        "kl_warmup": (int, 10, _at_least(0)),
        "min_emission_variance": (float, 1e-2, None),
        "residual": (_bool, True, None),
        "learn_prior_mean": (_bool, True, None),
    },
    "vae": {
        "latent_dim": (int, 8, _one_of(LATENT_DIM_GRID)),
        "learning_rate": (float, 0.01, _one_of(VAE_LEARNING_RATES)),
        "epochs": (int, 50, _at_least(0)),
        "batch_size": (int, 256, _at_least(1)),
        "select_rate": (_bool, False, None),
    },
    "linear_ssm": {
        "epochs": (int, 60, _at_least(0)),
        "learning_rate": (float, 0.01, _one_of(LEARNING_RATE_GRID)),
    },
    "infer": {
        "mode": (str, "sample", _one_of(("mean", "sample"))),
    },
    "analyze": {
        "n_neighbors": (int, 15, _one_of(N_NEIGHBORS_GRID)),
        "trial_downsample": (float, 0.1, _unit_open),
        "umap_epochs": (int, 200, _at_least(1)),
        "k_candidates": (_int_list, (3,), _k_list),
        "max_iter": (int, 300, _at_least(1)),
        "top_n": (int, 10, _at_least(1)),
        "top_n_drug": (int, 20, _at_least(1)),
    },
    "report": {
        "figures": (_bool, True, None),
        "drugs": (_str_list, (), None),
    },
}


@dataclass
class PipelineConfig:
    """Typed view of the INI file; ``values[section][key]``."""

    values: dict = field(default_factory=lambda: {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    # -- construction -------------------------------------------------------

    @classmethod
    def from_text(cls, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigurationError(f"{source}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigurationError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}]")
                cfg.values[section][key] = cls._parse(section, key, raw, source)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    @staticmethod
    def _parse(section, key, raw, source):
        parse, _, check = SCHEMA[section][key]
        try:
            value = parse(raw)
            if check is not None:
                check(value)
        except ValueError as exc:
            raise ConfigurationError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
        return value

    def validate(self):
        """Cross-key checks, done by building every downstream config once."""
        try:
            self.cohort_spec()
            self.preprocess_rules()
            self.dssm_config(input_dim=1)
            self.vae_config()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    # -- accessors -------------------------------------------------------------

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["pipeline"]["seed"]

    def with_seed(self, seed):
        if seed is None:
            return self
        out = PipelineConfig({s: dict(v) for s, v in self.values.items()})
        out.values["pipeline"]["seed"] = self._parse("pipeline", "seed", str(seed), "--seed")
        return out

    def to_text(self):
        """Canonical INI text: every section and key, in schema order."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_fmt(self.values[section][key])}" for key in keys)
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def cohort_spec(self):
        s = self.values["synth"]
        return CohortSpec(
            n_patients=s["n_patients"],
            min_steps=s["min_steps"],
            max_steps=s["max_steps"],
            missing_rate=s["missing_rate"],
            drug_probability=s["drug_probability"],
        )

    def preprocess_rules(self):
        return PreprocessRules(**self.values["preprocess"])

    def dssm_config(self, input_dim):
        return DssmConfig(input_dim=input_dim, seed=self.seed, max_steps=self.values["preprocess"]["max_steps"], **self.values["dssm"])

    def linear_ssm_config(self, input_dim):
        base = dict(self.values["dssm"])
        base.update(self.values["linear_ssm"])
        return DssmConfig(input_dim=input_dim, seed=self.seed, max_steps=self.values["preprocess"]["max_steps"], kind="linear", **base)

    def vae_config(self):
        v = {k: val for k, val in self.values["vae"].items() if k != "select_rate"}
        return VaeConfig(seed=self.seed, **v)
