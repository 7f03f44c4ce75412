"""Experiment configuration: sectioned key/value files, validated strictly.

A config file is INI-style text with the sections below. Every key has a
default except the core experiment keys, which must be present; unknown
sections or keys are rejected so typos cannot silently fall back to
defaults. ``emit_effective`` writes back the fully resolved config, and
loading that output reproduces the same configuration (round-trip
idempotence).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .acquisition import CostModel
from .gp import FeatureMapConfig
from .grid import CandidateGrid, build_grid
from .orchestrator import (STRATEGY_NAMES, LoopConfig, Strategy)
from .simulator import TopologyConfig
from .svgd import SVGDConfig


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


REQUIRED_EXPERIMENT_KEYS = ("strategy", "beta", "n_particles", "n_tasks",
                            "n_replicates", "budget", "costs", "master_seed")

DEFAULTS = {
    "experiment": {
        "strategy": None, "beta": None, "n_particles": None, "n_tasks": None,
        "n_replicates": None, "budget": None, "costs": None,
        "master_seed": None, "n_max_value_samples": "10",
        "init_observations": "10", "charge_init_to_budget": "false",
    },
    "topology": {
        "n_cells": "3", "n_ues_per_cell": "10", "n_tx": "4", "n_rx": "16",
        "cell_radius_m": "200", "ue_min_dist_m": "18",
        "noise_power_db": "-96", "carrier_ghz": "3.5", "p_max_dbm": "24",
    },
    "grid": {
        "p0_min_dbm": "-202", "p0_max_dbm": "24", "p0_step_db": "2",
        "alpha_values": "0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0",
    },
    "gp": {
        "noise_variance": "0.83", "hidden_width": "16", "feature_dim": "4",
        "particle_init_std": "0.5", "learn_fidelity_lengthscale": "true",
    },
    "svgd": {
        "stepsize": "0.01", "rounds_per_fit": "5", "cosine_decay": "true",
        "grad_clip": "20",
    },
    "acquisition": {
        "sqrt_variance_factor": "false",
    },
}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment settings."""

    strategy_name: str
    beta: float
    n_particles: int
    n_tasks: int
    n_replicates: int
    budget: float
    costs: tuple[float, ...]
    master_seed: int
    n_max_value_samples: int
    init_observations: int
    charge_init_to_budget: bool
    topology: TopologyConfig
    p0_min_dbm: float
    p0_max_dbm: float
    p0_step_db: float
    alpha_values: tuple[float, ...]
    noise_variance: float
    hidden_width: int
    feature_dim: int
    particle_init_std: float
    learn_fidelity_lengthscale: bool
    svgd_stepsize: float
    svgd_rounds_per_fit: int
    svgd_cosine_decay: bool
    svgd_grad_clip: float | None
    sqrt_variance_factor: bool

    def strategy(self) -> Strategy:
        return Strategy(self.strategy_name, self.beta)

    def cost_model(self) -> CostModel:
        return CostModel(self.costs, self.budget)

    def grid(self) -> CandidateGrid:
        import numpy as np
        n = int(round((self.p0_max_dbm - self.p0_min_dbm) / self.p0_step_db)) + 1
        p0_values = self.p0_min_dbm + self.p0_step_db * np.arange(n)
        return build_grid(p0_values=p0_values, alpha_values=self.alpha_values)

    def arch(self) -> FeatureMapConfig:
        return FeatureMapConfig(input_dim=2, hidden_width=self.hidden_width,
                                feature_dim=self.feature_dim)

    def svgd_config(self) -> SVGDConfig:
        return SVGDConfig(stepsize=self.svgd_stepsize,
                          rounds_per_fit=self.svgd_rounds_per_fit,
                          grad_clip=self.svgd_grad_clip,
                          freeze_fidelity_lengthscale=not self.learn_fidelity_lengthscale)

    def loop_config(self) -> LoopConfig:
        return LoopConfig(init_observations=self.init_observations,
                          charge_init_to_budget=self.charge_init_to_budget,
                          noise_variance=self.noise_variance,
                          particle_init_std=self.particle_init_std,
                          n_max_value_samples=self.n_max_value_samples,
                          sqrt_variance_factor=self.sqrt_variance_factor)


def load_config_text(text: str, overrides: dict[str, str] | None = None
                     ) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc

    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section {section!r}")
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")

    merged: dict[str, dict[str, str]] = {}
    for section, keys in DEFAULTS.items():
        merged[section] = {}
        for key, default in keys.items():
            if parser.has_option(section, key):
                merged[section][key] = parser.get(section, key)
            elif default is not None:
                merged[section][key] = default
    if overrides:
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown override {dotted!r}")
            merged[section][key] = value

    for key in REQUIRED_EXPERIMENT_KEYS:
        if key not in merged["experiment"]:
            raise ConfigError(f"missing required key {key!r} in [experiment]")

    exp, topo, grid_s = merged["experiment"], merged["topology"], merged["grid"]
    gp_s, svgd_s, acq_s = merged["gp"], merged["svgd"], merged["acquisition"]

    strategy_name = exp["strategy"].strip().lower()
    if strategy_name not in STRATEGY_NAMES:
        raise ConfigError(f"key 'strategy': unknown value {exp['strategy']!r}; "
                          f"expected one of {STRATEGY_NAMES}")

    def as_int(section, key, raw):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} in [{section}]: expected integer, "
                              f"got {raw!r}") from None

    def as_float(section, key, raw):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} in [{section}]: expected number, "
                              f"got {raw!r}") from None

    grad_clip_raw = svgd_s["grad_clip"].strip().lower()
    grad_clip = None if grad_clip_raw in ("none", "off") else as_float(
        "svgd", "grad_clip", grad_clip_raw)

    cfg = ExperimentConfig(
        strategy_name=strategy_name,
        beta=as_float("experiment", "beta", exp["beta"]),
        n_particles=as_int("experiment", "n_particles", exp["n_particles"]),
        n_tasks=as_int("experiment", "n_tasks", exp["n_tasks"]),
        n_replicates=as_int("experiment", "n_replicates", exp["n_replicates"]),
        budget=as_float("experiment", "budget", exp["budget"]),
        costs=_parse_floats(exp["costs"]),
        master_seed=as_int("experiment", "master_seed", exp["master_seed"]),
        n_max_value_samples=as_int("experiment", "n_max_value_samples",
                                   exp["n_max_value_samples"]),
        init_observations=as_int("experiment", "init_observations",
                                 exp["init_observations"]),
        charge_init_to_budget=_parse_bool(exp["charge_init_to_budget"],
                                          "charge_init_to_budget"),
        topology=TopologyConfig(
            n_cells=as_int("topology", "n_cells", topo["n_cells"]),
            n_ues_per_cell=as_int("topology", "n_ues_per_cell",
                                  topo["n_ues_per_cell"]),
            n_tx=as_int("topology", "n_tx", topo["n_tx"]),
            n_rx=as_int("topology", "n_rx", topo["n_rx"]),
            cell_radius_m=as_float("topology", "cell_radius_m",
                                   topo["cell_radius_m"]),
            ue_min_dist_m=as_float("topology", "ue_min_dist_m",
                                   topo["ue_min_dist_m"]),
            noise_power_db=as_float("topology", "noise_power_db",
                                    topo["noise_power_db"]),
            carrier_ghz=as_float("topology", "carrier_ghz", topo["carrier_ghz"]),
            p_max_dbm=as_float("topology", "p_max_dbm", topo["p_max_dbm"]),
        ),
        p0_min_dbm=as_float("grid", "p0_min_dbm", grid_s["p0_min_dbm"]),
        p0_max_dbm=as_float("grid", "p0_max_dbm", grid_s["p0_max_dbm"]),
        p0_step_db=as_float("grid", "p0_step_db", grid_s["p0_step_db"]),
        alpha_values=_parse_floats(grid_s["alpha_values"]),
        noise_variance=as_float("gp", "noise_variance", gp_s["noise_variance"]),
        hidden_width=as_int("gp", "hidden_width", gp_s["hidden_width"]),
        feature_dim=as_int("gp", "feature_dim", gp_s["feature_dim"]),
        particle_init_std=as_float("gp", "particle_init_std",
                                   gp_s["particle_init_std"]),
        learn_fidelity_lengthscale=_parse_bool(
            gp_s["learn_fidelity_lengthscale"], "learn_fidelity_lengthscale"),
        svgd_stepsize=as_float("svgd", "stepsize", svgd_s["stepsize"]),
        svgd_rounds_per_fit=as_int("svgd", "rounds_per_fit",
                                   svgd_s["rounds_per_fit"]),
        svgd_cosine_decay=_parse_bool(svgd_s["cosine_decay"], "cosine_decay"),
        svgd_grad_clip=grad_clip,
        sqrt_variance_factor=_parse_bool(acq_s["sqrt_variance_factor"],
                                         "sqrt_variance_factor"),
    )
    # construct the domain objects once so invalid combinations fail loudly
    cfg.strategy()
    cfg.cost_model()
    cfg.svgd_config()
    if cfg.init_observations < len(cfg.costs):
        raise ConfigError("key 'init_observations': must cover every fidelity "
                          f"level (need >= {len(cfg.costs)})")
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config_text(fh.read(), overrides)


def emit_effective(cfg: ExperimentConfig) -> str:
    """Serialize the resolved configuration; loading the output reproduces it."""
    def fmt_floats(values):
        return ", ".join(format(v, "g") for v in values)

    sections = {
        "experiment": {
            "strategy": cfg.strategy_name,
            "beta": format(cfg.beta, "g"),
            "n_particles": str(cfg.n_particles),
            "n_tasks": str(cfg.n_tasks),
            "n_replicates": str(cfg.n_replicates),
            "budget": format(cfg.budget, "g"),
            "costs": fmt_floats(cfg.costs),
            "master_seed": str(cfg.master_seed),
            "n_max_value_samples": str(cfg.n_max_value_samples),
            "init_observations": str(cfg.init_observations),
            "charge_init_to_budget": str(cfg.charge_init_to_budget).lower(),
        },
        "topology": {
            k: format(getattr(cfg.topology, k), "g")
            for k in ("n_cells", "n_ues_per_cell", "n_tx", "n_rx",
                      "cell_radius_m", "ue_min_dist_m", "noise_power_db",
                      "carrier_ghz", "p_max_dbm")
        },
        "grid": {
            "p0_min_dbm": format(cfg.p0_min_dbm, "g"),
            "p0_max_dbm": format(cfg.p0_max_dbm, "g"),
            "p0_step_db": format(cfg.p0_step_db, "g"),
            "alpha_values": fmt_floats(cfg.alpha_values),
        },
        "gp": {
            "noise_variance": format(cfg.noise_variance, "g"),
            "hidden_width": str(cfg.hidden_width),
            "feature_dim": str(cfg.feature_dim),
            "particle_init_std": format(cfg.particle_init_std, "g"),
            "learn_fidelity_lengthscale": str(cfg.learn_fidelity_lengthscale).lower(),
        },
        "svgd": {
            "stepsize": format(cfg.svgd_stepsize, "g"),
            "rounds_per_fit": str(cfg.svgd_rounds_per_fit),
            "cosine_decay": str(cfg.svgd_cosine_decay).lower(),
            "grad_clip": ("none" if cfg.svgd_grad_clip is None
                          else format(cfg.svgd_grad_clip, "g")),
        },
        "acquisition": {
            "sqrt_variance_factor": str(cfg.sqrt_variance_factor).lower(),
        },
    }
    parser = configparser.ConfigParser(interpolation=None)
    for name, keys in sections.items():
        parser[name] = keys
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(emit_effective(cfg).encode()).hexdigest()[:16]
