"""JSON run configuration with strict key checking.

Every section and key is listed in ``DEFAULTS``; anything else is an error.
The only value without a default is ``search.seed`` (it may instead come from
the ``--seed`` flag).
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .data import SyntheticSpec
from .engine import STRATEGIES, FinetuneConfig, SearchConfig
from .ggm import MODES
from .searchspace import NetworkTopology

DEFAULTS = {
    "topology": {"cells": 14, "reduction_indices": [1, 8], "initial_channels": 8,
                 "fusion_taps": [0, 7, 13], "stem_strides": [2, 2, 1]},
    "search": {"seed": None, "steps": 2000, "batch": 2, "lr_w_max": 0.025, "lr_w_min": 0.001,
               "momentum": 0.9, "weight_decay_w": 1e-3, "lr_a": 0.001, "adam_betas": [0.5, 0.999],
               "weight_decay_a": 1e-4, "beta": 0.005, "lambda_init": 1.0, "lambda_min": 0.03,
               "shared_cells": False},
    "ggm": {"enabled": True, "mode": "edge_similarity", "gamma": 0.5, "dim": 64, "cascade": False},
    "lut": {"mode": "analytic", "path": None, "resolution": [64, 128], "warmup": 10, "runs": 50},
    "data": {"source": "synthetic", "seed": 0, "n_train": 64, "n_val": 16, "height": 64,
             "width": 128, "num_classes": 4, "noise": 0.05, "train_dir": None, "val_dir": None,
             "label_map": None},
    "finetune": {"steps": 300, "batch": 8, "lr": 0.01, "power": 0.9, "momentum": 0.9,
                 "weight_decay": 5e-4, "eval_every": 50, "scale_range": [0.5, 2.0]},
    "random": {"n": 10, "band": None, "seed": 0},
    "ablate": {"seeds": [0, 1, 2], "strategies": list(STRATEGIES)},
    "beta_sweep": {"betas": [0.0005, 0.005, 0.05]},
    "output_dir": "runs",
}


class ConfigError(ValueError):
    pass


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], val, where + ".")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self):
        return self.raw["search"]["seed"]

    @property
    def output_dir(self):
        return self.raw["output_dir"]

    def topology(self):
        t = self.raw["topology"]
        return NetworkTopology(cells=t["cells"], reduction_indices=tuple(t["reduction_indices"]),
                               initial_channels=t["initial_channels"],
                               fusion_taps=None if t["fusion_taps"] is None else tuple(t["fusion_taps"]),
                               num_classes=self.raw["data"]["num_classes"],
                               stem_strides=tuple(t["stem_strides"]))

    def search_config(self) -> SearchConfig:
        s, g = self.raw["search"], self.raw["ggm"]
        mode = g["mode"] if g["enabled"] else "none"
        return SearchConfig(seed=s["seed"], steps=s["steps"], batch=s["batch"],
                            lr_w_max=s["lr_w_max"], lr_w_min=s["lr_w_min"], momentum=s["momentum"],
                            weight_decay_w=s["weight_decay_w"], lr_a=s["lr_a"],
                            adam_betas=tuple(s["adam_betas"]), weight_decay_a=s["weight_decay_a"],
                            beta=s["beta"], lambda_init=s["lambda_init"],
                            lambda_min=s["lambda_min"], ggm_mode=mode, ggm_gamma=g["gamma"],
                            ggm_dim=g["dim"], ggm_cascade=g["cascade"],
                            shared_cells=s["shared_cells"], topology=self.topology())

    def finetune_config(self) -> FinetuneConfig:
        f = self.raw["finetune"]
        return FinetuneConfig(seed=self.seed, steps=f["steps"], batch=f["batch"], lr=f["lr"],
                              power=f["power"], momentum=f["momentum"],
                              weight_decay=f["weight_decay"], eval_every=f["eval_every"],
                              scale_range=tuple(f["scale_range"]))

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.raw["data"]
        return SyntheticSpec(n_train=d["n_train"], n_val=d["n_val"], height=d["height"],
                             width=d["width"], num_classes=d["num_classes"], noise=d["noise"])


def validate(cfg: RunConfig):
    r = cfg.raw
    seed = r["search"]["seed"]
    if seed is None:
        raise ConfigError("search.seed is required (set it in the config or pass --seed)")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("search.seed must be an integer")
    if r["ggm"]["mode"] not in MODES:
        raise ConfigError(f"ggm.mode must be one of {MODES}")
    if r["lut"]["mode"] not in ("analytic", "measured"):
        raise ConfigError("lut.mode must be 'analytic' or 'measured'")
    if r["data"]["source"] not in ("synthetic", "directory"):
        raise ConfigError("data.source must be 'synthetic' or 'directory'")
    if r["data"]["source"] == "directory" and not (r["data"]["train_dir"] and r["data"]["val_dir"]):
        raise ConfigError("data.train_dir and data.val_dir are required for directory data")
    bad = set(r["ablate"]["strategies"]) - set(STRATEGIES)
    if bad:
        raise ConfigError(f"unknown ablation strategies {sorted(bad)}")
    try:
        cfg.search_config()
        cfg.finetune_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(text_or_dict, seed=None) -> RunConfig:
    """Parse, merge with defaults, apply a seed override, and validate."""
    if isinstance(text_or_dict, str):
        try:
            given = json.loads(text_or_dict)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    else:
        given = text_or_dict
    if not isinstance(given, dict):
        raise ConfigError("config must be a JSON object")
    raw = _merge(DEFAULTS, given)
    if seed is not None:
        raw["search"]["seed"] = seed
    return validate(RunConfig(raw))


def load_config_file(path, seed=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_config(text, seed)
