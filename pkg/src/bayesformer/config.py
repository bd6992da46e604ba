"""Experiment configuration: an INI file with sections, resolved defaults,
shipped presets for every method/dataset pair, and content hashes."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .tensor import ContractError

METHODS = ("mle", "ensemble", "vi", "subnet-vi", "laplace", "final-laplace",
           "concrete-dropout", "gauss-attn", "gauss-attn-dd", "dir-attn", "dir-attn-dd")
DATASETS = ("m1", "m2", "pos", "mnist")

ATTENTION_METHODS = {"gauss-attn": "gaussian", "gauss-attn-dd": "gaussian-dd",
                     "dir-attn": "dirichlet", "dir-attn-dd": "dirichlet-dd"}

DATA_DIR_ENV = "BAYESFORMER_DATA_DIR"


@dataclass
class ExperimentConfig:
    dataset: str
    method: str
    seed: int = 0
    data_seed: int = 7
    epochs: int | None = None            # 100 toy/POS, 150 MNIST
    batch_size: int = 32
    base_lr: float = 1.0
    warmup: int = 4000
    optimizer: str = "adam"
    n_posterior_samples: int | None = None   # 30 toy, 10 POS/MNIST
    kl_anneal: bool = True
    # weight-space VI
    posterior: str = "gaussian"
    prior_family: str = "gaussian"
    prior_loc: float = 0.0
    prior_scale: float | None = None     # None -> 1/sqrt(hidden)
    prior_file: str | None = None        # improved-prior JSON
    vi_init_sigma_factor: float = 0.01
    vi_warm_start_epochs: int = 0
    n_mc: int = 1
    student_dof: float = 4.0
    # ensembles / laplace / concrete dropout
    n_members: int = 30
    prior_precision: float = 1.0
    laplace_max_items: int | None = None
    cd_init_p: float = 0.1
    cd_temperature: float = 0.1
    cd_weight_reg: float = 1e-6
    cd_dropout_reg: float = 1e-5
    # variational attention
    attn_prior_sharpness: float = 10.0
    attn_init_sharpness: float = 10.0
    attn_init_log_var: float = 0.0
    # data
    toy_n_train: int = 800
    toy_n_val: int = 80
    toy_n_test: int = 80
    conllu_train: str | None = None
    conllu_dev: str | None = None
    conllu_test: str | None = None
    mnist_dir: str | None = None
    data_dir: str | None = None
    out_dir: str = "runs"
    # evaluation
    ece_bins: int = 15

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ContractError(f"unknown dataset {self.dataset!r}")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")

    def resolved(self) -> dict:
        """All knobs with defaults applied; embedded in every report."""
        d = asdict(self)
        if d["epochs"] is None:
            d["epochs"] = 150 if self.dataset == "mnist" else 100
        if d["n_posterior_samples"] is None:
            d["n_posterior_samples"] = 30 if self.dataset in ("m1", "m2") else 10
        if d["data_dir"] is None:
            d["data_dir"] = os.environ.get(DATA_DIR_ENV, "data")
        return d


_SECTIONS = {
    "experiment": ("dataset", "method", "seed", "data_seed", "out_dir"),
    "training": ("epochs", "batch_size", "base_lr", "warmup", "optimizer",
                 "kl_anneal", "n_posterior_samples"),
    "vi": ("posterior", "vi_init_sigma_factor", "vi_warm_start_epochs",
           "n_mc", "student_dof"),
    "prior": ("prior_family", "prior_loc", "prior_scale", "prior_file",
              "prior_precision"),
    "method": ("n_members", "laplace_max_items", "cd_init_p", "cd_temperature",
               "cd_weight_reg", "cd_dropout_reg"),
    "attention": ("attn_prior_sharpness", "attn_init_sharpness", "attn_init_log_var"),
    "data": ("toy_n_train", "toy_n_val", "toy_n_test", "conllu_train",
             "conllu_dev", "conllu_test", "mnist_dir", "data_dir"),
    "evaluation": ("ece_bins",),
}

_FIELD_TYPES = {f.name: f.type for f in ExperimentConfig.__dataclass_fields__.values()}

_INT_FIELDS = {"seed", "data_seed", "epochs", "batch_size", "warmup", "n_members",
               "n_posterior_samples", "vi_warm_start_epochs", "n_mc",
               "laplace_max_items", "toy_n_train", "toy_n_val", "toy_n_test",
               "ece_bins"}
_FLOAT_FIELDS = {"base_lr", "prior_loc", "prior_scale", "prior_precision",
                 "vi_init_sigma_factor", "student_dof", "cd_init_p",
                 "cd_temperature", "cd_weight_reg", "cd_dropout_reg",
                 "attn_prior_sharpness", "attn_init_sharpness", "attn_init_log_var"}
_BOOL_FIELDS = {"kl_anneal"}


def parse_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ContractError(f"config file {path!r} not found")
    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ContractError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ContractError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _coerce(key, raw)
    if "dataset" not in kwargs or "method" not in kwargs:
        raise ContractError("config must set [experiment] dataset and method")
    return ExperimentConfig(**kwargs)


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if key in _BOOL_FIELDS:
        return raw.lower() in ("1", "true", "yes", "on")
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    return raw


def config_to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    d = asdict(cfg)
    for section, keys in _SECTIONS.items():
        vals = {k: str(d[k]) for k in keys if d[k] is not None}
        if vals:
            cp[section] = vals
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def code_hash() -> str:
    """Content hash over the package sources, so reports pin the code version."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# -- presets -----------------------------------------------------------------------------

_TOY_TUNING = {"batch_size": 32, "base_lr": 1.0}


def preset(dataset: str, method: str, **overrides) -> ExperimentConfig:
    """Shipped defaults for every method column on every dataset."""
    if dataset not in DATASETS:
        raise ContractError(f"unknown dataset {dataset!r}")
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    kwargs: dict = {"dataset": dataset, "method": method}
    if dataset in ("m1", "m2"):
        kwargs.update(_TOY_TUNING)
    if method == "vi" and "posterior" in overrides:
        pass
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def vi_family_presets(dataset: str) -> dict[str, ExperimentConfig]:
    """The five VI posterior-family columns of the appendix table."""
    out = {}
    for fam in ("gaussian", "laplace", "logistic", "cauchy", "student"):
        out[f"vi-{fam}"] = preset(dataset, "vi", posterior=fam)
    return out


def all_presets() -> dict[str, ExperimentConfig]:
    out = {}
    for ds in DATASETS:
        for method in METHODS:
            out[f"{ds}/{method}"] = preset(ds, method)
        for name, cfg in vi_family_presets(ds).items():
            out[f"{ds}/{name}"] = cfg
    return out


def write_preset_files(dir_path) -> list[str]:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cfg in all_presets().items():
        fname = name.replace("/", "_") + ".ini"
        (dir_path / fname).write_text(config_to_ini(cfg))
        written.append(fname)
    return written
