"""Command line: data generation, training runs, evaluation, the weight
study, improved priors, prior-predictive entropy, presets, and report merging.

Exit codes: 0 success, 1 usage error, 2 runtime failure (with a structured
JSON error on stderr).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, data as datamod, evaluation as evalmod
from . import weightspace as ws
from .config import (DATASETS, METHODS, ExperimentConfig, all_presets, code_hash,
                     config_hash, config_to_ini, parse_config, preset,
                     write_preset_files)
from .container import load_container, save_container
from .data import (SEED_LEN, ToyData, batch_iter, build_pos_vocab, encode_pos,
                   generate_m1, generate_m2, generate_synthetic_images,
                   load_mnist_idx, load_toy_cache, mnist_split, parse_conllu,
                   save_toy_cache, toy_split)
from .distributions import Family, LocScale
from .models import AttentionMode, TransformerModel, mnist_config, pos_config, toy_config
from .tensor import ContractError, no_grad, softmax
from .training import TrainSettings, TrainingDiverged, train_mle
from .weightspace import PriorSpec, fit_ensemble, fit_laplace, fit_vi, laplace_predictive


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _fail(kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": message}
    payload.update(extra)
    sys.stderr.write(json.dumps(payload, default=str) + "\n")
    return 2


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- dataset loading ---------------------------------------------------------------


def toy_cache_path(data_dir: str, generator: str, n: int, length: int, seed: int) -> Path:
    return Path(data_dir) / f"{generator}_n{n}_len{length}_seed{seed}.bin"


def ensure_toy_cache(data_dir: str, generator: str, n: int, length: int,
                     seed: int) -> tuple[Path, bool]:
    """Write the cache file unless an identical one is already present.
    Returns (path, wrote)."""
    path = toy_cache_path(data_dir, generator, n, length, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    gen = generate_m1 if generator == "m1" else generate_m2
    data = gen(n, length, seed=seed)
    tmp = path.with_suffix(".tmp")
    save_toy_cache(tmp, data)
    fresh = tmp.read_bytes()
    tmp.unlink()
    if path.exists() and path.read_bytes() == fresh:
        return path, False
    path.write_bytes(fresh)
    return path, True


def load_dataset(resolved: dict) -> dict:
    """Train/val/test splits plus model-construction info for one dataset."""
    ds = resolved["dataset"]
    data_dir = resolved["data_dir"]
    if ds in ("m1", "m2"):
        n = resolved["toy_n_train"] + resolved["toy_n_val"] + resolved["toy_n_test"]
        path, _ = ensure_toy_cache(data_dir, ds, n, datamod.PRED_LEN, resolved["data_seed"])
        toy = load_toy_cache(path)
        train, val, test = toy_split(toy, resolved["toy_n_train"],
                                     resolved["toy_n_val"], resolved["toy_n_test"])
        return {"task": "regression",
                "train": train.as_batches(), "val": val.as_batches(),
                "test": test.as_batches(), "test_toy": test,
                "files": {"cache": str(path)}}
    if ds == "pos":
        if not resolved["conllu_train"] or not resolved["conllu_test"]:
            raise FileNotFoundError("POS needs conllu_train and conllu_test paths")
        train_sents = parse_conllu(resolved["conllu_train"])
        test_sents = parse_conllu(resolved["conllu_test"])
        vocab = build_pos_vocab(train_sents)
        train = encode_pos(train_sents, vocab)
        test = encode_pos(test_sents, vocab)
        val = None
        files = {"train": _sha256_file(resolved["conllu_train"]),
                 "test": _sha256_file(resolved["conllu_test"])}
        if resolved.get("conllu_dev"):
            val = encode_pos(parse_conllu(resolved["conllu_dev"]), vocab)
            files["dev"] = _sha256_file(resolved["conllu_dev"])
        return {"task": "tagging", "train": train, "val": val, "test": test,
                "vocab": vocab, "files": files}
    # mnist
    mnist_dir = resolved.get("mnist_dir") or data_dir
    base = Path(mnist_dir)
    paths = {name: base / name for name in
             ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"MNIST IDX files missing: {missing}")
    tr_i, tr_l = load_mnist_idx(paths["train-images-idx3-ubyte"],
                                paths["train-labels-idx1-ubyte"])
    te_i, te_l = load_mnist_idx(paths["t10k-images-idx3-ubyte"],
                                paths["t10k-labels-idx1-ubyte"])
    train, val, test = mnist_split(tr_i, tr_l, te_i, te_l)
    return {"task": "classification", "train": train, "val": val, "test": test,
            "files": {k: _sha256_file(v) for k, v in paths.items()}}


def build_model_config(resolved: dict, bundle: dict):
    ds, method = resolved["dataset"], resolved["method"]
    mode = AttentionMode(cfgmod.ATTENTION_METHODS.get(method, "deterministic"))
    kw = dict(mode=mode,
              attn_prior_sharpness=resolved["attn_prior_sharpness"],
              attn_init_sharpness=resolved["attn_init_sharpness"],
              attn_init_log_var=resolved["attn_init_log_var"],
              concrete_dropout=(method == "concrete-dropout"),
              cd_init_p=resolved["cd_init_p"],
              cd_temperature=resolved["cd_temperature"],
              cd_weight_reg=resolved["cd_weight_reg"],
              cd_dropout_reg=resolved["cd_dropout_reg"])
    if ds in ("m1", "m2"):
        return toy_config(**kw)
    if ds == "pos":
        vocab = bundle["vocab"]
        return pos_config(vocab.n_tokens, vocab.n_tags, **kw)
    return mnist_config(**kw)


def train_settings(resolved: dict) -> TrainSettings:
    return TrainSettings(epochs=resolved["epochs"], batch_size=resolved["batch_size"],
                         base_lr=resolved["base_lr"], warmup=resolved["warmup"],
                         optimizer=resolved["optimizer"],
                         kl_anneal=resolved["kl_anneal"])


def load_prior_spec(resolved: dict) -> PriorSpec:
    if resolved.get("prior_file"):
        return PriorSpec.from_json(Path(resolved["prior_file"]).read_text())
    return PriorSpec(default_family=Family(resolved["prior_family"]),
                     default_loc=resolved["prior_loc"],
                     default_scale=resolved["prior_scale"],
                     default_dof=resolved["student_dof"])


# -- prediction collection ----------------------------------------------------------


def _forward_collect(model, bundle: dict, rng, weights=None, cd_rng=None,
                     chunk: int = 200):
    """One prediction pass over the test set; returns task-shaped arrays."""
    task = bundle["task"]
    test = bundle["test"]
    n = len(next(iter(test.values())))
    means, varis, probs = [], [], []
    with no_grad():
        for idx in batch_iter(n, chunk):
            batch = {k: v[idx] for k, v in test.items()}
            if task == "regression":
                out = model.forward(batch["values"][:, :-1], rng=rng,
                                    weights=weights, cd_rng=cd_rng)
                means.append(out.primary.data[:, SEED_LEN - 1:])
                varis.append(out.variance.data[:, SEED_LEN - 1:])
            elif task == "tagging":
                out = model.forward(batch["ids"], pad_mask=batch["mask"], rng=rng,
                                    weights=weights, cd_rng=cd_rng)
                p = softmax(out.primary, axis=-1).data
                probs.append(p[batch["mask"]])
            else:
                out = model.forward(batch["images"], rng=rng, weights=weights,
                                    cd_rng=cd_rng)
                probs.append(softmax(out.primary, axis=-1).data)
    if task == "regression":
        return np.concatenate(means), np.concatenate(varis)
    return np.concatenate(probs)


def collect_predictions(method: str, model, bundle: dict, resolved: dict,
                        rng: np.random.Generator, vstate=None, laplace_state=None,
                        ensemble=None):
    """(S, ...) prediction samples on the test set for any method."""
    task = bundle["task"]
    s_count = resolved["n_posterior_samples"]
    if method == "mle":
        samples = [_forward_collect(model, bundle, rng)]
    elif method == "ensemble":
        samples = [_forward_collect(m, bundle, rng) for m in ensemble]
    elif method in ("vi", "subnet-vi"):
        samples = []
        for _ in range(s_count):
            w = vstate.sample_weights(rng)
            samples.append(_forward_collect(model, bundle, rng, weights=w))
    elif method in ("laplace", "final-laplace"):
        preds = laplace_predictive(model, laplace_state, bundle["test"], s_count,
                                   rng, max_items=resolved["laplace_max_items"])
        if task == "regression":
            return preds
        return preds
    elif method == "concrete-dropout":
        samples = [_forward_collect(model, bundle, rng, cd_rng=rng)
                   for _ in range(s_count)]
    else:  # variational attention methods sample per forward pass
        samples = [_forward_collect(model, bundle, rng) for _ in range(s_count)]
    if task == "regression":
        means = np.stack([s[0] for s in samples])
        varis = np.stack([s[1] for s in samples])
        return means, varis
    return np.stack(samples)


def compute_metrics(task: str, preds, bundle: dict, resolved: dict) -> dict:
    if task == "regression":
        means, varis = preds
        mix_mean, mix_var = evalmod.predictive_regression(means, varis)
        return evalmod.metrics_regression(mix_mean, mix_var, bundle["test_toy"])
    mix = evalmod.predictive_classification(preds)
    if task == "tagging":
        labels = bundle["test"]["tags"][bundle["test"]["mask"]]
    else:
        labels = bundle["test"]["labels"]
    return evalmod.metrics_classification(mix, labels, n_bins=resolved["ece_bins"])


# -- the run operation ------------------------------------------------------------------


def run(cfg: ExperimentConfig) -> dict:
    """Train, evaluate, and persist one experiment; returns the report dict."""
    resolved = cfg.resolved()
    chash = config_hash(resolved)
    t0 = time.time()
    rng = np.random.default_rng(cfg.seed)
    bundle = load_dataset(resolved)
    mcfg = build_model_config(resolved, bundle)
    settings = train_settings(resolved)
    method = cfg.method

    model = TransformerModel(mcfg, rng)
    vstate = laplace_state = ensemble = None
    histories: list = []

    if method in ("mle", "concrete-dropout") or method in cfgmod.ATTENTION_METHODS:
        histories = train_mle(model, bundle["train"], settings, rng,
                              val_data=bundle["val"])
    elif method == "ensemble":
        members, hists, failures = fit_ensemble(
            lambda r: TransformerModel(mcfg, r), bundle["train"], settings,
            resolved["n_members"], cfg.seed, val_data=bundle["val"])
        ensemble, histories = members, hists[0] if hists else []
        if failures:
            histories = histories or []
    elif method in ("vi", "subnet-vi"):
        prior_spec = load_prior_spec(resolved)
        scope = "first-attention-layer" if method == "subnet-vi" else "all"
        warm = resolved["vi_warm_start_epochs"]
        if method == "subnet-vi" and warm == 0:
            warm = resolved["epochs"]
        vstate, histories = fit_vi(model, bundle["train"], settings, prior_spec,
                                   resolved["posterior"], rng, scope=scope,
                                   n_mc=resolved["n_mc"],
                                   init_sigma_factor=resolved["vi_init_sigma_factor"],
                                   warm_start_epochs=warm,
                                   dof=resolved["student_dof"],
                                   val_data=bundle["val"])
    elif method in ("laplace", "final-laplace"):
        histories = train_mle(model, bundle["train"], settings, rng,
                              val_data=bundle["val"])
        scope = "last-layer" if method == "final-laplace" else "all-diagonal"
        laplace_state = fit_laplace(model, bundle["train"], scope=scope,
                                    prior_precision=resolved["prior_precision"],
                                    max_items=resolved["laplace_max_items"])
    else:
        raise ContractError(f"unhandled method {method!r}")

    preds = collect_predictions(method, model, bundle, resolved, rng,
                                vstate=vstate, laplace_state=laplace_state,
                                ensemble=ensemble)
    metrics = compute_metrics(bundle["task"], preds, bundle, resolved)

    report = {
        "config": resolved,
        "config_hash": chash,
        "code_hash": code_hash(),
        "bayesformer_version": __version__,
        "seed": cfg.seed,
        "wall_time_s": time.time() - t0,
        "metrics": {k: v for k, v in metrics.items() if k != "ece_bins"},
        "curve": histories,
        "data_files": bundle.get("files", {}),
        "environment": {"python": platform.python_version(),
                        "numpy": np.__version__,
                        "platform": platform.platform()},
        "knobs": {"kl_anneal": resolved["kl_anneal"],
                  "n_posterior_samples": resolved["n_posterior_samples"],
                  "vi_warm_start_epochs": resolved["vi_warm_start_epochs"],
                  "posterior": resolved["posterior"]},
    }

    out_dir = Path(resolved["out_dir"]) / f"{cfg.dataset}_{method}_seed{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out_dir / "config.ini").write_text(config_to_ini(cfg))
    _write_metrics_csv(out_dir / "metrics.csv", report["metrics"])
    if "ece_bins" in metrics:
        _write_ece_csv(out_dir / "ece_bins.csv", metrics["ece_bins"])
    meta = {"config_hash": chash, "method": method, "dataset": cfg.dataset}
    save_container(out_dir / "model.bin", model.state_arrays(), meta)
    if vstate is not None:
        save_container(out_dir / "posterior.bin", vstate.state_arrays(),
                       {**meta, **vstate.meta()})
    if laplace_state is not None:
        save_container(out_dir / "laplace.bin",
                       {f"curvature/{k}": v for k, v in laplace_state.curvature.items()},
                       {**meta, "prior_precision": laplace_state.prior_precision,
                        "scope": laplace_state.scope})
    if ensemble is not None:
        for i, m in enumerate(ensemble):
            save_container(out_dir / f"member{i}.bin", m.state_arrays(), meta)
    return report


def _write_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in sorted(metrics.items()):
            w.writerow([k, v])


def _write_ece_csv(path, bins: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "lo", "hi", "count", "accuracy", "confidence"])
        for row in bins:
            w.writerow([row["bin"], row["lo"], row["hi"], row["count"],
                        row["accuracy"], row["confidence"]])


# -- report merging ------------------------------------------------------------------------

_METRIC_ROWS = {
    "m1": ["log_likelihood", "variance_mse", "mse"],
    "m2": ["log_likelihood", "variance_mse", "mse"],
    "pos": ["log_likelihood", "accuracy", "f1", "ece"],
    "mnist": ["log_likelihood", "accuracy", "f1", "ece"],
}


def merge_reports(run_dirs: list[Path], out_csv: Path) -> int:
    """Merge run reports into the table-shaped CSV: one row per
    dataset x metric, one column per method, cells mean +/- SE over seeds."""
    cells: dict[tuple, list[float]] = {}
    methods_seen: list[str] = []
    count = 0
    for root in run_dirs:
        for rp in sorted(Path(root).rglob("report.json")):
            rep = json.loads(rp.read_text())
            ds = rep["config"]["dataset"]
            method = rep["config"]["method"]
            if rep["config"].get("posterior", "gaussian") != "gaussian" and method == "vi":
                method = f"vi-{rep['config']['posterior']}"
            if method not in methods_seen:
                methods_seen.append(method)
            for metric in _METRIC_ROWS[ds]:
                if metric in rep["metrics"]:
                    cells.setdefault((ds, metric, method), []).append(
                        rep["metrics"][metric])
            count += 1
    ordered_methods = [m for m in METHODS if m in methods_seen]
    ordered_methods += [m for m in methods_seen if m not in ordered_methods]
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "metric"] + ordered_methods + ["n_seeds"])
        for ds in DATASETS:
            for metric in _METRIC_ROWS[ds]:
                row_vals = []
                n_seeds = 0
                any_present = False
                for m in ordered_methods:
                    vals = cells.get((ds, metric, m))
                    if vals:
                        any_present = True
                        mean = float(np.mean(vals))
                        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                        row_vals.append(f"{mean:.6g} ± {se:.2g}")
                        n_seeds = max(n_seeds, len(vals))
                    else:
                        row_vals.append("")
                if any_present:
                    w.writerow([ds, metric] + row_vals + [n_seeds])
    return count


# -- subcommands -----------------------------------------------------------------------------


def _cmd_generate_data(args) -> int:
    data_dir = args.out or cfgmod.ExperimentConfig(
        dataset=args.generator, method="mle").resolved()["data_dir"]
    path, wrote = ensure_toy_cache(data_dir, args.generator, args.n, args.length,
                                   args.seed)
    print(f"{'wrote' if wrote else 'unchanged (hash match)'} {path}")
    return 0


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        ds, _, method = args.preset.partition("/")
        cfg = preset(ds, method)
    else:
        raise ContractError("need --config or --preset dataset/method")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    report = run(cfg)
    summary = {k: round(v, 6) if isinstance(v, float) else v
               for k, v in report["metrics"].items() if not isinstance(v, list)}
    print(json.dumps({"dataset": cfg.dataset, "method": cfg.method,
                      "seed": cfg.seed, "metrics": summary}, indent=1))
    return 0


def _cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    report = json.loads((run_dir / "report.json").read_text())
    if args.config:
        cfg = parse_config(args.config)
        if config_hash(cfg.resolved()) != report["config_hash"]:
            raise ContractError(
                f"config hash mismatch: artifact {report['config_hash'][:12]} vs "
                f"given {config_hash(cfg.resolved())[:12]}")
    resolved = report["config"]
    rng = np.random.default_rng(resolved["seed"])
    bundle = load_dataset(resolved)
    mcfg = build_model_config(resolved, bundle)
    model = TransformerModel(mcfg, rng)
    arrays, meta = load_container(run_dir / "model.bin")
    if meta.get("config_hash") != report["config_hash"]:
        raise ContractError("model container does not match report config hash")
    model.load_state(arrays)
    method = resolved["method"]
    vstate = laplace_state = ensemble = None
    if method in ("vi", "subnet-vi"):
        parr, pmeta = load_container(run_dir / "posterior.bin")
        prior_spec = load_prior_spec(resolved)
        vstate = ws.VariationalState(model, pmeta["posterior_family"], prior_spec,
                                     scope=pmeta["scope"], dof=pmeta["dof"])
        for name in vstate.names:
            vstate.loc[name].data = parr[f"{name}.loc"].copy()
            vstate.rho[name].data = parr[f"{name}.rho"].copy()
    elif method in ("laplace", "final-laplace"):
        larr, lmeta = load_container(run_dir / "laplace.bin")
        curv = {k.split("/", 1)[1]: v for k, v in larr.items()}
        laplace_state = ws.LaplaceState(model.state_arrays(), curv,
                                        lmeta["prior_precision"], lmeta["scope"])
    elif method == "ensemble":
        ensemble = []
        for p in sorted(run_dir.glob("member*.bin")):
            arr, _ = load_container(p)
            m = TransformerModel(mcfg, np.random.default_rng(0))
            m.load_state(arr)
            ensemble.append(m)
    preds = collect_predictions(method, model, bundle, resolved, rng,
                                vstate=vstate, laplace_state=laplace_state,
                                ensemble=ensemble)
    metrics = compute_metrics(bundle["task"], preds, bundle, resolved)
    print(json.dumps({k: v for k, v in metrics.items() if k != "ece_bins"},
                     indent=1, sort_keys=True))
    return 0


def _make_study_model_factory(resolved: dict, bundle: dict):
    mcfg = build_model_config(resolved, bundle)
    return lambda rng: TransformerModel(mcfg, rng)


def _cmd_weight_study(args) -> int:
    cfg = preset(args.dataset, "mle")
    from dataclasses import replace
    cfg = replace(cfg, seed=args.seed, epochs=args.epochs, optimizer="sgd")
    resolved = cfg.resolved()
    bundle = load_dataset(resolved)
    settings = train_settings(resolved)
    settings.optimizer = "sgd"
    settings.sgd_lr = args.sgd_lr
    records = evalmod.weight_study(_make_study_model_factory(resolved, bundle),
                                   bundle["train"], settings, args.replicas,
                                   args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.json").write_text(
        json.dumps([r.to_json_dict() for r in records], indent=1))
    with open(out / "fits.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "family", "loc", "scale", "dof", "loglik",
                    "best", "excess_kurtosis", "n_pooled"])
        for rec in records:
            for fam, info in rec.fits.items():
                w.writerow([rec.layer, fam, info["loc"], info["scale"],
                            info["dof"], info["loglik"],
                            int(fam == rec.best_family), rec.excess_kurtosis,
                            rec.n_pooled])
    with open(out / "qq.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "family", "quantile", "theoretical", "empirical"])
        for rec in records:
            for fam, (theo, emp) in rec.qq.items():
                for j, (t, e) in enumerate(zip(theo, emp)):
                    w.writerow([rec.layer, fam, (j + 1) / (len(theo) + 1), t, e])
    with open(out / "cov_hist.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "bin_lo", "bin_hi", "count", "ref_count"])
        for rec in records:
            edges = rec.cov_hist["edges"]
            for j, (c, rc) in enumerate(zip(rec.cov_hist["counts"],
                                            rec.cov_hist["ref_counts"])):
                w.writerow([rec.layer, edges[j], edges[j + 1], c, rc])
    print(f"study of {args.replicas} replicas written to {out}")
    return 0


def _cmd_improved_priors(args) -> int:
    records_raw = json.loads(Path(args.study).read_text())
    records = []
    for r in records_raw:
        records.append(evalmod.WeightStudyRecord(
            layer=r["layer"], n_pooled=r["n_pooled"], fits=r["fits"],
            best_family=r["best_family"], excess_kurtosis=r["excess_kurtosis"],
            qq={k: (np.array(v[0]), np.array(v[1])) for k, v in r["qq"].items()},
            cov_hist=r["cov_hist"], modality=r["modality"],
            n_replicas=r["n_replicas"]))
    spec = evalmod.improved_prior_from_study(records)
    Path(args.out).write_text(spec.to_json())
    print(f"improved priors for {len(spec.entries)} tensors -> {args.out}")
    return 0


def _cmd_prior_entropy(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.dataset == "mnist":
        cfg = preset("mnist", "mle")
        resolved = cfg.resolved()
        bundle = load_dataset(resolved)
        images = bundle["train"]["images"][:args.batch]
    else:
        images, _ = generate_synthetic_images(args.batch, seed=args.seed)
    mode = AttentionMode.DETERMINISTIC
    attention_prior = False
    prior_spec = None
    if args.attention:
        mode = AttentionMode(args.attention)
        attention_prior = True
    elif args.prior_file:
        prior_spec = PriorSpec.from_json(Path(args.prior_file).read_text())
    else:
        prior_spec = PriorSpec(default_family=Family(args.prior_family))
    mcfg = mnist_config(mode=mode)
    model = TransformerModel(mcfg, np.random.default_rng(args.seed))
    draws = evalmod.prior_predictive_entropy(model, images, args.draws, rng,
                                             prior_spec=prior_spec,
                                             attention_prior=attention_prior)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["draw", "mean_entropy_nats"])
        for i, e in enumerate(draws):
            w.writerow([i, e])
    idx = np.argsort(draws)
    print(json.dumps({"mean": float(draws.mean()), "sd": float(draws.std(ddof=1)),
                      "uniform_bound": float(np.log(10.0)),
                      "top4_draws": [int(i) for i in idx[-4:][::-1]],
                      "bottom4_draws": [int(i) for i in idx[:4]]}))
    return 0


def _cmd_report(args) -> int:
    n = merge_reports([Path(p) for p in args.runs], Path(args.out))
    print(f"merged {n} runs -> {args.out}")
    return 0


def _cmd_presets(args) -> int:
    written = write_preset_files(args.out)
    print(f"wrote {len(written)} preset configs to {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="bayesformer",
                description="Bayesian-transformer experiment runner")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="generate and cache synthetic sequences")
    g.add_argument("generator", choices=["m1", "m2"])
    g.add_argument("--n", type=int, default=960)
    g.add_argument("--length", type=int, default=24)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default=None, help="data directory")
    g.set_defaults(func=_cmd_generate_data)

    t = sub.add_parser("train", help="run one experiment (train + evaluate + persist)")
    t.add_argument("--config", default=None)
    t.add_argument("--preset", default=None, metavar="DATASET/METHOD")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="re-evaluate a stored run")
    e.add_argument("--run", required=True)
    e.add_argument("--config", default=None)
    e.set_defaults(func=_cmd_evaluate)

    wst = sub.add_parser("weight-study", help="train SGD replicas and fit weight families")
    wst.add_argument("--dataset", choices=DATASETS, required=True)
    wst.add_argument("--replicas", type=int, default=30)
    wst.add_argument("--epochs", type=int, default=40)
    wst.add_argument("--sgd-lr", type=float, default=0.05)
    wst.add_argument("--seed", type=int, default=0)
    wst.add_argument("--out", required=True)
    wst.set_defaults(func=_cmd_weight_study)

    ip = sub.add_parser("improved-priors", help="derive per-tensor priors from a study")
    ip.add_argument("--study", required=True, help="records.json from weight-study")
    ip.add_argument("--out", required=True)
    ip.set_defaults(func=_cmd_improved_priors)

    pe = sub.add_parser("prior-entropy", help="prior-predictive entropy distribution")
    pe.add_argument("--dataset", choices=["mnist", "synthetic"], default="synthetic")
    pe.add_argument("--batch", type=int, default=1000)
    pe.add_argument("--draws", type=int, default=100)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--prior-family", default="gaussian")
    pe.add_argument("--prior-file", default=None)
    pe.add_argument("--attention", choices=["gaussian", "dirichlet"], default=None)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=_cmd_prior_entropy)

    r = sub.add_parser("report", help="merge run reports into a table-shaped CSV")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_report)

    pr = sub.add_parser("presets", help="write every preset config file")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=_cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        return _fail("divergence", str(e), snapshot=e.snapshot)
    except FileNotFoundError as e:
        return _fail("missing-file", str(e))
    except (ContractError, ValueError) as e:
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
