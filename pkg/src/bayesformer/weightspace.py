"""Weight-space Bayesian inference over model parameters: mean-field VI with
pluggable prior/posterior families, sub-network VI on the first attention
layer, diagonal-GGN linearized Laplace, concrete dropout, and deep ensembles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import batch_iter
from .distributions import Family, LocScale, box_muller, log_pdf_tensor, uniform_open
from .tensor import ContractError, NumericError, Tensor, no_grad, softmax
from .training import (Adam, TrainSettings, TrainingDiverged, anneal_factor,
                       batch_nll, effective_warmup, lr_schedule, train_mle,
                       _data_size, _take)
from .variational_attention import inverse_softplus

DEFAULT_STUDENT_DOF = 4.0


# -- priors ----------------------------------------------------------------------


@dataclass
class PriorSpec:
    """Per-tensor prior distributions with a shared fallback.

    The fallback is N(0, 1/hidden) per weight unless overridden; improved
    priors from the weight study populate `entries`.
    """

    entries: dict[str, LocScale] = field(default_factory=dict)
    default_family: Family = Family.GAUSSIAN
    default_loc: float = 0.0
    default_scale: float | None = None   # None -> hidden ** -0.5
    default_dof: float = DEFAULT_STUDENT_DOF

    def for_tensor(self, name: str, hidden: int) -> LocScale:
        if name in self.entries:
            return self.entries[name]
        scale = self.default_scale if self.default_scale is not None else hidden ** -0.5
        dof = self.default_dof if self.default_family == Family.STUDENT else None
        return LocScale(self.default_family, self.default_loc, scale, dof)

    def to_json(self) -> str:
        body = {
            "default": {"family": self.default_family.value, "loc": self.default_loc,
                        "scale": self.default_scale, "dof": self.default_dof},
            "entries": {k: {"family": v.family.value, "loc": v.loc,
                            "scale": v.scale, "dof": v.dof}
                        for k, v in self.entries.items()},
        }
        return json.dumps(body, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PriorSpec":
        body = json.loads(text)
        d = body.get("default", {})
        entries = {k: LocScale(Family(e["family"]), e["loc"], e["scale"], e.get("dof"))
                   for k, e in body.get("entries", {}).items()}
        return cls(entries=entries,
                   default_family=Family(d.get("family", "gaussian")),
                   default_loc=d.get("loc", 0.0),
                   default_scale=d.get("scale"),
                   default_dof=d.get("dof", DEFAULT_STUDENT_DOF))


# -- variational state -------------------------------------------------------------


class VariationalState:
    """Factorized loc-scale posterior per in-scope parameter tensor.

    Scales live through a softplus so they stay positive; sampling is
    reparameterized (loc + softplus(rho) * eps with eps a standard draw of the
    posterior family).
    """

    def __init__(self, model, posterior_family, prior_spec: PriorSpec,
                 scope: str = "all", init_sigma_factor: float = 0.01,
                 dof: float = DEFAULT_STUDENT_DOF):
        self.posterior_family = Family(posterior_family)
        self.scope = scope
        self.dof = dof
        hidden = model.cfg.hidden
        if scope == "all":
            names = list(model.params.keys())
        elif scope == "first-attention-layer":
            names = model.first_attention_tensor_names()
        else:
            raise ContractError(f"unknown VI scope {scope!r}")
        self.loc: dict[str, Tensor] = {}
        self.rho: dict[str, Tensor] = {}
        self.prior: dict[str, LocScale] = {}
        for name in names:
            base = model.params[name].data
            prior = prior_spec.for_tensor(name, hidden)
            sigma0 = init_sigma_factor * prior.scale
            self.loc[name] = Tensor(base.copy(), requires_grad=True)
            self.rho[name] = Tensor(np.full(base.shape, inverse_softplus(sigma0)),
                                    requires_grad=True)
            self.prior[name] = prior
        self._last_samples: dict[str, tuple[Tensor, Tensor]] | None = None

    @property
    def names(self) -> list[str]:
        return list(self.loc.keys())

    def n_weights(self) -> int:
        return sum(t.size for t in self.loc.values())

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for name in self.names:
            out[f"{name}.loc"] = self.loc[name]
            out[f"{name}.rho"] = self.rho[name]
        return out

    def _standard_eps(self, shape, rng: np.random.Generator) -> np.ndarray:
        fam = self.posterior_family
        if fam == Family.GAUSSIAN:
            return box_muller(rng, shape)
        helper = LocScale(fam, 0.0, 1.0,
                          self.dof if fam == Family.STUDENT else None)
        return helper._std_quantile(uniform_open(rng, shape))

    def sample_weights(self, rng: np.random.Generator) -> dict[str, Tensor]:
        """One reparameterized weight sample per tensor; the sample is kept so
        kl() can reuse it for the Monte Carlo estimator."""
        weights, stash = {}, {}
        for name in self.names:
            eps = self._standard_eps(self.loc[name].shape, rng)
            scale = self.rho[name].softplus()
            w = self.loc[name] + scale * Tensor(eps)
            weights[name] = w
            stash[name] = (w, scale)
        self._last_samples = stash
        return weights

    def kl(self) -> Tensor:
        """KL(q || p) summed over in-scope weights, as a Tensor.

        Analytic for a Gaussian posterior with a Gaussian prior; otherwise the
        single-sample Monte Carlo estimate on the weights from the last
        sample_weights() call.
        """
        total = Tensor(0.0)
        for name in self.names:
            prior = self.prior[name]
            loc, rho = self.loc[name], self.rho[name]
            scale = rho.softplus()
            if (self.posterior_family == Family.GAUSSIAN
                    and prior.family == Family.GAUSSIAN):
                d = loc - prior.loc
                term = (np.log(prior.scale) - scale.log()
                        + (scale * scale + d * d) * (1.0 / (2.0 * prior.scale ** 2))
                        - 0.5)
                total = total + term.sum()
            else:
                if self._last_samples is None or name not in self._last_samples:
                    raise ContractError("MC KL needs sample_weights() to run first")
                w, scale_s = self._last_samples[name]
                log_q = log_pdf_tensor(self.posterior_family, w, loc, scale_s,
                                       self.dof)
                log_p = log_pdf_tensor(prior.family, w, prior.loc, prior.scale,
                                       prior.dof)
                total = total + (log_q - log_p).sum()
        return total

    def mean_weights(self) -> dict[str, Tensor]:
        return {name: self.loc[name] for name in self.names}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.names:
            out[f"{name}.loc"] = self.loc[name].data.copy()
            out[f"{name}.rho"] = self.rho[name].data.copy()
        return out

    def meta(self) -> dict:
        return {"posterior_family": self.posterior_family.value,
                "scope": self.scope, "dof": self.dof,
                "priors": {k: {"family": v.family.value, "loc": v.loc,
                               "scale": v.scale, "dof": v.dof}
                           for k, v in self.prior.items()}}


# -- ELBO / VI fitting --------------------------------------------------------------


def elbo_parts(model, vstate: VariationalState, batch: dict, n_train: int,
               rng: np.random.Generator, n_mc: int = 1):
    """(-scaled log-likelihood, weight KL, scaled attention KL) as Tensors."""
    if n_mc < 1:
        raise ContractError("elbo needs n_mc >= 1")
    bsz = _data_size(batch)
    data_terms = None
    kl_terms = None
    attn_terms = None
    for _ in range(n_mc):
        weights = vstate.sample_weights(rng)
        nll_mean, out = batch_nll(model, batch, rng=rng, weights=weights)
        d = nll_mean * float(bsz) * (n_train / bsz)
        k = vstate.kl()
        a = out.attn_kl * (n_train / bsz)
        data_terms = d if data_terms is None else data_terms + d
        kl_terms = k if kl_terms is None else kl_terms + k
        attn_terms = a if attn_terms is None else attn_terms + a
    inv = 1.0 / n_mc
    return data_terms * inv, kl_terms * inv, attn_terms * inv


def elbo(model, vstate: VariationalState, batch: dict, n_train: int,
         rng: np.random.Generator, n_mc: int = 1):
    """Negative ELBO: n/b-scaled batch NLL plus KL(q || p) (plus any attention
    KL at the same scaling). Returns (loss Tensor, kl value)."""
    data_term, kl_term, attn_term = elbo_parts(model, vstate, batch, n_train, rng, n_mc)
    loss = data_term + kl_term + attn_term
    return loss, float(kl_term.data)


def fit_vi(model, train_data: dict, settings: TrainSettings,
           prior_spec: PriorSpec, posterior_family, rng: np.random.Generator,
           scope: str = "all", n_mc: int = 1, init_sigma_factor: float = 0.01,
           warm_start_epochs: int = 0, dof: float = DEFAULT_STUDENT_DOF,
           val_data: dict | None = None):
    """Adam on the (annealed) negative ELBO with the triangular schedule.

    A deterministic warm-up (warm_start_epochs > 0) trains the model by MLE
    first; posterior locs start from the model's current weights either way,
    and out-of-scope tensors stay exactly at those trained values.
    """
    if warm_start_epochs > 0:
        warm = TrainSettings(epochs=warm_start_epochs, batch_size=settings.batch_size,
                             base_lr=settings.base_lr, warmup=settings.warmup)
        train_mle(model, train_data, warm, rng)
    vstate = VariationalState(model, posterior_family, prior_spec, scope=scope,
                              init_sigma_factor=init_sigma_factor, dof=dof)
    n = _data_size(train_data)
    steps_per_epoch = math.ceil(n / settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    warmup = effective_warmup(total_steps, settings.warmup)
    opt = Adam(vstate.trainable())

    history = []
    step = 0
    for epoch in range(settings.epochs):
        epoch_loss = 0.0
        epoch_kl = 0.0
        for idx in batch_iter(n, settings.batch_size, shuffle_seed=rng.integers(2**63)):
            step += 1
            batch = _take(train_data, idx)
            lr = lr_schedule(step, model.cfg.hidden, warmup, settings.base_lr)
            try:
                data_term, kl_term, attn_term = elbo_parts(
                    model, vstate, batch, n, rng, n_mc)
                a = anneal_factor(step, total_steps, settings)
                loss = (data_term + (kl_term + attn_term) * a) * (1.0 / n)
                opt.zero_grad()
                loss.backward()
            except NumericError as e:
                raise TrainingDiverged(
                    f"non-finite ELBO: {e}",
                    {"epoch": epoch, "step": step, "lr": lr, "scope": scope},
                ) from e
            opt.step(lr)
            epoch_loss += loss.item()
            epoch_kl += float(kl_term.data)
        rec = {"epoch": epoch, "train_loss": epoch_loss / steps_per_epoch,
               "kl": epoch_kl / steps_per_epoch}
        if val_data is not None:
            rec["val_nll"] = _vi_val_nll(model, vstate, val_data, rng)
        history.append(rec)
    return vstate, history


def _vi_val_nll(model, vstate, data: dict, rng, batch_size: int = 256) -> float:
    n = _data_size(data)
    total = 0.0
    with no_grad():
        for idx in batch_iter(n, batch_size):
            batch = _take(data, idx)
            weights = vstate.sample_weights(rng)
            nll, _ = batch_nll(model, batch, rng=rng, weights=weights)
            total += nll.item() * len(idx)
    return total / n


# -- linearized Laplace ---------------------------------------------------------------


@dataclass
class LaplaceState:
    map_arrays: dict[str, np.ndarray]
    curvature: dict[str, np.ndarray]
    prior_precision: float
    scope: str
    clamp_count: int = 0

    def posterior_var(self) -> dict[str, np.ndarray]:
        return {k: 1.0 / (c + self.prior_precision) for k, c in self.curvature.items()}


def laplace_scope_names(model, scope: str) -> list[str]:
    if scope == "last-layer":
        return [n for n in model.params if n.startswith("head.")]
    if scope == "all-diagonal":
        return list(model.params.keys())
    raise ContractError(f"unknown Laplace scope {scope!r}")


def _output_jacobians(model, item_batch: dict, names: list[str]):
    """Per-output Jacobian rows w.r.t. the named tensors for one data item.

    Returns (kind, aux, rows) where rows[j] maps name -> grad array and aux
    carries the forward values the Fisher weights need.
    """
    task = model.cfg.task
    leaves = [model.params[n] for n in names]

    def collect():
        row = {}
        for n, t in zip(names, leaves):
            row[n] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        return row

    if task == "regression":
        values = item_batch["values"]
        out = model.forward(values[:, :-1])
        start = 4
        length = out.primary.shape[1]
        rows = []
        for t in range(start, length):
            for node, sel in ((out.primary, t), (out.variance, t)):
                node_graph = node  # shared graph
                node_graph.zero_graph_grads()
                seed = np.zeros(node.shape)
                seed[0, sel] = 1.0
                node.backward(seed)
                rows.append(collect())
        aux = {"mean": out.primary.data[0, start:].copy(),
               "var": out.variance.data[0, start:].copy()}
        return "regression", aux, rows

    if task == "tagging":
        out = model.forward(item_batch["ids"], pad_mask=item_batch["mask"])
        logits = out.primary
        valid_pos = np.flatnonzero(item_batch["mask"][0])
        n_classes = logits.shape[-1]
        rows = []
        for tpos in valid_pos:
            for c in range(n_classes):
                logits.zero_graph_grads()
                seed = np.zeros(logits.shape)
                seed[0, tpos, c] = 1.0
                logits.backward(seed)
                rows.append(collect())
        probs = softmax(Tensor(logits.data[0, valid_pos]), axis=-1).data
        return "classification", {"probs": probs}, rows

    out = model.forward(item_batch["images"])
    logits = out.primary
    n_classes = logits.shape[-1]
    rows = []
    for c in range(n_classes):
        logits.zero_graph_grads()
        seed = np.zeros(logits.shape)
        seed[0, c] = 1.0
        logits.backward(seed)
        rows.append(collect())
    probs = softmax(Tensor(logits.data[0]), axis=-1).data
    return "classification", {"probs": probs}, rows


def fit_laplace(model, data: dict, scope: str = "last-layer",
                prior_precision: float = 1.0, max_items: int | None = None) -> LaplaceState:
    """Diagonal generalized Gauss-Newton accumulated over the dataset.

    Classification uses the softmax Hessian diag(p) - p p^T; the
    heteroscedastic Gaussian head uses the output-distribution Fisher
    (1/sigma^2 for the mean output, 1/(2 sigma^4) for the variance output).
    """
    names = laplace_scope_names(model, scope)
    curv = {n: np.zeros_like(model.params[n].data) for n in names}
    clamps = 0
    n = _data_size(data)
    limit = n if max_items is None else min(n, max_items)
    for i in range(limit):
        item = _take(data, np.array([i]))
        kind, aux, rows = _output_jacobians(model, item, names)
        if kind == "regression":
            var = aux["var"]
            n_pos = len(var)
            for t in range(n_pos):
                jm = rows[2 * t]
                jv = rows[2 * t + 1]
                for name in names:
                    curv[name] += jm[name] ** 2 / var[t]
                    curv[name] += jv[name] ** 2 / (2.0 * var[t] ** 2)
        else:
            probs = aux["probs"]
            if probs.ndim == 1:
                probs = probs[None, :]
            n_groups, n_classes = probs.shape
            for g in range(n_groups):
                p = probs[g]
                group = rows[g * n_classes:(g + 1) * n_classes]
                for name in names:
                    stack = np.stack([r[name] for r in group])
                    w = p.reshape((-1,) + (1,) * (stack.ndim - 1))
                    first = (w * stack ** 2).sum(axis=0)
                    second = (w * stack).sum(axis=0) ** 2
                    contrib = first - second
                    neg = contrib < 0
                    if np.any(neg):
                        clamps += int(np.count_nonzero(neg))
                        contrib = np.maximum(contrib, 0.0)
                    curv[name] += contrib
    return LaplaceState({k: v.data.copy() for k, v in model.params.items()},
                        curv, prior_precision, scope, clamps)


def laplace_predictive(model, state: LaplaceState, data: dict, n_samples: int,
                       rng: np.random.Generator, max_items: int | None = None):
    """Linearized predictive: perturb in-scope weights from the diagonal
    Gaussian posterior and propagate through the per-item Jacobian at MAP.

    Returns (S, n, ...) prediction arrays: class probabilities, or a
    (means, variances) pair for regression.
    """
    names = list(state.curvature.keys())
    std = {k: np.sqrt(v) for k, v in state.posterior_var().items()}
    n = _data_size(data)
    limit = n if max_items is None else min(n, max_items)
    deltas = [{k: rng.standard_normal(std[k].shape) * std[k] for k in names}
              for _ in range(n_samples)]
    task = model.cfg.task
    out_means, out_vars, out_probs = [], [], []
    for i in range(limit):
        item = _take(data, np.array([i]))
        kind, aux, rows = _output_jacobians(model, item, names)
        if kind == "regression":
            n_pos = len(aux["mean"])
            jm = np.stack([np.concatenate([rows[2 * t][k].ravel() for k in names])
                           for t in range(n_pos)])
            jv = np.stack([np.concatenate([rows[2 * t + 1][k].ravel() for k in names])
                           for t in range(n_pos)])
            m_s, v_s = [], []
            for d in deltas:
                dv = np.concatenate([d[k].ravel() for k in names])
                m_s.append(aux["mean"] + jm @ dv)
                v_s.append(np.maximum(aux["var"] + jv @ dv, model.cfg.head_var_floor))
            out_means.append(np.stack(m_s))
            out_vars.append(np.stack(v_s))
        else:
            probs = aux["probs"]
            if probs.ndim == 1:
                probs = probs[None, :]
            n_groups, n_classes = probs.shape
            logits0 = np.log(np.maximum(probs, 1e-300))
            jrows = np.stack([np.concatenate([r[k].ravel() for k in names])
                              for r in rows])
            jrows = jrows.reshape(n_groups, n_classes, -1)
            p_s = []
            for d in deltas:
                dv = np.concatenate([d[k].ravel() for k in names])
                logits = logits0 + jrows @ dv
                e = np.exp(logits - logits.max(axis=-1, keepdims=True))
                p_s.append(e / e.sum(axis=-1, keepdims=True))
            out_probs.append(np.stack(p_s))
    if task == "regression":
        return np.stack(out_means, axis=1), np.stack(out_vars, axis=1)
    probs = np.stack(out_probs, axis=1)  # (S, n_items, groups, C)
    if probs.shape[2] == 1:
        probs = probs[:, :, 0, :]
    return probs


# -- concrete dropout -------------------------------------------------------------------


@dataclass
class ConcreteDropoutState:
    rho: Tensor
    temperature: float = 0.1
    weight_reg: float = 1e-6
    dropout_reg: float = 1e-5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")
        if not isinstance(self.rho, Tensor):
            self.rho = Tensor(np.asarray(self.rho, dtype=np.float64), requires_grad=True)

    @property
    def p(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.rho.data)))


def concrete_mask(x: Tensor, rho: Tensor, temperature: float,
                  rng: np.random.Generator) -> Tensor:
    """Relaxed-Bernoulli dropout: keep-scale output x * (1 - z) / (1 - p)."""
    eps = 1e-7
    u = rng.random(x.shape)
    p = rho.sigmoid()
    logit_u = np.log(u + eps) - np.log(1.0 - u + eps)
    z = (((p + eps).log() - (1.0 - p + eps).log()) + logit_u) * (1.0 / temperature)
    z = z.sigmoid()
    return x * (1.0 - z) / (1.0 - p)


def concrete_regularizer(rho: Tensor, layer_weight: Tensor | None, input_dim: int,
                         weight_reg: float, dropout_reg: float) -> Tensor:
    """Weight-L2 shrunk by the keep probability plus the dropout entropy term."""
    eps = 1e-7
    p = rho.sigmoid()
    reg = Tensor(0.0)
    if layer_weight is not None:
        reg = reg + weight_reg * (layer_weight * layer_weight).sum() / (1.0 - p)
    entropy = p * (p + eps).log() + (1.0 - p) * (1.0 - p + eps).log()
    return reg + dropout_reg * input_dim * entropy


def concrete_dropout_forward(x: Tensor, state: ConcreteDropoutState,
                             rng: np.random.Generator,
                             layer_weight: Tensor | None = None):
    """Masked activations plus the layer's regularizer contribution."""
    out = concrete_mask(x, state.rho, state.temperature, rng)
    input_dim = x.shape[-1] if x.ndim else 1
    reg = concrete_regularizer(state.rho, layer_weight, input_dim,
                               state.weight_reg, state.dropout_reg)
    return out, reg


# -- deep ensembles -----------------------------------------------------------------------


def fit_ensemble(make_model, train_data: dict, settings: TrainSettings,
                 n_members: int, seed: int, val_data: dict | None = None):
    """Independently seeded MLE members; divergent members are dropped (and
    reported) rather than failing the ensemble."""
    if n_members < 1:
        raise ContractError("ensemble needs n_members >= 1")
    models, histories, failures = [], [], []
    for k in range(n_members):
        rng = np.random.default_rng(seed + k)
        model = make_model(rng)
        try:
            hist = train_mle(model, train_data, settings, rng, val_data=val_data)
        except TrainingDiverged as e:
            failures.append({"member": k, "seed": seed + k, "snapshot": e.snapshot})
            continue
        models.append(model)
        histories.append(hist)
    if not models:
        raise TrainingDiverged("every ensemble member diverged", {"failures": failures})
    return models, histories, failures
