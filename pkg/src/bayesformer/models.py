"""Small transformers with pluggable attention: a causal sequence regressor
for the synthetic data, a token tagger, and a patch-based image classifier.

One parameter dict per model, keyed by dotted names, so posteriors, Laplace
curvature, the weight study, and serialization all address tensors uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .tensor import (NEG_INF, ContractError, Tensor, concat, embedding, gelu,
                     layer_norm, masked_fill, softmax)
from .variational_attention import (Amortizer, dirichlet_rows, gaussian_logit_rows,
                                    inverse_softplus)


class AttentionMode(str, Enum):
    DETERMINISTIC = "deterministic"
    GAUSSIAN = "gaussian"
    GAUSSIAN_DD = "gaussian-dd"
    DIRICHLET = "dirichlet"
    DIRICHLET_DD = "dirichlet-dd"


STOCHASTIC_MODES = {AttentionMode.GAUSSIAN, AttentionMode.GAUSSIAN_DD,
                    AttentionMode.DIRICHLET, AttentionMode.DIRICHLET_DD}


@dataclass
class ModelConfig:
    task: str  # regression | tagging | classification
    n_blocks: int = 1
    n_heads: int = 1
    hidden: int = 64
    max_len: int = 28
    patch_size: int | None = None
    vocab_size: int | None = None
    n_classes: int | None = None
    mlp_ratio: int = 4
    attention_mode: AttentionMode = AttentionMode.DETERMINISTIC
    attn_prior_sharpness: float = 10.0
    attn_init_sharpness: float = 10.0
    attn_init_log_var: float = 0.0
    layer_norm_eps: float = 1e-5
    head_var_floor: float = 1e-6
    concrete_dropout: bool = False
    cd_init_p: float = 0.1
    cd_temperature: float = 0.1
    cd_weight_reg: float = 1e-6
    cd_dropout_reg: float = 1e-5

    def __post_init__(self):
        self.attention_mode = AttentionMode(self.attention_mode)
        if self.n_blocks < 1 or self.n_heads < 1:
            raise ContractError("need at least one block and one head")
        if self.hidden % self.n_heads != 0:
            raise ContractError("hidden must be divisible by n_heads")
        if self.task not in ("regression", "tagging", "classification"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.task == "tagging" and (self.vocab_size is None or self.n_classes is None):
            raise ContractError("tagging needs vocab_size and n_classes")
        if self.task == "classification" and (self.patch_size is None or self.n_classes is None):
            raise ContractError("classification needs patch_size and n_classes")

    def with_mode(self, mode) -> "ModelConfig":
        return replace(self, attention_mode=AttentionMode(mode))


def toy_config(mode=AttentionMode.DETERMINISTIC, **kw) -> ModelConfig:
    return ModelConfig(task="regression", n_blocks=1, n_heads=1, hidden=64,
                       max_len=28, attention_mode=mode, **kw)


def pos_config(vocab_size: int, n_classes: int,
               mode=AttentionMode.DETERMINISTIC, **kw) -> ModelConfig:
    return ModelConfig(task="tagging", n_blocks=1, n_heads=1, hidden=32,
                       max_len=40, vocab_size=vocab_size, n_classes=n_classes,
                       attention_mode=mode, **kw)


def mnist_config(mode=AttentionMode.DETERMINISTIC, **kw) -> ModelConfig:
    # 49 patches + class token
    return ModelConfig(task="classification", n_blocks=2, n_heads=1, hidden=32,
                       max_len=50, patch_size=4, n_classes=10,
                       attention_mode=mode, **kw)


@dataclass
class ModelOutput:
    primary: Tensor                  # regression mean / logits
    variance: Tensor | None          # regression only
    attn_kl: Tensor                  # scalar; 0 in deterministic mode
    cd_reg: Tensor | None = None     # concrete-dropout regularizer


def sinusoidal_positions(n_positions: int, hidden: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(hidden)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / hidden)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split square images into row-major patches, pixels row-major inside
    each patch. Accepts (side, side) or (batch, side, side)."""
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ContractError("patchify expects square images")
    side = arr.shape[1]
    if patch <= 0 or side % patch != 0:
        raise ContractError(f"image side {side} not divisible by patch {patch}")
    g = side // patch
    out = (arr.reshape(arr.shape[0], g, patch, g, patch)
           .transpose(0, 1, 3, 2, 4)
           .reshape(arr.shape[0], g * g, patch * patch))
    return out[0] if single else out


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


class TransformerModel:
    """Post-norm transformer encoder with task-specific embedding and head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.amortizers: dict[int, Amortizer] = {}
        h = cfg.hidden

        def linear(name, fan_in, fan_out, zero=False):
            std = fan_in ** -0.5
            w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, std, size=(fan_in, fan_out))
            self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        if cfg.task == "regression":
            linear("embed", 1, h)
        elif cfg.task == "tagging":
            self.params["embed.table"] = Tensor(
                rng.normal(0.0, h ** -0.5, size=(cfg.vocab_size, h)), requires_grad=True)
        else:
            linear("embed", cfg.patch_size ** 2, h)
            self.params["embed.pos"] = Tensor(
                rng.normal(0.0, 0.02, size=(cfg.max_len, h)), requires_grad=True)
            self.params["embed.cls"] = Tensor(np.zeros(h), requires_grad=True)

        for i in range(cfg.n_blocks):
            p = f"block{i}"
            for proj in ("wq", "wk", "wv", "wo"):
                std = h ** -0.5
                self.params[f"{p}.attn.{proj}"] = Tensor(
                    rng.normal(0.0, std, size=(h, h)), requires_grad=True)
                self.params[f"{p}.attn.{proj[1]}b"] = Tensor(np.zeros(h), requires_grad=True)
            mode = cfg.attention_mode
            if mode == AttentionMode.GAUSSIAN:
                self.params[f"{p}.attn.log_var"] = Tensor(
                    np.asarray(cfg.attn_init_log_var), requires_grad=True)
            elif mode == AttentionMode.DIRICHLET:
                self.params[f"{p}.attn.sharp_rho"] = Tensor(
                    np.asarray(inverse_softplus(cfg.attn_init_sharpness)), requires_grad=True)
            elif mode in (AttentionMode.GAUSSIAN_DD, AttentionMode.DIRICHLET_DD):
                out_dim = cfg.max_len if mode == AttentionMode.GAUSSIAN_DD else 1
                bias = (cfg.attn_init_log_var if mode == AttentionMode.GAUSSIAN_DD
                        else inverse_softplus(cfg.attn_init_sharpness))
                amort = Amortizer(h, out_dim, rng, out_bias=bias)
                self.amortizers[i] = amort
                self.params.update(amort.params(f"{p}.attn.amort"))
            self.params[f"{p}.ln1.g"] = Tensor(np.ones(h), requires_grad=True)
            self.params[f"{p}.ln1.b"] = Tensor(np.zeros(h), requires_grad=True)
            self.params[f"{p}.ln2.g"] = Tensor(np.ones(h), requires_grad=True)
            self.params[f"{p}.ln2.b"] = Tensor(np.zeros(h), requires_grad=True)
            linear(f"{p}.mlp.fc1", h, h * cfg.mlp_ratio)
            linear(f"{p}.mlp.fc2", h * cfg.mlp_ratio, h)
            if cfg.concrete_dropout:
                self.params[f"{p}.cd_attn.rho"] = Tensor(
                    np.asarray(_logit(cfg.cd_init_p)), requires_grad=True)
                self.params[f"{p}.cd_mlp.rho"] = Tensor(
                    np.asarray(_logit(cfg.cd_init_p)), requires_grad=True)

        if cfg.task == "regression":
            linear("head.mean", h, 1)
            linear("head.var", h, 1)
        else:
            linear("head.out", h, cfg.n_classes)
        if cfg.concrete_dropout:
            self.params["head.cd.rho"] = Tensor(
                np.asarray(_logit(cfg.cd_init_p)), requires_grad=True)

        if cfg.task != "classification":
            self._pe = Tensor(sinusoidal_positions(cfg.max_len, h))

    # -- parameter access ----------------------------------------------------

    def _p(self, name: str, weights: dict | None) -> Tensor:
        if weights is not None and name in weights:
            return weights[name]
        return self.params[name]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in arrays:
                raise ContractError(f"missing tensor {k!r} in state")
            if tuple(arrays[k].shape) != v.shape:
                raise ContractError(f"shape mismatch for {k!r}")
            v.data = np.asarray(arrays[k], dtype=np.float64).copy()

    def first_attention_tensor_names(self) -> list[str]:
        return [f"block0.attn.{n}" for n in
                ("wq", "qb", "wk", "kb", "wv", "vb", "wo", "ob")]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward pieces --------------------------------------------------------

    def _concrete_mask(self, x: Tensor, rho: Tensor, rng: np.random.Generator) -> Tensor:
        from .weightspace import concrete_mask
        return concrete_mask(x, rho, self.cfg.cd_temperature, rng)

    def _cd_regularizer(self, rho: Tensor, weight: Tensor, input_dim: int) -> Tensor:
        from .weightspace import concrete_regularizer
        return concrete_regularizer(rho, weight, input_dim,
                                    self.cfg.cd_weight_reg, self.cfg.cd_dropout_reg)

    def _attention(self, i: int, x: Tensor, valid: np.ndarray,
                   rng: np.random.Generator | None, weights: dict | None,
                   prior_draw: bool, sampler=None):
        cfg = self.cfg
        p = f"block{i}"
        nh, dh = cfg.n_heads, cfg.hidden // cfg.n_heads
        b, length = x.shape[0], x.shape[1]

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, length, nh, dh).swapaxes(1, 2)

        q = split(x @ self._p(f"{p}.attn.wq", weights) + self._p(f"{p}.attn.qb", weights))
        k = split(x @ self._p(f"{p}.attn.wk", weights) + self._p(f"{p}.attn.kb", weights))
        v = split(x @ self._p(f"{p}.attn.wv", weights) + self._p(f"{p}.attn.vb", weights))
        logits = (q @ k.swapaxes(-1, -2)) * (dh ** -0.5)  # (b, nh, L, L)

        valid4 = np.broadcast_to(valid, logits.shape)
        if not np.all(valid4.any(axis=-1)):
            raise ContractError("attention row with every key position masked")

        mode = cfg.attention_mode
        kl = Tensor(0.0)
        if mode == AttentionMode.DETERMINISTIC:
            attn = softmax(masked_fill(logits, ~valid4, NEG_INF), axis=-1)
        elif mode in (AttentionMode.GAUSSIAN, AttentionMode.GAUSSIAN_DD):
            if mode == AttentionMode.GAUSSIAN:
                log_var = self._p(f"{p}.attn.log_var", weights)
            else:
                amort_out = self.amortizers[i](x, weights, f"{p}.attn.amort")
                if length != cfg.max_len:
                    raise ContractError("DD attention requires full-length input")
                log_var = amort_out.reshape(b, 1, length, cfg.max_len)
            attn, kl = gaussian_logit_rows(logits, log_var, valid4, rng,
                                           prior_draw=prior_draw)
        else:
            base = softmax(masked_fill(logits, ~valid4, NEG_INF), axis=-1)
            if prior_draw:
                sharp = Tensor(cfg.attn_prior_sharpness)
            elif mode == AttentionMode.DIRICHLET:
                sharp = self._p(f"{p}.attn.sharp_rho", weights).softplus()
            else:
                amort_out = self.amortizers[i](x, weights, f"{p}.attn.amort").softplus()
                sharp = amort_out.reshape(b, 1, length, 1)
            attn, kl = dirichlet_rows(base, sharp, cfg.attn_prior_sharpness,
                                      valid4, rng, sampler=sampler)

        out = (attn @ v).swapaxes(1, 2).reshape(b, length, cfg.hidden)
        out = out @ self._p(f"{p}.attn.wo", weights) + self._p(f"{p}.attn.ob", weights)
        return out, kl

    def _encode(self, x: Tensor, valid: np.ndarray, rng, weights, prior_draw,
                sampler=None, cd_rng=None):
        cfg = self.cfg
        attn_kl = Tensor(0.0)
        cd_reg = Tensor(0.0) if cfg.concrete_dropout else None
        for i in range(cfg.n_blocks):
            p = f"block{i}"
            a, kl = self._attention(i, x, valid, rng, weights, prior_draw, sampler)
            attn_kl = attn_kl + kl
            if cfg.concrete_dropout and cd_rng is not None:
                rho = self._p(f"{p}.cd_attn.rho", weights)
                a = self._concrete_mask(a, rho, cd_rng)
                cd_reg = cd_reg + self._cd_regularizer(
                    rho, self._p(f"{p}.attn.wo", weights), cfg.hidden)
            x = layer_norm(x + a, self._p(f"{p}.ln1.g", weights),
                           self._p(f"{p}.ln1.b", weights), cfg.layer_norm_eps)
            hmid = gelu(x @ self._p(f"{p}.mlp.fc1.w", weights)
                        + self._p(f"{p}.mlp.fc1.b", weights))
            if cfg.concrete_dropout and cd_rng is not None:
                rho = self._p(f"{p}.cd_mlp.rho", weights)
                hmid = self._concrete_mask(hmid, rho, cd_rng)
                cd_reg = cd_reg + self._cd_regularizer(
                    rho, self._p(f"{p}.mlp.fc2.w", weights), cfg.hidden * cfg.mlp_ratio)
            m = hmid @ self._p(f"{p}.mlp.fc2.w", weights) + self._p(f"{p}.mlp.fc2.b", weights)
            x = layer_norm(x + m, self._p(f"{p}.ln2.g", weights),
                           self._p(f"{p}.ln2.b", weights), cfg.layer_norm_eps)
        return x, attn_kl, cd_reg

    # -- task forwards -----------------------------------------------------------

    def forward(self, inputs: np.ndarray, pad_mask: np.ndarray | None = None,
                rng: np.random.Generator | None = None,
                weights: dict | None = None, prior_draw: bool = False,
                sampler=None, cd_rng=None) -> ModelOutput:
        cfg = self.cfg
        if cfg.attention_mode in STOCHASTIC_MODES and rng is None:
            raise ContractError("stochastic attention requires an rng")
        if cfg.task == "regression":
            return self._forward_regression(inputs, rng, weights, prior_draw, sampler, cd_rng)
        if cfg.task == "tagging":
            return self._forward_tagging(inputs, pad_mask, rng, weights, prior_draw, sampler, cd_rng)
        return self._forward_classification(inputs, rng, weights, prior_draw, sampler, cd_rng)

    def _head_cd(self, h: Tensor, weights, cd_rng, cd_reg, head_w_name: str):
        if self.cfg.concrete_dropout and cd_rng is not None:
            rho = self._p("head.cd.rho", weights)
            h = self._concrete_mask(h, rho, cd_rng)
            cd_reg = cd_reg + self._cd_regularizer(
                rho, self._p(head_w_name, weights), self.cfg.hidden)
        return h, cd_reg

    def _forward_regression(self, values, rng, weights, prior_draw, sampler, cd_rng):
        cfg = self.cfg
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] > cfg.max_len:
            raise ContractError(f"regression input must be (batch, <= {cfg.max_len})")
        b, length = values.shape
        x = Tensor(values[:, :, None])
        x = x @ self._p("embed.w", weights) + self._p("embed.b", weights)
        x = x + Tensor(self._pe.data[:length])
        valid = causal_mask(length)
        h, attn_kl, cd_reg = self._encode(x, valid, rng, weights, prior_draw, sampler, cd_rng)
        h, cd_reg = self._head_cd(h, weights, cd_rng, cd_reg, "head.mean.w")
        mean = (h @ self._p("head.mean.w", weights)
                + self._p("head.mean.b", weights)).reshape(b, length)
        var_pre = (h @ self._p("head.var.w", weights)
                   + self._p("head.var.b", weights)).reshape(b, length)
        var = var_pre.softplus() + cfg.head_var_floor
        return ModelOutput(mean, var, attn_kl, cd_reg)

    def _forward_tagging(self, ids, pad_mask, rng, weights, prior_draw, sampler, cd_rng):
        cfg = self.cfg
        ids = np.asarray(ids)
        if pad_mask is None:
            pad_mask = np.ones(ids.shape, dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        b, length = ids.shape
        x = embedding(self._p("embed.table", weights), ids)
        x = x + Tensor(self._pe.data[:length])
        valid = pad_mask[:, None, None, :]
        h, attn_kl, cd_reg = self._encode(x, valid, rng, weights, prior_draw, sampler, cd_rng)
        h, cd_reg = self._head_cd(h, weights, cd_rng, cd_reg, "head.out.w")
        logits = h @ self._p("head.out.w", weights) + self._p("head.out.b", weights)
        return ModelOutput(logits, None, attn_kl, cd_reg)

    def _forward_classification(self, images, rng, weights, prior_draw, sampler, cd_rng):
        cfg = self.cfg
        patches = patchify(images, cfg.patch_size)
        if patches.ndim == 2:
            patches = patches[None]
        b = patches.shape[0]
        x = Tensor(patches) @ self._p("embed.w", weights) + self._p("embed.b", weights)
        cls = self._p("embed.cls", weights).reshape(1, 1, cfg.hidden).broadcast_to(
            (b, 1, cfg.hidden))
        x = concat([cls, x], axis=1)
        x = x + self._p("embed.pos", weights)
        valid = np.ones((x.shape[1], x.shape[1]), dtype=bool)
        h, attn_kl, cd_reg = self._encode(x, valid, rng, weights, prior_draw, sampler, cd_rng)
        h0 = h[:, 0]
        h0, cd_reg = self._head_cd(h0, weights, cd_rng, cd_reg, "head.out.w")
        logits = h0 @ self._p("head.out.w", weights) + self._p("head.out.b", weights)
        return ModelOutput(logits, None, attn_kl, cd_reg)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray,
                         mode=AttentionMode.DETERMINISTIC,
                         rng: np.random.Generator | None = None,
                         log_var=0.0, sharpness=10.0, prior_sharpness=10.0,
                         sampler=None):
    """Single-head attention over (L, d) tensors; `mask` marks valid keys.

    Deterministic mode returns softmax(q k^T / sqrt(d)) v; stochastic modes
    sample row distributions and also return their KL (otherwise 0).
    """
    mode = AttentionMode(mode)
    d = q.shape[-1]
    logits = (q @ k.swapaxes(-1, -2)) * (d ** -0.5)
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(valid.any(axis=-1)):
        raise ContractError("attention row with every key position masked")
    if mode == AttentionMode.DETERMINISTIC:
        attn = softmax(masked_fill(logits, ~valid, NEG_INF), axis=-1)
        return attn @ v, Tensor(0.0)
    if mode in (AttentionMode.GAUSSIAN, AttentionMode.GAUSSIAN_DD):
        attn, kl = gaussian_logit_rows(logits, log_var, valid, rng)
        return attn @ v, kl
    base = softmax(masked_fill(logits, ~valid, NEG_INF), axis=-1)
    attn, kl = dirichlet_rows(base, sharpness, prior_sharpness, valid, rng, sampler=sampler)
    return attn @ v, kl
