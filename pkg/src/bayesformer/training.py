"""Optimizers, the triangular learning-rate schedule, task losses, and the
maximum-likelihood training loop shared by baselines and study replicas."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, NumericError, Tensor, log_softmax

LOG_2PI = math.log(2.0 * math.pi)
TOY_SEED_LEN = 5  # warm-up values at the start of every synthetic sequence


def lr_schedule(step: int, d_model: int, warmup: int, base: float = 1.0) -> float:
    """Triangular schedule: d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError("lr_schedule steps start at 1")
    if warmup < 1:
        raise ContractError("warmup must be >= 1")
    return base * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def effective_warmup(total_steps: int, warmup: int = 4000) -> int:
    """Scale the warmup down proportionally for short desk-scale runs."""
    if total_steps < 2 * warmup:
        return max(1, int(round(warmup * total_steps / (2.0 * warmup))))
    return warmup


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad ** 2
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class SGD:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- losses ---------------------------------------------------------------------


def gaussian_nll(mean: Tensor, var: Tensor, targets: np.ndarray,
                 start: int = 0) -> Tensor:
    """Mean over the batch of per-sequence Gaussian NLL summed over positions
    >= `start` (the seeded prefix of synthetic sequences carries no loss)."""
    y = np.asarray(targets, dtype=np.float64)
    m = mean[:, start:]
    v = var[:, start:]
    resid = m - y[:, start:]
    nll = 0.5 * (LOG_2PI + v.log()) + resid * resid / (2.0 * v)
    return nll.sum(axis=1).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  mask: np.ndarray | None = None) -> Tensor:
    """Mean NLL of the true class; `mask` excludes padded positions."""
    labels = np.asarray(labels)
    ls = log_softmax(logits, axis=-1)
    flat = ls.reshape(-1, logits.shape[-1])
    picked = flat[np.arange(flat.shape[0]), labels.reshape(-1)]
    if mask is None:
        return -picked.mean()
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    return -(picked * m).sum() / m.sum()


def batch_nll(model, batch: dict, rng=None, weights=None,
              cd_rng=None) -> tuple[Tensor, "object"]:
    """Forward + task NLL for one batch. Returns (nll, ModelOutput)."""
    task = model.cfg.task
    if task == "regression":
        values = batch["values"]
        out = model.forward(values[:, :-1], rng=rng, weights=weights, cd_rng=cd_rng)
        nll = gaussian_nll(out.primary, out.variance, values[:, 1:], start=TOY_SEED_LEN - 1)
        return nll, out
    if task == "tagging":
        out = model.forward(batch["ids"], pad_mask=batch["mask"], rng=rng,
                            weights=weights, cd_rng=cd_rng)
        nll = cross_entropy(out.primary, batch["tags"], mask=batch["mask"])
        return nll, out
    out = model.forward(batch["images"], rng=rng, weights=weights, cd_rng=cd_rng)
    nll = cross_entropy(out.primary, batch["labels"])
    return nll, out


# -- maximum-likelihood training -------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 1.0
    warmup: int = 4000
    optimizer: str = "adam"  # adam | sgd
    sgd_lr: float = 0.05
    kl_anneal: bool = True
    anneal_frac: float = 0.1
    log_every_epochs: int = 1


def anneal_factor(step: int, total_steps: int, settings: TrainSettings) -> float:
    if not settings.kl_anneal:
        return 1.0
    ramp = max(1, int(settings.anneal_frac * total_steps))
    return min(1.0, step / ramp)


def train_mle(model, data, settings: TrainSettings, rng: np.random.Generator,
              val_data: dict | None = None) -> list[dict]:
    """Fixed-epoch training of all model parameters on the task NLL.

    Stochastic-attention KL (per data point) and concrete-dropout regularizers
    are added to the objective; attention KL ramps per the anneal settings.
    """
    from .data import batch_iter

    n = _data_size(data)
    steps_per_epoch = math.ceil(n / settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    warm = effective_warmup(total_steps, settings.warmup)
    params = dict(model.params)
    opt = Adam(params) if settings.optimizer == "adam" else SGD(params)

    history = []
    step = 0
    for epoch in range(settings.epochs):
        epoch_loss = 0.0
        for idx in batch_iter(n, settings.batch_size, shuffle_seed=rng.integers(2**63)):
            step += 1
            batch = _take(data, idx)
            try:
                nll, out = batch_nll(model, batch, rng=rng,
                                     cd_rng=rng if model.cfg.concrete_dropout else None)
                loss = nll
                if out.attn_kl.requires_grad or abs(out.attn_kl.item()) > 0:
                    loss = loss + out.attn_kl * (anneal_factor(step, total_steps, settings)
                                                 / len(idx))
                if out.cd_reg is not None:
                    loss = loss + out.cd_reg
                opt.zero_grad()
                loss.backward()
            except NumericError as e:
                raise TrainingDiverged(
                    f"non-finite training loss: {e}",
                    {"epoch": epoch, "step": step, "lr": _lr(step, settings, warm, model)},
                ) from e
            opt.step(_lr(step, settings, warm, model))
            epoch_loss += loss.item()
        rec = {"epoch": epoch, "train_loss": epoch_loss / steps_per_epoch}
        if val_data is not None:
            rec["val_nll"] = evaluate_nll(model, val_data, rng)
        history.append(rec)
    return history


def _lr(step: int, settings: TrainSettings, warm: int, model) -> float:
    if settings.optimizer == "sgd":
        return settings.sgd_lr
    return lr_schedule(step, model.cfg.hidden, warm, settings.base_lr)


def evaluate_nll(model, data: dict, rng: np.random.Generator,
                 batch_size: int = 256) -> float:
    """Single-sample NLL over a dataset (stochastic modes draw one sample)."""
    from .data import batch_iter
    from .tensor import no_grad

    n = _data_size(data)
    total, count = 0.0, 0
    with no_grad():
        for idx in batch_iter(n, batch_size, shuffle_seed=None):
            batch = _take(data, idx)
            nll, _ = batch_nll(model, batch, rng=rng)
            total += nll.item() * len(idx)
            count += len(idx)
    return total / count


def _data_size(data: dict) -> int:
    return len(next(iter(data.values())))


def _take(data: dict, idx: np.ndarray) -> dict:
    return {k: v[idx] for k, v in data.items()}
