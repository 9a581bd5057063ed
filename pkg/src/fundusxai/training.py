"""Losses, optimizer, schedule and the early-stopped multi-task training loop.

Labels are float arrays with NaN marking missing values; missing samples are
excluded from both the loss normalization and the gradient, so label
availability can differ freely across tasks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .cohort import TASKS
from .metrics import SingleClassError, roc_auc
from .model import MultiTaskCNN


class NonFiniteGradient(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    variant: str = "lambda_sum"  # or "uncertainty_weighted"

    def __post_init__(self):
        if any(w < 0 for w in self.task_weights):
            raise ValueError("task weights must be >= 0")
        if self.variant not in ("lambda_sum", "uncertainty_weighted"):
            raise ValueError(f"unknown loss variant {self.variant!r}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_max: int = 50
    clip_max_norm: float = 1.0
    patience: int = 8
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 42

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


# ---------------------------------------------------------------------------
# losses


def weighted_bce(probs: np.ndarray, labels: np.ndarray, class_weights: tuple[float, float]):
    """Class-weighted binary cross-entropy over the labeled subset.

    ``labels`` may contain NaN (missing); those samples contribute neither to
    the mean nor to the gradient. Probabilities are clamped to
    [1e-7, 1 - 1e-7] inside the logs only. Returns
    ``(loss, dloss_dlogit, all_missing)`` where the gradient is w.r.t. the
    pre-sigmoid logits: w * (p - y) / n_labeled.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    labeled = ~np.isnan(labels)
    count = int(labeled.sum())
    if count == 0:
        return 0.0, np.zeros_like(probs), True
    y = labels[labeled]
    p = probs[labeled]
    w = np.where(y == 1.0, class_weights[1], class_weights[0])
    pc = np.clip(p, 1e-7, 1.0 - 1e-7)
    loss = -float(np.sum(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))) / count
    dlogit = np.zeros_like(probs)
    dlogit[labeled] = w * (p - y) / count
    return loss, dlogit, False


def total_loss(task_losses, config: LossConfig, log_sigmas: np.ndarray | None = None):
    """Combine per-task losses into the training objective.

    lambda_sum: sum of lambda_t * L_t. uncertainty_weighted: sum of
    exp(-2 s_t) * L_t + s_t with learnable s_t = log sigma_t. Returns
    ``(total, dtotal_dL, dtotal_dlog_sigma)``; the last is None for
    lambda_sum.
    """
    losses = np.asarray(task_losses, dtype=np.float64)
    if losses.shape != (3,):
        raise ValueError("expected 3 per-task losses")
    if config.variant == "lambda_sum":
        lam = np.asarray(config.task_weights, dtype=np.float64)
        return float(lam @ losses), lam, None
    if log_sigmas is None:
        raise ValueError("uncertainty_weighted variant needs log_sigmas")
    inv_var = np.exp(-2.0 * log_sigmas)
    total = float(np.sum(inv_var * losses + log_sigmas))
    return total, inv_var, -2.0 * inv_var * losses + 1.0


def clip_grad_norm(grads: dict, max_norm: float = 1.0):
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Mutates ``grads`` in place and returns ``(grads, total_norm)``.
    """
    sq = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient encountered")
        sq += float(np.sum(g * g))
    total = float(np.sqrt(sq))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads, total


def cosine_lr(epoch: int, config: OptimConfig) -> float:
    """Cosine annealing from lr at epoch 0 down to 0 at epoch t_max."""
    if not 0 <= epoch <= config.t_max:
        raise ValueError(f"epoch {epoch} outside [0, {config.t_max}]")
    return 0.5 * config.lr * (1.0 + np.cos(np.pi * epoch / config.t_max))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay.

    Decay applies to weight matrices only; biases, batch-norm parameters and
    loss log-sigmas are excluded.
    """

    def __init__(self, param_names, config: OptimConfig):
        self.config = config
        self.t = 0
        self.m = {k: None for k in param_names}
        self.v = {k: None for k in param_names}

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith(".w") and ".bn." not in name

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, g in grads.items():
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if self.decays(name):
                update = update + c.weight_decay * params[name]
            params[name] -= lr * update


def adamw_step(params: dict, grads: dict, lr: float, config: OptimConfig,
               state: AdamW | None = None) -> AdamW:
    """Single functional AdamW update; returns the optimizer state."""
    if state is None:
        state = AdamW(list(params), config)
    state.step(params, grads, lr)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    HEADER = ("epoch", "loss_hba1c", "loss_kidney", "loss_multi",
              "auc_hba1c", "auc_kidney", "auc_multi", "mean_auc", "lr")

    def append(self, **kw) -> None:
        self.rows.append({k: kw[k] for k in self.HEADER})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for row in self.rows:
                writer.writerow([row[k] for k in self.HEADER])

    def best_mean_auc(self) -> float:
        return max(r["mean_auc"] for r in self.rows) if self.rows else float("nan")


def predict_probs(model: MultiTaskCNN, tensors: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for a (N, 3, H, W) tensor stack."""
    model.eval()
    out = np.empty((tensors.shape[0], model.config.num_tasks))
    for start in range(0, tensors.shape[0], batch_size):
        _, probs = model.forward(tensors[start : start + batch_size])
        out[start : start + probs.shape[0]] = probs
    return out


def task_aucs(labels: np.ndarray, probs: np.ndarray) -> list[float | None]:
    """Per-task AUC over labeled samples; None when undefined."""
    out: list[float | None] = []
    for t in range(labels.shape[1]):
        mask = ~np.isnan(labels[:, t])
        if mask.sum() == 0:
            out.append(None)
            continue
        try:
            out.append(roc_auc(labels[mask, t].astype(np.int64), probs[mask, t]))
        except SingleClassError:
            out.append(None)
    return out


def _augment_batch(images: np.ndarray, idxs: np.ndarray, params, norm_stats,
                   seed: int, epoch: int) -> np.ndarray:
    tensors = np.empty((len(idxs), 3, images.shape[1], images.shape[2]))
    for j, i in enumerate(idxs):
        img = images[i]
        if params is not None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, int(i), 3]))
            img = imaging.augment(img, params, rng)
        tensors[j] = imaging.to_tensor_normalized(img, norm_stats)
    return tensors


@dataclass
class TrainResult:
    model: MultiTaskCNN
    log: TrainLog
    stopped_early: bool


def train(model: MultiTaskCNN,
          train_images: np.ndarray, train_labels: np.ndarray,
          val_images: np.ndarray, val_labels: np.ndarray,
          class_weights: dict[str, tuple[float, float]],
          loss_config: LossConfig = LossConfig(),
          optim_config: OptimConfig = OptimConfig(),
          augment_params=None,
          norm_stats: imaging.NormStats = imaging.NormStats(),
          val_scorer=None) -> TrainResult:
    """Train the multi-task net with early stopping on mean validation AUC.

    ``train_images``/``val_images`` are uint8 (N, H, W, 3) stacks already at
    network resolution; ``*_labels`` are float (N, 3) with NaN for missing.
    Improvement is strict; after ``patience`` consecutive non-improving
    epochs training stops and the best checkpoint is returned. Everything is
    deterministic given the optimizer seed. ``val_scorer`` replaces the
    internal validation pass when given (testing hook): it receives
    ``(model, epoch)`` and returns per-task AUCs.
    """
    if train_images.shape[0] == 0 or val_images.shape[0] == 0:
        raise ValueError("train and validation splits must be nonempty")
    cfg = optim_config
    seed = cfg.seed
    model.seed_dropout(seed)

    params = model.params
    log_sigmas = None
    if loss_config.variant == "uncertainty_weighted":
        params = dict(model.params)
        params["loss.log_sigma"] = np.zeros(3)
        log_sigmas = params["loss.log_sigma"]

    optimizer = AdamW(list(params), cfg)
    weights = [class_weights[t] for t in TASKS]

    val_tensors = None
    if val_scorer is None:
        val_tensors = np.stack([imaging.to_tensor_normalized(im, norm_stats)
                                for im in val_images])

    log = TrainLog()
    best_mean = -np.inf
    best_model = model.clone().eval()
    bad_epochs = 0
    stopped = False
    n_train = train_images.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cosine_lr(min(epoch - 1, cfg.t_max), cfg)
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1])).permutation(n_train)

        model.train()
        loss_sums = np.zeros(3)
        loss_counts = np.zeros(3)
        for start in range(0, n_train, cfg.batch_size):
            idxs = order[start : start + cfg.batch_size]
            if len(idxs) < 2:
                continue  # train-mode batch norm needs >= 2 samples
            x = _augment_batch(train_images, idxs, augment_params, norm_stats, seed, epoch)
            y = train_labels[idxs]
            cache, probs = model.forward(x)

            task_losses = np.zeros(3)
            dlogits = np.zeros_like(probs)
            n_labeled = np.zeros(3)
            for t in range(3):
                loss_t, dz_t, _ = weighted_bce(probs[:, t], y[:, t], weights[t])
                task_losses[t] = loss_t
                dlogits[:, t] = dz_t
                n_labeled[t] = (~np.isnan(y[:, t])).sum()
            _, dl_dtask, dl_dsigma = total_loss(task_losses, loss_config, log_sigmas)
            dlogits *= dl_dtask[None, :]

            grads = model.backward(cache, dlogits)
            if dl_dsigma is not None:
                grads["loss.log_sigma"] = dl_dsigma
            clip_grad_norm(grads, cfg.clip_max_norm)
            optimizer.step(params, grads, lr)

            loss_sums += task_losses * n_labeled
            loss_counts += n_labeled

        epoch_losses = np.divide(loss_sums, loss_counts,
                                 out=np.zeros(3), where=loss_counts > 0)

        if val_scorer is not None:
            aucs = val_scorer(model, epoch)
        else:
            probs = predict_probs(model, val_tensors)
            aucs = task_aucs(val_labels, probs)
        defined = [a for a in aucs if a is not None]
        mean_auc = float(np.mean(defined)) if defined else 0.0

        log.append(epoch=epoch,
                   loss_hba1c=float(epoch_losses[0]), loss_kidney=float(epoch_losses[1]),
                   loss_multi=float(epoch_losses[2]),
                   auc_hba1c=_fmt_auc(aucs[0]), auc_kidney=_fmt_auc(aucs[1]),
                   auc_multi=_fmt_auc(aucs[2]), mean_auc=mean_auc, lr=lr)

        if mean_auc > best_mean:
            best_mean = mean_auc
            best_model = model.clone().eval()
            log.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break

    return TrainResult(best_model, log, stopped)


def _fmt_auc(value):
    return float("nan") if value is None else float(value)
