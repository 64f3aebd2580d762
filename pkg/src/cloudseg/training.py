"""Loss, Adam optimization, and the training loop.

The loss is mean pixelwise binary cross-entropy on the probability output,
with predictions clamped to [1e-7, 1 - 1e-7] before the logs. Adam follows
the bias-corrected form: m_hat = m / (1 - beta1^t), v_hat = v / (1 - beta2^t),
theta -= lr * m_hat / (sqrt(v_hat) + eps).

Default hyperparameters: learning rate 0.003, beta1 0.9, beta2 0.999,
eps 1e-8, mini-batch size 8.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .data import DatasetSplit, PatchSet
from .errors import ConfigError, ShapeError, TrainingError
from .network import Network, forward, save_network

PRED_CLAMP = 1e-7


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 300

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        t=0,
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: OptimizerConfig,
) -> None:
    """One in-place Adam update; `state.t` is incremented before bias correction."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. `pred`.

    Predictions are clamped away from 0 and 1 before the logs; the gradient
    is zero where the clamp is active (matching finite differences of the
    clamped loss).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    loss = float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean(dtype=np.float64))
    inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / pred.size
    return loss, grad.astype(pred.dtype)


def pixel_accuracy(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of pixels where (pred >= threshold) matches the binary target."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    return float(((pred >= threshold) == (target >= 0.5)).mean(dtype=np.float64))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def write_history(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
        for h in history:
            fh.write(
                f"{h.epoch},{h.train_loss:.6f},{h.train_acc:.6f},"
                f"{h.val_loss:.6f},{h.val_acc:.6f}\n"
            )


def _evaluate(net: Network, patches: PatchSet, aug_ids: np.ndarray, batch_size: int):
    """Inference-mode loss/accuracy over a list of augmented patch ids."""
    net.set_mode("inference")
    total_loss = total_acc = 0.0
    count = 0
    with no_grad():
        for start in range(0, len(aug_ids), batch_size):
            ids = aug_ids[start : start + batch_size]
            x, y = patches.batch(ids)
            out = forward(net, Tensor(x))
            loss, _ = bce_loss(out.data, y)
            total_loss += loss * len(ids)
            total_acc += pixel_accuracy(out.data, y) * len(ids)
            count += len(ids)
    return total_loss / count, total_acc / count


def _checkpoint(net: Network, state: AdamState, epoch: int, directory, stem: str) -> None:
    save_network(net, os.path.join(directory, f"{stem}.cpw"))
    with open(os.path.join(directory, f"{stem}.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"epoch = {epoch}\nstep = {state.t}\n")


def train(
    net: Network,
    patches: PatchSet,
    split: DatasetSplit,
    cfg: OptimizerConfig,
    checkpoint_dir,
    seed: int = 0,
    checkpoint_every: int = 10,
    log=None,
) -> tuple[Network, list[EpochStats]]:
    """Optimize `net` on the train split, validating after every epoch.

    Mini-batch order is a seeded shuffle of the augmented train ids; the
    final short batch is kept. Checkpoints are written every
    `checkpoint_every` epochs and whenever validation accuracy improves.
    """
    train_ids = split.augmented_ids("train")
    val_ids = split.augmented_ids("validation")
    if len(train_ids) == 0 or len(val_ids) == 0:
        raise ConfigError(
            f"split has {len(train_ids)} train / {len(val_ids)} validation patches"
        )
    os.makedirs(checkpoint_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    state = init_adam(net.params)
    history: list[EpochStats] = []
    best_val_acc = -1.0

    for epoch in range(1, cfg.epochs + 1):
        net.set_mode("train")
        perm = rng.permutation(train_ids)
        epoch_loss = epoch_acc = 0.0
        seen = 0
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            ids = perm[start : start + cfg.batch_size]
            x, y = patches.batch(ids)
            out = forward(net, Tensor(x))
            loss, dpred = bce_loss(out.data, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            epoch_loss += loss * len(ids)
            epoch_acc += pixel_accuracy(out.data, y) * len(ids)
            seen += len(ids)
            net.zero_grad()
            out.backward(dpred)
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in net.params.items()
            }
            adam_step(net.params, grads, state, cfg)
        val_loss, val_acc = _evaluate(net, patches, val_ids, cfg.batch_size)
        stats = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss / seen,
            train_acc=epoch_acc / seen,
            val_loss=val_loss,
            val_acc=val_acc,
        )
        history.append(stats)
        if log is not None:
            log(
                f"epoch {epoch:4d}  train loss {stats.train_loss:.4f} "
                f"acc {stats.train_acc:.4f}  val loss {stats.val_loss:.4f} "
                f"acc {stats.val_acc:.4f}"
            )
        if checkpoint_every > 0 and epoch % checkpoint_every == 0:
            _checkpoint(net, state, epoch, checkpoint_dir, f"epoch_{epoch:04d}")
        if val_acc > best_val_acc:
            best_val_acc = val_acc
            _checkpoint(net, state, epoch, checkpoint_dir, "best")
    return net, history


@dataclass
class TrainSettings:
    """Contents of a key = value training config file (all keys required)."""

    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float
    batch_size: int
    epochs: int
    seed: int
    checkpoint_every: int
    arch_config_path: str
    data_dir: str

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            epochs=self.epochs,
        )


_TRAIN_KEYS = {
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "checkpoint_every": int,
    "arch_config_path": str,
    "data_dir": str,
}


def parse_train_settings(path) -> TrainSettings:
    """Strict key = value parser; missing keys are reported all at once."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not key or not value:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _TRAIN_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    missing = sorted(set(_TRAIN_KEYS) - set(values))
    if missing:
        raise ConfigError(f"{path}: missing config keys: {', '.join(missing)}")
    # relative paths resolve against the config file's directory
    base = os.path.dirname(os.path.abspath(path))
    for key in ("arch_config_path", "data_dir"):
        if not os.path.isabs(values[key]):
            values[key] = os.path.normpath(os.path.join(base, values[key]))
    return TrainSettings(**values)
