"""Training loops: float models, plain QAT and divergence-regularized QAT."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .errors import ConfigError, UsageError
from .optim import SGD, SgdConfig
from .quant import freeze_observers, refresh_weight_qparams
from .tensor import no_grad


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05))

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = SgdConfig(**self.optimizer)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class DivQatConfig:
    alpha: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    optimizer: SgdConfig = field(default_factory=SgdConfig)
    epsilon_floor: float = losses.EPSILON_FLOOR

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = SgdConfig(**self.optimizer)
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.epsilon_floor <= 0:
            raise ConfigError("epsilon_floor must be positive")

    def to_dict(self):
        return asdict(self)


def error_rate(model, x, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict_logits(x).argmax(axis=1) != y))


def _fit(model, x, targets, cfg, seed, loss_fn, eval_set=None, before_step=None, after_epoch=None, after_step=None):
    """Minibatch SGD over ``(x, targets)``; returns per-epoch history rows.

    ``loss_fn(model, xb, tb)`` returns ``(loss, logits, extras)`` where
    ``extras`` maps history keys to float batch means.
    """
    rng = np.random.default_rng(seed)
    n = len(x)
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = cfg.epochs * steps_per_epoch
    opt = SGD(model.parameters(), cfg.optimizer, total)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        model.train()
        sums, wrong, lr = {}, 0, opt.lr(step)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if before_step is not None:
                before_step(step, total)
            opt.zero_grad()
            loss, logits, extras = loss_fn(model, x[idx], targets[idx])
            loss.backward()
            lr = opt.step(step)
            step += 1
            if after_step is not None:
                after_step(step, model)
            for k, v in extras.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
            if targets.ndim == 1:
                wrong += int(np.sum(logits.data.argmax(axis=1) != targets[idx]))
            else:
                wrong += int(np.sum(logits.data.argmax(axis=1) != targets[idx].argmax(axis=1)))
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: v / n for k, v in sums.items()})
        row["train_err"] = wrong / n if n else float("nan")
        row["eval_err"] = error_rate(model, *eval_set) if eval_set is not None else None
        row["checksum"] = model.checksum()
        history.append(row)
        if after_epoch is not None:
            after_epoch(epoch + 1, model)
    model.eval()
    return history


def _ce_loss(model, xb, yb):
    logits = model(xb)
    ce = losses.cross_entropy(logits, yb)
    return ce, logits, {"ce": ce.item()}


def train_float(model, dataset, config, seed=0):
    """Train a full-precision model on the dataset's train split."""
    return _fit(model, dataset.train.x, dataset.train.y, config, seed, _ce_loss,
                eval_set=(dataset.test.x, dataset.test.y))


def _train_quantized(quant_model, large_model, dataset, config, seed, on_epoch=None, on_step=None, step_interval=1):
    if quant_model.quant_spec is None:
        raise UsageError("model has no fake-quant nodes; call prepare_qat first")
    alpha = config.alpha if large_model is not None else 0.0
    if large_model is not None:
        if large_model.num_classes != quant_model.num_classes:
            raise ConfigError("large and quantized models disagree on the class count")
        large_model.eval()
    warmup = quant_model.quant_spec.warmup_fraction

    def before_step(step, total):
        # observe for at least one step so activation nodes get qparams
        if step == max(1, math.floor(warmup * total)):
            freeze_observers(quant_model, role="activation")

    def loss_fn(model, xb, yb):
        logits = model(xb)
        if large_model is None:
            ce = losses.cross_entropy(logits, yb)
            return ce, logits, {"ce": ce.item()}
        with no_grad():
            p_large = large_model.predict_proba(xb)
        loss, ce, kl = losses.divqat_loss(yb, logits, p_large, alpha, config.epsilon_floor)
        return loss, logits, {"ce": ce.item(), "kl": kl.item()}

    def after_step(step, model):
        # snapshots only once activation ranges are frozen
        if step % step_interval == 0 and step > max(1, math.floor(warmup * total_steps)):
            on_step(step, _finalize(model.copy()))

    total_steps = config.epochs * math.ceil(len(dataset.train.x) / config.batch_size)
    history = _fit(quant_model, dataset.train.x, dataset.train.y, config, seed, loss_fn,
                   eval_set=(dataset.test.x, dataset.test.y), before_step=before_step,
                   after_epoch=None if on_epoch is None else lambda e, m: on_epoch(e, _finalize(m.copy())),
                   after_step=None if on_step is None else after_step)
    return _finalize(quant_model), history


def _finalize(quant_model):
    freeze_observers(quant_model, role="activation")
    refresh_weight_qparams(quant_model)
    return quant_model.eval()


def train_qat(quant_model, dataset, config, seed=0, on_epoch=None, on_step=None, step_interval=1):
    """Quantization-aware training with cross-entropy only.

    Activation observers run min-max for the first ``warmup_fraction`` of
    steps and are frozen afterwards; weight qparams track the weights.
    """
    return _train_quantized(quant_model, None, dataset, config, seed, on_epoch, on_step, step_interval)


def train_divqat(quant_model, large_model, dataset, config, seed=0, on_epoch=None, on_step=None, step_interval=1):
    """QAT whose loss subtracts ``alpha * KL(quantized || large)``.

    The large model only supplies reference probabilities and is never
    updated. The quantized model consumes the same random stream as
    :func:`train_qat`, so ``alpha == 0`` reproduces it bit for bit.
    """
    return _train_quantized(quant_model, large_model, dataset, config, seed, on_epoch, on_step, step_interval)


def mean_kl(quant_model, large_model, x, epsilon_floor=losses.EPSILON_FLOOR):
    return losses.kl_divergence_probs(quant_model.predict_proba(x), large_model.predict_proba(x), epsilon_floor)


def write_history(history, path):
    keys = ("epoch", "ce", "kl", "lr", "train_err", "eval_err", "checksum")
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps({k: row.get(k) for k in keys}) + "\n")
