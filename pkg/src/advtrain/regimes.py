"""Training regimes: vanilla, FGSM-Adv, BIM(N)-Adv and the epoch-carried variant.

All adversarial regimes take one SGD step per batch on the mixed loss
``(1 - mixture) * L(clean) + mixture * L(adversarial)``. They differ only in how
the adversarial images for a batch are produced:

* ``fgsm_adv``: one FGSM step of size epsilon from the clean image.
* ``bim_adv``: a full BIM(N) run from the clean image.
* ``epoch_carried``: one gradient-sign step from wherever the example was left
  in the previous epoch, with every example sent back to its clean image each
  ``reset_period`` epochs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import (AdvState, AttackConfig, bim, check_budget, clip_to_budget, fgsm_step,
                      input_gradient)
from .data import Batch, Split, make_batches
from .errors import ConsistencyError, ValidationError
from .model import Model, OptimizerState, loss_and_grads, sgd_step

log = logging.getLogger(__name__)

REGIMES = ("vanilla", "fgsm_adv", "bim_adv", "epoch_carried")


@dataclass
class RegimeConfig:
    regime: str = "vanilla"
    epochs: int = 20
    batch_size: int = 128
    mixture: float = 0.5
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.3, 0.03, 10))
    reset_period: int = 20
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.mixture <= 1:
            raise ValidationError(f"mixture must be in [0, 1], got {self.mixture}")
        if self.reset_period < 1:
            raise ValidationError(f"reset_period must be >= 1, got {self.reset_period}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    seconds: float
    adv_grad_evals: int
    batches: int

    @property
    def adv_grad_evals_per_batch(self) -> float:
        return self.adv_grad_evals / self.batches


class CarriedStore:
    """Per-example adversarial state that survives from one epoch to the next.

    Backed by dense arrays indexed through the split's ids; :meth:`get` exposes
    single entries as :class:`AdvState`.
    """

    def __init__(self, split: Split, epsilon: float, dtype=np.float32):
        self.epsilon = epsilon
        self.ids = np.asarray(split.ids)
        self.origins = split.images.astype(dtype, copy=False)
        self.current = self.origins.copy()
        self.steps = np.zeros(len(self.ids), dtype=np.int64)
        self.touched = np.zeros(len(self.ids), dtype=bool)
        self.row_of = {int(i): k for k, i in enumerate(self.ids)}
        self.epoch_of_last_reset = 0

    def rows(self, ids) -> np.ndarray:
        try:
            return np.fromiter((self.row_of[int(i)] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise ConsistencyError(f"example id {exc.args[0]} is not part of the carried store") from None

    def fetch(self, ids) -> np.ndarray:
        rows = self.rows(ids)
        fresh = rows[~self.touched[rows]]
        self.current[fresh] = self.origins[fresh]
        self.steps[fresh] = 0
        self.touched[fresh] = True
        return self.current[rows]

    def write(self, ids, images, origins=None) -> None:
        rows = self.rows(ids)
        if origins is not None and not np.array_equal(origins, self.origins[rows]):
            raise ConsistencyError("batch images do not match the stored origins for their ids")
        self.current[rows] = images
        self.steps[rows] += 1
        self.check(rows)

    def reset(self, epoch: int) -> None:
        self.current[:] = self.origins
        self.steps[:] = 0
        self.epoch_of_last_reset = epoch

    def check(self, rows=None) -> None:
        rows = slice(None) if rows is None else rows
        check_budget(self.current[rows], self.origins[rows], self.epsilon)

    def get(self, example_id: int) -> AdvState:
        k = self.row_of[int(example_id)]
        return AdvState(int(example_id), self.origins[k], self.current[k], int(self.steps[k]))


def _check_batch(batch: Batch) -> None:
    if not (len(batch.ids) == len(batch.images) == len(batch.labels)):
        raise ConsistencyError("batch ids, images and labels have different lengths")


def _mixed_step(model, opt, batch, adv, mixture):
    loss_c, g_c, logits = loss_and_grads(model, batch.images, batch.labels, need_input_grad=False)
    if adv is None:
        grads, loss = g_c.param_grads, loss_c
    else:
        loss_a, g_a, _ = loss_and_grads(model, adv, batch.labels, need_input_grad=False)
        wc = model.dtype.type(1 - mixture)
        wa = model.dtype.type(mixture)
        grads = [tuple(wc * gc + wa * ga for gc, ga in zip(gcs, gas))
                 for gcs, gas in zip(g_c.param_grads, g_a.param_grads)]
        loss = float(wc) * loss_c + float(wa) * loss_a
    sgd_step(model, opt, grads)
    correct = int((logits.argmax(axis=1) == batch.labels).sum())
    return loss, correct


def _run(model, data, config: RegimeConfig, make_adv, on_epoch_start=None, on_epoch=None):
    opt = OptimizerState.for_model(model, config.lr, config.momentum)
    records = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        if on_epoch_start is not None:
            on_epoch_start(epoch)
        total_loss = 0.0
        correct = seen = grad_evals = 0
        batches = make_batches(data, config.batch_size, epoch, config.seed)
        for batch in batches:
            _check_batch(batch)
            adv, evals = make_adv(model, batch) if make_adv is not None else (None, 0)
            loss, right = _mixed_step(model, opt, batch, adv, config.mixture)
            total_loss += loss * len(batch)
            correct += right
            seen += len(batch)
            grad_evals += evals
        model.epoch = epoch + 1
        record = EpochRecord(epoch, total_loss / seen, correct / seen, time.perf_counter() - start,
                             grad_evals, len(batches))
        records.append(record)
        log.info("%s epoch %d: loss %.4f acc %.4f (%.1fs)", config.regime, epoch, record.train_loss,
                 record.train_accuracy, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
    return model, records


def train_vanilla(model: Model, data: Split, config: RegimeConfig, on_epoch=None):
    """Clean examples only."""
    return _run(model, data, config, None, on_epoch=on_epoch)


def train_fgsm_adv(model: Model, data: Split, config: RegimeConfig, on_epoch=None):
    attack = config.attack
    if attack.iterations != 1 or attack.step_size != attack.epsilon:
        raise ValidationError(f"fgsm_adv needs iterations=1 and step_size=epsilon, got {attack}")

    def make_adv(model, batch):
        adv, _ = bim(model, batch.images, batch.labels, attack)
        check_budget(adv, batch.images, attack.epsilon)
        return adv, 1

    return _run(model, data, config, make_adv, on_epoch=on_epoch)


def train_bim_adv(model: Model, data: Split, config: RegimeConfig, on_epoch=None):
    attack = config.attack

    def make_adv(model, batch):
        adv, _ = bim(model, batch.images, batch.labels, attack)
        check_budget(adv, batch.images, attack.epsilon)
        return adv, attack.iterations

    return _run(model, data, config, make_adv, on_epoch=on_epoch)


def train_epoch_carried(model: Model, data: Split, config: RegimeConfig, on_epoch=None, store=None):
    """One gradient-sign step per example per epoch, continued across epochs.

    Pass ``store`` to inspect the carried state afterwards.
    """
    attack = config.attack
    store = store if store is not None else CarriedStore(data, attack.epsilon, model.dtype)

    def on_epoch_start(epoch):
        if epoch - store.epoch_of_last_reset == config.reset_period:
            store.reset(epoch)

    def make_adv(model, batch):
        current = store.fetch(batch.ids)
        grad = input_gradient(model, current, batch.labels)
        adv = clip_to_budget(fgsm_step(current, grad, attack.step_size), batch.images, attack.epsilon)
        store.write(batch.ids, adv, origins=batch.images)
        return adv, 1

    model, records = _run(model, data, config, make_adv, on_epoch_start, on_epoch)
    store.check()
    return model, records


TRAINERS = {
    "vanilla": train_vanilla,
    "fgsm_adv": train_fgsm_adv,
    "bim_adv": train_bim_adv,
    "epoch_carried": train_epoch_carried,
}


def train(model: Model, data: Split, config: RegimeConfig, on_epoch=None):
    return TRAINERS[config.regime](model, data, config, on_epoch=on_epoch)


def default_attack(regime: str, epsilon: float, iterations: int = 10) -> AttackConfig:
    """Attack paired with each regime when no step size is given."""
    if regime == "fgsm_adv":
        return AttackConfig.fgsm(epsilon)
    if regime == "bim_adv":
        return AttackConfig.bim(epsilon, iterations)
    return AttackConfig(epsilon, epsilon / 10, 1)
