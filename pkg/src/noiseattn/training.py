"""Epoch-level training loops shared by the pipeline stages.

The plain path trains the base network on its own softmax NLL; the
attention path routes every sample through its maximum-confidence unit.
With a single (identity) unit the two paths perform bit-identical
arithmetic, so attention training degrades exactly to plain training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError
from .attention import NAModel, UnitSchedule, na_backward, na_loss, na_loss_terms, routed_backward
from .nn import SGD, Network, entropy_tuple, nll_loss, nll_loss_grad, softmax, softmax_backward
from .recursion import soft_attention_outputs, soft_nll_loss, soft_out_grad

# rng stream tags, combined with the run seed
STREAM_SPLIT = 7
STREAM_SHUFFLE = 11
STREAM_JITTER = 13


@dataclass
class TrainSettings:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def split_train_val(n: int, val_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic index split; validation indices never see gradients."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(entropy_tuple(seed, STREAM_SPLIT))
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n_val == 0:
        n_val = 1
    if n_val >= n:
        raise ConfigError(f"val_fraction {val_fraction} leaves no training data (n={n})")
    val = np.sort(order[:n_val])
    train = np.sort(order[n_val:])
    return train, val


class Trainer:
    """Owns one network (plus optional noise units) and its optimizers.

    Mini-batch order comes from a dedicated shuffle stream seeded by the
    run seed, so two trainers built with the same seed walk the data in
    the same order regardless of which loss path they use.
    """

    def __init__(self, net: Network, settings: TrainSettings,
                 na_model: NAModel | None = None, seed=0):
        self.net = net
        self.na_model = na_model
        self.settings = settings
        self.net_opt = SGD(net.parameters(), settings.lr, settings.momentum,
                           settings.weight_decay)
        self.unit_opt = SGD([], settings.lr, settings.momentum, 0.0)
        if na_model is not None:
            for p in na_model.learnable_params():
                self.unit_opt.add_param(p)
        self._shuffle_rng = np.random.default_rng(entropy_tuple(seed, STREAM_SHUFFLE))
        self._jitter_rng = np.random.default_rng(entropy_tuple(seed, STREAM_JITTER))

    def add_unit(self, schedule: UnitSchedule):
        unit = self.na_model.add_unit(
            decay=schedule.decay_for(self.na_model.active_count + 1),
            jitter=schedule.init_jitter, rng=self._jitter_rng)
        self.unit_opt.add_param(unit.q)
        return unit

    # -- one optimization step -------------------------------------------

    def _finish_step(self, probs, gprobs, use_units: bool):
        self.net.backward(softmax_backward(probs, gprobs))
        self.net_opt.step()
        if use_units:
            self.unit_opt.step()
            self.na_model.project()

    def _step_plain(self, bx, by) -> float:
        probs = softmax(self.net.forward(bx))
        loss = nll_loss(probs, by)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite plain loss {loss!r}")
        self._finish_step(probs, nll_loss_grad(probs, by), use_units=False)
        return loss

    def _step_na(self, bx, by) -> float:
        probs = softmax(self.net.forward(bx))
        sel, out, picked, loss = na_loss_terms(probs, by, self.na_model)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite attention loss {loss!r}")
        gprobs = na_backward(probs, by, self.na_model, terms=(sel, out, picked))
        self._finish_step(probs, gprobs, use_units=True)
        return loss

    def _step_soft(self, bx, bsup) -> float:
        probs = softmax(self.net.forward(bx))
        sel, out = soft_attention_outputs(probs, bsup, self.na_model)
        loss = soft_nll_loss(out, bsup)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite soft loss {loss!r}")
        gprobs = routed_backward(probs, sel, soft_out_grad(out, bsup), self.na_model)
        self._finish_step(probs, gprobs, use_units=True)
        return loss

    # -- epochs ------------------------------------------------------------

    def _batches(self, n: int):
        order = self._shuffle_rng.permutation(n)
        bs = self.settings.batch_size
        for start in range(0, n, bs):
            yield order[start:start + bs]

    def train_epoch(self, features, labels, use_na: bool = False) -> float:
        """One shuffled pass; returns the sample-weighted mean batch loss."""
        if use_na and self.na_model is None:
            raise ConfigError("trainer has no attention model")
        n = features.shape[0]
        total = 0.0
        for idx in self._batches(n):
            if use_na:
                loss = self._step_na(features[idx], labels[idx])
            else:
                loss = self._step_plain(features[idx], labels[idx])
            total += loss * idx.size
        return total / n

    def train_epoch_soft(self, features, supervisions) -> float:
        """One shuffled pass against per-sample soft supervisions.

        Takes no labels: all supervision signal must already be baked into
        the supervision rows.
        """
        if self.na_model is None:
            raise ConfigError("trainer has no attention model")
        n = features.shape[0]
        total = 0.0
        for idx in self._batches(n):
            loss = self._step_soft(features[idx], supervisions[idx])
            total += loss * idx.size
        return total / n

    # -- evaluation-only helpers -------------------------------------------

    def val_loss(self, features, labels, use_na: bool = False) -> float:
        probs = softmax(self.net.forward(features))
        if use_na:
            return na_loss(probs, labels, self.na_model)
        return nll_loss(probs, labels)
