"""Delay pruning, and Dropout / DropConnect adapted to the unfolded DyBM.

``p`` is always the probability of *removing* something: a FIFO queue
(delay pruning), a historical unit (dropout) or a directed connection
(dropconnect).  Current-time units are never dropped; only their history
contributions are.

Masks are pure functions of ``(rng_seed, counter)`` so a training job
replays the identical mask sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ShapeError, activations
from ._kernel_py import sigmoid

METHODS = ("none", "delay-prune", "dropout", "dropconnect")
CADENCES = ("per-minibatch", "per-sample")


@dataclass(frozen=True)
class RegularizerConfig:
    method: str = "none"
    prune_prob: float = 0.0
    resample_cadence: str = "per-minibatch"
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown regularization method {self.method!r}")
        if not 0.0 <= self.prune_prob <= 1.0:
            raise ConfigError("prune_prob must lie in [0, 1]")
        if self.resample_cadence not in CADENCES:
            raise ConfigError(f"unknown resample cadence {self.resample_cadence!r}")


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray
    original_delays: np.ndarray | None = None

    def effective_delays(self, original_delays=None):
        orig = self.original_delays if original_delays is None else original_delays
        return np.where(self.keep, orig, 1).astype(np.int64)


@dataclass(frozen=True)
class DropMask:
    kind: str
    unit_keep: np.ndarray | None = None
    weight_keep: np.ndarray | None = None

    def scales(self, n):
        """(unit_scale, edge_scale) float arrays for the kernels."""
        g = np.ones(n) if self.unit_keep is None else self.unit_keep.astype(np.float64)
        c = np.ones((n, n)) if self.weight_keep is None else self.weight_keep.astype(np.float64)
        return g, c


def mask_rng(seed, counter):
    return np.random.default_rng([int(seed), int(counter)])


def sample_prune_mask(config, n, rng, original_delays=None):
    """Each directed edge independently pruned with probability ``prune_prob``."""
    pruned = rng.random((n, n)) < config.prune_prob
    return PruneMask(keep=~pruned, original_delays=original_delays)


def apply_prune_mask(model, mask):
    """Switch the model's queues to the thinned network described by ``mask``.

    Pruned edges get delay 1 and lose their queue contents (so their in-queue
    traces vanish); edges coming back get their original delay and an empty
    queue.  Synaptic traces are left alone.
    """
    n = model.n_units
    keep = np.asarray(mask.keep, dtype=bool)
    if keep.shape != (n, n):
        raise ShapeError(f"mask is {keep.shape}, model has {n} units")
    target = np.where(keep, model.original_delays, 1).astype(np.int64)
    changed = target != model.delays
    if not np.any(changed):
        return
    model.delays[changed] = target[changed]
    model.queue_slots[changed] = 0.0
    model.traces.beta[changed] = 0.0


def sample_drop_mask(config, n, rng):
    if config.method == "dropout":
        return DropMask("dropout-units", unit_keep=~(rng.random(n) < config.prune_prob))
    if config.method == "dropconnect":
        return DropMask("dropconnect-weights",
                        weight_keep=~(rng.random((n, n)) < config.prune_prob))
    raise ConfigError(f"method {config.method!r} has no drop mask")


def eval_scales(config, n):
    """Expectation scaling of history contributions used outside training."""
    g, c = np.ones(n), np.ones((n, n))
    if config.method == "dropout":
        g = g * (1.0 - config.prune_prob)
    elif config.method == "dropconnect":
        c = c * (1.0 - config.prune_prob)
    return g, c


def masked_conditional_probs(model, mask=None, config=None):
    """Conditional probabilities under a drop mask, or eval-scaled when ``mask`` is None."""
    n = model.n_units
    if mask is not None:
        g, c = mask.scales(n)
        if g.shape != (n,) or c.shape != (n, n):
            raise ShapeError("drop mask does not match the model")
    elif config is not None:
        g, c = eval_scales(config, n)
    else:
        g, c = model.full_scales()
    return sigmoid(activations(model, g, c))


class Regularizer:
    """Per-job regularization state driven by the trainer.

    ``resample`` is called at every cadence boundary; it draws the next mask
    from ``mask_rng(seed, counter)`` and, for delay pruning, rewires the model.
    """

    def __init__(self, config, model, log=None):
        self.config = config
        self.n = model.n_units
        self.counter = 0
        self.log = log
        self._train = model.full_scales()
        self._eval = eval_scales(config, self.n)
        self.last_mask = None

    @property
    def method(self):
        return self.config.method

    def resample(self, model, step=0):
        cfg = self.config
        if cfg.method == "none":
            return
        rng = mask_rng(cfg.rng_seed, self.counter)
        self.counter += 1
        if cfg.method == "delay-prune":
            mask = sample_prune_mask(cfg, self.n, rng, model.original_delays)
            apply_prune_mask(model, mask)
            flat = mask.keep
        else:
            mask = sample_drop_mask(cfg, self.n, rng)
            self._train = mask.scales(self.n)
            flat = mask.unit_keep if mask.unit_keep is not None else mask.weight_keep
        self.last_mask = mask
        if self.log is not None:
            bits = "".join("1" if b else "0" for b in np.ravel(flat))
            self.log.write(f"{step} {cfg.method} {bits}\n")

    def train_scales(self):
        return self._train

    def eval_scales(self):
        return self._eval

    def fold_eval_scaling(self, params):
        """Scale weights in place so the plain model realizes eval scaling."""
        if self.config.method in ("dropout", "dropconnect"):
            keep = 1.0 - self.config.prune_prob
            params.ltp_weight *= keep
            params.ltd_weight *= keep
