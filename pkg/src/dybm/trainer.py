"""Online training loop with Adam, periodic validation and best-model checkpoints."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    BinarySequence,
    ConfigError,
    DivergenceError,
    DybmModel,
    init_model,
    model_from_bytes,
    model_to_bytes,
    reset_dynamic_state,
    sequence_nll,
)
from .regularizers import Regularizer, RegularizerConfig

METRIC_COLUMNS = ("step", "batch", "train_nll", "val_tnl", "onl", "epsilon",
                  "is_best", "method", "p")


@dataclass(frozen=True)
class TrainConfig:
    max_steps_per_sample: int = 50_000
    validation_cadence_epochs: int = 500
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    minibatch_size: int = 32
    # per-step |TNL - ONL| tolerance; None means 1e-3 * n_units
    stop_tolerance: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.validation_cadence_epochs < 1:
            raise ConfigError("validation_cadence_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ConfigError("Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        if self.max_steps_per_sample < 0:
            raise ConfigError("max_steps_per_sample must be >= 0")
        if self.stop_tolerance is not None and not self.stop_tolerance > 0:
            raise ConfigError("stop_tolerance must be positive")

    def tolerance(self, n_units):
        return 1e-3 * n_units if self.stop_tolerance is None else self.stop_tolerance


class OptimizerState:
    """Adam first/second moments shaped like the model parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.first_moment = [np.zeros_like(a) for a in params.arrays()]
        self.second_moment = [np.zeros_like(a) for a in params.arrays()]
        self.step_count = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    @classmethod
    def for_config(cls, params, config):
        return cls(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def kernel_args(self):
        m, s = self.first_moment, self.second_moment
        return (m[0], s[0], m[1], s[1], m[2], s[2])


@dataclass
class TrainReport:
    n_steps: int = 0
    total_nll: float = 0.0

    @property
    def mean_nll(self):
        return self.total_nll / self.n_steps if self.n_steps else 0.0


@dataclass
class Checkpoint:
    model: DybmModel
    epsilon: float
    tnl: float
    onl: float | None
    step: int
    meta: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.model.params

    @property
    def delays(self):
        return self.model.delays

    def to_model(self):
        return self.model.copy()

    def to_bytes(self):
        meta = dict(self.meta, epsilon=self.epsilon, tnl=self.tnl, onl=self.onl, step=self.step)
        return model_to_bytes(self.model, meta)

    @classmethod
    def from_bytes(cls, data):
        model, meta = model_from_bytes(data)
        meta = dict(meta)
        eps, tnl, onl, step = (meta.pop(k) for k in ("epsilon", "tnl", "onl", "step"))
        return cls(model, eps, tnl, onl, step, meta)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _steps(seq):
    if isinstance(seq, BinarySequence):
        return seq.steps()
    return BinarySequence(seq).steps()


def train_step(model, x_t, optimizer, lr, unit_scale=None, edge_scale=None):
    """One Adam ascent step on log P(x_t | history), then advance the state."""
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    out, optimizer.step_count = model.run(
        x, unit_scale, edge_scale, learn=True, adam=optimizer.kernel_args(),
        step=optimizer.step_count, lr=lr, b1=optimizer.beta1, b2=optimizer.beta2,
        eps=optimizer.eps)
    if not model.params.all_finite():
        worst = max(float(np.nanmax(np.abs(a))) for a in model.params.arrays())
        raise DivergenceError(
            f"non-finite parameters after step {optimizer.step_count} (max |param| {worst})")
    return float(out[0])


def train_sequence(model, seq, optimizer, lr, unit_scale=None, edge_scale=None):
    """Train over one sequence from a reset state; returns its total NLL."""
    reset_dynamic_state(model)
    out, optimizer.step_count = model.run(
        _steps(seq), unit_scale, edge_scale, learn=True, adam=optimizer.kernel_args(),
        step=optimizer.step_count, lr=lr, b1=optimizer.beta1, b2=optimizer.beta2,
        eps=optimizer.eps)
    if not model.params.all_finite():
        raise DivergenceError(f"non-finite parameters after Adam step {optimizer.step_count}")
    return float(np.sum(out))


def train_minibatch(model, batch, regularizer, config, optimizer, step=0):
    """One presentation of ``batch``: every sequence trained once, state reset between.

    With per-minibatch cadence the regularizer resamples once before the
    batch; with per-sample cadence before every sequence.
    """
    report = TrainReport()
    if not batch:
        return report
    if regularizer.config.resample_cadence == "per-minibatch":
        regularizer.resample(model, step)
    for seq in batch:
        if regularizer.config.resample_cadence == "per-sample":
            regularizer.resample(model, step + report.n_steps)
        g, c = regularizer.train_scales()
        report.total_nll += train_sequence(model, seq, optimizer, config.learning_rate, g, c)
        report.n_steps += _steps(seq).shape[0]
    reset_dynamic_state(model)
    return report


def evaluation_model(model, regularizer=None):
    """Copy of ``model`` with eval-time scaling folded into the weights."""
    ev = model.copy()
    reset_dynamic_state(ev)
    if regularizer is not None:
        regularizer.fold_eval_scaling(ev.params)
    return ev


def validation_nll(model, validation):
    total, steps = 0.0, 0
    for seq in validation:
        total += sequence_nll(model, seq)
        steps += _steps(seq).shape[0]
    reset_dynamic_state(model)
    return total, steps


def validate_and_checkpoint(model, validation, true_nll, best, step=0, regularizer=None,
                            meta=None):
    """Score the current model on ``validation`` and keep it if it beats ``best``.

    Returns ``(checkpoint, tnl, epsilon, improved)`` where ``checkpoint`` is
    the new best (or ``best`` unchanged).
    """
    ev = evaluation_model(model, regularizer)
    tnl, _ = validation_nll(ev, validation)
    eps = (true_nll - tnl) if true_nll is not None else -tnl
    if best is None or eps > best.epsilon:
        return Checkpoint(ev, eps, tnl, true_nll, step, dict(meta or {})), tnl, eps, True
    return best, tnl, eps, False


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsLog:
    """Append-only CSV of validation events."""

    def __init__(self, fh=None):
        self.rows = []
        self._fh = fh
        self._writer = csv.writer(fh, lineterminator="\n") if fh is not None else None
        if self._writer is not None:
            self._writer.writerow(METRIC_COLUMNS)

    def append(self, **row):
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            self._fh.flush()

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()


def _batches(train_set, size):
    return [train_set[i:i + size] for i in range(0, len(train_set), size)]


def run_training(train_set, validation_set, model_cfg, train_cfg, reg_cfg=None,
                 onl=None, metrics_file=None, mask_log=None, model=None):
    """Full training job; returns ``(best_checkpoint, metrics_log)``.

    Each mini-batch is presented for ``ceil(max_steps_per_sample / T)``
    epochs.  Validation runs at step 0 and then every
    ``validation_cadence_epochs`` epochs (counted over the whole job); the
    job stops early once the per-step validation NLL is within tolerance of
    the true per-step NLL ``onl``.  On divergence the partial metrics are
    attached to the raised ``DivergenceError`` as ``.metrics``.
    """
    reg_cfg = reg_cfg or RegularizerConfig()
    train_set = list(train_set)
    validation_set = list(validation_set)
    n = model_cfg.n_units
    for seq in train_set + validation_set:
        if _steps(seq).shape[1] != n:
            raise ConfigError("sequence dimension does not match n_units")
    model = init_model(model_cfg) if model is None else model
    optimizer = OptimizerState.for_config(model.params, train_cfg)
    regularizer = Regularizer(reg_cfg, model, log=mask_log)
    log = MetricsLog(metrics_file)
    val_steps = sum(_steps(s).shape[0] for s in validation_set)
    tol = train_cfg.tolerance(n)
    meta = {"method": reg_cfg.method, "p": reg_cfg.prune_prob}

    def validate(step, batch_idx, train_nll, best):
        best, tnl, eps, improved = validate_and_checkpoint(
            model, validation_set, onl, best, step, regularizer, meta)
        log.append(step=step, batch=batch_idx, train_nll=train_nll, val_tnl=tnl, onl=onl,
                   epsilon=eps, is_best=int(improved), method=reg_cfg.method,
                   p=reg_cfg.prune_prob)
        matched = (step > 0 and onl is not None and val_steps > 0
                   and abs(tnl - onl) / val_steps <= tol)
        return best, matched

    best, _ = validate(0, -1, None, None)
    step = 0
    epoch = 0
    window = TrainReport()
    try:
        for b_idx, batch in enumerate(_batches(train_set, train_cfg.minibatch_size)):
            length = max(_steps(s).shape[0] for s in batch)
            n_epochs = math.ceil(train_cfg.max_steps_per_sample / length) if length else 0
            for _ in range(n_epochs):
                rep = train_minibatch(model, batch, regularizer, train_cfg, optimizer, step)
                step += rep.n_steps
                window.n_steps += rep.n_steps
                window.total_nll += rep.total_nll
                epoch += 1
                if epoch % train_cfg.validation_cadence_epochs == 0:
                    best, matched = validate(step, b_idx, window.mean_nll, best)
                    window = TrainReport()
                    if matched:
                        return best, log
        if window.n_steps:
            best, _ = validate(step, b_idx, window.mean_nll, best)
    except DivergenceError as exc:
        exc.metrics = log
        raise
    return best, log


def config_dict(cfg):
    return asdict(cfg)
