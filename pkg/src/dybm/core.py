"""Dynamic Boltzmann machine: parameters, FIFO queues, eligibility traces.

Every ordered pair of units (i, j), self-pairs included, is connected by a
FIFO queue of length ``d[i, j] - 1``.  A spike emitted by unit i at time s
reaches unit j at time s + d[i, j] and is then folded into the synaptic
traces ``alpha[i, j, :]``.  Spikes still travelling inside the queue are
summarized by ``beta[i, j, :]`` and each unit keeps its own neural traces
``gamma[j, :]``.  Given these statistics the units at the current step are
conditionally independent Bernoulli variables with

    z_j = b_j + sum_{i,k} u[i,j,k] alpha[i,j,k]
              - sum_{i,l} v[i,j,l] beta[i,j,l]
              - sum_{i,l} v[j,i,l] gamma[i,l]
    p_j = sigmoid(z_j)

Queue contents are stored densely as ``queue[i, j, m]`` = value pushed m + 1
steps ago, zero beyond the queue length.
"""

from __future__ import annotations

import io
import json
import zipfile
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernel_py
from . import backend

FORMAT_VERSION = 1
MAGIC = "dybm-checkpoint"


class ConfigError(ValueError):
    """Invalid model, training or experiment configuration."""


class ShapeError(ValueError):
    """Array dimensions do not match the model."""


class DivergenceError(FloatingPointError):
    """Training produced non-finite parameters or activations."""


@dataclass(frozen=True)
class ModelConfig:
    n_units: int
    n_synaptic_traces: int = 3
    n_neural_traces: int = 3
    synaptic_decays: tuple = (0.2, 0.5, 0.8)
    neural_decays: tuple = (0.2, 0.5, 0.8)
    delay_min: int = 1
    delay_max: int = 7
    rng_seed: int = 0
    init_std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "synaptic_decays", tuple(float(x) for x in self.synaptic_decays))
        object.__setattr__(self, "neural_decays", tuple(float(x) for x in self.neural_decays))
        if self.n_units < 1 or self.n_synaptic_traces < 1 or self.n_neural_traces < 1:
            raise ConfigError("n_units, n_synaptic_traces and n_neural_traces must be >= 1")
        if len(self.synaptic_decays) != self.n_synaptic_traces:
            raise ConfigError("need one synaptic decay rate per synaptic trace")
        if len(self.neural_decays) != self.n_neural_traces:
            raise ConfigError("need one neural decay rate per neural trace")
        for rate in self.synaptic_decays + self.neural_decays:
            if not 0.0 < rate < 1.0:
                raise ConfigError(f"decay rate {rate} outside (0, 1)")
        if not 1 <= self.delay_min <= self.delay_max:
            raise ConfigError("need 1 <= delay_min <= delay_max")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")
        if self.init_std < 0:
            raise ConfigError("init_std must be nonnegative")

    @property
    def queue_depth(self):
        return max(self.delay_max - 1, 1)

    def to_dict(self):
        d = asdict(self)
        d["synaptic_decays"] = list(self.synaptic_decays)
        d["neural_decays"] = list(self.neural_decays)
        return d


@dataclass
class Parameters:
    bias: np.ndarray
    ltp_weight: np.ndarray
    ltd_weight: np.ndarray

    @classmethod
    def zeros(cls, config):
        n, k, l = config.n_units, config.n_synaptic_traces, config.n_neural_traces
        return cls(np.zeros(n), np.zeros((n, n, k)), np.zeros((n, n, l)))

    def copy(self):
        return Parameters(self.bias.copy(), self.ltp_weight.copy(), self.ltd_weight.copy())

    def arrays(self):
        return (self.bias, self.ltp_weight, self.ltd_weight)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class FifoQueue:
    """Conduction-delay line of ``delay - 1`` binary slots, oldest at the head.

    ``push`` inserts the newest value and returns the value that reaches the
    post-synaptic unit on this step.  With ``delay == 1`` the queue has no
    slots and the pushed value passes straight through.
    """

    def __init__(self, delay, slots=None):
        if delay < 1:
            raise ConfigError("delay must be >= 1")
        self.delay = int(delay)
        if slots is None:
            slots = [0] * (self.delay - 1)
        if len(slots) != self.delay - 1:
            raise ShapeError(f"delay {delay} needs {delay - 1} slots, got {len(slots)}")
        self._slots = deque(int(s) for s in slots)

    @property
    def slots(self):
        return list(self._slots)

    def push(self, value):
        value = int(value)
        if self.delay == 1:
            return value
        out = self._slots.popleft()
        self._slots.append(value)
        return out

    def __len__(self):
        return len(self._slots)

    def __repr__(self):
        return f"FifoQueue(delay={self.delay}, slots={self.slots})"


@dataclass
class TraceState:
    gamma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, config):
        n, k, l = config.n_units, config.n_synaptic_traces, config.n_neural_traces
        return cls(np.zeros((n, l)), np.zeros((n, n, k)), np.zeros((n, n, l)))

    def copy(self):
        return TraceState(self.gamma.copy(), self.alpha.copy(), self.beta.copy())


@dataclass
class BinarySequence:
    """An N x T matrix of {0, 1} values; column t is the pattern at time t."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ShapeError(f"binary sequence must be 2-D (N x T), got shape {vals.shape}")
        if vals.size and not np.all((vals == 0) | (vals == 1)):
            raise ValueError("binary sequence entries must be 0 or 1")
        self.values = vals.astype(np.uint8)

    @classmethod
    def from_steps(cls, steps):
        """Build from a (T, N) array, one row per time step."""
        return cls(np.asarray(steps).T)

    @property
    def n_dims(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]

    def steps(self):
        """(T, N) float64 C-contiguous view for the kernels."""
        return np.ascontiguousarray(self.values.T, dtype=np.float64)

    def __eq__(self, other):
        return isinstance(other, BinarySequence) and np.array_equal(self.values, other.values)


class DybmModel:
    def __init__(self, config, params, delays, original_delays=None):
        n = config.n_units
        delays = np.ascontiguousarray(delays, dtype=np.int64)
        if delays.shape != (n, n):
            raise ShapeError(f"delays must be {n}x{n}")
        if np.any(delays < 1) or np.any(delays > config.delay_max):
            raise ConfigError("delays must lie in [1, delay_max]")
        self.config = config
        self.params = params
        self.delays = delays
        self.original_delays = (delays.copy() if original_delays is None
                                else np.asarray(original_delays, dtype=np.int64).copy())
        self.original_delays.setflags(write=False)
        self.queue_slots = np.zeros((n, n, config.queue_depth))
        self.traces = TraceState.zeros(config)
        self.clock = 0
        self._lam = np.asarray(config.synaptic_decays, dtype=np.float64)
        self._mu = np.asarray(config.neural_decays, dtype=np.float64)
        self._mu_pow = _kernel_py.queue_decay_table(self._mu, config.queue_depth)
        self._ones_unit = np.ones(n)
        self._ones_edge = np.ones((n, n))

    @property
    def n_units(self):
        return self.config.n_units

    def queue(self, i, j):
        """Snapshot of the FIFO queue on edge (i, j), oldest value first."""
        d = int(self.delays[i, j])
        slots = self.queue_slots[i, j, : d - 1][::-1]
        return FifoQueue(d, [int(s) for s in slots])

    def copy(self):
        new = DybmModel(self.config, self.params.copy(), self.delays.copy(), self.original_delays)
        new.queue_slots = self.queue_slots.copy()
        new.traces = self.traces.copy()
        new.clock = self.clock
        return new

    def full_scales(self):
        return self._ones_unit, self._ones_edge

    def run(self, seq, unit_scale=None, edge_scale=None, learn=False, adam=None,
            step=0, lr=0.0, b1=0.9, b2=0.999, eps=1e-8, kernel=None):
        """Feed a (T, N) float64 array through the model; returns (step_nll, step)."""
        steps = np.ascontiguousarray(seq, dtype=np.float64)
        if steps.ndim != 2 or steps.shape[1] != self.n_units:
            raise ShapeError(f"expected (T, {self.n_units}) steps, got {steps.shape}")
        if unit_scale is None:
            unit_scale = self._ones_unit
        if edge_scale is None:
            edge_scale = self._ones_edge
        out = np.zeros(steps.shape[0])
        run = kernel or backend.run_sequence
        p = self.params
        try:
            step = run(p.bias, p.ltp_weight, p.ltd_weight, self.delays, self.queue_slots,
                       self.traces.alpha, self.traces.gamma, self.traces.beta,
                       self._lam, self._mu, steps, unit_scale, edge_scale, out,
                       learn, adam, step, lr, b1, b2, eps)
        except FloatingPointError as exc:
            raise DivergenceError(str(exc)) from exc
        self.clock += steps.shape[0]
        return out, step


def draw_delays(rng, shape, delay_min, delay_max):
    return rng.integers(delay_min, delay_max + 1, size=shape, dtype=np.int64)


def init_model(config):
    """Random N(0, init_std) parameters and uniform delays, zero dynamic state."""
    rng = np.random.default_rng(config.rng_seed)
    n, k, l = config.n_units, config.n_synaptic_traces, config.n_neural_traces
    s = config.init_std
    params = Parameters(
        bias=rng.normal(0.0, s, size=n),
        ltp_weight=rng.normal(0.0, s, size=(n, n, k)),
        ltd_weight=rng.normal(0.0, s, size=(n, n, l)),
    )
    delays = draw_delays(rng, (n, n), config.delay_min, config.delay_max)
    return DybmModel(config, params, delays)


def _check_vector(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_units,):
        raise ShapeError(f"expected a length-{model.n_units} vector, got shape {x.shape}")
    return x


def activations(model, unit_scale=None, edge_scale=None):
    g, c = model.full_scales()
    tr, p = model.traces, model.params
    return _kernel_py.logits(p.bias, p.ltp_weight, p.ltd_weight, tr.alpha, tr.gamma, tr.beta,
                             g if unit_scale is None else unit_scale,
                             c if edge_scale is None else edge_scale)


def conditional_probs(model, unit_scale=None, edge_scale=None):
    """P(x_j = 1 | history) for every unit; does not touch the model state."""
    z = activations(model, unit_scale, edge_scale)
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite activation; training diverged")
    return _kernel_py.sigmoid(z)


def step_advance(model, x_t):
    """Push pattern ``x_t`` through queues and traces and advance the clock."""
    x = _check_vector(model, x_t)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("pattern entries must be 0 or 1")
    tr = model.traces
    _kernel_py.advance(x, model.delays, model.queue_slots, tr.alpha, tr.gamma, tr.beta,
                       model._lam, model._mu, model._mu_pow)
    model.clock += 1


def loglik_gradient(model, x_t, unit_scale=None, edge_scale=None):
    """Gradient of log P(x_t | history) as a ``Parameters`` instance."""
    x = _check_vector(model, x_t)
    g, c = model.full_scales()
    g = g if unit_scale is None else unit_scale
    c = c if edge_scale is None else edge_scale
    p = conditional_probs(model, g, c)
    tr = model.traces
    return Parameters(*_kernel_py.gradients(p, x, tr.alpha, tr.gamma, tr.beta, g, c))


def sample_next(model, rng):
    p = conditional_probs(model)
    return (rng.random(model.n_units) < p).astype(np.uint8)


def reset_dynamic_state(model):
    """Zero traces and queues and rewind the clock; parameters are kept."""
    model.queue_slots[...] = 0.0
    model.traces.alpha[...] = 0.0
    model.traces.gamma[...] = 0.0
    model.traces.beta[...] = 0.0
    model.clock = 0


def sequence_nll(model, seq, reset=True, unit_scale=None, edge_scale=None):
    """-log p(seq), with everything before the first column taken as zero."""
    if not isinstance(seq, BinarySequence):
        seq = BinarySequence(seq)
    if seq.n_dims != model.n_units:
        raise ShapeError(f"sequence has {seq.n_dims} dims, model has {model.n_units} units")
    if reset:
        reset_dynamic_state(model)
    out, _ = model.run(seq.steps(), unit_scale, edge_scale)
    return float(np.sum(out))


# persistence

def model_to_bytes(model, meta=None):
    """Serialize parameters, delays and config as a versioned .npz payload."""
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "bias": model.params.bias,
        "ltp_weight": model.params.ltp_weight,
        "ltd_weight": model.params.ltd_weight,
        "delays": model.delays,
        "original_delays": np.asarray(model.original_delays),
    }
    # np.savez stamps entries with the wall clock; a fixed stamp keeps the
    # archive bytes reproducible
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        entry.getvalue())
    return buf.getvalue()


def model_from_bytes(data):
    """Inverse of ``model_to_bytes``; returns (model, meta)."""
    try:
        with np.load(io.BytesIO(data), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise ValueError(f"not a checkpoint archive: {exc}") from exc
    header = json.loads(arrays["header"].tobytes().decode())
    if header.get("magic") != MAGIC:
        raise ValueError("bad checkpoint magic")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig(**header["config"])
    params = Parameters(arrays["bias"].copy(), arrays["ltp_weight"].copy(),
                        arrays["ltd_weight"].copy())
    model = DybmModel(config, params, arrays["delays"], arrays["original_delays"])
    return model, header["meta"]
