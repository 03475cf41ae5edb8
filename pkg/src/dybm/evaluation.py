"""Experiment metrics: NLL correlation, bit accuracy, rollouts, sweep tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import BinarySequence, ShapeError, conditional_probs, reset_dynamic_state, step_advance


class UndefinedCorrelationError(ValueError):
    """Pearson r requested for data with zero variance or fewer than two points."""


@dataclass
class CorrelationReport:
    pairs: list
    pearson_r: float


@dataclass
class AccuracyReport:
    per_frame_accuracy: list
    overall_accuracy: float
    reconstruction_accuracy: float | None
    prediction_accuracy: float | None
    n_reconstruction: int


def pearson_correlation(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise UndefinedCorrelationError("need at least two (x, y) pairs")
    x = arr[:, 0] - arr[:, 0].mean()
    y = arr[:, 1] - arr[:, 1].mean()
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance in one coordinate")
    r = float(x @ y) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def correlation_report(true_nlls, model_nlls):
    pairs = list(zip(map(float, true_nlls), map(float, model_nlls)))
    return CorrelationReport(pairs, pearson_correlation(pairs))


def _values(seq):
    return seq.values if isinstance(seq, BinarySequence) else np.asarray(seq)


def bit_accuracy(predicted, truth, n_reconstruction=None):
    """Percent of matching bits, per frame (column) and overall.

    The first ``n_reconstruction`` frames count as reconstruction and the
    rest as prediction; both splits are reported alongside the overall
    figure.
    """
    a, b = _values(predicted), _values(truth)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    match = a == b
    per_frame = [float(100.0 * m) for m in match.mean(axis=0)] if match.size else []
    overall = float(100.0 * match.mean()) if match.size else 100.0
    n_rec = match.shape[1] if n_reconstruction is None else n_reconstruction
    rec = float(100.0 * match[:, :n_rec].mean()) if n_rec > 0 else None
    pred = float(100.0 * match[:, n_rec:].mean()) if match.shape[1] > n_rec else None
    return AccuracyReport(per_frame, overall, rec, pred, n_rec)


def generate_rollout(model, seed_frames, n_future, mode="thresholded", rng=None):
    """Teacher-forced one-step predictions of the seed frames, then free-running generation.

    ``model`` may be a checkpoint (anything with ``to_model``) or a model; the
    caller's object is never mutated.  ``thresholded`` emits 1 iff p > 0.5.
    """
    model = model.to_model() if hasattr(model, "to_model") else model.copy()
    if mode not in ("thresholded", "sampled"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sampled" and rng is None:
        raise ValueError("sampled mode needs an rng")
    seed = _values(seed_frames)
    if seed.shape[0] != model.n_units:
        raise ShapeError("seed frames do not match model size")
    reset_dynamic_state(model)

    def emit(p):
        if mode == "thresholded":
            return (p > 0.5).astype(np.uint8)
        return (rng.random(p.shape[0]) < p).astype(np.uint8)

    cols = []
    for t in range(seed.shape[1]):
        cols.append(emit(conditional_probs(model)))
        step_advance(model, seed[:, t])
    for _ in range(n_future):
        x = emit(conditional_probs(model))
        cols.append(x)
        step_advance(model, x)
    out = np.stack(cols, axis=1) if cols else np.zeros((model.n_units, 0), dtype=np.uint8)
    return BinarySequence(out)


def randomize_weights(checkpoint_or_model, rng):
    """Copy with LTP/LTD weights redrawn i.i.d. normal at the learned weights' scale.

    Biases and delays are kept; each weight tensor keeps its own empirical
    standard deviation.
    """
    obj = checkpoint_or_model
    model = obj.to_model() if hasattr(obj, "to_model") else obj.copy()
    for arr in (model.params.ltp_weight, model.params.ltd_weight):
        arr[...] = rng.normal(0.0, float(arr.std()), size=arr.shape)
    return model


def sweep_report(results):
    """Aggregate ``(method, p, accuracy)`` triples into per-cell median and IQR rows."""
    cells = {}
    for method, p, acc in results:
        cells.setdefault((method, float(p)), []).append(float(acc))
    rows = []
    for (method, p), accs in sorted(cells.items()):
        a = np.asarray(accs)
        q1, med, q3 = np.percentile(a, [25, 50, 75])
        rows.append({"method": method, "p": p, "median": float(med),
                     "iqr": float(q3 - q1), "n": len(accs)})
    return rows


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def correlation_csv(report):
    return _csv_text(("true_nll", "model_nll"), report.pairs)


def accuracy_csv(rows):
    """``rows``: iterable of (frame index, accuracy, phase) plus optional leading labels."""
    return _csv_text(("frame", "accuracy", "phase"), rows)


def sweep_csv(rows):
    return _csv_text(("method", "p", "median", "iqr"),
                     [(r["method"], r["p"], r["median"], r["iqr"]) for r in rows])


def write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)
