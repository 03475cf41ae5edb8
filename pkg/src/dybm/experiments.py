"""End-to-end experiment runners shared by the CLI and the acceptance suite.

All knobs live in one flat ``Settings`` record so a run is fully described
by its key/value listing; ``preset`` gives the desk and paper scales.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .core import ConfigError, ModelConfig, sequence_nll
from .datagen import (
    MarkovSpec,
    VideoSpec,
    ingest_frames,
    markov_dataset,
    markov_true_nll,
    preprocess_video,
    sprite_video_dataset,
    video_to_sequence,
)
from .evaluation import (
    bit_accuracy,
    correlation_report,
    generate_rollout,
    randomize_weights,
)
from .regularizers import RegularizerConfig
from .trainer import TrainConfig, run_training


class DataError(ValueError):
    """Input data missing, too small or malformed."""


@dataclass(frozen=True)
class Settings:
    scale: str = "desk"
    seed: int = 1
    method: str = "delay-prune"
    p: float = 0.5
    resample_cadence: str = "per-minibatch"
    # model
    n_traces: int = 3
    decays: tuple = (0.2, 0.5, 0.8)
    delay_min: int = 1
    delay_max: int = 7
    init_std: float = 0.1
    # optimizer and schedule
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    minibatch_size: int = 32
    max_steps_per_sample: int = 2000
    validation_cadence_epochs: int = 5
    stop_tolerance: float = 0.0
    # markov7
    markov_dims: int = 7
    p_stay: float = 0.95
    n_train_seqs: int = 100
    train_len: int = 100
    n_val_seqs: int = 10
    val_len: int = 100
    n_test_seqs: int = 50
    test_len: int = 20
    # video
    source: str = "synthetic"
    data_path: str = ""
    patch_size: int = 64
    downsample: int = 4
    n_sprites: int = 2
    sprite_size: int = 16
    speed_min: float = 1.0
    speed_max: float = 3.0
    threshold: int = 127
    frames: int = 15
    predict: int = 5
    n_train_videos: int = 20
    n_val_videos: int = 5
    n_test_videos: int = 10
    randomize_weights: bool = False
    # sweep
    methods: tuple = ("delay-prune", "dropout", "dropconnect")
    p_values: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    n_seeds: int = 5

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def listing(self):
        """``key = value`` lines in field order; the canonical run description."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.listing().encode()).hexdigest()[:12]

    def model_config(self, n_units, seed):
        return ModelConfig(
            n_units=n_units, n_synaptic_traces=self.n_traces, n_neural_traces=self.n_traces,
            synaptic_decays=self.decays, neural_decays=self.decays,
            delay_min=self.delay_min, delay_max=self.delay_max,
            rng_seed=seed, init_std=self.init_std)

    def train_config(self, seed):
        return TrainConfig(
            max_steps_per_sample=self.max_steps_per_sample,
            validation_cadence_epochs=self.validation_cadence_epochs,
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            minibatch_size=self.minibatch_size,
            stop_tolerance=self.stop_tolerance or None, rng_seed=seed)

    def reg_config(self, method, p, seed):
        return RegularizerConfig(method=method, prune_prob=p,
                                 resample_cadence=self.resample_cadence,
                                 rng_seed=_derive(seed, "mask"))


PRESETS = {
    "markov7": {
        "desk": {},
        "paper": dict(n_train_seqs=1000, n_test_seqs=500, n_val_seqs=100,
                      max_steps_per_sample=50_000, validation_cadence_epochs=500),
    },
    "video": {
        "desk": dict(max_steps_per_sample=150, validation_cadence_epochs=1),
        "paper": dict(n_train_videos=100, n_test_videos=50, n_val_videos=10,
                      max_steps_per_sample=50_000, validation_cadence_epochs=500),
    },
}


def preset(experiment, scale="desk", **overrides):
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}")
    base = {**PRESETS[experiment]["desk"], **PRESETS[experiment][scale]}
    return Settings(scale=scale, **base).replace(**overrides)


def _derive(seed, *labels):
    """Stable 63-bit sub-seed from a seed and string labels."""
    h = hashlib.sha256(("/".join([str(seed), *labels])).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# markov7

def markov_data(settings, seed):
    def chains(label, n, length):
        spec = MarkovSpec(settings.markov_dims, settings.p_stay, length, _derive(seed, label))
        return markov_dataset(spec, n)

    return (chains("train", settings.n_train_seqs, settings.train_len),
            chains("val", settings.n_val_seqs, settings.val_len),
            chains("test", settings.n_test_seqs, settings.test_len))


def run_markov7_cell(settings, seed, method=None, p=None, metrics_file=None, mask_log=None):
    """Train one model on the Markov task and score the NLL correlation on test chains."""
    method = settings.method if method is None else method
    p = settings.p if p is None else p
    train, val, test = markov_data(settings, seed)
    spec = MarkovSpec(settings.markov_dims, settings.p_stay)
    onl = sum(markov_true_nll(s, spec) for s in val)
    best, log = run_training(
        train, val, settings.model_config(settings.markov_dims, _derive(seed, "model")),
        settings.train_config(seed), settings.reg_config(method, p, seed),
        onl=onl, metrics_file=metrics_file, mask_log=mask_log)
    model = best.to_model()
    report = correlation_report([markov_true_nll(s, spec) for s in test],
                                [sequence_nll(model, s) for s in test])
    return {"method": method, "p": p, "seed": seed, "pearson_r": report.pearson_r,
            "correlation": report, "checkpoint": best, "metrics": log}


# video

def video_spec(settings, seed=0):
    return VideoSpec(patch_size=settings.patch_size, n_frames=settings.frames + settings.predict,
                     n_sprites=settings.n_sprites, frame_threshold=settings.threshold,
                     downsample=settings.downsample, sprite_size=settings.sprite_size,
                     speed_range=(settings.speed_min, settings.speed_max), rng_seed=seed)


def video_data(settings, seed):
    """(train sequences, validation sequences, full test sequences)."""
    n_tr, n_val, n_te = settings.n_train_videos, settings.n_val_videos, settings.n_test_videos
    if settings.source == "synthetic":
        train = sprite_video_dataset(video_spec(settings, _derive(seed, "train")), n_tr)
        val = sprite_video_dataset(video_spec(settings, _derive(seed, "val")), n_val)
        test = sprite_video_dataset(video_spec(settings, _derive(seed, "test")), n_te)
    elif settings.source == "file":
        if not settings.data_path:
            raise FileNotFoundError("source=file needs data_path")
        videos = ingest_frames(settings.data_path, video_spec(settings))
        if len(videos) < n_tr + n_val + n_te:
            raise DataError(f"file holds {len(videos)} videos, need {n_tr + n_val + n_te}")
        order = np.random.default_rng(_derive(seed, "split")).permutation(len(videos))
        picked = [preprocess_video(videos[i], settings.downsample, settings.threshold)
                  for i in order[: n_tr + n_val + n_te]]
        train, val, test = picked[:n_tr], picked[n_tr:n_tr + n_val], picked[n_tr + n_val:]
    else:
        raise ConfigError(f"unknown source {settings.source!r}")
    total = settings.frames + settings.predict
    return ([video_to_sequence(v, settings.frames) for v in train],
            [video_to_sequence(v, settings.frames) for v in val],
            [video_to_sequence(v, total) for v in test])


def rollout_accuracy(model, test, settings):
    """Mean accuracy over test videos, plus per-frame means and both phase splits."""
    reports, rollouts = [], []
    for seq in test:
        seed = seq.values[:, : settings.frames]
        out = generate_rollout(model, seed, settings.predict, mode="thresholded")
        rollouts.append(out)
        reports.append(bit_accuracy(out, seq, settings.frames))
    per_frame = np.mean([r.per_frame_accuracy for r in reports], axis=0)
    return {
        "overall": float(np.mean([r.overall_accuracy for r in reports])),
        "reconstruction": float(np.mean([r.reconstruction_accuracy for r in reports])),
        "prediction": (float(np.mean([r.prediction_accuracy for r in reports]))
                       if settings.predict else None),
        "per_frame": [float(a) for a in per_frame],
        "rollouts": rollouts,
    }


def run_video_cell(settings, seed, method=None, p=None, metrics_file=None, mask_log=None,
                   with_randomized=None):
    method = settings.method if method is None else method
    p = settings.p if p is None else p
    train, val, test = video_data(settings, seed)
    n = train[0].n_dims
    best, log = run_training(
        train, val, settings.model_config(n, _derive(seed, "model")),
        settings.train_config(seed), settings.reg_config(method, p, seed),
        onl=None, metrics_file=metrics_file, mask_log=mask_log)
    result = {"method": method, "p": p, "seed": seed, "checkpoint": best, "metrics": log,
              "accuracy": rollout_accuracy(best, test, settings)}
    if settings.randomize_weights if with_randomized is None else with_randomized:
        scrambled = randomize_weights(best, np.random.default_rng(_derive(seed, "randomize")))
        result["randomized_accuracy"] = rollout_accuracy(scrambled, test, settings)
    return result
