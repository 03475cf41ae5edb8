"""Datasets: independent two-state Markov chains and bouncing-sprite videos.

Raw-frames file layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"DYBMFRM1"
    8       4     n_videos  (uint32)
    12      4     n_frames  (uint32)
    16      4     height    (uint32)
    20      4     width     (uint32)
    24      ...   n_videos * n_frames * height * width uint8 pixels,
                  video-major, then frame, then row-major pixels
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import BinarySequence, ConfigError, ShapeError

FRAMES_MAGIC = b"DYBMFRM1"
_HEADER = struct.Struct("<8sIIII")


class FrameFormatError(ValueError):
    """Malformed raw-frames file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MarkovSpec:
    n_dims: int = 7
    p_stay: float = 0.95
    length: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_dims < 1:
            raise ConfigError("n_dims must be >= 1")
        if not 0.0 < self.p_stay <= 1.0:
            raise ConfigError("p_stay must lie in (0, 1]")
        if self.length < 0:
            raise ConfigError("length must be >= 0")


@dataclass(frozen=True)
class VideoSpec:
    patch_size: int = 64
    n_frames: int = 20
    n_sprites: int = 2
    frame_threshold: int = 127
    downsample: int = 4
    sprite_size: int = 16
    speed_range: tuple = (1.0, 3.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 4:
            raise ConfigError("patch_size must be >= 4")
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if not 0 <= self.frame_threshold <= 255:
            raise ConfigError("frame_threshold must lie in [0, 255]")
        if self.sprite_size > self.patch_size:
            raise ConfigError("sprite larger than patch")
        if self.patch_size % self.downsample:
            raise ConfigError("patch_size must be divisible by downsample")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError("speed_range must satisfy 0 <= low <= high")

    @property
    def frame_size(self):
        return self.patch_size // self.downsample


@dataclass
class FrameSequence:
    frames: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = [np.asarray(f, dtype=np.uint8) for f in self.frames]
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ShapeError(f"frames have inconsistent shapes {sorted(shapes)}")

    def array(self):
        return np.stack(self.frames)


# Markov chain

def markov_generate(spec):
    """Independent symmetric two-state chains, uniform initial state."""
    rng = np.random.default_rng(spec.rng_seed)
    out = np.empty((spec.n_dims, spec.length), dtype=np.uint8)
    if spec.length == 0:
        return BinarySequence(out)
    out[:, 0] = rng.integers(0, 2, size=spec.n_dims)
    flips = rng.random((spec.n_dims, spec.length - 1)) >= spec.p_stay
    # state at t = initial xor (number of flips so far mod 2)
    out[:, 1:] = out[:, :1] ^ (np.cumsum(flips, axis=1) % 2).astype(np.uint8)
    return BinarySequence(out)


def markov_dataset(spec, n_sequences):
    """``n_sequences`` independent chains of ``spec.length`` steps."""
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(n_sequences)
    return [markov_generate(MarkovSpec(spec.n_dims, spec.p_stay, spec.length,
                                       int(s.generate_state(1, dtype=np.uint64)[0])))
            for s in seeds]


def markov_true_nll(seq, spec):
    """NLL of ``seq`` under the generating chain (initial step uniform)."""
    x = seq.values if isinstance(seq, BinarySequence) else np.asarray(seq)
    n, t = x.shape
    if t == 0:
        return 0.0
    flips = int(np.count_nonzero(x[:, 1:] != x[:, :-1]))
    stays = n * (t - 1) - flips
    nll = n * math.log(2.0)
    if stays:
        nll -= stays * math.log(spec.p_stay)
    if flips:
        nll -= flips * math.log(1.0 - spec.p_stay)
    return nll


def markov_entropy_rate(p_stay):
    q = 1.0 - p_stay
    return -(p_stay * math.log(p_stay) + q * math.log(q))


# frame preprocessing

def downsample_frame(frame, factor):
    """Block mean over factor x factor tiles, rounded half up."""
    frame = np.asarray(frame)
    h, w = frame.shape
    if h % factor or w % factor:
        raise ShapeError(f"frame {h}x{w} not divisible by {factor}")
    blocks = frame.reshape(h // factor, factor, w // factor, factor).astype(np.int64)
    sums = blocks.sum(axis=(1, 3))
    area = factor * factor
    # floor(sum / area + 1/2) in exact integer arithmetic
    return ((2 * sums + area) // (2 * area)).astype(np.uint8)


def binarize_frame(frame, threshold=127):
    return (np.asarray(frame) > threshold).astype(np.uint8)


def preprocess_video(video, factor, threshold=127):
    """Downsample each grayscale frame, then binarize."""
    frames = [binarize_frame(downsample_frame(f, factor), threshold) for f in video.frames]
    return FrameSequence(frames, dict(video.metadata))


def video_to_sequence(frames, n_input_frames=None):
    """Flatten frames row-major into the columns of an N x T sequence."""
    frames = frames.frames if isinstance(frames, FrameSequence) else list(frames)
    if n_input_frames is not None:
        frames = frames[:n_input_frames]
    if not frames:
        raise ShapeError("no frames")
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent frame sizes {sorted(shapes)}")
    return BinarySequence(np.stack([np.asarray(f).reshape(-1) for f in frames], axis=1))


def sequence_to_frames(seq, height, width):
    vals = seq.values if isinstance(seq, BinarySequence) else np.asarray(seq)
    return [vals[:, t].reshape(height, width) for t in range(vals.shape[1])]


# bouncing sprites

def _glyphs(size):
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy - r, xx - r)
    disk = dist <= r
    ring = disk & (dist >= r * 0.55)
    bar = max(1, size // 4)
    plus = (np.abs(yy - r) < bar) | (np.abs(xx - r) < bar)
    square = np.ones((size, size), dtype=bool)
    square[bar:-bar, bar:-bar] = False
    return [g.astype(np.uint8) * 255 for g in (disk, ring, plus, square)]


def reflect(pos, vel, upper):
    """Advance one frame with elastic reflection so that 0 <= pos <= upper."""
    pos = pos + vel
    for _ in range(8):
        if pos < 0:
            pos, vel = -pos, -vel
        elif pos > upper:
            pos, vel = 2 * upper - pos, -vel
        else:
            break
    return min(max(pos, 0.0), upper), vel


def bouncing_sprites_generate(spec):
    """Grayscale video of ``n_sprites`` blobs bouncing inside the patch."""
    rng = np.random.default_rng(spec.rng_seed)
    glyphs = _glyphs(spec.sprite_size)
    upper = float(spec.patch_size - spec.sprite_size)
    sprites = []
    for _ in range(spec.n_sprites):
        glyph = glyphs[int(rng.integers(len(glyphs)))]
        y, x = rng.uniform(0.0, upper, size=2)
        theta = rng.uniform(0.0, 2 * math.pi)
        speed = rng.uniform(*spec.speed_range)
        sprites.append([glyph, y, x, speed * math.sin(theta), speed * math.cos(theta)])
    return FrameSequence(_render(sprites, spec, upper), {"source": "synthetic",
                                                         "seed": spec.rng_seed})


def _render(sprites, spec, upper):
    frames = []
    s = spec.sprite_size
    for _ in range(spec.n_frames):
        canvas = np.zeros((spec.patch_size, spec.patch_size), dtype=np.uint8)
        for glyph, y, x, _, _ in sprites:
            iy, ix = int(round(y)), int(round(x))
            np.maximum(canvas[iy:iy + s, ix:ix + s], glyph, out=canvas[iy:iy + s, ix:ix + s])
        frames.append(canvas)
        for sp in sprites:
            sp[1], sp[3] = reflect(sp[1], sp[3], upper)
            sp[2], sp[4] = reflect(sp[2], sp[4], upper)
    return frames


def sprite_video_dataset(spec, n_videos):
    """``n_videos`` synthetic videos, preprocessed to binary frames."""
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(n_videos)
    out = []
    for idx, ss in enumerate(seeds):
        sub = VideoSpec(**{**spec.__dict__, "rng_seed": int(ss.generate_state(1, np.uint64)[0])})
        video = bouncing_sprites_generate(sub)
        video.metadata["index"] = idx
        out.append(preprocess_video(video, spec.downsample, spec.frame_threshold))
    return out


# raw-frames file format

def export_frames(path, videos):
    videos = [v.array() if isinstance(v, FrameSequence) else np.asarray(v, dtype=np.uint8)
              for v in videos]
    if not videos:
        raise ShapeError("nothing to export")
    shapes = {v.shape for v in videos}
    if len(shapes) != 1:
        raise ShapeError(f"videos have inconsistent shapes {sorted(shapes)}")
    n_frames, h, w = videos[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FRAMES_MAGIC, len(videos), n_frames, h, w))
        for v in videos:
            fh.write(np.ascontiguousarray(v, dtype=np.uint8).tobytes())


def parse_frames(data):
    if len(data) < _HEADER.size:
        raise FrameFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, n_videos, n_frames, h, w = _HEADER.unpack_from(data, 0)
    if magic != FRAMES_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}", 0)
    if n_videos == 0:
        raise FrameFormatError("file holds no videos", 8)
    if n_frames == 0 or h == 0 or w == 0:
        raise FrameFormatError("zero-sized dimension in header", 12)
    per_video = n_frames * h * w
    expected = _HEADER.size + n_videos * per_video
    if len(data) < expected:
        raise FrameFormatError(
            f"truncated payload: expected {expected} bytes, got {len(data)}", len(data))
    if len(data) > expected:
        raise FrameFormatError("trailing bytes after payload", expected)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    pixels = pixels.reshape(n_videos, n_frames, h, w)
    return [FrameSequence(list(pixels[i].copy()), {"source": "file", "index": i})
            for i in range(n_videos)]


def ingest_frames(path, spec=None):
    """Read videos from a raw-frames file, checking them against ``spec`` if given."""
    with open(path, "rb") as fh:
        data = fh.read()
    videos = parse_frames(data)
    if spec is not None:
        n_frames, h, w = videos[0].array().shape
        if h != spec.patch_size or w != spec.patch_size:
            raise FrameFormatError(
                f"frames are {h}x{w}, spec expects {spec.patch_size}x{spec.patch_size}", 16)
        if n_frames < spec.n_frames:
            raise FrameFormatError(
                f"videos have {n_frames} frames, spec needs {spec.n_frames}", 12)
    return videos


def frames_from_array(array):
    """Wrap a (n_videos, n_frames, H, W) uint8 array as FrameSequences.

    The public moving-MNIST array is stored frames-first; swap its first two
    axes before calling.
    """
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim != 4:
        raise ShapeError("expected a 4-D array of videos")
    return [FrameSequence(list(v)) for v in array]


def write_sequence_csv(path, seq):
    """One row per dimension, one column per time step."""
    vals = seq.values if isinstance(seq, BinarySequence) else np.asarray(seq)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in vals:
            w.writerow(int(v) for v in row)
