"""Video-level orchestration: frame sampling, stream inputs, stream fusion and latency."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .flow import FlowField, stack_flow
from .regions import (Box, ProposalFilterConfig, RegionAnnotation, bounding_union,
                      flow_primary_max_magnitude, flow_secondary_regions)

METHOD_MAX_MAGNITUDE = "method1"
METHOD_REUSE_RGB = "method2"


@dataclass
class VideoSample:
    frames: list[np.ndarray]
    label: int
    fps: float = 30.0
    id: str = ""

    def __post_init__(self):
        if len(self.frames) < 11:
            raise InputError(f"video {self.id!r} has {len(self.frames)} frames; at least 11 are required")
        shape = np.shape(self.frames[0])
        if any(np.shape(f) != shape for f in self.frames):
            raise InputError(f"video {self.id!r} has frames of differing dimensions")

    @property
    def size(self) -> tuple[int, int]:
        h, w = np.shape(self.frames[0])[:2]
        return w, h


@dataclass
class StreamOptions:
    flow_len: int = 10
    flow_bound: float = 20.0
    flow_input_scale: float = 1.0   # network input per pixel of displacement
    flow_primary: str = METHOD_REUSE_RGB
    test_count: int = 25
    use_secondary: bool = True

    def __post_init__(self):
        if self.flow_primary not in (METHOD_MAX_MAGNITUDE, METHOD_REUSE_RGB):
            raise ConfigurationError(f"unknown flow-primary method {self.flow_primary!r}")


@dataclass
class PreparedVideo:
    """A video with its per-frame region annotations and (optionally) its flow fields."""
    sample: VideoSample
    annotations: list[RegionAnnotation]
    flows: list[FlowField] | None = None
    gt_boxes: list[Box] | None = None

    @property
    def label(self) -> int:
        return self.sample.label


# ---------------------------------------------------------------- sampling

def sample_training_frames(video: VideoSample, rng: np.random.Generator, flow_len: int = 10):
    """One random RGB frame and one random start of ``flow_len`` consecutive flow fields."""
    n = len(video.frames)
    last_start = n - 1 - flow_len
    if last_start < 0:
        raise InputError(f"video with {n} frames cannot hold a {flow_len}-field flow stack")
    return int(rng.integers(0, n)), int(rng.integers(0, last_start + 1))


def sample_test_frames(n_frames: int, count: int = 25) -> list[int]:
    """Evenly spaced indices ``floor(i * n / count)``; repeats frames when ``n < count``."""
    if isinstance(n_frames, VideoSample):
        n_frames = len(n_frames.frames)
    return [i * n_frames // count for i in range(count)]


# ---------------------------------------------------------------- stream inputs

def rgb_input(frame: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` tensor centred on zero; grayscale frames are replicated across channels."""
    img = np.asarray(frame, dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    else:
        img = img[:, :, :3].transpose(2, 0, 1)
    return (img - 0.5) * 2.0


def flow_input(video: PreparedVideo, start: int, opts: StreamOptions) -> np.ndarray:
    if video.flows is None:
        raise InputError(f"video {video.sample.id!r} has no flow fields")
    stack = stack_flow(video.flows[start:start + opts.flow_len], opts.flow_len, opts.flow_bound)
    # back to pixel units, then scaled: raw stack values sit too close to the midpoint to train on
    return (stack.channels - stack.offset) / stack.scale * opts.flow_input_scale


def flow_annotation(video: PreparedVideo, start: int, opts: StreamOptions) -> RegionAnnotation:
    """Regions for the flow stack beginning at flow field ``start``.

    Secondary regions are the union of the two RGB frames the first field
    was computed from. The primary is either the bounding union of the RGB
    primaries across every frame the stack spans, or the window of largest
    mean flow magnitude in the first field (sized like that frame's primary).
    """
    anns = video.annotations
    secondary = flow_secondary_regions(anns[start], anns[start + 1])
    if opts.flow_primary == METHOD_REUSE_RGB:
        primary = anns[start].primary
        for a in anns[start + 1:start + opts.flow_len + 1]:
            primary = bounding_union(primary, a.primary)
    else:
        ref = anns[start].primary
        primary = flow_primary_max_magnitude(video.flows[start], ref.width, ref.height)
    return RegionAnnotation(primary, secondary, start)


def flow_ground_truth(video: PreparedVideo, start: int, opts: StreamOptions) -> Box:
    boxes = video.gt_boxes or [a.primary for a in video.annotations]
    gt = boxes[start]
    for b in boxes[start + 1:start + opts.flow_len + 1]:
        gt = bounding_union(gt, b)
    return gt


def temporal_starts(n_frames: int, flow_len: int, count: int) -> list[int]:
    return sample_test_frames(n_frames - flow_len, count)


# ---------------------------------------------------------------- prediction

def stream_probabilities(model, video: PreparedVideo, stream: str, fusion, opts: StreamOptions) -> np.ndarray:
    """Mean of per-frame probabilities over the ``test_count`` sampled positions of one stream."""
    from .net import predict_frame

    n = len(video.sample.frames)
    if stream == "rgb":
        positions = sample_test_frames(n, opts.test_count)
    else:
        positions = temporal_starts(n, opts.flow_len, opts.test_count)
    cache: dict[int, np.ndarray] = {}
    for p in positions:
        if p not in cache:
            if stream == "rgb":
                x, ann = rgb_input(video.sample.frames[p]), video.annotations[p]
            else:
                x, ann = flow_input(video, p, opts), flow_annotation(video, p, opts)
            cache[p] = predict_frame(model, x, ann, fusion, opts.use_secondary)
    return np.mean([cache[p] for p in positions], axis=0)


def fuse_streams(p_rgb, p_flow, cfg) -> np.ndarray:
    return cfg.w_rgb * np.asarray(p_rgb, dtype=np.float64) + cfg.w_flow * np.asarray(p_flow, dtype=np.float64)


def video_predict(model_rgb, model_flow, video: PreparedVideo, cfg, opts: StreamOptions | None = None):
    """Two-stream prediction for one video. Returns ``(probabilities, label)``.

    A missing stream model counts as weight zero for that stream.
    """
    opts = opts or StreamOptions()
    if model_rgb is None and model_flow is None:
        raise ConfigurationError("video_predict needs at least one stream model")
    p_rgb = stream_probabilities(model_rgb, video, "rgb", cfg, opts) if model_rgb is not None else None
    p_flow = stream_probabilities(model_flow, video, "flow", cfg, opts) if model_flow is not None else None
    if p_flow is None:
        probs = p_rgb
    elif p_rgb is None:
        probs = p_flow
    else:
        probs = fuse_streams(p_rgb, p_flow, cfg)
    return probs, int(np.argmax(probs))


# ---------------------------------------------------------------- score-level linear fusion

class LinearScoreFusion:
    """One-vs-rest linear hinge classifiers on ``[primary scores, secondary max scores]``."""

    def __init__(self, steps: int = 10000, lr: float = 0.1, decay_every: int = 2500,
                 l2: float = 1e-4, seed: int = 0):
        self.steps, self.lr, self.decay_every, self.l2, self.seed = steps, lr, decay_every, l2, seed
        self.weights = None
        self.bias = None
        self.majority = None
        self.degenerate = False

    @staticmethod
    def features(primary, secondary_max):
        return np.concatenate([np.asarray(primary, float), np.asarray(secondary_max, float)])

    def fit(self, score_pairs: Sequence[tuple[np.ndarray, np.ndarray, int]]) -> "LinearScoreFusion":
        x = np.stack([self.features(p, s) for p, s, _ in score_pairs])
        y = np.array([int(lbl) for _, _, lbl in score_pairs])
        k = x.shape[1] // 2
        if len(np.unique(y)) < 2:
            raise InputError("linear score fusion needs at least two classes in the training data")
        counts = np.bincount(y, minlength=k)
        self.majority = int(np.argmax(counts))
        self.degenerate = bool(np.all(np.ptp(x, axis=0) == 0))
        self.mean = x.mean(axis=0)
        self.scale = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
        xs = (x - self.mean) / self.scale
        signs = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)
        w = np.zeros((k, x.shape[1]))
        b = np.zeros(k)
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(y))
        for step in range(self.steps):
            if step % len(y) == 0 and step:
                order = rng.permutation(len(y))
            i = order[step % len(y)]
            lr = self.lr / (10.0 ** (step // self.decay_every))
            margin = signs[i] * (w @ xs[i] + b)
            active = (margin < 1.0).astype(float) * signs[i]
            w -= lr * (self.l2 * w - active[:, None] * xs[i][None, :])
            b += lr * active
        self.weights, self.bias = w, b
        return self

    def decision(self, primary, secondary_max) -> np.ndarray:
        xs = (self.features(primary, secondary_max) - self.mean) / self.scale
        return self.weights @ xs + self.bias

    def predict(self, primary, secondary_max) -> int:
        if self.degenerate:
            return self.majority
        return int(np.argmax(self.decision(primary, secondary_max)))


def linear_score_fusion_train(score_pairs, **kwargs) -> LinearScoreFusion:
    return LinearScoreFusion(**kwargs).fit(score_pairs)


# ---------------------------------------------------------------- latency

def latency_model(fps: float, accumulation_frames: int) -> float:
    """Seconds spent waiting for ``accumulation_frames`` frames at ``fps``."""
    if fps <= 0:
        raise ConfigurationError("fps must be > 0")
    return accumulation_frames / fps


@dataclass
class TimingSummary:
    mean: float
    p50: float
    p95: float
    max: float
    count: int

    @classmethod
    def from_samples(cls, samples_ms: Sequence[float]) -> "TimingSummary":
        a = np.asarray(samples_ms, dtype=np.float64)
        return cls(float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95)),
                   float(a.max()), int(a.size))


@dataclass
class LatencyReport:
    per_frame_spatial_ms: TimingSummary
    per_stack_temporal_ms: TimingSummary | None
    analytic_accumulation_s: float
    baseline_clip_accumulation_s: float
    spatial_samples_ms: list[float] = field(default_factory=list, repr=False)
    temporal_samples_ms: list[float] = field(default_factory=list, repr=False)


def measure_latency(model_rgb, model_flow, video: PreparedVideo, fusion=None,
                    opts: StreamOptions | None = None, clip_frames: int = 16,
                    repeats: int = 1) -> LatencyReport:
    """Time per-frame spatial predictions and 10-frame-after-10-frame temporal ones.

    One forward pass per stream is run first and discarded. BLAS threads are
    pinned to one for the duration.
    """
    from threadpoolctl import threadpool_limits

    from .net import FusionConfig, predict_frame

    fusion = fusion or FusionConfig()
    opts = opts or StreamOptions()
    n = len(video.sample.frames)
    spatial, temporal = [], []
    with threadpool_limits(limits=1):
        predict_frame(model_rgb, rgb_input(video.sample.frames[0]), video.annotations[0], fusion, opts.use_secondary)
        for _ in range(repeats):
            for i, frame in enumerate(video.sample.frames):
                t0 = time.perf_counter()
                predict_frame(model_rgb, rgb_input(frame), video.annotations[i], fusion, opts.use_secondary)
                spatial.append((time.perf_counter() - t0) * 1e3)
        if model_flow is not None and video.flows is not None:
            last = n - 1 - opts.flow_len
            starts = [min(j * opts.flow_len, last) for j in range(n // opts.flow_len)]
            predict_frame(model_flow, flow_input(video, 0, opts), flow_annotation(video, 0, opts),
                          fusion, opts.use_secondary)
            for _ in range(repeats):
                for s in starts:
                    t0 = time.perf_counter()
                    predict_frame(model_flow, flow_input(video, s, opts), flow_annotation(video, s, opts),
                                  fusion, opts.use_secondary)
                    temporal.append((time.perf_counter() - t0) * 1e3)
    fps = video.sample.fps
    return LatencyReport(
        TimingSummary.from_samples(spatial),
        TimingSummary.from_samples(temporal) if temporal else None,
        latency_model(fps, opts.flow_len),
        latency_model(fps, clip_frames),
        spatial, temporal,
    )
