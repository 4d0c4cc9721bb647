"""Weighted multi-region network for a single frame or flow stack.

One backbone pass produces a feature map; every region is ROI-pooled from
it. The primary region goes through its own three FC layers (plus a box
regressor on the penultimate features); secondary regions go through a
separate three-layer path whose class scores are max-reduced per class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import core
from .core import (Conv2d, Dropout, Layer, LayerParams, Linear, MaxPool2d, ReLU, Sequential,
                   TrainConfig, check_finite, cross_entropy_loss, softmax,
                   softmax_cross_entropy_backward)
from .errors import ConfigurationError, InputError, InvariantViolation, NumericError, ParseError
from .regions import Box, RegionAnnotation


@dataclass
class FusionConfig:
    w_primary: float = 0.6
    w_secondary: float = 0.4
    w_rgb: float = 0.4
    w_flow: float = 0.6
    alpha: float = 0.3

    def __post_init__(self):
        if not math.isclose(self.w_primary + self.w_secondary, 1.0, abs_tol=1e-12):
            raise ConfigurationError("w_primary + w_secondary must equal 1")
        if not math.isclose(self.w_rgb + self.w_flow, 1.0, abs_tol=1e-12):
            raise ConfigurationError("w_rgb + w_flow must equal 1")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        for name in ("w_primary", "w_secondary", "w_rgb", "w_flow"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")


@dataclass
class LossBreakdown:
    total: float
    cls: float
    reg: float
    alpha: float


# ---------------------------------------------------------------- ROI pooling

def _scaled_region(region: Box, spatial_scale: float, fh: int, fw: int):
    def rnd(v):
        return int(math.floor(v * spatial_scale + 0.5))

    x0, y0, x1, y1 = rnd(region.x_min), rnd(region.y_min), rnd(region.x_max), rnd(region.y_max)
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
    if x1 <= 0 or y1 <= 0 or x0 >= fw or y0 >= fh:
        raise InputError(f"region {region.as_tuple()} lies outside the {fw}x{fh} feature map")
    return max(x0, 0), max(y0, 0), min(x1, fw), min(y1, fh)


def roi_bins(extent: int, out: int):
    """Integer bin edges ``[floor(i*n/out), ceil((i+1)*n/out))`` over ``n = extent`` cells."""
    return [(i * extent // out, -(-(i + 1) * extent // out)) for i in range(out)]


def roi_pool_forward(featmap: np.ndarray, region: Box, out_h: int, out_w: int, spatial_scale: float):
    c, fh, fw = featmap.shape
    x0, y0, x1, y1 = _scaled_region(region, spatial_scale, fh, fw)
    crop = featmap[:, y0:y1, x0:x1]
    out = np.zeros((c, out_h, out_w), dtype=featmap.dtype)
    arg = np.full((c, out_h, out_w), -1, dtype=np.int64)  # flat index into featmap plane
    chans = np.arange(c)
    for i, (ya, yb) in enumerate(roi_bins(y1 - y0, out_h)):
        for j, (xa, xb) in enumerate(roi_bins(x1 - x0, out_w)):
            if yb <= ya or xb <= xa:
                continue
            cell = crop[:, ya:yb, xa:xb].reshape(c, -1)
            k = cell.argmax(axis=1)  # first maximum in row-major scan order
            out[:, i, j] = cell[chans, k]
            bw = xb - xa
            arg[:, i, j] = (y0 + ya + k // bw) * fw + (x0 + xa + k % bw)
    return out, arg


def roi_pool_backward(dout: np.ndarray, arg: np.ndarray, fmap_shape) -> np.ndarray:
    c, fh, fw = fmap_shape
    d = np.zeros((c, fh * fw), dtype=dout.dtype)
    valid = arg >= 0
    chan = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
    np.add.at(d, (chan[valid], arg[valid]), dout[valid])
    return d.reshape(fmap_shape)


def roi_pool(featmap: np.ndarray, region: Box, out_h: int, out_w: int, spatial_scale: float = 1.0) -> np.ndarray:
    return roi_pool_forward(featmap, region, out_h, out_w, spatial_scale)[0]


# ---------------------------------------------------------------- fusion and loss

def fuse_region_scores(primary_scores, secondary_scores, cfg: FusionConfig | None = None):
    """Per-class max over secondary rows, then ``w_primary * primary + w_secondary * max``.

    Returns ``(fused, argmax_regions)``; ties pick the first row.
    """
    cfg = cfg or FusionConfig()
    sec = np.asarray(secondary_scores, dtype=np.float64)
    if sec.ndim != 2 or sec.shape[0] == 0:
        raise InvariantViolation("at least one secondary region score row is required")
    winners = sec.argmax(axis=0)
    m = sec[winners, np.arange(sec.shape[1])]
    fused = cfg.w_primary * np.asarray(primary_scores, dtype=np.float64) + cfg.w_secondary * m
    return fused, winners


def regression_targets(primary: Box, ground_truth: Box) -> np.ndarray:
    pw, ph = primary.width, primary.height
    px, py = primary.x_min + 0.5 * pw, primary.y_min + 0.5 * ph
    gw, gh = ground_truth.width, ground_truth.height
    gx, gy = ground_truth.x_min + 0.5 * gw, ground_truth.y_min + 0.5 * gh
    return np.array([(gx - px) / pw, (gy - py) / ph, math.log(gw / pw), math.log(gh / ph)])


def apply_deltas(primary: Box, deltas) -> tuple[float, float, float, float]:
    pw, ph = primary.width, primary.height
    px, py = primary.x_min + 0.5 * pw, primary.y_min + 0.5 * ph
    cx, cy = px + deltas[0] * pw, py + deltas[1] * ph
    w, h = pw * math.exp(deltas[2]), ph * math.exp(deltas[3])
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def smooth_l1(diff: np.ndarray) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)


def smooth_l1_grad(diff: np.ndarray) -> np.ndarray:
    return np.where(np.abs(diff) < 1.0, diff, np.sign(diff))


def multi_task_loss(fused_scores, label: int, bbox_deltas, targets, cfg: FusionConfig | None = None) -> LossBreakdown:
    cfg = cfg or FusionConfig()
    fused_scores = np.asarray(fused_scores, dtype=np.float64)
    for arr, what in ((fused_scores, "scores"), (np.asarray(bbox_deltas), "box deltas"),
                      (np.asarray(targets), "regression targets")):
        check_finite(arr, what)
    cls = cross_entropy_loss(softmax(fused_scores), label)
    reg = float(smooth_l1(np.asarray(bbox_deltas) - np.asarray(targets)).sum())
    return LossBreakdown(cls + cfg.alpha * reg, cls, reg, cfg.alpha)


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    in_channels: int = 3
    class_count: int = 4
    conv_channels: tuple[int, int] = (32, 64)
    roi_output: tuple[int, int] = (4, 4)
    fc_width: int = 128
    dropout_ratio: float = 0.6
    seed: int = 0


@dataclass
class FrameOutput:
    primary_scores: np.ndarray
    secondary_scores: np.ndarray
    bbox_deltas: np.ndarray


def _fc_path(in_features, width, k, ratio, rng, prefix):
    return Sequential([
        Linear(in_features, width, rng, name=f"{prefix}.fc1"), ReLU(), Dropout(ratio, rng, f"{prefix}.drop1"),
        Linear(width, width, rng, name=f"{prefix}.fc2"), ReLU(), Dropout(ratio, rng, f"{prefix}.drop2"),
        Linear(width, k, rng, name=f"{prefix}.fc3"),
    ])


class WMRModel:
    """Backbone: conv-relu, pool, conv-relu, conv-relu, conv-relu; ROI pooling stands in for the last pool."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        c1, c2 = cfg.conv_channels
        self.backbone = Sequential([
            Conv2d(cfg.in_channels, c1, 3, 1, 1, init_rng, "conv1"), ReLU(),
            MaxPool2d(2, 2, "pool1"),
            Conv2d(c1, c1, 3, 1, 1, init_rng, "conv2"), ReLU(),
            Conv2d(c1, c2, 3, 1, 1, init_rng, "conv3"), ReLU(),
            Conv2d(c2, c2, 3, 1, 1, init_rng, "conv4"), ReLU(),
        ])
        self.spatial_scale = 0.5
        oh, ow = cfg.roi_output
        feat = c2 * oh * ow
        self.primary_path = _fc_path(feat, cfg.fc_width, cfg.class_count, cfg.dropout_ratio,
                                     self.dropout_rng, "primary")
        self.secondary_path = _fc_path(feat, cfg.fc_width, cfg.class_count, cfg.dropout_ratio,
                                       self.dropout_rng, "secondary")
        self.bbox_head = Linear(cfg.fc_width, 4, init_rng, name="bbox", init_scale=0.1)
        self.backbone_calls = 0
        self._cache = None

    # -- parameters -------------------------------------------------------
    def named_layers(self) -> list[tuple[str, Layer]]:
        out = []
        for seq in (self.backbone, self.primary_path, self.secondary_path):
            out.extend((layer.name, layer) for layer in seq.layers if layer.params is not None)
        out.append((self.bbox_head.name, self.bbox_head))
        return out

    def parameters(self) -> list[LayerParams]:
        return [layer.params for _, layer in self.named_layers()]

    def classification_parameters(self) -> list[LayerParams]:
        return [l.params for n, l in self.named_layers() if n != self.bbox_head.name]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.named_layers():
            out[f"{name}.weights"] = layer.params.weights
            out[f"{name}.biases"] = layer.params.biases
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, layer in self.named_layers():
            for part in ("weights", "biases"):
                key = f"{name}.{part}"
                if key not in state:
                    raise ParseError(f"checkpoint lacks tensor {key}")
                arr = getattr(layer.params, part)
                if state[key].shape != arr.shape:
                    raise ParseError(f"{key}: shape {state[key].shape} != {arr.shape}")
                arr[...] = state[key]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_dropout(self, ratio: float):
        for seq in (self.primary_path, self.secondary_path):
            for layer in seq.layers:
                if isinstance(layer, Dropout):
                    layer.ratio = ratio

    def manifest(self, input_hw=(64, 64)) -> str:
        lines = [f"in_channels {self.config.in_channels}", f"class_count {self.config.class_count}"]
        rows, shape = self.backbone.describe_all((self.config.in_channels, *input_hw))
        lines += [f"{name}\t{desc}\t{'x'.join(map(str, s))}" for name, desc, s in rows]
        lines.append(f"roi_pool\tROIPool {self.config.roi_output[0]}x{self.config.roi_output[1]} "
                     f"scale {self.spatial_scale}\t{shape[0]}x{self.config.roi_output[0]}x{self.config.roi_output[1]}")
        for name, layer in self.named_layers():
            if isinstance(layer, Linear):
                lines.append(f"{name}\t{layer.describe(None)[0]}\t{layer.params.weights.shape[0]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        core.save_checkpoint(path, self.state_dict())
        path.with_suffix(".arch.txt").write_text(self.manifest(), encoding="utf-8")

    @classmethod
    def load(cls, path, config: ModelConfig) -> "WMRModel":
        path = Path(path)
        model = cls(config)
        arch = path.with_suffix(".arch.txt")
        if arch.exists() and arch.read_text(encoding="utf-8").split("\n")[:2] != model.manifest().split("\n")[:2]:
            raise ParseError("architecture manifest does not match the requested model", arch)
        model.load_state_dict(core.load_checkpoint(path))
        return model

    # -- forward / backward ----------------------------------------------
    def forward_frame(self, x: np.ndarray, ann: RegionAnnotation, train: bool = False,
                      use_secondary: bool = True) -> FrameOutput:
        if x.shape[0] != self.config.in_channels:
            raise ConfigurationError(f"model expects {self.config.in_channels} input channels, got {x.shape[0]}")
        if use_secondary and not ann.secondary:
            raise InvariantViolation("annotation has no secondary region (fallback not applied)")
        fmap = self.backbone.forward(x, train)
        self.backbone_calls += 1
        oh, ow = self.config.roi_output
        p_feat, p_arg = roi_pool_forward(fmap, ann.primary, oh, ow, self.spatial_scale)
        p_in = p_feat.reshape(1, -1)
        # primary path split at the penultimate layer so the box head can branch off
        layers = self.primary_path.layers
        h = p_in
        for layer in layers[:-1]:
            h = layer.forward(h, train)
        primary_scores = layers[-1].forward(h, train)[0]
        deltas = self.bbox_head.forward(h, train)[0]

        secondary_scores = np.zeros((0, self.config.class_count))
        s_args = []
        if use_secondary:
            feats = []
            for region in ann.secondary:
                f, a = roi_pool_forward(fmap, region, oh, ow, self.spatial_scale)
                feats.append(f.reshape(-1))
                s_args.append(a)
            secondary_scores = self.secondary_path.forward(np.stack(feats), train)
        self._cache = (fmap.shape, p_arg, s_args, use_secondary)
        return FrameOutput(primary_scores, secondary_scores, deltas)

    def backward_frame(self, d_primary: np.ndarray, d_secondary: np.ndarray | None, d_deltas: np.ndarray | None):
        fshape, p_arg, s_args, use_secondary = self._cache
        layers = self.primary_path.layers
        dh = layers[-1].backward(d_primary.reshape(1, -1))
        if d_deltas is not None:
            dh = dh + self.bbox_head.backward(d_deltas.reshape(1, -1))
        for layer in reversed(layers[:-1]):
            dh = layer.backward(dh)
        oh, ow = self.config.roi_output
        dfmap = roi_pool_backward(dh.reshape(-1, oh, ow), p_arg, fshape)
        if use_secondary and d_secondary is not None:
            dfeats = self.secondary_path.backward(d_secondary)
            for row, a in zip(dfeats, s_args):
                dfmap += roi_pool_backward(row.reshape(-1, oh, ow), a, fshape)
        return self.backbone.backward(dfmap)

    def fused_scores(self, out: FrameOutput, fusion: FusionConfig, use_secondary=True):
        if not use_secondary:
            return out.primary_scores.copy(), None
        return fuse_region_scores(out.primary_scores, out.secondary_scores, fusion)


def predict_frame(model: WMRModel, x: np.ndarray, ann: RegionAnnotation,
                  fusion: FusionConfig | None = None, use_secondary: bool = True) -> np.ndarray:
    fusion = fusion or FusionConfig()
    out = model.forward_frame(x, ann, train=False, use_secondary=use_secondary)
    fused, _ = model.fused_scores(out, fusion, use_secondary)
    return softmax(fused)


def forward_frame(model: WMRModel, x: np.ndarray, ann: RegionAnnotation):
    out = model.forward_frame(x, ann)
    return out.primary_scores, out.secondary_scores, out.bbox_deltas


@dataclass
class TrainSample:
    input: np.ndarray
    annotation: RegionAnnotation
    label: int
    gt_box: Box


def frame_loss_and_backward(model: WMRModel, sample: TrainSample, fusion: FusionConfig,
                            scale: float = 1.0, use_secondary: bool = True,
                            use_regression: bool = True, train: bool = True,
                            return_input_grad: bool = False):
    """Forward one sample, accumulate ``scale`` times its gradients, return its losses.

    With ``return_input_grad`` the result is ``(losses, d_loss/d_input)``.
    """
    out = model.forward_frame(sample.input, sample.annotation, train=train, use_secondary=use_secondary)
    fused, winners = model.fused_scores(out, fusion, use_secondary)
    targets = regression_targets(sample.annotation.primary, sample.gt_box)
    loss = multi_task_loss(fused, sample.label, out.bbox_deltas, targets, fusion)
    g = softmax_cross_entropy_backward(softmax(fused), sample.label) * scale
    if use_secondary:
        d_primary = fusion.w_primary * g
        d_secondary = np.zeros_like(out.secondary_scores)
        # subgradient of the per-class max: only the winning row of each class
        d_secondary[winners, np.arange(len(g))] = fusion.w_secondary * g
    else:
        d_primary, d_secondary = g, None
    d_deltas = None
    if use_regression:
        d_deltas = fusion.alpha * smooth_l1_grad(out.bbox_deltas - targets) * scale
    dx = model.backward_frame(d_primary, d_secondary, d_deltas)
    return (loss, dx) if return_input_grad else loss


def train_step(model: WMRModel, batch: Sequence[TrainSample], cfg: TrainConfig, fusion: FusionConfig,
               iteration: int = 0, use_secondary: bool = True, use_regression: bool = True) -> LossBreakdown:
    """One SGD step over a batch of frames; gradients are averaged over the frames."""
    if not batch:
        raise InputError("empty batch")
    if len(batch) > cfg.batch_images:
        raise InputError(f"batch has {len(batch)} images, limit is {cfg.batch_images}")
    rois = sum(1 + (len(s.annotation.secondary) if use_secondary else 0) for s in batch)
    if rois > cfg.rois_per_batch:
        raise InputError(f"batch carries {rois} ROIs, limit is {cfg.rois_per_batch}")
    model.zero_grad()
    scale = 1.0 / len(batch)
    cls = reg = 0.0
    try:
        for sample in batch:
            loss = frame_loss_and_backward(model, sample, fusion, scale, use_secondary, use_regression)
            cls += loss.cls
            reg += loss.reg
        params = model.parameters() if use_regression else model.classification_parameters()
        core.sgd_step(params, cfg, iteration)
    except NumericError:
        model.zero_grad()
        raise
    cls *= scale
    reg *= scale
    return LossBreakdown(cls + fusion.alpha * reg, cls, reg, fusion.alpha)
