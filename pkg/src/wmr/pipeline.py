"""End-to-end runs: region annotation, flow caching, stream training and evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import TrainConfig
from .flow import HornSchunckParams, estimate_flow, quantize, read_flow, write_flow
from .net import FusionConfig, LossBreakdown, ModelConfig, TrainSample, WMRModel, train_step
from .regions import (Box, ProposalFilterConfig, ProposalSet, RegionAnnotation, SelectiveSearchParams,
                      filter_secondary, load_detections, load_proposals, primary_or_full_frame,
                      selective_search, write_proposals)
from .runtime import (PreparedVideo, StreamOptions, VideoSample, fuse_streams, flow_annotation,
                      flow_ground_truth, flow_input, rgb_input, sample_training_frames,
                      stream_probabilities)
from .synth import Manifest, SynthConfig, generate_dataset, load_video, read_manifest, write_manifest

log = logging.getLogger(__name__)

STREAMS = ("rgb", "flow")


@dataclass
class ExperimentConfig:
    """Everything a train/eval run depends on. Defaults are the desk-scale settings."""
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.01, lr_decay_factor=10.0, lr_decay_every=3000, dropout_ratio=0.6,
        batch_images=2, rois_per_batch=256, max_iterations=3500, seed=0,
        max_grad_norm=100.0))
    fusion: FusionConfig = field(default_factory=FusionConfig)
    proposals: ProposalFilterConfig = field(default_factory=ProposalFilterConfig)
    selective_search: SelectiveSearchParams = field(default_factory=SelectiveSearchParams)
    horn_schunck: HornSchunckParams = field(default_factory=HornSchunckParams)
    stream: StreamOptions = field(default_factory=StreamOptions)
    model: ModelConfig = field(default_factory=ModelConfig)
    use_regression: bool = True


# ---------------------------------------------------------------- preparation

def annotate_frames(sample: VideoSample, detections: dict | None, filter_cfg: ProposalFilterConfig,
                    ss_params: SelectiveSearchParams, proposals: dict[int, ProposalSet] | None = None):
    """Primary from detections (whole frame if none), secondary from selective search + IoU band."""
    w, h = sample.size
    anns, props = [], {}
    for i, frame in enumerate(sample.frames):
        ps = proposals.get(i) if proposals is not None else None
        if ps is None:
            ps = selective_search(frame, ss_params, frame_id=i)
        ps.frame_size = (w, h)
        props[i] = ps
        primary = primary_or_full_frame((detections or {}).get(i), w, h)
        anns.append(filter_secondary(ps, primary, filter_cfg))
    return anns, props


def compute_flows(sample: VideoSample, params: HornSchunckParams) -> list:
    return [quantize(estimate_flow(a, b, params, i))
            for i, (a, b) in enumerate(zip(sample.frames[:-1], sample.frames[1:]))]


def prepare_video(sample: VideoSample, cfg: ExperimentConfig, detections=None, gt_boxes=None,
                  cache_dir: Path | None = None, with_flow: bool = True) -> PreparedVideo:
    proposals = None
    prop_file = flow_dir = None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        prop_file = cache_dir / "proposals.txt"
        flow_dir = cache_dir / "flow"
        if prop_file.exists():
            proposals = load_proposals(prop_file)
    anns, props = annotate_frames(sample, detections, cfg.proposals, cfg.selective_search, proposals)
    if prop_file is not None and not prop_file.exists():
        write_proposals(prop_file, [props[i] for i in sorted(props)])
    flows = None
    if with_flow:
        n = len(sample.frames) - 1
        paths = [flow_dir / f"flow_{i:03d}.wflo" for i in range(n)] if flow_dir else None
        if paths and all(p.exists() for p in paths):
            flows = [read_flow(p, i) for i, p in enumerate(paths)]
        else:
            flows = compute_flows(sample, cfg.horn_schunck)
            if paths:
                flow_dir.mkdir(parents=True, exist_ok=True)
                for p, f in zip(paths, flows):
                    write_flow(p, f)
    return PreparedVideo(sample, anns, flows, gt_boxes)


def build_dataset(out_dir, synth: SynthConfig) -> Path:
    """Generate the synthetic set under ``out_dir`` (reused if its manifest exists)."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.json"
    if manifest.exists():
        return manifest
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(generate_dataset(synth), manifest, synth)
    (out_dir / "synth.json").write_text(json.dumps(asdict(synth), indent=1), encoding="utf-8")
    return manifest


def cache_key(cfg: ExperimentConfig) -> str:
    """Short digest of the settings that cached proposals and flow fields depend on."""
    doc = json.dumps([asdict(cfg.selective_search), asdict(cfg.horn_schunck)], sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


def prepare_manifest(manifest_path, cfg: ExperimentConfig, splits=("train", "test"),
                     with_flow: bool = True, progress: Callable[[int, int], None] | None = None):
    manifest = read_manifest(manifest_path)
    out = {s: [] for s in splits}
    entries = [e for e in manifest.entries if e.split in splits]
    for k, entry in enumerate(entries):
        sample = load_video(manifest, entry)
        vdir = Path(manifest.root) / entry.path
        det_file = vdir / "detections.txt"
        dets = load_detections(det_file, range(len(sample.frames))) if det_file.exists() else None
        if dets is None:
            # no detector output: the manifest's boxes act as detections
            from .regions import Detection
            dets = {i: [Detection(b, 1.0)] for i, b in enumerate(entry.boxes)}
        out[entry.split].append(prepare_video(sample, cfg, dets, list(entry.boxes), vdir / "cache" / cache_key(cfg), with_flow))
        if progress:
            progress(k + 1, len(entries))
    return out


# ---------------------------------------------------------------- training

def make_model(stream: str, cfg: ExperimentConfig) -> WMRModel:
    mc = cfg.model
    in_ch = 3 if stream == "rgb" else 2 * cfg.stream.flow_len
    seed_offset = 0 if stream == "rgb" else 1000
    return WMRModel(ModelConfig(in_ch, mc.class_count, mc.conv_channels, mc.roi_output, mc.fc_width,
                                cfg.train.dropout_ratio, mc.seed + cfg.train.seed + seed_offset))


def training_sample(video: PreparedVideo, stream: str, rng, opts: StreamOptions) -> TrainSample:
    rgb_idx, flow_start = sample_training_frames(video.sample, rng, opts.flow_len)
    if stream == "rgb":
        ann = video.annotations[rgb_idx]
        gt = video.gt_boxes[rgb_idx] if video.gt_boxes else ann.primary
        return TrainSample(rgb_input(video.sample.frames[rgb_idx]), ann, video.label, gt)
    return TrainSample(flow_input(video, flow_start, opts), flow_annotation(video, flow_start, opts),
                       video.label, flow_ground_truth(video, flow_start, opts))


def train_stream(videos: Sequence[PreparedVideo], stream: str, cfg: ExperimentConfig,
                 on_step: Callable[[int, LossBreakdown], None] | None = None) -> tuple[WMRModel, list[LossBreakdown]]:
    """SGD over shuffled videos, one frame (or flow stack) per video visit."""
    model = make_model(stream, cfg)
    tc = cfg.train
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 17, STREAMS.index(stream)]))
    order = rng.permutation(len(videos))
    pos = 0
    history = []
    for it in range(tc.max_iterations):
        batch = []
        for _ in range(tc.batch_images):
            if pos == len(order):
                order, pos = rng.permutation(len(videos)), 0
            batch.append(training_sample(videos[order[pos]], stream, rng, cfg.stream))
            pos += 1
        loss = train_step(model, batch, tc, cfg.fusion, it, cfg.stream.use_secondary, cfg.use_regression)
        history.append(loss)
        if on_step:
            on_step(it, loss)
    return model, history


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    accuracy: dict[str, float]
    per_class_accuracy: dict[str, list[float]]
    confusion: dict[str, list[list[int]]]
    predictions: list[dict]


def _confusion(labels, preds, k):
    m = np.zeros((k, k), dtype=int)
    for t, p in zip(labels, preds):
        m[t, p] += 1
    return m


def evaluate(models: dict[str, WMRModel], videos: Sequence[PreparedVideo], cfg: ExperimentConfig) -> EvalResult:
    """Video-level accuracy for each available stream and for their weighted fusion."""
    k = cfg.model.class_count
    labels, preds, rows = [], {}, []
    for video in videos:
        probs = {s: stream_probabilities(models[s], video, s, cfg.fusion, cfg.stream)
                 for s in STREAMS if models.get(s) is not None}
        if len(probs) == 2:
            probs["fused"] = fuse_streams(probs["rgb"], probs["flow"], cfg.fusion)
        labels.append(video.label)
        row = {"id": video.sample.id, "label": video.label}
        for name, p in probs.items():
            preds.setdefault(name, []).append(int(np.argmax(p)))
            row[name] = {"pred": int(np.argmax(p)), "probs": [round(float(v), 6) for v in p]}
        rows.append(row)
    accuracy, per_class, confusion = {}, {}, {}
    for name, pr in preds.items():
        cm = _confusion(labels, pr, k)
        confusion[name] = cm.tolist()
        accuracy[name] = float(np.trace(cm) / max(len(labels), 1))
        totals = cm.sum(axis=1)
        per_class[name] = [float(cm[i, i] / totals[i]) if totals[i] else 0.0 for i in range(k)]
    return EvalResult(accuracy, per_class, confusion, rows)


def headline_accuracy(result: EvalResult) -> float:
    for key in ("fused", "rgb", "flow"):
        if key in result.accuracy:
            return result.accuracy[key]
    raise KeyError("no accuracy recorded")


# ---------------------------------------------------------------- whole runs

def run_experiment(cfg: ExperimentConfig, out_dir, data: dict | None = None, manifest_path=None,
                   streams: Sequence[str] = STREAMS,
                   on_step: Callable[[str, int, LossBreakdown], None] | None = None) -> EvalResult:
    """Train the requested streams, evaluate on the test split, write checkpoints and metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = prepare_manifest(manifest_path, cfg, with_flow="flow" in streams)
    models, histories = {}, {}
    for stream in streams:
        cb = (lambda it, loss, s=stream: on_step(s, it, loss)) if on_step else None
        models[stream], histories[stream] = train_stream(data["train"], stream, cfg, cb)
        models[stream].save(out_dir / f"{stream}.ckpt")
    result = evaluate(models, data["test"], cfg)
    write_loss_csv(out_dir / "loss.csv", histories)
    write_accuracy_csv(out_dir / "accuracy.csv", result)
    write_metrics(out_dir / "metrics.json", result)
    return result


def write_metrics(path, result: EvalResult) -> None:
    doc = {"accuracy": result.accuracy, "per_class_accuracy": result.per_class_accuracy,
           "confusion": result.confusion, "predictions": result.predictions}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_models(model_dir, cfg: ExperimentConfig, streams: Sequence[str] = STREAMS) -> dict[str, WMRModel]:
    models = {}
    for stream in streams:
        path = Path(model_dir) / f"{stream}.ckpt"
        if path.exists():
            models[stream] = WMRModel.load(path, make_model(stream, cfg).config)
    return models


# ---------------------------------------------------------------- reporting

def write_loss_csv(path, histories: dict[str, list[LossBreakdown]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream", "iteration", "total", "cls", "reg", "alpha"])
        for stream, hist in histories.items():
            for i, l in enumerate(hist):
                w.writerow([stream, i, repr(l.total), repr(l.cls), repr(l.reg), repr(l.alpha)])


def write_accuracy_csv(path, result: EvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream", "class", "accuracy"])
        for stream, accs in result.per_class_accuracy.items():
            for c, a in enumerate(accs):
                w.writerow([stream, c, repr(a)])


def write_histogram_csv(path, samples_ms: dict[str, list[float]], bins: int = 20) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream", "bin_low_ms", "bin_high_ms", "count"])
        for stream, samples in samples_ms.items():
            if not samples:
                continue
            counts, edges = np.histogram(samples, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([stream, f"{lo:.4f}", f"{hi:.4f}", int(c)])
