"""Synthetic two-factor action videos.

Each class is a (motion pattern, background texture) pair::

    0: circular motion, striped background
    1: circular motion, checkered background
    2: linear motion,   striped background
    3: linear motion,   checkered background

The actor is a solid bright square surrounded by a plain clear margin, so
the actor box (and the receptive field of features inside it) carries no
texture information. Only regions reaching into the background separate
0 from 1 and 2 from 3, and only motion separates 0 from 2 and 1 from 3.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError, ParseError
from .regions import Box, Detection, write_detections
from .runtime import VideoSample

CIRCULAR, LINEAR = "circular", "linear"
STRIPED, CHECKERED = "striped", "checkered"
CLASS_FACTORS = {
    0: (CIRCULAR, STRIPED),
    1: (CIRCULAR, CHECKERED),
    2: (LINEAR, STRIPED),
    3: (LINEAR, CHECKERED),
}


@dataclass
class SynthConfig:
    class_count: int = 4
    frames_per_video: int = 16
    size: int = 64
    actor_size: int = 14
    clear_margin: int = 10
    max_step: int = 3
    noise_sigma: float = 4.0
    fps: float = 30.0
    train_videos: int = 200
    test_videos: int = 100
    detection_jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.class_count != 4:
            raise ConfigurationError("the generator defines exactly 4 classes")
        if self.frames_per_video < 11:
            raise ConfigurationError("frames_per_video must be >= 11 (one 10-field flow stack)")
        if self.actor_size + 2 * self.clear_margin + 2 * self.min_radius >= self.size:
            raise ConfigurationError("actor, margin and trajectory do not fit inside the frame")
        if self.max_step < 2:
            raise ConfigurationError("max_step must be >= 2")

    @property
    def min_radius(self) -> int:
        return 4

    @property
    def speed_range(self):
        # integer rounding adds at most 1 px per axis on top of the continuous speed
        hi = self.max_step - 0.8
        return (0.75 * hi, hi)


def _texture(kind, size, rng):
    lo = int(rng.integers(40, 81))
    hi = int(rng.integers(140, 181))
    period = int(rng.choice([6, 8, 10]))
    phase_y, phase_x = (int(v) for v in rng.integers(0, period, size=2))
    ys, xs = np.mgrid[0:size, 0:size]
    if kind == STRIPED:
        coord = ys if rng.random() < 0.5 else xs
        on = ((coord + phase_y) // (period // 2)) % 2 == 0
    else:
        cell = period // 2
        on = (((ys + phase_y) // cell) + ((xs + phase_x) // cell)) % 2 == 0
    return np.where(on, hi, lo).astype(np.float64), (lo + hi) / 2.0


def _trajectory(motion, cfg: SynthConfig, rng):
    """Integer top-left actor positions, one per frame."""
    half = cfg.actor_size / 2 + cfg.clear_margin
    lo_c, hi_c = half, cfg.size - half
    radius = float(rng.uniform(cfg.min_radius, min(9.0, (hi_c - lo_c) / 2 - 0.5)))
    cx = float(rng.uniform(lo_c + radius, hi_c - radius))
    cy = float(rng.uniform(lo_c + radius, hi_c - radius))
    speed = float(rng.uniform(*cfg.speed_range))
    phase = float(rng.uniform(0, 2 * math.pi))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    heading = float(rng.uniform(0, math.pi))
    t = np.arange(cfg.frames_per_video, dtype=np.float64)
    if motion == CIRCULAR:
        ang = phase + direction * speed / radius * t
        px, py = cx + radius * np.cos(ang), cy + radius * np.sin(ang)
    else:
        # triangle wave travelling at `speed` px/frame between -radius and +radius;
        # a long stroke keeps reversals rare inside one flow stack
        radius = (hi_c - lo_c) / 2 - 0.5
        cx = cy = cfg.size / 2
        period = 4.0 * radius / speed
        s = (phase / (2 * math.pi) * period + t) % period / period
        tri = np.where(s < 0.5, 4 * s - 1, 3 - 4 * s)
        px, py = cx + radius * tri * math.cos(heading), cy + radius * tri * math.sin(heading)
    x0 = np.floor(px - cfg.actor_size / 2 + 0.5).astype(int)
    y0 = np.floor(py - cfg.actor_size / 2 + 0.5).astype(int)
    return x0, y0


def generate_video(class_id: int, cfg: SynthConfig | None = None, seed: int = 0, video_id: str | None = None):
    """Render one video. Returns ``(VideoSample, [Box per frame])``.

    The trajectory depends only on ``seed`` and the motion factor, and the
    texture only on ``seed`` and the texture factor, so two classes that
    share a factor share that part of the video bit for bit.
    """
    cfg = cfg or SynthConfig()
    if not 0 <= class_id < cfg.class_count:
        raise InputError(f"class_id {class_id} outside [0, {cfg.class_count})")
    motion, texture = CLASS_FACTORS[class_id]
    ss = np.random.SeedSequence([cfg.seed, seed])
    traj_ss, tex_ss, noise_ss = ss.spawn(3)
    x0, y0 = _trajectory(motion, cfg, np.random.default_rng(traj_ss))
    background, plain = _texture(texture, cfg.size, np.random.default_rng(tex_ss))
    noise_rng = np.random.default_rng(noise_ss)

    a, m = cfg.actor_size, cfg.clear_margin
    frames, boxes = [], []
    for x, y in zip(x0.tolist(), y0.tolist()):
        img = background.copy()
        img[max(y - m, 0):y + a + m, max(x - m, 0):x + a + m] = plain
        img[y:y + a, x:x + a] = 235.0
        if cfg.noise_sigma > 0:
            img = img + noise_rng.normal(0.0, cfg.noise_sigma, img.shape)
        frames.append(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
        boxes.append(Box(x, y, x + a, y + a))
    vid = video_id or f"c{class_id}_s{seed}"
    return VideoSample(frames, class_id, cfg.fps, vid), boxes


@dataclass
class SynthVideo:
    sample: VideoSample
    boxes: list[Box]
    split: str


def generate_dataset(cfg: SynthConfig | None = None) -> list[SynthVideo]:
    """Balanced train/test videos; labels cycle through the classes."""
    cfg = cfg or SynthConfig()
    out = []
    for split, count, base in (("train", cfg.train_videos, 0), ("test", cfg.test_videos, 1_000_000)):
        for i in range(count):
            label = i % cfg.class_count
            sample, boxes = generate_video(label, cfg, seed=base + i, video_id=f"{split}_{i:04d}")
            out.append(SynthVideo(sample, boxes, split))
    return out


def synthetic_detections(boxes: list[Box], cfg: SynthConfig, seed: int) -> dict[int, list[Detection]]:
    """Detector stand-in: the true box jittered by a few pixels, plus a weak distractor."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 7]))
    j = cfg.detection_jitter
    out = {}
    for fid, b in enumerate(boxes):
        dx0, dy0, dx1, dy1 = (int(v) for v in rng.integers(-j, j + 1, size=4))
        det = Box(b.x_min + dx0, b.y_min + dy0, max(b.x_max + dx1, b.x_min + dx0 + 1),
                  max(b.y_max + dy1, b.y_min + dy0 + 1)).clamp(cfg.size, cfg.size)
        sx, sy = (int(v) for v in rng.integers(0, cfg.size - 8, size=2))
        distractor = Box(sx, sy, sx + 8, sy + 8)
        out[fid] = [Detection(det, round(float(rng.uniform(0.8, 1.0)), 4)),
                    Detection(distractor, round(float(rng.uniform(0.05, 0.4)), 4))]
    return out


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str
    boxes: list[Box]
    video_id: str = ""
    fps: float = 30.0

    def frame_path(self, root, index) -> Path:
        return Path(root) / self.path / f"frame_{index:03d}.pgm"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = "."

    def split(self, name):
        return [e for e in self.entries if e.split == name]


def write_pgm(path, frame: np.ndarray) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ParseError(f"unsupported image mode {im.mode}", path)
        return np.array(im)


def write_manifest(dataset: list[SynthVideo], path, cfg: SynthConfig | None = None) -> Manifest:
    """Store frames as binary PGM next to ``path`` and the index as JSON.

    With ``cfg`` given, a detection file per video is written as well.
    """
    path = Path(path)
    root = path.parent
    entries = []
    for item in dataset:
        rel = os.path.join("videos", item.sample.id)
        vdir = root / rel
        vdir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(item.sample.frames):
            write_pgm(vdir / f"frame_{i:03d}.pgm", frame)
        if cfg is not None:
            seed = int(item.sample.id.split("_")[-1]) + (1_000_000 if item.split == "test" else 0)
            write_detections(vdir / "detections.txt", synthetic_detections(item.boxes, cfg, seed))
        entries.append(ManifestEntry(rel, item.sample.label, item.split, list(item.boxes),
                                     item.sample.id, item.sample.fps))
    doc = [{"path": e.path, "label": e.label, "split": e.split, "id": e.video_id, "fps": e.fps,
            "boxes": [[i, *b.as_tuple()] for i, b in enumerate(e.boxes)]} for e in entries]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return Manifest(entries, str(root))


def read_manifest(path, validate: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ParseError("manifest not found", path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    if not isinstance(doc, list):
        raise ParseError("manifest must be a JSON list", path)
    entries = []
    for i, item in enumerate(doc):
        where = f"{path}[{i}]"
        try:
            boxes = []
            for k, row in enumerate(item["boxes"]):
                frame, *coords = row
                if frame != k:
                    raise ParseError(f"box rows must be listed in frame order (row {k} says frame {frame})", where)
                boxes.append(Box(*coords))
            entry = ManifestEntry(str(item["path"]), int(item["label"]), str(item["split"]), boxes,
                                  str(item.get("id", "")), float(item.get("fps", 30.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed entry ({exc})", where) from None
        if entry.split not in ("train", "test"):
            raise ParseError(f"unknown split {entry.split!r}", where)
        entries.append(entry)
    manifest = Manifest(entries, str(path.parent))
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: Manifest) -> None:
    seen = {}
    for e in manifest.entries:
        if e.path in seen and seen[e.path] != e.split:
            raise ParseError(f"video {e.path} appears in both splits")
        seen[e.path] = e.split
        for i in range(len(e.boxes)):
            p = e.frame_path(manifest.root, i)
            if not p.exists():
                raise ParseError(f"missing frame file {p}")


def load_video(manifest: Manifest, entry: ManifestEntry) -> VideoSample:
    frames = [read_pgm(entry.frame_path(manifest.root, i)) for i in range(len(entry.boxes))]
    return VideoSample(frames, entry.label, entry.fps, entry.video_id or entry.path)


def manifest_as_dict(m: Manifest):
    return [asdict(e) for e in m.entries]
