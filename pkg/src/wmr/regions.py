"""Boxes, proposal generation and the primary/secondary region rules.

Boxes use integer pixel coordinates with half-open extents, so areas and
IoU values are exact integers and rationals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InputError, NoPrimaryError, ParseError


@dataclass(frozen=True, order=True)
class Box:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if isinstance(v, (bool, np.bool_)) or not isinstance(v, (int, np.integer)):
                raise InputError(f"box coordinate {name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InputError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, other: "Box") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def clamp(self, width: int, height: int) -> "Box":
        x0, y0 = min(max(self.x_min, 0), width - 1), min(max(self.y_min, 0), height - 1)
        x1, y1 = max(min(self.x_max, width), x0 + 1), max(min(self.y_max, height), y0 + 1)
        return Box(x0, y0, x1, y1)

    @classmethod
    def full_frame(cls, width: int, height: int) -> "Box":
        return cls(0, 0, width, height)


def intersection_area(a: Box, b: Box) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return w * h if w > 0 and h > 0 else 0


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def box_sort_key(b: Box):
    return (-b.area, b.x_min, b.y_min, b.x_max, b.y_max)


def bounding_union(a: Box, b: Box) -> Box:
    return Box(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
               max(a.x_max, b.x_max), max(a.y_max, b.y_max))


@dataclass
class ProposalSet:
    boxes: list[Box]
    frame_id: int = 0
    frame_size: tuple[int, int] | None = None  # (width, height)

    def __post_init__(self):
        self.boxes = sorted(set(self.boxes), key=box_sort_key)

    def __len__(self):
        return len(self.boxes)


@dataclass
class ProposalFilterConfig:
    l: float = 0.1
    u: float = 0.9
    max_secondary: int = 10

    def __post_init__(self):
        if not 0.0 <= self.l <= self.u <= 1.0:
            raise ConfigurationError(f"need 0 <= l <= u <= 1, got l={self.l}, u={self.u}")
        if self.max_secondary < 1:
            raise ConfigurationError("max_secondary must be >= 1")


@dataclass
class RegionAnnotation:
    primary: Box
    secondary: list[Box] = field(default_factory=list)
    frame_id: int = 0

    @property
    def regions(self) -> list[Box]:
        return [self.primary] + list(self.secondary)


PERSON = "person"
BACKGROUND = "background"


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: str = PERSON

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise InputError(f"detection score must be a finite value in [0, 1], got {self.score}")
        if self.class_id not in (PERSON, BACKGROUND):
            raise InputError(f"unknown detection class {self.class_id!r}")


# ---------------------------------------------------------------- segmentation

def _as_float_image(frame) -> np.ndarray:
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InputError(f"expected an H x W (x C) frame, got shape {np.shape(frame)}")
    return img


def felzenszwalb_segment(frame, k: float = 100.0, min_size: int = 20, sigma: float = 0.0) -> np.ndarray:
    """Graph-based segmentation on the 4-connected pixel grid.

    Edge weights are Euclidean colour distances after an optional Gaussian
    blur of width ``sigma``. Returns an ``H x W`` int label map with labels
    numbered ``0..n-1`` in row-major order of first appearance.
    """
    if k <= 0:
        raise ConfigurationError("k must be > 0")
    img = _as_float_image(frame)
    h, w, _ = img.shape
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")

    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = img.reshape(h * w, -1)
    weights = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")
    a, b, weights = a[order].tolist(), b[order].tolist(), weights[order].tolist()

    parent = list(range(h * w))
    size = [1] * (h * w)
    internal = [0.0] * (h * w)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for u, v, wt in zip(a, b, weights):
        ru, rv = find(u), find(v)
        if ru == rv:
            continue
        if wt <= internal[ru] + k / size[ru] and wt <= internal[rv] + k / size[rv]:
            if size[ru] < size[rv]:
                ru, rv = rv, ru
            parent[rv] = ru
            size[ru] += size[rv]
            internal[ru] = wt  # edges arrive in ascending order
    for u, v in zip(a, b):
        ru, rv = find(u), find(v)
        if ru != rv and (size[ru] < min_size or size[rv] < min_size):
            if size[ru] < size[rv]:
                ru, rv = rv, ru
            parent[rv] = ru
            size[ru] += size[rv]

    roots = np.array([find(i) for i in range(h * w)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # relabel by first appearance so labels are independent of union-find internals
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(h, w)


# ---------------------------------------------------------------- selective search

@dataclass
class SelectiveSearchParams:
    k: float = 100.0
    min_size: int = 20
    sigma: float = 0.8
    color_bins: int = 25
    w_color: float = 1.0
    w_size: float = 1.0
    w_fill: float = 1.0


def _region_stats(img, labels, n, bins):
    h, w, c = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n)
    x0 = np.full(n, w); y0 = np.full(n, h); x1 = np.zeros(n, int); y1 = np.zeros(n, int)
    np.minimum.at(x0, flat, xs.ravel()); np.minimum.at(y0, flat, ys.ravel())
    np.maximum.at(x1, flat, xs.ravel() + 1); np.maximum.at(y1, flat, ys.ravel() + 1)
    lo, hi = img.min(), img.max()
    span = hi - lo if hi > lo else 1.0
    binned = np.minimum(((img - lo) / span * bins).astype(int), bins - 1)
    hists = np.zeros((n, c * bins))
    for ch in range(c):
        np.add.at(hists, (flat, ch * bins + binned[:, :, ch].ravel()), 1.0)
    hists /= hists.sum(axis=1, keepdims=True)
    return sizes, np.stack([x0, y0, x1, y1], axis=1), hists


def _adjacent_pairs(labels):
    pairs = set()
    for la, lb in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        m = la != lb
        lo = np.minimum(la[m], lb[m])
        hi = np.maximum(la[m], lb[m])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def selective_search(frame, params: SelectiveSearchParams | None = None, frame_id: int = 0) -> ProposalSet:
    """Hierarchical grouping over a Felzenszwalb over-segmentation.

    Every region ever formed contributes its bounding box. Similarity is a
    weighted sum of histogram intersection, size and bounding-box fill.
    """
    params = params or SelectiveSearchParams()
    img = _as_float_image(frame)
    h, w, _ = img.shape
    labels = felzenszwalb_segment(img, params.k, params.min_size, params.sigma)
    n = int(labels.max()) + 1
    sizes, bbox, hists = _region_stats(img, labels, n, params.color_bins)
    im_size = float(h * w)

    size = {i: int(sizes[i]) for i in range(n)}
    box = {i: tuple(int(v) for v in bbox[i]) for i in range(n)}
    hist = {i: hists[i] for i in range(n)}
    neighbours = {i: set() for i in range(n)}
    for i, j in _adjacent_pairs(labels):
        neighbours[i].add(j)
        neighbours[j].add(i)

    def similarity(i, j):
        s_col = float(np.minimum(hist[i], hist[j]).sum())
        s_size = 1.0 - (size[i] + size[j]) / im_size
        bx = (min(box[i][0], box[j][0]), min(box[i][1], box[j][1]),
              max(box[i][2], box[j][2]), max(box[i][3], box[j][3]))
        bb = (bx[2] - bx[0]) * (bx[3] - bx[1])
        s_fill = 1.0 - (bb - size[i] - size[j]) / im_size
        return params.w_color * s_col + params.w_size * s_size + params.w_fill * s_fill

    sims = {}
    for i in range(n):
        for j in neighbours[i]:
            if i < j:
                sims[(i, j)] = similarity(i, j)

    boxes = [box[i] for i in range(n)]
    next_id = n
    while sims:
        # highest similarity first; ties resolved by the smallest pair ids
        (i, j), _ = max(sims.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
        t = next_id
        next_id += 1
        size[t] = size[i] + size[j]
        hist[t] = (size[i] * hist[i] + size[j] * hist[j]) / size[t]
        box[t] = (min(box[i][0], box[j][0]), min(box[i][1], box[j][1]),
                  max(box[i][2], box[j][2]), max(box[i][3], box[j][3]))
        neighbours[t] = (neighbours[i] | neighbours[j]) - {i, j}
        for key in [key for key in sims if i in key or j in key]:
            del sims[key]
        for nb in neighbours[t]:
            neighbours[nb] -= {i, j}
            neighbours[nb].add(t)
            sims[(nb, t)] = similarity(nb, t)
        boxes.append(box[t])

    return ProposalSet([Box(*b) for b in boxes], frame_id=frame_id, frame_size=(w, h))


# ---------------------------------------------------------------- primary / secondary rules

def select_primary(detections: Sequence[Detection]) -> Box:
    """Highest-scoring person box; ties go to the larger box, then the earlier one."""
    best = None
    for idx, det in enumerate(detections):
        if det.class_id != PERSON:
            continue
        key = (det.score, det.box.area, -idx)
        if best is None or key > best[0]:
            best = (key, det.box)
    if best is None:
        raise NoPrimaryError("no person detection available")
    return best[1]


def primary_or_full_frame(detections: Sequence[Detection] | None, width: int, height: int) -> Box:
    try:
        return select_primary(detections or [])
    except NoPrimaryError:
        return Box.full_frame(width, height)


def filter_secondary(proposals: ProposalSet, primary: Box, cfg: ProposalFilterConfig | None = None,
                     frame_size: tuple[int, int] | None = None) -> RegionAnnotation:
    """Keep proposals with ``l <= IoU(s, primary) <= u``, best ``max_secondary`` by IoU.

    If nothing survives, the whole frame becomes the single secondary region.
    """
    cfg = cfg or ProposalFilterConfig()
    scored = [(iou(s, primary), s) for s in proposals.boxes]
    kept = [(v, s) for v, s in scored if cfg.l <= v <= cfg.u]
    kept.sort(key=lambda vs: (-vs[0],) + box_sort_key(vs[1]))
    secondary = [s for _, s in kept[:cfg.max_secondary]]
    if not secondary:
        size = frame_size or proposals.frame_size
        if size is None:
            raise InputError("empty secondary set and no frame size for the whole-frame fallback")
        secondary = [Box.full_frame(*size)]
    return RegionAnnotation(primary, secondary, proposals.frame_id)


def flow_secondary_regions(u_i: RegionAnnotation, u_next: RegionAnnotation) -> list[Box]:
    """Secondary regions of a flow frame: union of the two RGB frames' secondary sets."""
    return sorted(set(u_i.secondary) | set(u_next.secondary), key=box_sort_key)


def flow_primary_from_rgb(r_i: Box, r_next: Box) -> Box:
    """Smallest box containing the primary regions of both RGB frames."""
    return bounding_union(r_i, r_next)


def flow_primary_max_magnitude(flow, window_w: int, window_h: int) -> Box:
    """Window with the largest mean flow magnitude (exhaustive, via an integral image).

    ``flow`` is a FlowField or a ``(u, v)`` pair of arrays. Ties resolve to the
    first position in row-major (y, x) order.
    """
    u, v = (flow.u, flow.v) if hasattr(flow, "u") else flow
    mag = np.hypot(u, v)
    h, w = mag.shape
    if window_w < 1 or window_h < 1 or window_w > w or window_h > h:
        raise ConfigurationError(f"window {window_w}x{window_h} does not fit field {w}x{h}")
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = mag.cumsum(0).cumsum(1)
    sums = (integral[window_h:, window_w:] - integral[:-window_h, window_w:]
            - integral[window_h:, :-window_w] + integral[:-window_h, :-window_w])
    # float noise in the integral image must not break exact ties
    best = sums.max()
    tol = 1e-9 * max(abs(best), 1.0)
    y, x = np.unravel_index(int(np.argmax(sums >= best - tol)), sums.shape)
    return Box(int(x), int(y), int(x) + window_w, int(y) + window_h)


# ---------------------------------------------------------------- file formats

def load_detections(path, known_frames: Iterable[int] | None = None) -> dict[int, list[Detection]]:
    """Parse ``frame_id x_min y_min x_max y_max score [class]`` lines.

    Blank lines are skipped. ``class`` defaults to person. Frame ids outside
    ``known_frames`` (when given) are rejected.
    """
    known = None if known_frames is None else set(known_frames)
    out: dict[int, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) not in (6, 7):
                raise ParseError(f"expected 6 or 7 fields, got {len(tokens)}", path, lineno)
            try:
                fid, x0, y0, x1, y1 = (int(t) for t in tokens[:5])
                score = float(tokens[5])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if known is not None and fid not in known:
                raise ParseError(f"unknown frame id {fid}", path, lineno)
            cls = tokens[6] if len(tokens) == 7 else PERSON
            try:
                det = Detection(Box(x0, y0, x1, y1), score, cls)
            except InputError as exc:
                raise ParseError(str(exc), path, lineno) from None
            out.setdefault(fid, []).append(det)
    return out


def write_detections(path, detections: dict[int, list[Detection]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fid in sorted(detections):
            for d in detections[fid]:
                b = d.box
                fh.write(f"{fid} {b.x_min} {b.y_min} {b.x_max} {b.y_max} {d.score!r} {d.class_id}\n")


def write_proposals(path, proposal_sets: Iterable[ProposalSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ps in proposal_sets:
            for b in ps.boxes:
                fh.write(f"{ps.frame_id} {b.x_min} {b.y_min} {b.x_max} {b.y_max}\n")


def load_proposals(path) -> dict[int, ProposalSet]:
    boxes: dict[int, list[Box]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 5:
                raise ParseError(f"expected 5 fields, got {len(tokens)}", path, lineno)
            try:
                fid, *coords = (int(t) for t in tokens)
                boxes.setdefault(fid, []).append(Box(*coords))
            except (ValueError, InputError) as exc:
                raise ParseError(str(exc), path, lineno) from None
    return {fid: ProposalSet(bs, frame_id=fid) for fid, bs in boxes.items()}
