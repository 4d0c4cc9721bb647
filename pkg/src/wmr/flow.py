"""Horn-Schunck optical flow and the stacked flow input of the temporal stream."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError, ParseError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

_AVG_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                        [1 / 6, 0.0, 1 / 6],
                        [1 / 12, 1 / 6, 1 / 12]])
_KX = np.array([[-1.0, 1.0], [-1.0, 1.0]]) * 0.25
_KY = np.array([[-1.0, -1.0], [1.0, 1.0]]) * 0.25
_KT = np.ones((2, 2)) * 0.25


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise InputError("u and v planes differ in shape")

    @property
    def shape(self):
        return self.u.shape

    @property
    def magnitude(self):
        return np.hypot(self.u, self.v)


@dataclass
class FlowStack:
    channels: np.ndarray  # (2L, H, W) in [0, 1]
    scale: float
    offset: float

    @property
    def length(self) -> int:
        return self.channels.shape[0] // 2


def to_gray(frame) -> np.ndarray:
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[:, :, 0]
        else:
            img = img[:, :, :3] @ np.array(GRAY_WEIGHTS)
    if img.ndim != 2:
        raise InputError(f"cannot convert frame of shape {np.shape(frame)} to grayscale")
    return img


@dataclass
class HornSchunckParams:
    smoothness: float = 0.1  # weight of the smoothness term
    iterations: int = 100
    intensity_scale: float = 1.0 / 255.0  # maps 8-bit frames into [0, 1]


def estimate_flow(frame_a, frame_b, params: HornSchunckParams | None = None, frame_index: int = 0) -> FlowField:
    """Dense flow from ``frame_a`` to ``frame_b`` by Jacobi iteration of Horn-Schunck."""
    params = params or HornSchunckParams()
    a = to_gray(frame_a) * params.intensity_scale
    b = to_gray(frame_b) * params.intensity_scale
    if a.shape != b.shape:
        raise InputError(f"frame shapes differ: {a.shape} vs {b.shape}")

    def conv(img, k):
        return ndimage.correlate(img, k, mode="nearest")

    ix = conv(a, _KX) + conv(b, _KX)
    iy = conv(a, _KY) + conv(b, _KY)
    it = conv(b, _KT) - conv(a, _KT)
    denom = params.smoothness + ix ** 2 + iy ** 2
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(params.iterations):
        u_avg = conv(u, _AVG_KERNEL)
        v_avg = conv(v, _AVG_KERNEL)
        common = (ix * u_avg + iy * v_avg + it) / denom
        u = u_avg - ix * common
        v = v_avg - iy * common
    return FlowField(u, v, frame_index)


def stack_flow(flows, L: int = 10, bound: float = 20.0) -> FlowStack:
    """Interleave ``u1, v1, ..., uL, vL`` after clamping to ``+-bound`` and mapping into [0, 1]."""
    flows = list(flows)
    if len(flows) != L:
        raise InputError(f"stack_flow needs exactly {L} flow fields, got {len(flows)}")
    h, w = flows[0].shape
    out = np.empty((2 * L, h, w))
    for t, f in enumerate(flows):
        if f.shape != (h, w):
            raise InputError("flow fields in a stack must share dimensions")
        out[2 * t] = f.u
        out[2 * t + 1] = f.v
    scale = 1.0 / (2.0 * bound)
    offset = 0.5
    np.clip(out, -bound, bound, out=out)
    out = out * scale + offset
    return FlowStack(out, scale, offset)


def unstack_flow(stack: FlowStack) -> list[FlowField]:
    raw = (stack.channels - stack.offset) / stack.scale
    return [FlowField(raw[2 * t], raw[2 * t + 1], t) for t in range(stack.length)]


# ---------------------------------------------------------------- cache files

FLOW_MAGIC = b"WFLO"


def write_flow(path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(flow.u, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())


def read_flow(path, frame_index: int = 0) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLOW_MAGIC:
        raise ParseError("not a WFLO flow file", path)
    if len(data) < 12:
        raise ParseError("truncated flow header", path)
    w, h = struct.unpack_from("<II", data, 4)
    n = w * h
    if len(data) != 12 + 8 * n:
        raise ParseError(f"expected {12 + 8 * n} bytes, found {len(data)}", path)
    u = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w).astype(np.float64)
    v = np.frombuffer(data, dtype="<f4", count=n, offset=12 + 4 * n).reshape(h, w).astype(np.float64)
    return FlowField(u, v, frame_index)


def quantize(flow: FlowField) -> FlowField:
    """Round a field through binary32, exactly as a cache round trip would."""
    return FlowField(flow.u.astype(np.float32).astype(np.float64),
                     flow.v.astype(np.float32).astype(np.float64), flow.frame_index)
