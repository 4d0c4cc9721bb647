"""Finite-difference checks for every differentiable operation, runnable as one suite."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .core import (Conv2d, Dropout, Linear, MaxPool2d, ReLU, Sequential, cross_entropy_loss, grad_check,
                   softmax, softmax_cross_entropy_backward)
from .net import (FusionConfig, ModelConfig, TrainSample, WMRModel, frame_loss_and_backward,
                  roi_pool_backward, roi_pool_forward)
from .regions import Box, RegionAnnotation

TOLERANCE = 1e-4


def _param_check(layers, params, which, loss_fn):
    target = getattr(params, which)

    def fn(v):
        target[...] = v
        for layer in layers:
            if layer.params is not None:
                layer.params.zero_grad()
        return loss_fn(), getattr(params, "grad_" + which).copy()

    return grad_check(fn, target.copy())


def _conv_checks(rng):
    out = {}
    for stride in (1, 2):
        conv = Conv2d(2, 3, 3, stride, 1, rng, "conv")
        x = rng.normal(size=(2, 7, 7))
        head = rng.normal(size=conv.output_shape(x.shape))

        def loss():
            y = conv.forward(x)
            conv.backward(head)
            return float((y * head).sum())

        out[f"conv s{stride} input"] = grad_check(
            lambda v: (float((conv.forward(v) * head).sum()), conv.backward(head)), x)
        out[f"conv s{stride} weights"] = _param_check([conv], conv.params, "weights", loss)
        out[f"conv s{stride} biases"] = _param_check([conv], conv.params, "biases", loss)
    return out


def _pool_check(rng):
    pool = MaxPool2d(2, 2)
    x = rng.normal(size=(3, 6, 6))
    head = rng.normal(size=(3, 3, 3))
    return {"max pool input": grad_check(lambda v: (float((pool.forward(v) * head).sum()), pool.backward(head)), x)}


def _fc_checks(rng):
    fc = Linear(6, 4, rng)
    x = rng.normal(size=(2, 6))
    head = rng.normal(size=(2, 4))

    def loss():
        y = fc.forward(x)
        fc.backward(head)
        return float((y * head).sum())

    return {
        "fc input": grad_check(lambda v: (float((fc.forward(v) * head).sum()), fc.backward(head)), x),
        "fc weights": _param_check([fc], fc.params, "weights", loss),
        "fc biases": _param_check([fc], fc.params, "biases", loss),
        "relu input": grad_check(
            lambda v: (float((ReLU().forward(v) * head).sum()), np.where(v > 0, head, 0.0)),
            rng.normal(size=(2, 4))),
    }


def _softmax_ce_check(rng):
    def fn(v):
        p = softmax(v)
        return cross_entropy_loss(p, 1), softmax_cross_entropy_backward(p, 1)

    return {"softmax cross-entropy": grad_check(fn, rng.normal(size=5))}


def _dropout_check(rng):
    drop = Dropout(0.5, rng)
    drop.fixed_mask = (rng.random((3, 8)) < 0.5) / 0.5
    head = rng.normal(size=(3, 8))
    fn = lambda v: (float((drop.forward(v, train=True) * head).sum()), drop.backward(head))
    return {"dropout (fixed mask)": grad_check(fn, rng.normal(size=(3, 8)))}


def _roi_check(rng):
    regions = [Box(0, 0, 9, 9), Box(1, 2, 7, 9), Box(3, 3, 5, 4)]
    heads = [rng.normal(size=(2, 3, 3)) for _ in regions]

    def fn(x):
        total, grad = 0.0, np.zeros_like(x)
        for r, h in zip(regions, heads):
            y, arg = roi_pool_forward(x, r, 3, 3, 1.0)
            total += float((y * h).sum())
            grad += roi_pool_backward(h, arg, x.shape)
        return total, grad

    return {"roi pooling (3 regions)": grad_check(fn, rng.normal(size=(2, 9, 9)))}


def _model_checks(rng):
    cfg = ModelConfig(in_channels=3, class_count=3, conv_channels=(3, 4), roi_output=(2, 2),
                      fc_width=6, dropout_ratio=0.5, seed=int(rng.integers(1 << 30)))
    model = WMRModel(cfg)
    ann = RegionAnnotation(Box(2, 3, 10, 12), [Box(0, 0, 12, 12), Box(4, 4, 12, 11)], 0)
    for seq, rows in ((model.primary_path, 1), (model.secondary_path, len(ann.secondary))):
        for layer in seq.layers:
            if isinstance(layer, Dropout):
                layer.fixed_mask = (rng.random((rows, cfg.fc_width)) < 0.5) / 0.5
    sample = TrainSample(rng.normal(size=(3, 12, 12)), ann, 2, Box(3, 3, 11, 11))
    fusion = FusionConfig()

    def run():
        model.zero_grad()
        return frame_loss_and_backward(model, sample, fusion, train=True, return_input_grad=True)

    def input_fn(v):
        sample.input = v
        loss, dx = run()
        return loss.total, dx

    out = {"wmr forward: input": grad_check(input_fn, sample.input.copy())}
    layers = dict(model.named_layers())
    for name in ("conv1", "conv4", "primary.fc1", "secondary.fc2", "bbox"):
        out[f"wmr forward: {name}"] = _param_check(list(layers.values()), layers[name].params, "weights",
                                                   lambda: run()[0].total)
    return out


CHECKS: list[Callable[[np.random.Generator], dict[str, float]]] = [
    _conv_checks, _pool_check, _fc_checks, _softmax_ce_check, _dropout_check, _roi_check, _model_checks,
]


def gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Run every check; returns ``(name, max relative error)`` pairs."""
    rng = np.random.default_rng(seed)
    rows = []
    for check in CHECKS:
        rows.extend(check(rng).items())
    return rows
