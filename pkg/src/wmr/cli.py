"""``wmr`` command line: data generation, region and flow caching, training, evaluation and checks."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigurationError, InputError, NumericError, WMRError
from .pipeline import (build_dataset, evaluate, load_models, make_model, prepare_manifest, run_experiment,
                       train_stream, write_accuracy_csv, write_histogram_csv, write_loss_csv, write_metrics)
from .runtime import latency_model, measure_latency

log = logging.getLogger("wmr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file; flags given on the command line take precedence")
    common.add_argument("--out", help="output directory (dataset directory for gen-data)")
    common.add_argument("--data", help="dataset directory containing manifest.json")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--stream", choices=("rgb", "flow", "both"))
    model_flags.add_argument("--flow-primary", choices=("method1", "method2"))
    model_flags.add_argument("--l", type=float, help="lower IoU bound for secondary regions")
    model_flags.add_argument("--u", type=float, help="upper IoU bound for secondary regions")
    model_flags.add_argument("--w-primary", type=float)
    model_flags.add_argument("--w-rgb", type=float)
    model_flags.add_argument("--iters", type=int)
    model_flags.add_argument("--models", help="checkpoint directory (defaults to --out)")

    parser = _Parser(prog="wmr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize the dataset and its manifest")
    p.add_argument("--fps", type=float)

    sub.add_parser("propose", parents=[common, model_flags], help="selective search and secondary-region dump")
    sub.add_parser("flow", parents=[common, model_flags], help="compute and cache optical flow")

    for name, text in (("train", "train the RGB and/or flow stream"), ("eval", "video-level accuracy")):
        p = sub.add_parser(name, parents=[common, model_flags], help=text)
        p.add_argument("--alpha", type=float)
        p.add_argument("--dropout", type=float)

    p = sub.add_parser("latency", parents=[common, model_flags], help="accumulation and compute latency")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--accumulation", type=int, help="frames waited for before predicting (default: flow length)")
    p.add_argument("--clip-frames", type=int, default=16)

    p = sub.add_parser("sweep", parents=[common, model_flags], help="grid over dropout ratio and/or alpha")
    p.add_argument("--dropout", type=_float_list)
    p.add_argument("--alpha", type=_float_list)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite over every layer")
    return parser


# ---------------------------------------------------------------- config resolution

def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    get = lambda name: getattr(args, name, None)
    overrides = {
        "out": get("out"),
        "data": get("data"),
        "seed": get("seed"),
        "streams": get("stream"),
        "stream.flow_primary": get("flow_primary"),
        "proposals.l": get("l"),
        "proposals.u": get("u"),
        "train.max_iterations": get("iters"),
    }
    if args.command in ("train", "eval"):
        overrides["fusion.alpha"] = get("alpha")
        overrides["train.dropout_ratio"] = get("dropout")
    if args.command == "gen-data":
        overrides["synth.fps"] = get("fps")
    if get("w_primary") is not None:
        overrides["fusion.w_primary"] = args.w_primary
        overrides["fusion.w_secondary"] = 1.0 - args.w_primary
    if get("w_rgb") is not None:
        overrides["fusion.w_rgb"] = args.w_rgb
        overrides["fusion.w_flow"] = 1.0 - args.w_rgb
    cfg = config_mod.with_overrides(cfg, **overrides)
    if get("seed") is not None:
        # one flag seeds whatever the command randomizes
        key = "synth.seed" if args.command == "gen-data" else "train.seed"
        cfg = config_mod.with_overrides(cfg, **{key: args.seed})
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(cfg) -> Path:
    path = Path(cfg.data) / "manifest.json"
    if not path.exists():
        raise InputError(f"no manifest at {path}; run `wmr gen-data --out {cfg.data}` first")
    return path


def _write_report(out: Path, doc: dict) -> None:
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _progress(label):
    def cb(done, total):
        if done == total or done % 50 == 0:
            log.info("%s: %d/%d videos", label, done, total)
    return cb


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args) -> int:
    out = _out_dir(cfg)
    manifest = build_dataset(out, cfg.experiment.synth)
    config_mod.save_config(cfg, out / "config.toml")
    counts = {}
    for e in json.loads(manifest.read_text(encoding="utf-8")):
        counts[e["split"]] = counts.get(e["split"], 0) + 1
    print(f"wrote {manifest} ({counts.get('train', 0)} train, {counts.get('test', 0)} test videos)")
    return EXIT_OK


def cmd_propose(cfg, args) -> int:
    out = _out_dir(cfg)
    data = prepare_manifest(_manifest(cfg), cfg.experiment, with_flow=False, progress=_progress("proposals"))
    region_dir = out / "regions"
    region_dir.mkdir(exist_ok=True)
    counts, fallbacks = [], 0
    for video in data["train"] + data["test"]:
        w, h = video.sample.size
        with open(region_dir / f"{video.sample.id}.txt", "w", encoding="utf-8") as fh:
            for ann in video.annotations:
                fh.write(f"{ann.frame_id} primary {' '.join(map(str, ann.primary.as_tuple()))}\n")
                for b in ann.secondary:
                    fh.write(f"{ann.frame_id} secondary {' '.join(map(str, b.as_tuple()))}\n")
                counts.append(len(ann.secondary))
                fallbacks += ann.secondary == [ann.primary.full_frame(w, h)]
    report = {"frames": len(counts), "mean_secondary": float(np.mean(counts)) if counts else 0.0,
              "fallback_frames": int(fallbacks), "l": cfg.experiment.proposals.l, "u": cfg.experiment.proposals.u}
    _write_report(out, report)
    config_mod.save_config(cfg, out / "config.toml")
    print(f"{report['frames']} frames, {report['mean_secondary']:.2f} secondary regions per frame, "
          f"{fallbacks} whole-frame fallbacks")
    return EXIT_OK


def cmd_flow(cfg, args) -> int:
    out = _out_dir(cfg)
    data = prepare_manifest(_manifest(cfg), cfg.experiment, with_flow=True, progress=_progress("flow"))
    mags = [float(np.mean(f.magnitude)) for v in data["train"] + data["test"] for f in v.flows]
    report = {"fields": len(mags), "mean_magnitude_px": float(np.mean(mags)) if mags else 0.0}
    _write_report(out, report)
    config_mod.save_config(cfg, out / "config.toml")
    print(f"{report['fields']} flow fields cached, mean magnitude {report['mean_magnitude_px']:.3f} px")
    return EXIT_OK


def _step_logger(stream, it, loss):
    if it % 100 == 0:
        log.info("%s it %d: total %.4f cls %.4f reg %.4f", stream, it, loss.total, loss.cls, loss.reg)


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg)
    exp = cfg.experiment
    streams = cfg.stream_names()
    data = prepare_manifest(_manifest(cfg), exp, splits=("train",), with_flow="flow" in streams,
                            progress=_progress("prepare"))
    histories = {}
    for stream in streams:
        model, histories[stream] = train_stream(data["train"], stream, exp,
                                                lambda it, loss, s=stream: _step_logger(s, it, loss))
        model.save(out / f"{stream}.ckpt")
    write_loss_csv(out / "loss.csv", histories)
    report = {s: {"iterations": len(h), "final_total": h[-1].total, "final_cls": h[-1].cls, "final_reg": h[-1].reg}
              for s, h in histories.items()}
    _write_report(out, report)
    config_mod.save_config(cfg, out / "config.toml")
    for s, r in report.items():
        print(f"{s}: {r['iterations']} iterations, final loss {r['final_total']:.4f}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    out = _out_dir(cfg)
    exp = cfg.experiment
    models = load_models(args.models or cfg.out, exp, cfg.stream_names())
    if not models:
        raise InputError(f"no checkpoints found in {args.models or cfg.out}")
    data = prepare_manifest(_manifest(cfg), exp, splits=("test",), with_flow="flow" in models,
                            progress=_progress("prepare"))
    result = evaluate(models, data["test"], exp)
    write_metrics(out / "metrics.json", result)
    write_accuracy_csv(out / "accuracy.csv", result)
    _write_report(out, {"accuracy": result.accuracy, "confusion": result.confusion})
    config_mod.save_config(cfg, out / "config.toml")
    for name, acc in result.accuracy.items():
        print(f"{name:6s} accuracy {acc:.4f}")
        for row in result.confusion[name]:
            print("        " + " ".join(f"{v:4d}" for v in row))
    return EXIT_OK


def cmd_latency(cfg, args) -> int:
    frames = args.accumulation if args.accumulation is not None else cfg.experiment.stream.flow_len
    analytic = latency_model(args.fps, frames)
    clip = latency_model(args.fps, args.clip_frames)
    print(f"accumulation latency: {analytic:.4f} s ({frames} frames at {args.fps:g} fps)")
    print(f"clip baseline: {clip:.4f} s ({args.clip_frames} frames)")
    report = {"fps": args.fps, "accumulation_frames": frames, "analytic_accumulation_s": analytic,
              "baseline_clip_accumulation_s": clip}
    if args.data or args.models:
        exp = cfg.experiment
        models = load_models(args.models or cfg.out, exp)
        for stream in ("rgb", "flow"):
            models.setdefault(stream, make_model(stream, exp))
        data = prepare_manifest(_manifest(cfg), exp, splits=("test",))
        video = data["test"][0]
        rep = measure_latency(models["rgb"], models["flow"], video, exp.fusion, exp.stream,
                              clip_frames=args.clip_frames)
        for name, summary in (("spatial", rep.per_frame_spatial_ms), ("temporal", rep.per_stack_temporal_ms)):
            if summary is not None:
                report[f"{name}_ms"] = summary.__dict__
                print(f"{name}: mean {summary.mean:.2f} ms, p50 {summary.p50:.2f}, p95 {summary.p95:.2f}, "
                      f"max {summary.max:.2f} over {summary.count}")
        out = _out_dir(cfg)
        write_histogram_csv(out / "latency_hist.csv",
                            {"spatial": rep.spatial_samples_ms, "temporal": rep.temporal_samples_ms})
    if args.out or args.data or args.models:
        out = _out_dir(cfg)
        _write_report(out, report)
        config_mod.save_config(cfg, out / "config.toml")
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    if not args.dropout and not args.alpha:
        raise InputError("sweep needs --dropout and/or --alpha values")
    out = _out_dir(cfg)
    dropouts = args.dropout or [cfg.experiment.train.dropout_ratio]
    alphas = args.alpha or [cfg.experiment.fusion.alpha]
    streams = cfg.stream_names()
    data = prepare_manifest(_manifest(cfg), cfg.experiment, with_flow="flow" in streams,
                            progress=_progress("prepare"))
    rows = []
    for d in dropouts:
        for a in alphas:
            point = config_mod.with_overrides(cfg, **{"train.dropout_ratio": d, "fusion.alpha": a})
            log.info("sweep point dropout=%g alpha=%g", d, a)
            result = run_experiment(point.experiment, out / f"dropout{d:g}_alpha{a:g}", data=data,
                                    streams=streams, on_step=_step_logger)
            rows.append({"dropout": d, "alpha": a, **{k: result.accuracy.get(k, "") for k in ("rgb", "flow", "fused")}})
            print(f"dropout {d:g} alpha {a:g}: " + ", ".join(f"{k} {v:.4f}" for k, v in result.accuracy.items()))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["dropout", "alpha", "rgb", "flow", "fused"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_report(out, {"points": rows})
    config_mod.save_config(cfg, out / "config.toml")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    from .gradcheck import TOLERANCE, gradient_suite

    rows = gradient_suite(args.seed or 0)
    width = max(len(n) for n, _ in rows)
    print(f"{'check':{width}s}  max rel. error")
    for name, err in rows:
        print(f"{name:{width}s}  {err:.3e}{'' if err < TOLERANCE else '  FAIL'}")
    worst = max(e for _, e in rows)
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    if args.out:
        out = _out_dir(cfg)
        _write_report(out, {"checks": dict(rows), "tolerance": TOLERANCE})
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {TOLERANCE:g}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "propose": cmd_propose, "flow": cmd_flow, "train": cmd_train, "eval": cmd_eval,
    "latency": cmd_latency, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="")
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WMRError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
