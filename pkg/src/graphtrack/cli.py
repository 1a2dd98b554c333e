"""``graphtrack`` command line: track, train, eval, explain, synth, render.

Exit codes: 0 success, 2 input parse, 3 config, 4 divergence, 5 correspondence.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import explain as xai
from .config import ConfigError, RunConfig
from .detect_io import (FORMATS, LabeledFrame, StreamParseError, mot_image_size, parse_jsonl_line,
                        parse_labeled, parse_stream, serialize, frame_to_jsonl)
from .gnn import NonFiniteError, fit, init_params, load_params, save_params
from .metrics import CorrespondenceError, evaluate
from .render import render_frames
from .synth import (ScenarioError, degradation_from_dict, degrade, generate, preset_crossing,
                    preset_degraded, preset_dense, preset_linear, preset_occlusion, preset_separated,
                    scenario_from_dict, DegradationConfig)
from .tracker import FrameResult, Tracker, TrackerState, step
from .training import graph_pairs, input_dim, label_stream

EXIT_OK, EXIT_PARSE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CORRESPONDENCE = 0, 2, 3, 4, 5
METHODS = ("grad-cam", "grad-cam++", "eigen-cam")
PRESETS = ("linear", "occlusion", "separated", "crossing", "dense", "degraded")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"graphtrack: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- config & inputs

def _run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.adjacency is not None:
            changes["adjacency"] = args.adjacency
        if args.edge_gate is not None:
            changes["edge_gate"] = args.edge_gate
        for flag, key in (("no_velocity", "use_velocity"), ("no_appearance", "use_appearance"),
                          ("no_temporal", "use_temporal")):
            if getattr(args, flag):
                changes[key] = False
        if args.constant_edge_weights:
            changes["constant_edge_weights"] = True
        return cfg.replace(**changes) if changes else cfg
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read {path}: {exc}") from None


def _parse(path: str, fmt: str, labeled: bool):
    text = _read(path)
    try:
        frames = parse_labeled(text, fmt) if labeled else parse_stream(text, fmt)
        size = mot_image_size(text) if fmt == "mot" else None
    except StreamParseError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None
    return frames, size


def _load_checkpoint(path: str | None):
    if path is None:
        return None
    try:
        return load_params(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_PARSE, f"cannot load checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------- track

def _write_tracks(results: list[FrameResult], out: str, image_size) -> None:
    labeled = [r.to_labeled() for r in results]
    base = Path(out)
    base.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.csv").write_text(serialize(labeled, "mot", image_size), encoding="utf-8")
    Path(f"{out}.jsonl").write_text(serialize(labeled, "jsonl"), encoding="utf-8")


def cmd_track(args, cfg: RunConfig) -> int:
    tcfg = cfg.tracker_config()
    params = _load_checkpoint(args.checkpoint)
    if args.detections == "-":
        return _track_follow(args, cfg, tcfg, params)
    frames, size = _parse(args.detections, args.format, labeled=False)
    image_size = size or cfg.image_size
    tracker = Tracker(tcfg, params)
    t0 = time.perf_counter()
    try:
        results = list(tracker.run(frames))
    except NonFiniteError as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from None
    wall = time.perf_counter() - t0
    _write_tracks(results, args.out, image_size)
    fps = len(results) / wall if wall > 0 else float("inf")
    print(f"frames {len(results)} mean FPS {fps:.1f}", file=sys.stderr)
    return EXIT_OK


def _track_follow(args, cfg: RunConfig, tcfg, params) -> int:
    """Read JSONL frames from stdin, emit each tracked frame to stdout as it completes."""
    state = TrackerState(tcfg, params)
    csv = open(f"{args.out}.csv", "w", encoding="utf-8") if args.out else None
    if csv:
        csv.write(f"#{cfg.image_w},{cfg.image_h}\n")
    count, t0 = 0, time.perf_counter()
    try:
        for lineno, line in enumerate(sys.stdin, start=1):
            try:
                fr = parse_jsonl_line(line, lineno)
            except StreamParseError as exc:
                raise CliError(EXIT_PARSE, f"<stdin>: {exc}") from None
            if fr is None:
                continue
            if fr.frame_index <= state.last_frame:
                raise CliError(EXIT_PARSE, f"<stdin>: line {lineno}: field 'frame': frame does not increase")
            _, res = step(state, fr)
            labeled = res.to_labeled()
            sys.stdout.write(frame_to_jsonl(labeled) + "\n")
            sys.stdout.flush()
            if csv:
                body = serialize([labeled], "mot", cfg.image_size).split("\n", 1)[1]
                csv.write(body)
            count += 1
            state.retired.clear()  # bounded memory in long-running pipelines
    finally:
        if csv:
            csv.close()
    wall = time.perf_counter() - t0
    print(f"frames {count} mean FPS {count / wall if wall > 0 else float('inf'):.1f}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _scenario_file(path: str):
    try:
        obj = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: invalid JSON: {exc}") from None
    try:
        if isinstance(obj, dict) and "scenario" in obj:
            extra = set(obj) - {"scenario", "degradation"}
            if extra:
                raise ScenarioError(f"unknown top-level keys: {sorted(extra)}")
            scen = scenario_from_dict(obj["scenario"])
            deg = degradation_from_dict(obj.get("degradation", {}))
        else:
            scen, deg = scenario_from_dict(obj), DegradationConfig()
    except (ScenarioError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"scenario error: {exc}") from None
    return scen, deg


def cmd_train(args, cfg: RunConfig) -> int:
    if args.scenario:
        scen, _ = _scenario_file(args.scenario)
        labeled = generate(scen).frames
    elif args.stream and args.gt:
        stream, _ = _parse(args.stream, args.format, labeled=False)
        gt, _ = _parse(args.gt, args.format, labeled=True)
        labeled = label_stream(stream, gt, cfg.eval_iou)
    else:
        raise CliError(EXIT_CONFIG, "train needs --scenario or both --stream and --gt")
    pairs = graph_pairs(labeled, cfg.edge_params(), cfg.adjacency)
    try:
        d_in = input_dim(pairs)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    epochs = cfg.epochs if args.epochs is None else args.epochs
    lr = cfg.lr if args.lr is None else args.lr
    if epochs < 0 or lr < 0:
        raise CliError(EXIT_CONFIG, "epochs and lr must be non-negative")
    params = init_params([d_in] + [cfg.hidden_dim] * cfg.layers, cfg.seed_for("gnn-init"))

    def report(k, bd):
        print(json.dumps({"epoch": k + 1, **bd.as_dict()}, sort_keys=True))

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            res = fit(params, pairs, epochs, lr, cfg.loss_weights(), cfg.momentum, callback=report)
    except NonFiniteError as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None
    print(json.dumps({"epoch": 0, **res.initial.as_dict()}, sort_keys=True), file=sys.stderr)
    save_params(res.params, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args, cfg: RunConfig) -> int:
    tracked, size_t = _parse(args.tracked, args.format, labeled=True)
    gt, size_g = _parse(args.gt, args.gt_format or args.format, labeled=True)
    image_size = size_g or size_t or cfg.image_size
    try:
        report = evaluate(tracked, gt, image_size)
    except CorrespondenceError as exc:
        raise CliError(EXIT_CORRESPONDENCE, f"identity correspondence failed: {exc}") from None
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- explain

def _methods(spec: str) -> list[str]:
    names = [m.strip() for m in spec.split(",") if m.strip()]
    if names == ["all"]:
        return list(METHODS)
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise CliError(EXIT_CONFIG, f"unknown method(s) {bad or spec!r}; choose from {', '.join(METHODS)}")
    return names


def _attributions(methods, stack, grads=None, score=None) -> dict[str, xai.AttributionMap]:
    out = {}
    for m in methods:
        if m == "grad-cam":
            out[m] = xai.grad_cam(stack, grads)
        elif m == "grad-cam++":
            out[m] = xai.grad_cam_pp(stack, score) if score is not None else xai.grad_cam_pp(stack, grads=grads)
        else:
            try:
                out[m] = xai.eigen_cam(stack)
            except xai.NoDominantDirection as exc:
                raise CliError(EXIT_PARSE, f"eigen-cam: {exc}") from None
            except FloatingPointError as exc:
                raise CliError(EXIT_DIVERGED, f"eigen-cam: {exc}") from None
    return out


def _metric_row(name, attr, score, scores, stack, budget) -> dict:
    row = {"method": name}
    try:
        row["faithfulness"] = xai.faithfulness(score, stack, attr)
    except xai.UndefinedCorrelation:
        row["faithfulness"] = None
    row["flipping"] = xai.flipping([(scores, stack, attr)], budget)
    try:
        row["complexity"] = xai.complexity(attr)
        row["comprehension80"] = xai.comprehension80(attr)
    except ValueError:
        row["complexity"] = row["comprehension80"] = None
    return row


def cmd_explain(args, cfg: RunConfig) -> int:
    methods = _methods(args.method)
    if args.activations:
        try:
            stack, grads = xai.load_activation_file(args.activations)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_PARSE, f"cannot read activations {args.activations}: {exc}") from None
        if grads is None and any(m != "eigen-cam" for m in methods):
            raise CliError(EXIT_CONFIG, "gradient methods need a 'grads' entry in the activation file")
        # first-order score surrogate y = sum(g * A); exact for linear heads
        score = xai.LinearScore(grads if grads is not None else np.zeros_like(stack.maps))
        scores = lambda a: np.array([0.5 * score(stack.maps), score(a)])  # noqa: E731
        maps = _attributions(methods, stack, grads=grads)
        target = None
    else:
        if args.stream is None or args.frame is None or args.track is None:
            raise CliError(EXIT_CONFIG, "explain needs STREAM, --frame and --track (or --activations)")
        frames, _ = _parse(args.stream, args.format, labeled=False)
        params = _load_checkpoint(args.checkpoint)
        try:
            tgt = xai.tracker_target(frames, cfg.tracker_config(), params, args.frame, args.track, args.layer)
        except xai.TargetError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        stack, score = tgt.stack, tgt.score
        scores = score.logits
        maps = _attributions(methods, stack, grads=score.grad(stack.maps), score=score)
        target = args.track
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, attr in maps.items():
        attr.target = target
        stem = name.replace("+", "p")
        (out / f"{stem}.json").write_text(attr.to_json() + "\n", encoding="utf-8")
        xai.write_pgm(attr.values, stack.shape, out / f"{stem}.pgm")
        rows.append(_metric_row(name, attr, score, scores, stack, cfg.flip_budget))
    (out / "metrics.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    fmt = lambda v: "   n/a" if v is None else f"{v:8.4f}"  # noqa: E731
    print(f"{'method':<12}{'faithful':>10}{'flipping':>10}{'complexity':>12}{'compr80%':>10}")
    for r in rows:
        print(f"{r['method']:<12}{fmt(r['faithfulness']):>10}{fmt(r['flipping']):>10}"
              f"{fmt(r['complexity']):>12}{fmt(r['comprehension80']):>10}")
    return EXIT_OK


# ---------------------------------------------------------------- synth

def _preset(name: str, seed: int, gap: int):
    deg = DegradationConfig(seed=seed)
    if name == "linear":
        return preset_linear(), deg
    if name == "occlusion":
        return preset_occlusion(gap, seed=seed), deg
    if name == "separated":
        return preset_separated(seed), deg
    if name == "crossing":
        cfg, _ = preset_crossing(seed, pairs=6, speed=0.02)
        return cfg, DegradationConfig(center_noise=0.004, embedding_noise=0.5, seed=seed)
    if name == "dense":
        return preset_dense(seed), deg
    return preset_degraded(seed)


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.scenario:
        scen, deg = _scenario_file(args.scenario)
    elif args.preset:
        scen, deg = _preset(args.preset, cfg.seed, args.gap)
    else:
        raise CliError(EXIT_CONFIG, "synth needs --scenario or --preset")
    try:
        gt = generate(scen)
        frames = degrade(gt, deg)
    except ScenarioError as exc:
        raise CliError(EXIT_CONFIG, f"scenario error: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = args.format
    ext = "jsonl" if fmt == "jsonl" else "csv"
    (out / f"gt.{ext}").write_text(serialize(gt.frames, fmt, cfg.image_size), encoding="utf-8")
    (out / f"detections.{ext}").write_text(serialize(frames, fmt, cfg.image_size), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- render

def cmd_render(args, cfg: RunConfig) -> int:
    frames, size = _parse(args.input, args.format, labeled=args.labeled)
    if args.image_size:
        image_size = tuple(args.image_size)
    else:
        image_size = size or cfg.image_size
    try:
        render_frames(frames, args.out, image_size, args.fps)
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot write to {args.out}: {exc.strerror}") from None
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=FORMATS, default="jsonl", help="input stream format")
    common.add_argument("--adjacency", choices=("raw", "normalized"))
    common.add_argument("--edge-gate", choices=("and", "or"))
    common.add_argument("--no-velocity", action="store_true")
    common.add_argument("--no-appearance", action="store_true")
    common.add_argument("--no-temporal", action="store_true", help="freeze motion features to zero")
    common.add_argument("--constant-edge-weights", action="store_true", help="all edge weights 1.0")

    p = argparse.ArgumentParser(prog="graphtrack", description="Dynamic-graph multi-object tracking.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", parents=[common], help="track a detection stream")
    t.add_argument("detections", help="detection stream path, or '-' to follow JSONL on stdin")
    t.add_argument("-o", "--out", help="output prefix; writes PREFIX.csv and PREFIX.jsonl")
    t.add_argument("--checkpoint")
    t.set_defaults(func=cmd_track)

    tr = sub.add_parser("train", parents=[common], help="train GNN weights")
    tr.add_argument("--scenario", help="scenario JSON (ground truth supervision)")
    tr.add_argument("--stream")
    tr.add_argument("--gt")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("-o", "--out", required=True, help="checkpoint path")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score tracks against ground truth")
    e.add_argument("tracked")
    e.add_argument("gt")
    e.add_argument("--gt-format", choices=FORMATS)
    e.add_argument("-o", "--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", parents=[common], help="CAM attributions and interpretability metrics")
    x.add_argument("stream", nargs="?")
    x.add_argument("--checkpoint")
    x.add_argument("--frame", type=int)
    x.add_argument("--track", type=int)
    x.add_argument("--layer", type=int, help="GNN layer whose activations are explained (default L-1)")
    x.add_argument("--activations", help="external activation/gradient JSON instead of a stream")
    x.add_argument("--method", default="all", help="comma list of grad-cam, grad-cam++, eigen-cam, or 'all'")
    x.add_argument("-o", "--out", required=True, help="output directory")
    x.set_defaults(func=cmd_explain)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    s.add_argument("--scenario")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--gap", type=int, default=5, help="occlusion length for the occlusion preset")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("render", parents=[common], help="write one SVG overlay per frame")
    r.add_argument("input")
    r.add_argument("--labeled", action="store_true", help="input carries track ids")
    r.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    r.add_argument("--fps", type=float, help="FPS value for the footer")
    r.add_argument("-o", "--out", required=True, help="output directory")
    r.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _run_config(args)
        if args.command == "track" and args.detections != "-" and not args.out:
            raise CliError(EXIT_CONFIG, "track needs --out unless following stdin")
        return args.func(args, cfg)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
