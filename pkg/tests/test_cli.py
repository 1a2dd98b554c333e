import io
import json
import re
from pathlib import Path

import numpy as np
import pytest

from graphtrack.cli import main
from graphtrack.config import ConfigError, RunConfig
from graphtrack.detect_io import parse_labeled, parse_stream
from graphtrack.gnn import GnnParams, load_params, save_params
from graphtrack.tracker import track_stream

GOLDEN = Path(__file__).parent / "golden"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def degraded(tmp_path_factory):
    """Synth + track output for the degraded preset, seed 11."""
    d = tmp_path_factory.mktemp("degraded")
    assert run("synth", "--preset", "degraded", "--seed", 11, "-o", d / "s") == 0
    assert run("track", d / "s" / "detections.jsonl", "-o", d / "trk") == 0
    return d


def tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---- track

def test_track_outputs_match_recount(degraded):
    frames = parse_stream((degraded / "s" / "detections.jsonl").read_text())
    expected = sum(len(r.assignments) for r in track_stream(frames, RunConfig().tracker_config()))
    csv_rows = (degraded / "trk.csv").read_text().splitlines()
    assert csv_rows[0] == "#1000,1000"
    assert len(csv_rows) - 1 == expected
    labeled = parse_labeled((degraded / "trk.jsonl").read_text())
    assert sum(len(f.items) for f in labeled) == expected


def test_track_empty_stream(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert run("track", tmp_path / "empty.jsonl", "-o", tmp_path / "out") == 0
    assert (tmp_path / "out.jsonl").read_text() == ""
    assert (tmp_path / "out.csv").read_text().splitlines() == ["#1000,1000"]


def test_track_corrupt_line_17(tmp_path, capsys):
    lines = ['{"frame": %d, "detections": []}' % t for t in range(16)]
    lines.append('{"frame": 16, "detections": [{"box": "oops", "conf": 1, "class": 0}]}')
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    assert run("track", tmp_path / "bad.jsonl", "-o", tmp_path / "out") == 2
    assert "line 17" in capsys.readouterr().err


def test_track_missing_file_and_bad_config(tmp_path):
    assert run("track", tmp_path / "nope.jsonl", "-o", tmp_path / "o") == 2
    (tmp_path / "cfg.json").write_text('{"beta": 0.5, "gamma": 1}')
    (tmp_path / "e.jsonl").write_text("")
    assert run("track", tmp_path / "e.jsonl", "--config", tmp_path / "cfg.json", "-o", tmp_path / "o") == 3
    (tmp_path / "cfg.json").write_text('{"conf_threshold": 1.5}')
    assert run("track", tmp_path / "e.jsonl", "--config", tmp_path / "cfg.json", "-o", tmp_path / "o") == 3


def test_track_follow_stdin(degraded, monkeypatch, capsys, tmp_path):
    text = (degraded / "s" / "detections.jsonl").read_text()
    monkeypatch.setattr("sys.stdin", io.StringIO(text))
    assert run("track", "-") == 0
    out = capsys.readouterr().out
    assert out == (degraded / "trk.jsonl").read_text()


def test_track_ablation_flags_change_nothing_on_format(degraded, tmp_path):
    for flag in ("--no-velocity", "--no-appearance", "--no-temporal", "--constant-edge-weights"):
        assert run("track", degraded / "s" / "detections.jsonl", flag, "-o", tmp_path / "x") == 0
        assert parse_labeled((tmp_path / "x.jsonl").read_text())


# ---- eval

def test_eval_golden(degraded, tmp_path):
    assert run("eval", degraded / "trk.jsonl", degraded / "s" / "gt.jsonl", "-o", tmp_path / "r.json") == 0
    assert (tmp_path / "r.json").read_bytes() == (GOLDEN / "eval_degraded_seed11.json").read_bytes()
    rep = json.loads((tmp_path / "r.json").read_text())
    n_gt = sum(len(f.items) for f in parse_labeled((degraded / "s" / "gt.jsonl").read_text()))
    assert rep["tp"] + rep["fn"] == n_gt
    assert rep["precision"] == rep["tp"] / (rep["tp"] + rep["fp"])


def test_eval_self_is_perfect(degraded, capsys):
    gt = degraded / "s" / "gt.jsonl"
    assert run("eval", gt, gt) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["precision"] == rep["recall"] == rep["map50"] == rep["map50_95"] == 1.0
    assert rep["trajectory"]["mae"] == rep["trajectory"]["rmse"] == rep["trajectory"]["mape_percent"] == 0.0
    assert rep["id_switches"] == 0


def test_eval_exit_codes(degraded, tmp_path):
    assert run("eval", degraded / "trk.jsonl", tmp_path / "missing.jsonl") == 2
    far = tmp_path / "far.jsonl"
    far.write_text('{"frame": 0, "detections": [{"box": [0.05,0.05,0.01,0.01], "conf": 1, "class": 0, "id": 1}]}\n')
    assert run("eval", far, degraded / "s" / "gt.jsonl") == 5


# ---- train

def scenario_file(tmp_path):
    p = tmp_path / "scen.json"
    p.write_text(json.dumps({"scenario": {"object_count": 3, "frame_count": 6, "seed": 1}}))
    return p


def test_train_lr_zero_equals_init(tmp_path, capsys):
    s = scenario_file(tmp_path)
    assert run("train", "--scenario", s, "--epochs", 0, "-o", tmp_path / "init.json") == 0
    assert run("train", "--scenario", s, "--epochs", 3, "--lr", 0, "-o", tmp_path / "lr0.json") == 0
    assert (tmp_path / "init.json").read_bytes() == (tmp_path / "lr0.json").read_bytes()
    out = capsys.readouterr().out.strip().splitlines()
    assert [json.loads(x)["epoch"] for x in out] == [1, 2, 3]
    assert {"l_total", "l_det", "l_track"} <= set(json.loads(out[0]))


def test_train_reduces_loss(tmp_path, capsys):
    assert run("train", "--scenario", scenario_file(tmp_path), "--epochs", 100, "--lr", 1e-3,
               "-o", tmp_path / "ck.json") == 0
    cap = capsys.readouterr()
    first = json.loads(cap.err.strip().splitlines()[-1])
    last = json.loads(cap.out.strip().splitlines()[-1])
    assert first["epoch"] == 0 and last["l_total"] < first["l_total"]


def test_train_divergence_exit_4(tmp_path, capsys):
    # an overshooting step size makes the weights grow without bound here
    p = tmp_path / "scen.json"
    p.write_text(json.dumps({"object_count": 6, "frame_count": 10, "seed": 1}))
    assert run("train", "--scenario", p, "--epochs", 200, "--lr", 1.0, "-o", tmp_path / "ck.json") == 4
    assert "diverged" in capsys.readouterr().err
    assert not (tmp_path / "ck.json").exists()


def test_train_needs_supervision(tmp_path):
    assert run("train", "-o", tmp_path / "ck.json") == 3


def test_train_from_stream_and_gt(degraded, tmp_path):
    assert run("train", "--stream", degraded / "s" / "detections.jsonl", "--gt", degraded / "s" / "gt.jsonl",
               "--epochs", 2, "-o", tmp_path / "ck.json") == 0
    assert load_params(tmp_path / "ck.json").dims[-1] == 32


# ---- explain

def test_explain_all_methods(degraded, tmp_path, capsys):
    out = tmp_path / "x"
    assert run("explain", degraded / "s" / "detections.jsonl", "--frame", 10, "--track", 0, "-o", out) == 0
    names = {p.name for p in out.iterdir()}
    assert {"grad-cam.json", "grad-campp.json", "eigen-cam.json", "metrics.json"} <= names
    assert {"grad-cam.pgm", "grad-campp.pgm", "eigen-cam.pgm"} <= names
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["method", "faithful", "flipping", "complexity", "compr80%"]
    assert len(table) == 4
    eig = json.loads((out / "eigen-cam.json").read_text())
    assert eig["eigen_residual"] >= 0.0
    for row in json.loads((out / "metrics.json").read_text()):
        assert set(row) == {"method", "faithfulness", "flipping", "complexity", "comprehension80"}


def test_explain_unknown_method(degraded, tmp_path):
    assert run("explain", degraded / "s" / "detections.jsonl", "--frame", 10, "--track", 0,
               "--method", "lime", "-o", tmp_path) == 3


def test_explain_missing_target(degraded, tmp_path):
    assert run("explain", degraded / "s" / "detections.jsonl", "--frame", 10, "--track", 999, "-o", tmp_path) == 3


def test_explain_zero_activations(degraded, tmp_path, capsys):
    s = scenario_file(tmp_path)
    assert run("train", "--scenario", s, "--epochs", 0, "-o", tmp_path / "ck.json") == 0
    p = load_params(tmp_path / "ck.json")
    save_params(GnnParams([np.zeros_like(p.layers[0])] + p.layers[1:]), tmp_path / "zero.json")
    capsys.readouterr()
    code = run("explain", degraded / "s" / "detections.jsonl", "--frame", 10, "--track", 0,
               "--checkpoint", tmp_path / "zero.json", "--method", "eigen-cam", "-o", tmp_path / "x")
    assert code == 2
    assert "no dominant direction" in capsys.readouterr().err


def test_explain_activation_file(tmp_path):
    rng = np.random.default_rng(0)
    obj = {"shape": [3, 2, 4], "maps": rng.uniform(size=(3, 2, 4)).tolist(),
           "grads": rng.normal(size=(3, 2, 4)).tolist()}
    (tmp_path / "a.json").write_text(json.dumps(obj))
    assert run("explain", "--activations", tmp_path / "a.json", "-o", tmp_path / "x") == 0
    pgm = (tmp_path / "x" / "grad-cam.pgm").read_text().split("\n")
    assert pgm[:3] == ["P2", "4 2", "255"]


# ---- synth / render

def test_synth_formats(tmp_path):
    assert run("synth", "--preset", "linear", "--format", "mot", "-o", tmp_path) == 0
    rows = (tmp_path / "gt.csv").read_text().splitlines()
    assert rows[0] == "#1000,1000" and len(rows) == 1 + 11
    assert run("synth", "--preset", "occlusion", "--gap", 3, "-o", tmp_path / "o") == 0
    assert len(parse_stream((tmp_path / "o" / "detections.jsonl").read_text())) == 33


def test_synth_scenario_errors(tmp_path):
    (tmp_path / "s.json").write_text('{"object_count": 2, "colour": 1}')
    assert run("synth", "--scenario", tmp_path / "s.json", "-o", tmp_path) == 3
    (tmp_path / "s.json").write_text('{not json')
    assert run("synth", "--scenario", tmp_path / "s.json", "-o", tmp_path) == 2


def test_render_two_tracks(tmp_path):
    text = ('{"frame": 0, "detections": [{"box": [0.2,0.2,0.1,0.1], "conf": 1, "class": 0, "id": 3},'
            ' {"box": [0.6,0.6,0.1,0.1], "conf": 1, "class": 0, "id": 8}]}\n'
            '{"frame": 1, "detections": [{"box": [0.7,0.6,0.1,0.1], "conf": 1, "class": 0, "id": 8}]}\n')
    (tmp_path / "t.jsonl").write_text(text)
    assert run("render", tmp_path / "t.jsonl", "--labeled", "-o", tmp_path / "r") == 0
    f0 = (tmp_path / "r" / "frame_000000.svg").read_text()
    f1 = (tmp_path / "r" / "frame_000001.svg").read_text()
    assert f0.count("<rect") == 2 and f1.count("<rect") == 1
    colors0 = re.findall(r'stroke="(#[0-9a-f]{6})"', f0)
    colors1 = re.findall(r'stroke="(#[0-9a-f]{6})"', f1)
    assert colors0[1] == colors1[0] and colors0[0] != colors0[1]
    assert "frame 0" in f0 and "FPS n/a" in f0


def test_render_golden(degraded, tmp_path):
    assert run("render", degraded / "trk.jsonl", "--labeled", "-o", tmp_path) == 0
    assert (tmp_path / "frame_000000.svg").read_bytes() == \
        (GOLDEN / "render_degraded_seed11_frame0.svg").read_bytes()


# ---- configuration

def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(beta=0.3, edge_gate="and", use_velocity=False, roi=(0.1, 0.0, 0.9, 1.0), seed=9)
    assert RunConfig.from_json(cfg.to_json()) == cfg
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert RunConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"unknown": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"t_max": "ten"})


def test_no_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


# ---- determinism

def test_every_command_is_byte_deterministic(degraded, tmp_path):
    det = degraded / "s" / "detections.jsonl"
    gt = degraded / "s" / "gt.jsonl"
    scen = scenario_file(tmp_path)
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        assert run("synth", "--preset", "degraded", "--seed", 11, "-o", d / "synth") == 0
        assert run("track", det, "-o", d / "track") == 0
        assert run("eval", d / "track.jsonl", gt, "-o", d / "eval.json") == 0
        assert run("train", "--scenario", scen, "--epochs", 5, "--seed", 4, "-o", d / "ck.json") == 0
        assert run("explain", det, "--frame", 10, "--track", 0, "--checkpoint", d / "ck.json",
                   "-o", d / "explain") == 0
        assert run("render", d / "track.jsonl", "--labeled", "-o", d / "render") == 0
        outs.append(tree_bytes(d))
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], name
