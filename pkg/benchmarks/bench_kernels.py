"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on inputs sized like a dense 50-object frame, then the full
tracking pipeline runs on the 50-object x 200-frame preset under each backend.
"""
import argparse
import timeit

import numpy as np

from graphtrack import kernels
from graphtrack.synth import DegradationConfig, degrade, generate, preset_dense
from graphtrack.tracker import TrackerConfig, track_stream


def kernel_cases(rng, n=50):
    c = rng.uniform(0.05, 0.95, size=(n, 2))
    wh = rng.uniform(0.02, 0.06, size=(n, 2))
    boxes = np.hstack([c, wh])
    other = boxes + rng.normal(0, 0.005, size=boxes.shape)
    scores = rng.uniform(size=n)
    classes = rng.integers(0, 3, size=n)
    motions = rng.normal(0, 0.01, size=(n, 2))
    emb = rng.normal(size=(n, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    cost = 1.0 - kernels.iou_matrix(boxes, other)
    cost[cost > 0.9] = np.inf
    return {
        "iou_matrix": lambda: kernels.iou_matrix(boxes, other),
        "nms_keep": lambda: kernels.nms_keep(boxes, scores, classes, 0.5),
        "pair_edges": lambda: kernels.pair_edges(c, motions, emb, 0.1, 0.05, True, True, False, 0.2, 0.05, True),
        "linear_assignment": lambda: kernels.linear_assignment(cost),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200, help="calls per timing for kernel benchmarks")
    args = ap.parse_args(argv)

    backends = ["python"] + (["native"] if kernels.native_available() else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the Python fallback only")
    previous = kernels.backend()
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    frames = degrade(generate(preset_dense(0, 50, 200)), DegradationConfig(center_noise=0.002, seed=0))
    cfg = TrackerConfig()

    times: dict[str, dict[str, float]] = {}
    try:
        for b in backends:
            kernels.use_backend(b)
            times[b] = {name: best_of(fn, args.repeat, args.number) for name, fn in cases.items()}
            times[b]["pipeline (200 frames)"] = best_of(lambda: track_stream(frames, cfg), max(1, args.repeat // 2), 1)
    finally:
        kernels.use_backend(previous)

    print(f"{'kernel':<24}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name in times["python"]:
        row = f"{name:<24}" + "".join(f"{times[b][name] * 1e6:>12.1f}us" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'][name] / times['native'][name]:>9.1f}x"
        print(row)
    for b in backends:
        print(f"pipeline FPS ({b}): {200 / times[b]['pipeline (200 frames)']:.0f}")


if __name__ == "__main__":
    main()
