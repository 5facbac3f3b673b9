"""
Docking under glare
===================

Runs one outdoor docking episode per estimator with the frozen outdoor
profile and writes each trace to CSV. The classic single tag tends to lose
its only marker to reflections and retreat; the bundle usually keeps one
tag in view.

Run: python demos/docking.py [seed]
"""

import sys
from pathlib import Path

from tagbundle3d.experiment import default_bundle, episode_seed, latch_scenario, load_profile
from tagbundle3d.geometry import DEFAULT_INTRINSICS
from tagbundle3d.latching import StreamEstimator, run_episode, write_trace

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
scenario = latch_scenario("outdoor_boats", default_bundle(), DEFAULT_INTRINSICS)
profile = load_profile("outdoor").with_seed(episode_seed(0, seed))
out = Path("docking_traces")
out.mkdir(exist_ok=True)

for mode in ("classic_single", "bundle3d"):
    est = StreamEstimator(scenario.bundle, scenario.k, mode)
    res = run_episode(scenario, profile, est, max_attempts=10, keep_trace=True)
    path = out / f"{mode}.csv"
    write_trace(path, res.trace)
    seen = 100.0 * res.detected_frames / max(1, res.vision_frames)
    print(f"{mode:15s} success={res.success} attempts={res.attempts} outcomes={res.outcomes}")
    print(f"{'':15s} tag seen on {seen:.1f}% of frames, trace -> {path}")
