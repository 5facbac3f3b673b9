"""
Talking with tags
=================

Three boats in a line, one metre apart. The leader changes the tag id it
displays; the robot behind reads it, docks, and changes its own tag so the
next one can follow. No radio is involved.

Run: python demos/train_link.py [robots]
"""

import sys

from tagbundle3d.swarm import LATCH_SUCCESS, PHASE, TAG_CHANGED, run_swarm, train_link_scenario

n = int(sys.argv[1]) if len(sys.argv) > 1 else 3
result = run_swarm(train_link_scenario(n))

for e in result.events:
    if e.event == TAG_CHANGED:
        what = f"shows {e.detail['message']}"
    elif e.event == PHASE:
        what = f"{e.detail['from']} -> {e.detail['to']}"
    elif e.event == LATCH_SUCCESS:
        what = f"latched on attempt {e.detail['attempt']}"
    else:
        what = f"failed ({e.detail['reason']})"
    print(f"t={e.tick:4d} ({e.tick / 30:5.1f} s)  R{e.robot}  {what}")

print(f"\nformation complete: {result.complete} after {result.ticks} ticks")
