"""
Switching constraints on one at a time
======================================

Compare the no-constraint baseline with each constraint term enabled alone,
over three seeds. Takes roughly a quarter of an hour on one CPU core.
"""

import sys
import tempfile
from pathlib import Path

from hetseg.experiments import ABLATIONS, DESK_PHANTOM, median, run_ablation, trajectory_series
from hetseg.phantom import generate_suite, load_suite

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="hetseg-abl-"))
generate_suite(DESK_PHANTOM, 20, out)
manifests, oracle = load_suite(out), load_suite(out, oracle=True)
series = trajectory_series(DESK_PHANTOM, 6, n_timepoints=4)

runs = run_ablation(manifests, oracle, series, seeds=(0, 1, 2))

# %%
# Medians over seeds. The spatial prior should move fewer voxels outside WM,
# the longitudinal term should not cost new-lesion accuracy and the volume
# band should not hurt the trajectory correlation.
print("%-6s %9s %9s %11s %7s" % ("config", "all Dice", "new Dice", "outside WM", "rho"))
for label in ABLATIONS:
    s = runs[label]
    print(
        "%-6s %9.3f %9.3f %11.4f %7.3f"
        % (label, median([x.all_dice for x in s]), median([x.new_dice for x in s]), median([x.outside_wm for x in s]), median([x.rho for x in s]))
    )
