"""
Training at desk scale
======================

Train one network on the mixed phantom suite for 200 iterations on the CPU,
score it on held-out subjects and draw a volume trajectory.
"""

import sys
import tempfile
import time
from pathlib import Path

from hetseg.experiments import DESK_MODEL, DESK_PHANTOM, DESK_TRAIN, desk_scores, series_trajectories, train_desk, trajectory_series
from hetseg.metrics import plot_trajectories
from hetseg.phantom import generate_suite, load_suite

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="hetseg-desk-"))
generate_suite(DESK_PHANTOM, 20, out / "suite")
manifests, oracle = load_suite(out / "suite"), load_suite(out / "suite", oracle=True)

# %%
# 200 steps of batch 2, constraints active for the second half.
t = time.perf_counter()
res = train_desk(manifests, DESK_MODEL, DESK_TRAIN, seed=0)
print("trained %d parameters in %.0f s" % (res.network.n_parameters, time.perf_counter() - t))
for row in res.log[::40] + res.log[-1:]:
    print("epoch %(epoch)3d  dice %(dice).3f  long %(long).4f  vol %(vol).5f  spat %(spat).4f  total %(total).3f" % row)

# %%
# Held-out scores against the oracle labels.
series = trajectory_series(DESK_PHANTOM, 3, n_timepoints=4)
s = desk_scores(res.network, manifests, oracle, series)
print("all-lesion Dice %.3f  new-lesion Dice %.3f  outside-WM %.4f  mean rho %.3f" % (s.all_dice, s.new_dice, s.outside_wm, s.rho))

# %%
# Lesion volume over four scans, predicted against true.
reports = {rec.subject_id: r for rec, r in zip(series, series_trajectories(res.network, series))}
plot_trajectories(reports, out / "trajectories.svg")
print("plot:", out / "trajectories.svg")
