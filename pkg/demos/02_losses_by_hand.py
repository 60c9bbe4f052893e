"""
The constraint losses on toy inputs
===================================

Evaluate every loss on inputs small enough to check with pen and paper, then
run the finite-difference gradient check.
"""

import numpy as np

from hetseg.gradcheck import check_all
from hetseg.losses import (
    CurriculumSchedule,
    LossWeights,
    VolumetricParams,
    dice_loss,
    longitudinal_loss,
    spatial_loss,
    total_loss,
    volumetric_loss,
)

# %%
# Soft Dice: half-confident prediction on a full target, no smoothing.
v, _ = dice_loss(np.full((2, 2, 2), 0.5), np.ones((2, 2, 2)), smooth=0.0)
print("dice loss %.4f (1 - 8/12)" % v)

# %%
# Longitudinal terms on a two-voxel image. Lesion in voxel 0 at t1 and voxel
# 1 at t2, so voxel 1 is new and voxel 0 vanished.
y1, y2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
good = longitudinal_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]), y1, y2)[0]
bad = longitudinal_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), y1, y2)[0]
print("longitudinal: consistent %.2f, new map swapped %.2f" % (good, bad))

# %%
# Volumetric band: volumes of 100 then 130 or 70 over one year leave the
# [0.8, 1.2] band by 10 either way.
def mass(n):
    p = np.zeros((20, 20, 1))
    p.ravel()[:n] = 1
    return p

for v2 in (110, 130, 70):
    print("V_t2 = %d -> %.1f" % (v2, volumetric_loss(mass(100), mass(v2), 1.0, VolumetricParams(), normalize=False)[0]))
print("two-year band:", VolumetricParams().band(2.0))

# %%
# Spatial prior: three confident voxels outside WM out of eight.
wm = np.ones((2, 2, 2))
wm.ravel()[:3] = 0
heads = {h: np.zeros((2, 2, 2)) for h in ("p_a_t1", "p_a_t2", "p_n_t2", "p_v_t2")}
heads["p_n_t2"] = 1 - wm
print("spatial %.4f (3/8)" % spatial_loss(heads, wm)[0])

# %%
# Curriculum: the constraints only join halfway through.
sched = CurriculumSchedule(100)
terms = {"long": 0.1, "vol": 0.2, "spat": 0.3}
for epoch in (0, 49, 50):
    print("epoch %d total %.2f" % (epoch, total_loss(0.4, terms, epoch, sched, LossWeights())))

# %%
# And the gradients behind all of the above.
for r in check_all(n_instances=5):
    print(r.describe())
