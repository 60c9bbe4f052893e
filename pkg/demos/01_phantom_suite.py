"""
Synthetic longitudinal phantoms
===============================

Generate the five heterogeneously labelled phantom datasets, look at which
labels each one exposes, and check the label rules on the hidden oracle.
"""

import sys
import tempfile

import numpy as np
from scipy import ndimage

from hetseg.cli import suite_summary
from hetseg.core import validate_label_consistency
from hetseg.experiments import DESK_PHANTOM
from hetseg.phantom import generate_subject, generate_suite, load_suite

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="hetseg-suite-")

# %%
# One subject first. Two scans one year apart, the second with some lesions
# gone, some new, and the rest slightly resized.
rec = generate_subject(DESK_PHANTOM, subject_seed=0)
ls = rec.labels[(0, 1)]
count = lambda v: int(v.data.sum())
print("voxels  all_t1 %d  all_t2 %d  new %d  vanish %d" % tuple(count(v) for _, v in ls.items()))
print("volume ratio t2/t1: %.3f" % (count(ls.all_t2) / count(ls.all_t1)))
print("rule violations:", validate_label_consistency(ls))

# %%
# Lesions sit inside white matter and are brighter than it.
img = rec.timepoints[0].image.data
les = ls.all_t1.data.astype(bool)
wm = rec.timepoints[0].wm_mask.data.astype(bool)
print("lesion voxels outside WM:", int((les & ~wm).sum()))
print("mean intensity  lesion %.2f  WM %.2f" % (img[les].mean(), img[wm & ~les].mean()))

# %%
# The suite. Each dataset exposes only part of the annotation, just like the
# clinical collections it stands in for.
manifests = generate_suite(DESK_PHANTOM, 6, out)
print()
print(suite_summary(manifests))

# %%
# Training manifests never see the full labels, the oracle copy does.
oracle = {m.name: m for m in load_suite(out, oracle=True)}
seg2 = next(m for m in manifests if m.name == "PH-SEG2")
full = oracle["PH-SEG2"].record(seg2.records[0].subject_id).labels[(0, 1)]
lab, n = ndimage.label(full.all_t2.data, np.ones((3, 3, 3)))
print("\nPH-SEG2 subject: %d lesions at t2, %d of them new" % (n, ndimage.label(full.new_t2.data, np.ones((3, 3, 3)))[1]))
print("suite written to", out)
