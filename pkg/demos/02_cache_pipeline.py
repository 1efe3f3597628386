"""
Building a supervision cache from teacher output
================================================

A synthetic teacher stands in for real inference. Its maps are resampled to
the student resolution, thresholded on local confidence and packed.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np

from distillcache.codec import archive_stats, read_archive
from distillcache.teacher import (CacheJob, SyntheticScene, align_and_filter, build_cache,
                                  read_teacher_dump, synth_teacher, write_teacher_dump)

# one synthetic sample: 3 views at twice the 28x56 target resolution
teacher = synth_teacher(SyntheticScene(seed=0, n_views=3, height=56, width=112))
print("teacher resolution", teacher.resolution)

# the float32 dump layout that a real teacher script would write
work = Path(tempfile.mkdtemp())
write_teacher_dump(teacher, work / "dumps" / "demo__scene__0", "demo/scene/0")
reloaded = read_teacher_dump(work / "dumps" / "demo__scene__0")

# align and filter by hand, to look at the masks
aligned = align_and_filter(reloaded, target_res=(28, 56), tau=0.3)
for k, v in enumerate(aligned):
    print(f"view {k}: {v.mask.valid_count} of {28 * 56} pixels valid")

# the batch path writes one archive per job plus a run report
jobs = [CacheJob(f"demo/scene/{i}", 3, synthetic_seed=i, teacher_res=(56, 112)) for i in range(4)]
report = build_cache(jobs, work / "cache", target_res=(28, 56), tau=0.3)
print("masked fraction", round(report["masked_fraction"], 3))
print("bytes in/out", report["bytes_in"], report["bytes_out"])

archive = sorted((work / "cache").glob("*.d3rc"))[0]
print(archive.name, archive_stats(archive))

# decoding gives float32 maps back, within half-precision error
sample = read_archive(archive).decoded()
print({k: v.shape for k, v in sample.items()})
print("finite:", all(np.isfinite(v).all() for k, v in sample.items() if k != "masks"))

shutil.rmtree(work)
