"""
Indexing a dataset and cutting N-view samples
=============================================

Scenes are directories of frames. Each scene is sub-sampled by a stride,
then cut into contiguous windows of N views.
"""

import shutil
import tempfile
from pathlib import Path

from PIL import Image

from distillcache.manifest import (Category, SamplingPolicy, build_manifest, read_manifest,
                                   samples_from_manifest, write_manifest)

root = Path(tempfile.mkdtemp())
for scene, n_frames in [("kitchen", 60), ("garden", 25)]:
    (root / scene).mkdir()
    for i in range(n_frames):
        Image.new("RGB", (8, 6)).save(root / scene / f"{i:04d}.png")

entries = build_manifest([("toy", str(root))])
print(len(entries), "frames;", entries[0])

# uniform sampling keeps every frame and cuts windows of 20
uniform = samples_from_manifest(entries, SamplingPolicy(views_per_sample=20))
print([s.sample_id for s in uniform])

# object-centric scenes are thinned to about 20 frames before cutting windows of 10
thin = SamplingPolicy(Category.OBJECT_CENTRIC, views_per_sample=10)
print([(s.sample_id, len(s.entries)) for s in samples_from_manifest(entries, thin)])

# overlapping windows advance by half a window
overlap = SamplingPolicy(views_per_sample=20, overlap=True)
print([s.sample_id for s in samples_from_manifest(entries, overlap)])

# the manifest round-trips through JSONL
write_manifest(root / "manifest.jsonl", entries)
assert read_manifest(root / "manifest.jsonl") == entries
shutil.rmtree(root)
