"""
Storing teacher maps in a D3RC archive
======================================

Half-precision maps, run-length masks, and random access to one view.
"""

import numpy as np

from distillcache.codec import (ArchiveReader, CacheSample, f16_decode, f16_encode,
                                pack_archive, rle_decode, rle_encode)
from distillcache.geometry import ViewSet

# binary16 keeps about three significant digits and saturates at 65504
x = np.array([0.1, 1 / 3, 3.0, 1e5, -1e5], np.float32)
bits = f16_encode(x)
print([hex(b) for b in bits])
print(f16_decode(bits))

# a mask with a few long runs compresses to a handful of integers
mask = np.zeros((4, 10), bool)
mask[1:3, 2:8] = True
r = rle_encode(mask)
print(r.first_value, r.run_lengths)
assert np.array_equal(rle_decode(r).bits, mask)

# pack two random 8x12 views, then read just the second one back
rng = np.random.default_rng(0)
n, h, w = 2, 8, 12
lc = rng.uniform(0, 2, (n, h, w)).astype(np.float32)
views = ViewSet.from_arrays(
    rng.normal(size=(n, h, w, 3)).astype(np.float32),
    rng.normal(size=(n, h, w, 3)).astype(np.float32),
    rng.uniform(0, 2, (n, h, w)).astype(np.float32),
    lc,
    lc >= 0.3,
)
data = pack_archive(CacheSample.from_viewset(views))
print(len(data), "bytes for", n * h * w, "pixels")

with ArchiveReader(data) as reader:
    view = reader.read_view(1)
    print(sorted(view))
    # map sections hold raw bit patterns; decode before comparing
    err = np.abs(f16_decode(view["local_conf"]) - lc[1]).max()
    print("max quantization error", err)
