"""Reference writer for the float32 teacher dump layout.

Standalone on purpose: it needs only numpy, so a teacher inference script can
vendor this file and emit dumps that ``distillcache cache --dump-dir`` reads.

Layout of one sample directory::

    descriptor.json     {"sample_id", "n_views", "height", "width"}
    global_points.f32   (N, H, W, 3) little-endian float32, view-major, row-major
    local_points.f32    (N, H, W, 3)
    global_conf.f32     (N, H, W)
    local_conf.f32      (N, H, W)

The cache builder expects sample directory names with "/" replaced by "__",
e.g. ``dumps/co3d__apple_110__0``.

Usage as a script writes a small random dump, handy for smoke tests::

    python tools/dump_writer.py OUT_DIR [--views 2] [--height 28] [--width 56] [--seed 0]
"""

import argparse
import json
from pathlib import Path

import numpy as np

ARRAYS = (
    ("global_points", "global_points.f32", 3),
    ("local_points", "local_points.f32", 3),
    ("global_conf", "global_conf.f32", 1),
    ("local_conf", "local_conf.f32", 1),
)


def dump_dir_name(sample_id):
    return sample_id.replace("/", "__")


def write_dump(directory, sample_id, global_points, local_points, global_conf, local_conf):
    """Write one sample; arrays are cast to little-endian float32."""
    arrays = {
        "global_points": np.asarray(global_points),
        "local_points": np.asarray(local_points),
        "global_conf": np.asarray(global_conf),
        "local_conf": np.asarray(local_conf),
    }
    n, h, w = arrays["global_conf"].shape
    for name, _, ch in ARRAYS:
        expected = (n, h, w, 3) if ch == 3 else (n, h, w)
        if arrays[name].shape != expected:
            raise ValueError(f"{name} has shape {arrays[name].shape}, expected {expected}")
        if not np.all(np.isfinite(arrays[name])):
            raise ValueError(f"{name} contains NaN or infinity")
    if (arrays["global_conf"] < 0).any() or (arrays["local_conf"] < 0).any():
        raise ValueError("confidences must be non-negative")

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, fname, _ in ARRAYS:
        np.ascontiguousarray(arrays[name], dtype="<f4").tofile(directory / fname)
    desc = {"sample_id": sample_id, "n_views": n, "height": h, "width": w}
    (directory / "descriptor.json").write_text(json.dumps(desc, indent=2) + "\n")
    return directory


def random_dump(directory, sample_id, n_views=2, height=28, width=56, seed=0):
    rng = np.random.default_rng(seed)
    shape = (n_views, height, width)
    return write_dump(
        directory, sample_id,
        rng.normal(size=shape + (3,)) + [0.0, 0.0, 3.0],
        rng.normal(size=shape + (3,)) + [0.0, 0.0, 3.0],
        rng.uniform(0.0, 3.0, size=shape),
        rng.uniform(0.0, 3.0, size=shape),
    )


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--sample-id", default="demo/scene/0")
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--height", type=int, default=28)
    p.add_argument("--width", type=int, default=56)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    d = random_dump(Path(a.out_dir) / dump_dir_name(a.sample_id), a.sample_id,
                    a.views, a.height, a.width, a.seed)
    print(d)


if __name__ == "__main__":
    main()
