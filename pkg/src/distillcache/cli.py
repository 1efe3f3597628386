"""Command-line front end: manifest, cache, verify, losscheck, eval, bench.

Exit codes: 0 success, 1 a check ran but failed its bound, 2 bad input or
configuration, 3 missing upstream data, 4 corrupt data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import manifest as mf
from .codec import (
    ArchiveReader,
    CacheSample,
    CorruptDataError,
    FormatError,
    InvalidDataError,
    f16_decode,
    is_finite_half,
    pack_archive,
    read_archive,
    rle_decode,
)
from .evaluation import evaluate_per_view, read_cloud, write_report
from .geometry import threshold_mask
from .loss import (
    MODES,
    LossConfig,
    SupervisionSample,
    finite_diff_check,
    perturbed_student,
    random_problem,
    total_loss,
)
from .teacher import (
    DEFAULT_RESOLUTION,
    DEFAULT_TAU,
    CacheJob,
    ConfigError,
    CorruptDumpError,
    MissingDumpError,
    SyntheticScene,
    align_and_filter,
    archive_name,
    build_cache,
    build_cache_sample,
    check_target_resolution,
    derive_seed,
    read_teacher_dump,
    synth_teacher,
)

log = logging.getLogger("distillcache")

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_MISSING, EXIT_CORRUPT = 0, 1, 2, 3, 4
RUN_REPORT = "run_report.json"
GRAD_TOLERANCE = 1e-4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def parse_res(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        h, w = text
        return int(h), int(w)
    try:
        h, w = str(text).lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise CliError(EXIT_INPUT, f"resolution must look like HxW, got {text!r}") from None


@dataclass
class RunConfig:
    dataset_roots: list = field(default_factory=list)
    manifest_path: Optional[str] = None
    samples_path: Optional[str] = None
    dump_dir: Optional[str] = None
    cache_dir: str = "cache"
    report_dir: str = "."
    res: str = f"{DEFAULT_RESOLUTION[0]}x{DEFAULT_RESOLUTION[1]}"
    teacher_res: Optional[str] = None
    tau: float = DEFAULT_TAU
    category: str = "uniform"
    views_per_sample: int = 20
    target_count: Optional[int] = None
    stride: int = 1
    overlap: bool = False
    mode: str = "full"
    alpha_g: float = 2.0
    alpha_l: float = 1.0
    gamma: float = 0.001
    workers: int = 1
    seed: int = 0
    synthetic: bool = False

    def validate(self):
        try:
            check_target_resolution(self.resolution)
        except ConfigError as e:
            raise CliError(EXIT_INPUT, str(e)) from None
        if self.tau < 0:
            raise CliError(EXIT_INPUT, f"tau must be >= 0, got {self.tau}")
        if self.workers < 1:
            raise CliError(EXIT_INPUT, f"workers must be >= 1, got {self.workers}")
        if self.mode not in MODES:
            raise CliError(EXIT_INPUT, f"mode must be one of {MODES}")
        return self

    @property
    def resolution(self) -> tuple[int, int]:
        return parse_res(self.res)

    @property
    def teacher_resolution(self) -> tuple[int, int]:
        if self.teacher_res:
            return parse_res(self.teacher_res)
        h, w = self.resolution
        return 2 * h, 2 * w

    def policy(self) -> mf.SamplingPolicy:
        try:
            return mf.SamplingPolicy(mf.Category(self.category), self.views_per_sample,
                                     self.target_count, self.stride, self.overlap)
        except ValueError as e:
            raise CliError(EXIT_INPUT, str(e)) from None

    def loss_config(self) -> LossConfig:
        return LossConfig.for_mode(self.mode, alpha_g=self.alpha_g,
                                   alpha_l=self.alpha_l, gamma=self.gamma)

    def report_path(self, name: str) -> Path:
        return Path(self.report_dir) / name

    @property
    def manifest_file(self) -> Path:
        return Path(self.manifest_path) if self.manifest_path else self.report_path("manifest.jsonl")

    @property
    def samples_file(self) -> Path:
        return Path(self.samples_path) if self.samples_path else self.report_path("samples.jsonl")


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            values = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise CliError(EXIT_INPUT, f"cannot read config {path}: {e}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise CliError(EXIT_INPUT, f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if k in known and v is not None})
    return RunConfig(**values).validate()


def emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- manifest ----------------------------------------------------------------

def _parse_roots(roots) -> list[tuple[str, str]]:
    out = []
    for r in roots:
        if isinstance(r, (list, tuple)):
            out.append((str(r[0]), str(r[1])))
            continue
        dataset_id, sep, path = str(r).partition("=")
        if not sep:
            path, dataset_id = dataset_id, Path(dataset_id).name
        out.append((dataset_id, path))
    return out


def cmd_manifest(cfg: RunConfig, args) -> int:
    roots = _parse_roots(cfg.dataset_roots)
    if not roots:
        raise CliError(EXIT_INPUT, "no dataset roots given (--root ID=PATH)")
    try:
        entries = mf.build_manifest(roots, workers=cfg.workers)
    except OSError as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    samples = mf.samples_from_manifest(entries, cfg.policy())
    if not entries:
        log.warning("no images found under %s", [p for _, p in roots])
    try:
        cfg.manifest_file.parent.mkdir(parents=True, exist_ok=True)
        cfg.samples_file.parent.mkdir(parents=True, exist_ok=True)
        mf.write_manifest(cfg.manifest_file, entries)
        mf.write_samples(cfg.samples_file, samples)
    except OSError as e:
        raise CliError(EXIT_INPUT, f"cannot write manifest: {e}") from None
    emit({
        "command": "manifest",
        "entries": len(entries),
        "scenes": len(mf.group_scenes(entries)),
        "samples": len(samples),
        "views_per_sample": cfg.views_per_sample,
        "manifest": str(cfg.manifest_file),
        "samples_file": str(cfg.samples_file),
    })
    return EXIT_OK


# -- cache -------------------------------------------------------------------

def _dump_dir_for(root: Path, sample_id: str) -> Path:
    return root / sample_id.replace("/", "__")


def _cache_jobs(cfg: RunConfig, num_samples: Optional[int]) -> list[CacheJob]:
    if cfg.synthetic and num_samples:
        ids = [(f"synthetic/{i:05d}", cfg.views_per_sample) for i in range(num_samples)]
    else:
        try:
            rows = mf.read_samples(cfg.samples_file)
        except OSError as e:
            raise CliError(EXIT_MISSING, f"cannot read sample list {cfg.samples_file}: {e}") from None
        ids = [(r["sample_id"], len(r["image_paths"])) for r in rows]

    if cfg.synthetic:
        return [CacheJob(sid, n, synthetic_seed=derive_seed(cfg.seed, sid),
                         teacher_res=cfg.teacher_resolution) for sid, n in ids]

    if not cfg.dump_dir:
        raise CliError(EXIT_INPUT, "cache needs --dump-dir or --synthetic")
    root = Path(cfg.dump_dir)
    jobs, missing = [], []
    for sid, n in ids:
        d = _dump_dir_for(root, sid)
        if not (d / "descriptor.json").is_file():
            missing.append(sid)
        jobs.append(CacheJob(sid, n, dump_dir=str(d.resolve())))
    if missing:
        raise CliError(EXIT_MISSING, "missing teacher dumps for samples: " + ", ".join(missing))
    return jobs


def cmd_cache(cfg: RunConfig, args) -> int:
    jobs = _cache_jobs(cfg, getattr(args, "num_samples", None))
    if not jobs:
        log.warning("no samples to cache")
    try:
        report = build_cache(jobs, cfg.cache_dir, cfg.resolution, cfg.tau, cfg.workers)
    except MissingDumpError as e:
        raise CliError(EXIT_MISSING, str(e)) from None
    except (CorruptDumpError, InvalidDataError) as e:
        raise CliError(EXIT_CORRUPT, str(e)) from None
    except ConfigError as e:
        raise CliError(EXIT_INPUT, str(e)) from None

    report["command"] = "cache"
    report["config"] = {
        "synthetic": cfg.synthetic,
        "seed": cfg.seed,
        "teacher_resolution": list(cfg.teacher_resolution) if cfg.synthetic else None,
        "dump_dir": str(Path(cfg.dump_dir).resolve()) if cfg.dump_dir else None,
    }
    for row, job in zip(report["samples"], jobs):
        row["dump_dir"] = job.dump_dir
        row["teacher_resolution"] = list(job.teacher_res) if job.teacher_res else None
    # wall-clock timing goes to stdout only, so the persisted report is reproducible
    write_json(Path(cfg.cache_dir) / RUN_REPORT, {k: v for k, v in report.items() if k != "timing"})
    summary = {k: v for k, v in report.items() if k != "samples"}
    summary["masked_percent"] = 100.0 * report["masked_fraction"]
    emit(summary)
    return EXIT_OK


# -- verify ------------------------------------------------------------------

def check_archive(path: Path) -> dict:
    """Structural checks on one archive; raises CorruptDataError/FormatError."""
    with ArchiveReader(path) as r:
        hdr = r.header
        any_degenerate = False
        for k in range(hdr.n_views):
            m = r.read_mask(k)
            try:
                m.check()
            except CorruptDataError as e:
                raise CorruptDataError(f"view {k} mask: {e}") from None
            degenerate = m.valid_count == 0
            if r.degenerate_flags()[k] != degenerate:
                raise CorruptDataError(f"view {k} degenerate flag disagrees with its mask")
            any_degenerate |= degenerate
        if bool(hdr.flags & 1) != any_degenerate:
            raise CorruptDataError("header degenerate flag disagrees with the masks (offset 16)")
        for i in range(4):
            bits = r.read_map(i)
            bad = ~is_finite_half(bits)
            if i >= 2:
                # confidences are non-negative; only +0 may carry a zero magnitude
                bad |= (bits & 0x8000).astype(bool) & ((bits & 0x7FFF) != 0)
            if bad.any():
                first = int(np.flatnonzero(bad.reshape(-1))[0])
                off = hdr.sections[i][0] + 2 * first
                raise CorruptDataError(f"invalid binary16 value at byte offset {off}")
        return {"archive": path.name, "n_views": hdr.n_views, "bytes": r.file_size,
                "degenerate_views": int(sum(r.degenerate_flags()))}


def _first_diff(a: bytes, b: bytes) -> int:
    n = min(len(a), len(b))
    x = np.frombuffer(a[:n], np.uint8) != np.frombuffer(b[:n], np.uint8)
    hits = np.flatnonzero(x)
    return int(hits[0]) if hits.size else n


def cmd_verify(cfg: RunConfig, args) -> int:
    cache_dir = Path(cfg.cache_dir)
    if not cache_dir.is_dir():
        raise CliError(EXIT_INPUT, f"cache directory {cache_dir} does not exist")
    archives = sorted(cache_dir.glob("*.d3rc"))
    run = None
    if args.deep:
        report_path = cache_dir / RUN_REPORT
        if not report_path.is_file():
            raise CliError(EXIT_MISSING, f"--deep needs {report_path} to regenerate samples")
        run = json.loads(report_path.read_text())
        expected = {row["archive"] for row in run["samples"]}
        absent = sorted(expected - {p.name for p in archives})
        if absent:
            raise CliError(EXIT_MISSING, "archives listed in run report are missing: " + ", ".join(absent))

    rows = []
    for path in archives:
        try:
            rows.append(check_archive(path))
        except (CorruptDataError, FormatError) as e:
            raise CliError(EXIT_CORRUPT, f"{path}: {e}") from None
    if run is not None:
        res = tuple(run["resolution"])
        by_name = {p.name: p for p in archives}
        for row in run["samples"]:
            job = CacheJob(row["sample_id"], row["n_views"], dump_dir=row.get("dump_dir"),
                           synthetic_seed=row.get("synthetic_seed"),
                           teacher_res=tuple(row["teacher_resolution"]) if row.get("teacher_resolution") else None)
            expected = build_cache_sample(job.load(), res, run["tau"])
            actual = by_name[row["archive"]].read_bytes()
            if actual != expected:
                off = _first_diff(actual, expected)
                raise CliError(EXIT_CORRUPT,
                               f"{row['archive']}: differs from regenerated data at byte offset {off}")
    emit({"command": "verify", "archives": len(rows), "deep": bool(args.deep),
          "status": "pass", "checked": rows})
    return EXIT_OK


# -- losscheck ---------------------------------------------------------------

def cmd_losscheck(cfg: RunConfig, args) -> int:
    loss_cfg = cfg.loss_config()
    results = []
    h = args.h or (1e-4 if args.from_cache else 1e-5)
    if args.from_cache:
        archives = sorted(Path(cfg.cache_dir).glob("*.d3rc"))
        if not archives:
            raise CliError(EXIT_MISSING, f"no archives in {cfg.cache_dir}")
        fd_budget = args.fd_archives
        for i, path in enumerate(archives):
            try:
                sample = SupervisionSample.from_cache(read_archive(path))
            except (CorruptDataError, FormatError) as e:
                raise CliError(EXIT_CORRUPT, f"{path}: {e}") from None
            student = perturbed_student(sample, np.random.default_rng(derive_seed(cfg.seed, path.name)))
            row = {"source": path.name, **_loss_row(total_loss(student, sample, loss_cfg))}
            if fd_budget > 0 and not sample.degenerate:
                row["fd"] = finite_diff_check(student, sample, loss_cfg, h=h,
                                              seed=cfg.seed + i, n_coords=args.coords)
                fd_budget -= 1
            results.append(row)
    else:
        for i in range(args.problems):
            student, sample = random_problem(cfg.seed + i)
            row = {"source": f"random/{cfg.seed + i}", **_loss_row(total_loss(student, sample, loss_cfg))}
            row["fd"] = finite_diff_check(student, sample, loss_cfg, h=h,
                                          seed=cfg.seed + i, n_coords=args.coords)
            results.append(row)

    checked = [r["fd"]["max_rel_err"] for r in results if "fd" in r]
    worst = max(checked) if checked else 0.0
    ok = worst <= GRAD_TOLERANCE
    loss_cfg_row = {**asdict(loss_cfg), "weighting": loss_cfg.weighting.value}
    emit({"command": "losscheck", "mode": cfg.mode, "loss_config": loss_cfg_row,
          "h": h, "max_rel_err": worst, "tolerance": GRAD_TOLERANCE, "status": "pass" if ok else "fail",
          "results": results})
    return EXIT_OK if ok else EXIT_FAILED


def _loss_row(b) -> dict:
    return {"l_g": b.l_g, "l_l": b.l_l, "l_conf": b.l_conf, "l_total": b.l_total,
            "skipped": b.skipped}


# -- eval --------------------------------------------------------------------

def _load_prediction(path: Path, tau: float):
    """Local point maps and validity masks from an archive or a teacher dump."""
    if path.is_dir():
        views = read_teacher_dump(path)
        points = [v.local_points.data for v in views]
        masks = [threshold_mask(v.local_conf, tau).bits for v in views]
        return points, masks
    with ArchiveReader(path) as r:
        points = [f16_decode(r.read_map(1, k)) for k in range(r.n_views)]
        masks = [rle_decode(r.read_mask(k)).bits for k in range(r.n_views)]
    return points, masks


def _load_gt(path: Path) -> list[np.ndarray]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in (".bin", ".xyz", ".txt"))
        return [read_cloud(p) for p in files]
    return [read_cloud(path)]


def cmd_eval(cfg: RunConfig, args) -> int:
    try:
        points, masks = _load_prediction(Path(args.pred), cfg.tau)
        gt = _load_gt(Path(args.gt))
    except (CorruptDataError, FormatError, CorruptDumpError, InvalidDataError) as e:
        raise CliError(EXIT_CORRUPT, str(e)) from None
    except (OSError, ValueError) as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    try:
        report = evaluate_per_view(points, gt, masks if args.mask else None, args.unit_note)
    except ValueError as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    report["command"] = "eval"
    report["masked"] = bool(args.mask)
    if args.out:
        write_report(args.out, report)
    emit(report)
    return EXIT_OK


# -- bench -------------------------------------------------------------------

def _timed_read(paths, workers: int) -> float:
    def read(p):
        with ArchiveReader(p) as r:
            r.read_all()
    start = time.perf_counter()
    if workers == 1:
        for p in paths:
            read(p)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(read, paths))
    return time.perf_counter() - start


def cmd_bench(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.cache_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_views, res = args.views, cfg.resolution

    samples, build_time = [], 0.0
    for i in range(args.samples):
        sid = f"bench/{i:05d}"
        teacher = synth_teacher(SyntheticScene(derive_seed(cfg.seed, sid), n_views,
                                               *cfg.teacher_resolution))
        t0 = time.perf_counter()
        samples.append((sid, pack_archive(CacheSample.from_viewset(
            align_and_filter(teacher, res, cfg.tau)))))
        build_time += time.perf_counter() - t0

    t0 = time.perf_counter()
    paths = []
    for sid, data in samples:
        p = out_dir / archive_name(sid)
        with open(p, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        paths.append(p)
    write_time = time.perf_counter() - t0
    total_bytes = sum(len(d) for _, d in samples)

    read_1 = _timed_read(paths, 1)
    read_n = _timed_read(paths, cfg.workers)

    loss_cfg = cfg.loss_config()
    sups = [SupervisionSample.from_cache(read_archive(p)) for p in paths]
    students = [perturbed_student(s, np.random.default_rng(i)) for i, s in enumerate(sups)]
    t0 = time.perf_counter()
    for st, s in zip(students, sups):
        total_loss(st, s, loss_cfg, with_grad=True)
    loss_time = time.perf_counter() - t0

    mb = total_bytes / 1e6
    report = {
        "command": "bench",
        "samples": args.samples,
        "views_per_sample": n_views,
        "resolution": list(res),
        "workers": cfg.workers,
        "cpu_count": os.cpu_count(),
        "total_bytes": total_bytes,
        "build_samples_per_s": args.samples / build_time if build_time else None,
        "write_mb_per_s": mb / write_time if write_time else None,
        "read_mb_per_s_1_worker": mb / read_1 if read_1 else None,
        "read_mb_per_s_n_workers": mb / read_n if read_n else None,
        "read_scaling": read_1 / read_n if read_n else None,
        "loss_samples_per_s": args.samples / loss_time if loss_time else None,
    }
    validate_bench_report(report)
    if args.out:
        write_json(Path(args.out), report)
    emit(report)
    return EXIT_OK


def bench_schema() -> dict:
    return json.loads(resources.files("distillcache").joinpath(
        "schemas/bench_report.schema.json").read_text())


def validate_bench_report(report: dict) -> None:
    jsonschema.validate(report, bench_schema())


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML file with RunConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--res", help="target resolution HxW, both divisible by 14")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--report-dir", dest="report_dir")
    common.add_argument("--samples-file", dest="samples_path")
    common.add_argument("--manifest-file", dest="manifest_path")

    parser = argparse.ArgumentParser(prog="distillcache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", parents=[common], help="index dataset roots into JSONL")
    p.add_argument("--root", dest="dataset_roots", action="append", metavar="ID=PATH")
    p.add_argument("--category", choices=[c.value for c in mf.Category])
    p.add_argument("--views", dest="views_per_sample", type=int)
    p.add_argument("--target-count", dest="target_count", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--overlap", action="store_true", default=None)

    p = sub.add_parser("cache", parents=[common], help="build D3RC archives")
    p.add_argument("--synthetic", action="store_true", default=None)
    p.add_argument("--dump-dir", dest="dump_dir")
    p.add_argument("--teacher-res", dest="teacher_res")
    p.add_argument("--num-samples", dest="num_samples", type=int,
                   help="with --synthetic: generate this many samples without a sample list")
    p.add_argument("--views", dest="views_per_sample", type=int)

    p = sub.add_parser("verify", parents=[common], help="check every archive in a cache")
    p.add_argument("--deep", action="store_true", help="also compare against regenerated data")

    p = sub.add_parser("losscheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--from-cache", action="store_true",
                   help="use cached samples instead of random 2-view 16x28 problems")
    p.add_argument("--problems", type=int, default=1)
    p.add_argument("--fd-archives", type=int, default=1)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float,
                   help="central-difference step (default 1e-5, 1e-4 with --from-cache)")

    p = sub.add_parser("eval", parents=[common], help="per-view reconstruction metrics")
    p.add_argument("--pred", required=True, help="archive file or teacher dump directory")
    p.add_argument("--gt", required=True, help="cloud file or directory of per-view clouds")
    p.add_argument("--mask", action="store_true", help="drop masked pixels from the prediction")
    p.add_argument("--unit-note", default="meters")
    p.add_argument("--out")

    p = sub.add_parser("bench", parents=[common], help="cache and loss throughput")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--teacher-res", dest="teacher_res")
    p.add_argument("--out")
    return parser


COMMANDS = {
    "manifest": cmd_manifest,
    "cache": cmd_cache,
    "verify": cmd_verify,
    "losscheck": cmd_losscheck,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    level = os.environ.get("DISTILLCACHE_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, vars(args))
        return COMMANDS[args.command](cfg, args)
    except CliError as e:
        log.error("%s", e)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
