"""Confidence-aware distillation objective with analytic gradients.

    total = alpha_g * L_g + alpha_l * L_l + gamma * L_conf

L_g and L_l are confidence-weighted squared errors between scale-normalized
student and teacher point maps over the validity mask. The global head
shares one scale across all views of a sample, the local head uses one per
view; student and teacher are each normalized by their own scales. L_conf is
a mean absolute error on both confidence maps.

All arithmetic is float64. Arrays are stacked view-major: points (N, H, W, 3),
confidences and masks (N, H, W).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .codec import CacheSample
from .geometry import DegenerateSampleError, ViewSet

FIELDS = ("global_points", "local_points", "global_conf", "local_conf")


class Weighting(enum.Enum):
    TEACHER_CONFIDENCE = "teacher_confidence"
    UNIT = "unit"


MODES = ("full", "labels-only", "no-weighting")


@dataclass(frozen=True)
class LossConfig:
    alpha_g: float = 2.0
    alpha_l: float = 1.0
    gamma: float = 0.001
    weighting: Weighting = Weighting.TEACHER_CONFIDENCE
    conf_supervision: bool = True
    scale_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        if self.alpha_g < 0 or self.alpha_l < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.scale_epsilon > 0:
            raise ValueError("scale_epsilon must be positive")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "LossConfig":
        """``full``, ``labels-only`` (unit weights, no confidence term) or ``no-weighting``."""
        if mode == "full":
            return cls(**kw)
        if mode == "labels-only":
            return cls(weighting=Weighting.UNIT, conf_supervision=False, **kw)
        if mode == "no-weighting":
            return cls(weighting=Weighting.UNIT, **kw)
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {MODES}")

    def to_toml(self) -> str:
        return "".join([
            f"alpha_g = {self.alpha_g!r}\n",
            f"alpha_l = {self.alpha_l!r}\n",
            f"gamma = {self.gamma!r}\n",
            f'weighting = "{self.weighting.value}"\n',
            f"conf_supervision = {'true' if self.conf_supervision else 'false'}\n",
            f"scale_epsilon = {self.scale_epsilon!r}\n",
        ])

    @classmethod
    def from_mapping(cls, d: dict) -> "LossConfig":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        for k in ("alpha_g", "alpha_l", "gamma", "scale_epsilon"):
            if k in kw:
                kw[k] = float(kw[k])
        return cls(**kw)

    @classmethod
    def from_toml(cls, text: str) -> "LossConfig":
        return cls.from_mapping(tomllib.loads(text))

    @classmethod
    def load(cls, path) -> "LossConfig":
        return cls.from_toml(Path(path).read_text())


def _as64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


@dataclass
class SupervisionSample:
    """Teacher targets plus validity mask, promoted to float64."""

    global_points: np.ndarray
    local_points: np.ndarray
    global_conf: np.ndarray
    local_conf: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        for name in FIELDS:
            setattr(self, name, _as64(getattr(self, name)))
        self.mask = np.asarray(self.mask, dtype=bool)
        n, h, w = self.mask.shape
        for name in FIELDS:
            a = getattr(self, name)
            expected = (n, h, w, 3) if name.endswith("points") else (n, h, w)
            if a.shape != expected:
                raise ValueError(f"{name} has shape {a.shape}, expected {expected}")

    @classmethod
    def from_cache(cls, sample: CacheSample) -> "SupervisionSample":
        d = sample.decoded()
        return cls(d["global_points"], d["local_points"], d["global_conf"],
                   d["local_conf"], d["masks"])

    @classmethod
    def from_viewset(cls, views: ViewSet) -> "SupervisionSample":
        a = views.stacked()
        if "masks" not in a:
            raise ValueError("view set has no validity masks")
        return cls(a["global_points"], a["local_points"], a["global_conf"],
                   a["local_conf"], a["masks"])

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.mask.reshape(len(self.mask), -1).sum(axis=1) == 0))


@dataclass
class StudentPrediction:
    global_points: np.ndarray
    local_points: np.ndarray
    global_conf: np.ndarray
    local_conf: np.ndarray

    def __post_init__(self):
        for name in FIELDS:
            setattr(self, name, _as64(getattr(self, name)))
        if np.any(self.global_conf < 0) or np.any(self.local_conf < 0):
            raise ValueError("student confidences must be non-negative")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in FIELDS}


@dataclass
class LossBreakdown:
    l_g: float
    l_l: float
    l_conf: float
    l_total: float
    skipped: bool = False
    grads: Optional[dict[str, np.ndarray]] = field(default=None, repr=False)


# -- building blocks ---------------------------------------------------------

def _norms(points: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", points, points))


def _mean_norm(points: np.ndarray, mask: np.ndarray, axis=None, norms=None):
    if norms is None:
        norms = _norms(points)
    count = mask.sum(axis=axis)
    total = (norms * mask).sum(axis=axis)
    return total / count, count


def normalize_global(points, mask, eps: float = 1e-8):
    """Divide every view by one scale: the mean valid-pixel norm over the sample.

    Returns ``(normalized, s)``. ``s <= eps`` means degenerate geometry; the
    divisor is floored at ``eps`` so no NaN is produced.
    """
    points, mask = _as64(points), np.asarray(mask, bool)
    if not mask.any():
        raise DegenerateSampleError("no valid pixels for the global scale")
    s, _ = _mean_norm(points, mask)
    return points / max(s, eps), float(s)


def normalize_local(view, mask, eps: float = 1e-8):
    """Per-view counterpart of :func:`normalize_global` for one (H, W, 3) map."""
    return normalize_global(view, mask, eps)


def geometric_loss(student_norm, teacher_norm, weights, mask,
                   n_valid: Optional[int] = None) -> float:
    """Weighted mean squared point error over the valid pixels.

    ``weights`` is the teacher confidence, or ``None`` for unit weights.
    ``n_valid`` overrides the divisor (the sample-wide count when a caller
    evaluates one view at a time).
    """
    mask = np.asarray(mask, bool)
    n = int(mask.sum()) if n_valid is None else n_valid
    if n == 0:
        raise DegenerateSampleError("geometric loss over an empty mask")
    diff = _as64(student_norm) - _as64(teacher_norm)
    sq = np.einsum("...i,...i->...", diff, diff)
    if weights is not None:
        sq = sq * _as64(weights)
    return float((sq * mask).sum() / n)


def geometric_loss_grad(student_norm, teacher_norm, weights, mask,
                        n_valid: Optional[int] = None) -> np.ndarray:
    """Gradient of :func:`geometric_loss` w.r.t. the normalized student points."""
    mask = np.asarray(mask, bool)
    n = int(mask.sum()) if n_valid is None else n_valid
    if n == 0:
        raise DegenerateSampleError("geometric loss over an empty mask")
    w = np.ones(mask.shape) if weights is None else _as64(weights)
    w = np.where(mask, w, 0.0)
    return (2.0 / n) * w[..., None] * (_as64(student_norm) - _as64(teacher_norm))


def confidence_loss(student_g, student_l, teacher_g, teacher_l, mask) -> float:
    mask = np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateSampleError("confidence loss over an empty mask")
    diff = np.abs(_as64(student_g) - _as64(teacher_g)) + np.abs(_as64(student_l) - _as64(teacher_l))
    return float(np.where(mask, diff, 0.0).sum() / (2 * n))


# -- full objective ----------------------------------------------------------

def _normalized_with_backward(x, mask, eps, axis):
    """Normalize ``x`` by its own mean valid norm and return a backward closure.

    ``axis`` selects the reduction: None for one shared scale, (1, 2) for one
    scale per view.
    """
    norms = _norms(x)
    s, count = _mean_norm(x, mask, axis=axis, norms=norms)
    s = np.asarray(s)
    d = np.maximum(s, eps)
    expand = (slice(None),) + (None,) * 3 if axis is not None else ()
    d_b = d[expand] if axis is not None else d
    x_hat = x / d_b

    def backward(g_hat):
        # d/dx of x / max(s(x), eps); s only moves with x above the floor
        dot = np.sum(g_hat * x_hat, axis=(-1,) if axis is None else (1, 2, 3))
        dot = dot.sum() if axis is None else dot
        active = (s > eps)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where((mask & (norms > 0))[..., None], x / norms[..., None], 0.0)
        count_b = count[expand] if axis is not None else count
        coeff = np.where(active, dot, 0.0)
        coeff_b = coeff[expand] if axis is not None else coeff
        return (g_hat - coeff_b * unit / count_b) / d_b

    return x_hat, s, backward


def _teacher_normalized(sample: SupervisionSample, eps: float):
    tg_hat, _, _ = _normalized_with_backward(sample.global_points, sample.mask, eps, None)
    tl_hat, _, _ = _normalized_with_backward(sample.local_points, sample.mask, eps, (1, 2))
    return tg_hat, tl_hat


def _loss_terms(student: dict, sample: SupervisionSample, cfg: LossConfig,
                with_grad: bool, teacher_hat=None) -> LossBreakdown:
    mask = sample.mask
    n = int(mask.sum())
    eps = cfg.scale_epsilon
    unit = cfg.weighting is Weighting.UNIT

    sg_hat, _, back_g = _normalized_with_backward(student["global_points"], mask, eps, None)
    sl_hat, _, back_l = _normalized_with_backward(student["local_points"], mask, eps, (1, 2))
    tg_hat, tl_hat = teacher_hat if teacher_hat is not None else _teacher_normalized(sample, eps)

    wg = None if unit else sample.global_conf
    wl = None if unit else sample.local_conf
    l_g = geometric_loss(sg_hat, tg_hat, wg, mask, n)
    l_l = geometric_loss(sl_hat, tl_hat, wl, mask, n)
    if cfg.conf_supervision:
        l_conf = confidence_loss(student["global_conf"], student["local_conf"],
                                 sample.global_conf, sample.local_conf, mask)
    else:
        l_conf = 0.0
    total = cfg.alpha_g * l_g + cfg.alpha_l * l_l + cfg.gamma * l_conf
    out = LossBreakdown(l_g, l_l, l_conf, total)

    if with_grad:
        grads = {
            "global_points": cfg.alpha_g * back_g(geometric_loss_grad(sg_hat, tg_hat, wg, mask, n)),
            "local_points": cfg.alpha_l * back_l(geometric_loss_grad(sl_hat, tl_hat, wl, mask, n)),
        }
        for name in ("global_conf", "local_conf"):
            if cfg.conf_supervision:
                sign = np.sign(student[name] - getattr(sample, name))
                grads[name] = np.where(mask, cfg.gamma * sign / (2 * n), 0.0)
            else:
                grads[name] = np.zeros(mask.shape)
        out.grads = grads
    return out


def total_loss(student: StudentPrediction, sample: SupervisionSample,
               cfg: LossConfig = LossConfig(), with_grad: bool = False) -> LossBreakdown:
    """Evaluate the distillation objective on one sample.

    A sample with any all-masked view is skipped whole: zero losses, zero
    gradients and ``skipped=True``.
    """
    arrays = student.arrays()
    for name in FIELDS:
        if arrays[name].shape != getattr(sample, name).shape:
            raise ValueError(
                f"student {name} shape {arrays[name].shape} does not match "
                f"sample {getattr(sample, name).shape}"
            )
    if sample.degenerate:
        grads = {k: np.zeros_like(v) for k, v in arrays.items()} if with_grad else None
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, skipped=True, grads=grads)
    return _loss_terms(arrays, sample, cfg, with_grad)


# -- gradient verification ---------------------------------------------------

def finite_diff_check(student: StudentPrediction, sample: SupervisionSample,
                      cfg: LossConfig = LossConfig(), h: float = 1e-5, seed: int = 0,
                      n_coords: int = 200) -> dict:
    """Compare analytic gradients against central differences of the total loss.

    For each field, ``n_coords`` coordinates are drawn from valid pixels plus
    a quarter as many from anywhere in the map. Confidence coordinates within
    ``2h`` of the absolute-value kink are excluded (and counted), since a
    central difference straddling the kink measures neither one-sided slope.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-6, 1e-3], got {h}")
    rng = np.random.default_rng(seed)
    base = student.arrays()
    analytic = total_loss(student, sample, cfg, with_grad=True).grads
    teacher_hat = None if sample.degenerate else _teacher_normalized(sample, cfg.scale_epsilon)

    def loss_at(name, flat_index, delta):
        if teacher_hat is None:
            return 0.0
        arrays = dict(base)
        a = base[name].copy()
        a.reshape(-1)[flat_index] += delta
        arrays[name] = a
        return _loss_terms(arrays, sample, cfg, False, teacher_hat).l_total

    report, worst = {}, 0.0
    for name in FIELDS:
        a = base[name]
        per_pixel = 3 if name.endswith("points") else 1
        valid_flat = np.flatnonzero(np.repeat(sample.mask.reshape(-1), per_pixel))
        picks = []
        if valid_flat.size:
            picks.append(rng.choice(valid_flat, size=min(n_coords, valid_flat.size), replace=False))
        picks.append(rng.choice(a.size, size=min(max(n_coords // 4, 1), a.size), replace=False))
        coords = np.unique(np.concatenate(picks))

        errs, skipped = [], 0
        for idx in coords:
            if not name.endswith("points") and cfg.conf_supervision:
                gap = abs(a.reshape(-1)[idx] - getattr(sample, name).reshape(-1)[idx])
                if 0 < gap < 2 * h:
                    skipped += 1
                    continue
            fd = (loss_at(name, idx, h) - loss_at(name, idx, -h)) / (2 * h)
            an = analytic[name].reshape(-1)[idx]
            errs.append((abs(an - fd) / max(abs(an), abs(fd), 1e-12), abs(an), abs(fd)))
        errs = np.array(errs).reshape(-1, 3)
        field_err = float(errs[:, 0].max()) if len(errs) else 0.0
        report[name] = {
            "checked": int(len(errs)),
            "skipped_at_kink": skipped,
            "max_rel_err": field_err,
            "max_abs_analytic": float(errs[:, 1].max()) if len(errs) else 0.0,
            "max_abs_fd": float(errs[:, 2].max()) if len(errs) else 0.0,
        }
        worst = max(worst, field_err)
    return {"max_rel_err": worst, "h": h, "seed": seed, "fields": report}


def perturbed_student(sample: SupervisionSample, rng: np.random.Generator,
                      noise: float = 0.05) -> StudentPrediction:
    """A student near ``sample``: teacher points at another scale plus noise.

    Both normalizations therefore matter. Student confidences sit 0.05-0.2
    away from the teacher's, so no coordinate lands on the L1 kink.
    """
    def near(t):
        return rng.uniform(0.5, 2.0) * (t + noise * rng.normal(size=t.shape))

    def conf_near(c):
        step = rng.choice([-1.0, 1.0], size=c.shape) * rng.uniform(0.05, 0.2, size=c.shape)
        out = c + step
        return np.where(out < 0, c + np.abs(step), out)

    return StudentPrediction(near(sample.global_points), near(sample.local_points),
                             conf_near(sample.global_conf), conf_near(sample.local_conf))


def random_problem(seed: int, n_views: int = 2, height: int = 16, width: int = 28,
                   tau: float = 0.3, noise: float = 0.05):
    """Random teacher sample plus a nearby student, for gradient checks."""
    rng = np.random.default_rng(seed)
    shape = (n_views, height, width)
    offset = np.array([0.0, 0.0, 3.0])
    tg = rng.normal(size=shape + (3,)) + offset
    tl = rng.normal(size=shape + (3,)) + offset
    cg = rng.uniform(0.0, 2.0, size=shape)
    cl = rng.uniform(0.0, 2.0, size=shape)
    mask = cl >= tau
    # a view with no valid pixel would make the whole sample degenerate
    for k in range(n_views):
        if not mask[k].any():
            mask[k, 0, 0] = True
    sample = SupervisionSample(tg, tl, cg, cl, mask)
    return perturbed_student(sample, rng, noise), sample


def scaled(student: StudentPrediction, sample: SupervisionSample, lam_s: float, lam_t: float):
    """Copies with point maps scaled by ``lam_s`` (student) and ``lam_t`` (teacher)."""
    s = StudentPrediction(student.global_points * lam_s, student.local_points * lam_s,
                          student.global_conf, student.local_conf)
    t = replace(sample, global_points=sample.global_points * lam_t,
                local_points=sample.local_points * lam_t)
    return s, t
