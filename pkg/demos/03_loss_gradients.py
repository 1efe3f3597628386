"""
The distillation loss and its gradients
=======================================

Loss terms on a cached sample, the analytic gradient against central
differences, and invariance to the scale of either point map.
"""

import numpy as np

from distillcache.loss import (LossConfig, StudentPrediction, SupervisionSample,
                               finite_diff_check, perturbed_student, scaled, total_loss)
from distillcache.teacher import SyntheticScene, align_and_filter, synth_teacher

teacher = synth_teacher(SyntheticScene(seed=1, n_views=2, height=56, width=84))
sample = SupervisionSample.from_viewset(align_and_filter(teacher, (28, 42), tau=0.3))
student = perturbed_student(sample, np.random.default_rng(0))

cfg = LossConfig()
out = total_loss(student, sample, cfg, with_grad=True)
print(f"l_g={out.l_g:.4f}  l_l={out.l_l:.4f}  l_conf={out.l_conf:.4f}  total={out.l_total:.4f}")

# gradient check on a few hundred coordinates
check = finite_diff_check(student, sample, cfg, h=1e-5, n_coords=100)
print("max relative error", check["max_rel_err"])

# multiplying student or teacher points by a constant leaves the loss alone
for lam_s, lam_t in [(2.0, 1.0), (1.0, 0.1), (7.0, 3.0)]:
    s, t = scaled(student, sample, lam_s, lam_t)
    print(lam_s, lam_t, abs(total_loss(s, t, cfg).l_total - out.l_total))

# the three training modes share the geometric terms
for mode in ("full", "labels-only", "no-weighting"):
    print(mode, round(total_loss(student, sample, LossConfig.for_mode(mode)).l_total, 4))

# a student that copies the teacher's confidences gets no confidence loss
copy = StudentPrediction(student.global_points, student.local_points,
                         sample.global_conf, sample.local_conf)
print("l_conf with copied confidences", total_loss(copy, sample, cfg).l_conf)
