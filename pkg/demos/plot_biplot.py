"""
Biplot data and contribution ratios
===================================

Factor scores of each row and the scaled loading rows share one
coordinate system.  Each loading row has norm h, so the arrows end inside
a circle of radius h.  Axis labels give each shared axis's share of the
explained objective-variable variance.
"""

import numpy as np

from ppls import FitConfig, LatentDims, fit
from ppls.cli import biplot_export
from ppls.metrics import contribution_ratios
from ppls.model import factor_scores
from ppls.simulate import random_canonical_params, sample

dims = LatentDims(2, 2)
truth = random_canonical_params(7, 3, dims, c=1.5, seed=4, min_gap=0.1)
data = sample(truth.params, 1500, seed=5, missing_frac=0.1)
result = fit(data, FitConfig(dims, n_restarts=4))

rep = contribution_ratios(result.canonical)
print("contribution ratios:", rep.percent_labels(), " cumulative:", np.round(rep.c_ratio, 3))

scores = factor_scores(result.params, data.x, data.y)
export = biplot_export(result.params, scores.m_xy, axes=(0, 1))
print("axis labels:", export["axis_labels"])
print("radius h =", round(export["unit_circle_radius"], 4))
lengths = np.linalg.norm(export["arrows"], axis=1)
names = [f"x{j + 1}" for j in range(7)] + [f"y{j + 1}" for j in range(3)]
for name, length in zip(names, lengths):
    print(f"  {name:3s} arrow length {length:.3f}")
print("first scores:\n", np.round(export["scores"][:3], 3))
