"""
Sampling distribution of the estimates
======================================

Refit the model on replicated datasets at growing sample sizes.  Under
root-n consistency the standard deviation of each estimate halves when the
sample size quadruples.  Estimates are canonicalized, so they are
comparable across replicates.
"""

import numpy as np

from ppls import FitConfig, LatentDims
from ppls.simulate import random_canonical_params, run_sampling_study

dims = LatentDims(2, 1)
truth = random_canonical_params(4, 2, dims, c=1.5, seed=1, min_gap=0.2, min_colsum=0.15)

# a small version of the study; raise replicates for smoother histograms
study = run_sampling_study(truth, [500, 2000, 8000], 40, FitConfig(dims, n_restarts=2),
                           seed=3)
s = study.summary
ratio = np.array(s["sd_ratio"])
print("parameter    sd(500)   sd(2000)  sd(8000)  ratios")
for j, name in enumerate(s["param_names"]):
    sds = [p["sd"][j] for p in s["per_size"]]
    print(f"{name:11s} {sds[0]:8.4f} {sds[1]:9.4f} {sds[2]:9.4f}   {np.round(ratio[:, j], 2)}")
print("median sd ratio:", np.round(np.median(ratio, axis=1), 3), "(0.5 expected)")

# histograms ready for plotting
hist = s["per_size"][-1]["histograms"]["W_yu[0,0]"]
print("W_yu[0,0] at n=8000:", hist["counts"])
