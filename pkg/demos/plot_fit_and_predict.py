"""
Fitting with missing inputs and predicting
==========================================

Simulate data from a known model, knock out a fifth of the inputs, fit by
maximum likelihood and predict the objective variables of held-out rows.
Missing entries are marginalized, never imputed.
"""

import numpy as np

from ppls import Dataset, FitConfig, LatentDims, fit, predict_y
from ppls.metrics import r_squared
from ppls.simulate import inject_missing, random_canonical_params, sample

# a truth with two shared and one input-specific latent axis
dims = LatentDims(2, 1)
truth = random_canonical_params(5, 2, dims, c=1.5, seed=0, min_gap=0.2)
print("h =", round(truth.h, 3))

data = sample(truth.params, 2000, seed=1)
train, test = data.subset(np.arange(1000)), data.subset(np.arange(1000, 2000))

# 20% of the training inputs go missing completely at random
holed = Dataset.from_arrays(inject_missing(train.x, 0.2, seed=2), train.y)
result = fit(holed, FitConfig(dims, n_restarts=4))
print(f"loglik {result.loglik:.2f}  bic {result.bic:.2f}  converged {result.converged}")

# the unique variances stay bounded away from zero
print("psi:", np.round(result.params.psi, 3))

# predictions, with and without missing test inputs
means, covs = predict_y(result.params, test.x)
print("R2 complete test inputs:", np.round(r_squared(test.y, means), 3))
means_m, covs_m = predict_y(result.params, inject_missing(test.x, 0.2, seed=3))
print("R2 with 20% missing:    ", np.round(r_squared(test.y, means_m), 3))

# predictive variances grow when inputs are missing
print("mean predictive variance:", covs.diagonal(axis1=1, axis2=2).mean(0).round(3),
      "->", covs_m.diagonal(axis1=1, axis2=2).mean(0).round(3))
