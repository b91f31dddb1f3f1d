"""
Choosing the latent dimensions by BIC
=====================================

Fit every cell of a (p_u, p_v) grid and pick the smallest BIC among the
identifiable, converged cells.  Cells with more shared axes than
objective variables are fitted but flagged.
"""

from ppls import FitConfig, LatentDims
from ppls.metrics import bic_grid, grid_to_csv
from ppls.simulate import random_canonical_params, sample

truth = random_canonical_params(6, 3, LatentDims(2, 2), c=1.5, seed=11, min_gap=0.1)
data = sample(truth.params, 3000, seed=0)

grid = bic_grid(data, range(1, 5), range(0, 4), FitConfig(LatentDims(1, 0), n_restarts=2))

for cell in grid.cells:
    flag = "" if cell.identifiable else "  not identifiable"
    print(f"p_u={cell.dims.p_u} p_v={cell.dims.p_v}  bic {cell.bic:10.2f}{flag}")
print("selected:", grid.best.dims, " truth:", truth.params.dims)

# the same table as CSV, ready for a heat map
print(grid_to_csv(grid))
