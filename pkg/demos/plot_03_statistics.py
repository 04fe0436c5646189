"""
Merge deltas, bootstrap intervals and correlations
==================================================

The statistics layer turns per-item scores into a merge delta with an
uncertainty, and relates similarity measures to deltas.
"""

import numpy as np

from mergelab import bootstrap_ci, correlate_measures, cv_percent, merge_delta, spearman

rng = np.random.default_rng(3)

###############################################################################
# Two experts score 0.91 and 0.88 on their own tasks; the merge scores 0.52 and
# 0.47 on the same tasks. Delta is the mean drop.

d = merge_delta((0.91, 0.88), (0.52, 0.47), pair=("task A", "task B"))
print(f"delta = {d.delta:.3f} ({100 * d.delta:.1f} points)")

###############################################################################
# A bootstrap interval for a per-item accuracy (1000 resamples, 1.96 SE).

items = (rng.random(300) < 0.52).astype(float)
ci = bootstrap_ci(items, seed=0)
print(f"accuracy {ci.mean:.3f}, SE {ci.se:.4f}, 95% CI [{ci.ci_low:.3f}, {ci.ci_high:.3f}]")

###############################################################################
# Coefficient of variation across tasks, in percent.

print("CV%% of (0.8, 0.6, 0.7): %.1f" % cv_percent([0.8, 0.6, 0.7]))

###############################################################################
# Spearman handles ties with average ranks. The permutation p-value is an
# alternative to the t approximation when there are few records.

similarity = rng.random(12)
neg_delta = similarity + 0.3 * rng.standard_normal(12)
rho, p = spearman(similarity, neg_delta)
print(f"rho = {rho:.3f}, t-approx p = {p:.4f}")
rep = correlate_measures(zip(similarity, neg_delta), permutation=True, n_permutations=2000, seed=0)
print(f"permutation p = {rep.spearman_p:.4f}")
