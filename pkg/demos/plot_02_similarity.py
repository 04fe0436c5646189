"""
Weight-space and activation-space similarity
============================================

Compare two toy experts layer by layer: cosine of the flattened weights,
stable-rank and norm differences, and linear CKA of their hidden activations
on a shared probe set.
"""

import numpy as np

from mergelab import linear_cka, similarity_report, stable_rank
from mergelab.similarity import report_to_csv
from mergelab.toy import ExperimentConfig, train_experts
from mergelab.toy.experiment import capture_activations, probe_set

###############################################################################
# Stable rank is a smooth stand-in for rank: ||W||_F^2 / sigma_max^2.

print("identity 5x5:", stable_rank(np.eye(5)))
print("diag(2, 1):", stable_rank(np.diag([2.0, 1.0])))

###############################################################################
# CKA does not care about rotations or overall scale of a representation.

rng = np.random.default_rng(1)
x, y = rng.standard_normal((50, 6)), rng.standard_normal((50, 6))
q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
print("CKA(x, y) = %.4f, CKA(3 x Q, y) = %.4f" % (linear_cka(x, y), linear_cka(3 * x @ q, y)))

###############################################################################
# Two experts from one shared init and two from separate inits, same tasks.

cfg = ExperimentConfig(n_tasks=2, n_train=512, epochs=15)
tasks = cfg.tasks()
for mode in ("shared", "independent"):
    es = train_experts(tasks, mode, cfg)
    probe = probe_set(tasks[0], tasks[1], 256, seed=0)
    acts = [capture_activations(m, probe, "demo") for m in es.experts]
    rep = similarity_report(es.experts[0].params, es.experts[1].params, activations=(acts[0], acts[1]))
    print(f"\n{mode} init: mean cosine {rep.mean_cosine:.3f}, mean CKA {rep.mean_cka:.3f}")
    print(report_to_csv(rep), end="")
