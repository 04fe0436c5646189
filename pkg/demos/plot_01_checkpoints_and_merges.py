"""
Checkpoints and the three merge methods
=======================================

Build two small "fine-tuned" checkpoints from a common base, store them in
the safetensors container, and merge them three ways.
"""

import tempfile
from pathlib import Path

import numpy as np

from mergelab import (
    Checkpoint,
    DareConfig,
    TiesConfig,
    dare_ties_merge,
    file_digest,
    linear_merge,
    load_checkpoint,
    save_checkpoint,
    task_vector,
    ties_merge,
)

rng = np.random.default_rng(0)
shapes = {"layer_0.weight": (8, 4), "layer_0.bias": (4,), "layer_1.weight": (4, 2)}
base = Checkpoint({n: rng.standard_normal(s) for n, s in shapes.items()}, {"role": "base"})

# Each expert is the base plus a sparse-ish update of its own.
experts = [
    Checkpoint({n: base[n] + 0.3 * rng.standard_normal(s) * (rng.random(s) < 0.4) for n, s in shapes.items()})
    for _ in range(2)
]

###############################################################################
# Round trip through the container. Tensors come back as read-only float32,
# and saving the same checkpoint twice gives byte-identical files.

out = Path(tempfile.mkdtemp())
save_checkpoint(base, out / "base.safetensors")
save_checkpoint(load_checkpoint(out / "base.safetensors"), out / "again.safetensors")
print("digests equal:", file_digest(out / "base.safetensors") == file_digest(out / "again.safetensors"))

###############################################################################
# A linear merge is the element-wise mean. A one-model soup is the model.

soup = linear_merge(experts)
print("soup[layer_1.weight][0]:", soup["layer_1.weight"][0])
print("single-input soup is the input:", linear_merge([base]).equals(base))

###############################################################################
# TIES keeps the largest 20% of each task vector, elects a sign per entry and
# averages only the entries that agree with it.

tv = task_vector(experts[0], base)
print("non-zero task-vector entries:", int(np.count_nonzero(tv.flat())), "of", tv.flat().size)
ties = ties_merge(base, experts, TiesConfig(density=0.2, lam=1.0))
moved = sum(int(np.count_nonzero(ties[n] != base[n])) for n in ties)
print("entries moved by TIES:", moved)

###############################################################################
# DARE drops task-vector entries at random and rescales the survivors before
# the TIES steps. With drop probability 0 it is plain TIES, bit for bit.

dare = dare_ties_merge(base, experts, DareConfig(drop_prob=0.9, seed=7), TiesConfig(0.2))
print("DARE-TIES metadata:", dict(dare.metadata))
print("p = 0 equals TIES:", dare_ties_merge(base, experts, DareConfig(0.0, 7), TiesConfig(0.2)).equals(ties))
