"""Linear averaging, task arithmetic, TIES, and DARE-TIES over Checkpoints.

Task vectors are held in float64 so that ``base + (expert - base)`` recovers
the expert bit-exactly once cast back to float32. All reductions run in a
fixed order (expert index ascending), which keeps outputs independent of how
per-tensor work is scheduled.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, ShapeSignature, check_compatible, compare_signatures
from .errors import ArgumentError

__all__ = [
    "MergeWeights",
    "TaskVector",
    "TiesConfig",
    "DareConfig",
    "linear_merge",
    "task_vector",
    "apply_task_vector",
    "ties_trim",
    "ties_elect_sign",
    "ties_disjoint_mean",
    "ties_merge",
    "ties_merge_vectors",
    "dare_transform",
    "dare_ties_merge",
    "dare_ties_merge_vectors",
    "derive_seed",
    "position_uniforms",
]


@dataclass(frozen=True)
class MergeWeights:
    """Non-negative merge weights, normalized to sum to one at construction."""

    weights: tuple[float, ...]

    def __init__(self, weights: Sequence[float]):
        w = [float(x) for x in weights]
        if not w:
            raise ArgumentError("need at least one weight")
        if any(not math.isfinite(x) or x < 0 for x in w):
            raise ArgumentError(f"weights must be finite and non-negative: {w}")
        total = math.fsum(w)
        if total <= 0:
            raise ArgumentError("weights must not all be zero")
        object.__setattr__(self, "weights", tuple(x / total for x in w))

    @classmethod
    def equal(cls, k: int) -> "MergeWeights":
        return cls([1.0] * k)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor deltas ``expert - base`` in float64, keyed like the base."""

    deltas: Mapping[str, np.ndarray]
    signature: ShapeSignature = field(compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]

    def __iter__(self):
        return iter(self.deltas)

    def names(self) -> list[str]:
        return list(self.deltas)

    def map(self, fn) -> "TaskVector":
        return TaskVector({n: fn(n, d) for n, d in self.deltas.items()}, self.signature)

    def flat(self) -> np.ndarray:
        if not self.deltas:
            return np.zeros(0)
        return np.concatenate([d.ravel() for d in self.deltas.values()])

    def equals(self, other: "TaskVector") -> bool:
        return self.names() == other.names() and all(np.array_equal(self[n], other[n]) for n in self.deltas)


@dataclass(frozen=True)
class TiesConfig:
    density: float = 0.2
    lam: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.density <= 1.0):
            raise ArgumentError(f"density must be in (0, 1], got {self.density}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ArgumentError(f"lambda must be > 0, got {self.lam}")


@dataclass(frozen=True)
class DareConfig:
    drop_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_prob < 1.0):
            raise ArgumentError(f"drop_prob must be in [0, 1), got {self.drop_prob}")

    @property
    def rescale(self) -> float:
        return 1.0 / (1.0 - self.drop_prob)


def _check_all(ckpts: Sequence[Checkpoint]) -> ShapeSignature:
    sig = ckpts[0].signature()
    for c in ckpts[1:]:
        check_compatible(ckpts[0], c)
    return sig


def linear_merge(inputs: Sequence[Checkpoint], weights: MergeWeights | Sequence[float] | None = None) -> Checkpoint:
    """Element-wise weighted average ``sum_i w_i * inputs[i]``.

    Accumulation is in float64 and rounded once to float32, so k identical
    inputs with equal weights give back the input exactly.
    """
    if not inputs:
        raise ArgumentError("linear_merge needs at least one input")
    if weights is None:
        weights = MergeWeights.equal(len(inputs))
    elif not isinstance(weights, MergeWeights):
        weights = MergeWeights(weights)
    if len(weights) != len(inputs):
        raise ArgumentError(f"{len(weights)} weights for {len(inputs)} inputs")
    _check_all(inputs)
    if len(inputs) == 1:
        # a one-model soup is that model, metadata included
        return inputs[0]
    out = {}
    for name in inputs[0]:
        acc = np.zeros(inputs[0][name].shape, dtype=np.float64)
        for w, ck in zip(weights.weights, inputs):
            acc += w * ck[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    meta = {
        "merge_method": "linear",
        "merge_weights": ",".join(repr(w) for w in weights.weights),
        "merge_inputs": ",".join(ck.metadata.get("id", str(i)) for i, ck in enumerate(inputs)),
    }
    return Checkpoint(out, meta)


def task_vector(expert: Checkpoint, base: Checkpoint) -> TaskVector:
    sig = check_compatible(expert, base)
    return TaskVector({n: expert[n].astype(np.float64) - base[n].astype(np.float64) for n in base}, sig)


def apply_task_vector(base: Checkpoint, tv: TaskVector, lam: float = 1.0, metadata: Mapping[str, str] | None = None) -> Checkpoint:
    """``base + lam * tv`` rounded to float32."""
    compare_signatures(base.signature(), tv.signature)
    out = {n: (base[n].astype(np.float64) + lam * tv[n]).astype(np.float32) for n in base}
    return Checkpoint(out, metadata if metadata is not None else base.metadata)


def _keep_count(density: float, n: int) -> int:
    # guard against 0.2 * 5 == 1.0000000000000002 pushing ceil up by one
    return min(n, max(1, math.ceil(round(density * n, 9))))


def _trim_array(d: np.ndarray, density: float) -> np.ndarray:
    flat = d.ravel()
    k = _keep_count(density, flat.size)
    if k >= flat.size:
        return d.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(d.shape)


def ties_trim(tv: TaskVector, density: float) -> TaskVector:
    """Keep the top ceil(density * n) entries of each tensor by magnitude.

    Equal magnitudes at the cutoff are resolved in favour of the lower flat index.
    """
    if not (0.0 < density <= 1.0):
        raise ArgumentError(f"density must be in (0, 1], got {density}")
    return tv.map(lambda _, d: _trim_array(d, density))


def ties_elect_sign(tvs: Sequence[TaskVector]) -> dict[str, np.ndarray]:
    """Per-parameter sign of the summed deltas; an exact zero sum elects +1."""
    if not tvs:
        raise ArgumentError("need at least one task vector")
    _check_tv_sigs(tvs)
    signs = {}
    for name in tvs[0]:
        total = np.zeros(tvs[0][name].shape, dtype=np.float64)
        for tv in tvs:
            total += tv[name]
        signs[name] = np.where(total < 0, -1.0, 1.0)
    return signs


def ties_disjoint_mean(trimmed: Sequence[TaskVector], signs: Mapping[str, np.ndarray]) -> TaskVector:
    """Mean over the experts whose (nonzero) value agrees with the elected sign."""
    merged = {}
    for name in trimmed[0]:
        total = np.zeros(trimmed[0][name].shape, dtype=np.float64)
        count = np.zeros(total.shape, dtype=np.int64)
        s = signs[name]
        for tv in trimmed:
            d = tv[name]
            agree = (d != 0) & (np.sign(d) == s)
            total += np.where(agree, d, 0.0)
            count += agree
        merged[name] = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return TaskVector(merged, trimmed[0].signature)


def _check_tv_sigs(tvs: Sequence[TaskVector]) -> None:
    for tv in tvs[1:]:
        compare_signatures(tvs[0].signature, tv.signature)


def ties_merge_vectors(base: Checkpoint, tvs: Sequence[TaskVector], cfg: TiesConfig, method: str = "ties") -> Checkpoint:
    """The TIES pipeline on precomputed task vectors."""
    if not tvs:
        raise ArgumentError("need at least one task vector")
    trimmed = [ties_trim(tv, cfg.density) for tv in tvs]
    signs = ties_elect_sign(trimmed)
    merged = ties_disjoint_mean(trimmed, signs)
    meta = {"merge_method": method, "density": repr(cfg.density), "lambda": repr(cfg.lam)}
    return apply_task_vector(base, merged, cfg.lam, metadata=meta)


def ties_merge(base: Checkpoint, experts: Sequence[Checkpoint], cfg: TiesConfig | None = None) -> Checkpoint:
    """Trim, elect sign, disjoint mean, then add the merged vector to ``base``."""
    cfg = cfg or TiesConfig()
    if not experts:
        raise ArgumentError("ties_merge needs at least one expert")
    tvs = [task_vector(e, base) for e in experts]
    return ties_merge_vectors(base, tvs, cfg)


# -- DARE -----------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def derive_seed(*parts: object) -> int:
    """Stable 64-bit seed from an arbitrary tuple (no Python ``hash``)."""
    text = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def position_uniforms(seed: int, name: str, size: int, start: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) for flat indices ``start .. start+size``.

    Each value depends only on (seed, name, index): any slice of a tensor can
    be generated independently and agrees with the whole-tensor draw.
    """
    key = np.uint64(derive_seed(int(seed) & _MASK64, name))
    idx = np.arange(start, start + size, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _splitmix64(_splitmix64(idx) ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def dare_transform(tv: TaskVector, cfg: DareConfig) -> TaskVector:
    """Drop each entry with probability p and rescale survivors by 1/(1-p)."""
    if cfg.drop_prob == 0.0:
        return tv.map(lambda _, d: d.copy())
    scale = cfg.rescale

    def drop(name: str, d: np.ndarray) -> np.ndarray:
        u = position_uniforms(cfg.seed, name, d.size).reshape(d.shape)
        return np.where(u < cfg.drop_prob, 0.0, d * scale)

    return tv.map(drop)


def dare_ties_merge(
    base: Checkpoint,
    experts: Sequence[Checkpoint],
    dare: DareConfig | None = None,
    ties: TiesConfig | None = None,
) -> Checkpoint:
    """DARE on each task vector (seed derived per expert index), then TIES."""
    dare = dare or DareConfig()
    ties = ties or TiesConfig()
    if not experts:
        raise ArgumentError("dare_ties_merge needs at least one expert")
    return dare_ties_merge_vectors(base, [task_vector(e, base) for e in experts], dare, ties)


def dare_ties_merge_vectors(base: Checkpoint, tvs: Sequence[TaskVector], dare: DareConfig, ties: TiesConfig) -> Checkpoint:
    dropped = [dare_transform(tv, DareConfig(dare.drop_prob, derive_seed(dare.seed, i))) for i, tv in enumerate(tvs)]
    out = ties_merge_vectors(base, dropped, ties, "dare_ties")
    return out.with_metadata(drop_prob=repr(dare.drop_prob), seed=str(dare.seed))
