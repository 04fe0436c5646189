"""Parametric and representational similarity between two models.

Parametric measures work on Checkpoints grouped into layers by a name pattern;
representational similarity is linear CKA on activations captured from a
shared probe set.
"""

from __future__ import annotations

import csv
import io
import math
import re
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from .checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from .errors import ArgumentError, DegenerateError, FormatError, ValidationError

__all__ = [
    "LayerGrouping",
    "ActivationSet",
    "LayerSimilarity",
    "SimilarityReport",
    "CKAProfile",
    "cosine_layerwise",
    "power_iteration",
    "stable_rank",
    "parametric_diff",
    "linear_cka",
    "hsic_cka",
    "cka_profile",
    "similarity_report",
    "load_activations",
    "save_activations",
    "report_to_csv",
]

OTHER = "other"
DEFAULT_LAYER_PATTERN = r"(?:^|\.)(?:layers?|blocks?|h)[._](\d+)(?:\.|$)"


@dataclass(frozen=True)
class LayerGrouping:
    """Maps tensor names to integer layer ids via the first regex group.

    Names the pattern does not match fall into the ``"other"`` bucket, which is
    left out of mean summaries unless ``include_other`` is set.
    """

    pattern: str = DEFAULT_LAYER_PATTERN
    include_other: bool = False

    def __post_init__(self):
        try:
            rx = re.compile(self.pattern)
        except re.error as exc:
            raise ArgumentError(f"bad grouping pattern {self.pattern!r}: {exc}") from None
        if rx.groups < 1:
            raise ArgumentError("grouping pattern needs one capture group for the layer index")

    def layer_of(self, name: str) -> int | str:
        m = re.search(self.pattern, name)
        if m is None:
            return OTHER
        try:
            return int(m.group(1))
        except (TypeError, ValueError):
            return OTHER

    def group(self, names: Sequence[str]) -> dict[int | str, list[str]]:
        buckets: dict[int | str, list[str]] = {}
        for n in sorted(names):
            buckets.setdefault(self.layer_of(n), []).append(n)
        ints = sorted(k for k in buckets if isinstance(k, int))
        ordered = {k: buckets[k] for k in ints}
        if OTHER in buckets:
            ordered[OTHER] = buckets[OTHER]
        return ordered


@dataclass(frozen=True)
class ActivationSet:
    layers: tuple[np.ndarray, ...]
    probe_id: str

    def __init__(self, layers: Sequence[np.ndarray], probe_id: str):
        mats = []
        for i, x in enumerate(layers):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2:
                raise ValidationError(f"activation layer {i} must be 2-D, got shape {x.shape}")
            if not np.all(np.isfinite(x)):
                raise ValidationError(f"activation layer {i} has non-finite entries")
            mats.append(x)
        if not mats:
            raise ValidationError("an ActivationSet needs at least one layer")
        rows = {m.shape[0] for m in mats}
        if len(rows) != 1:
            raise ValidationError(f"layers disagree on sample count: {sorted(rows)}")
        object.__setattr__(self, "layers", tuple(mats))
        object.__setattr__(self, "probe_id", str(probe_id))

    @property
    def n_samples(self) -> int:
        return self.layers[0].shape[0]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class LayerSimilarity:
    layer: int | str
    cosine: float | None = None
    stable_rank_diff: float | None = None
    l2_norm_diff: float | None = None
    cka: float | None = None


@dataclass
class SimilarityReport:
    per_layer: list[LayerSimilarity] = field(default_factory=list)
    include_other: bool = False

    def _mean(self, attr: str) -> float | None:
        vals = [
            getattr(r, attr)
            for r in self.per_layer
            if getattr(r, attr) is not None and (self.include_other or r.layer != OTHER)
        ]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_cosine(self) -> float | None:
        return self._mean("cosine")

    @property
    def mean_stable_rank_diff(self) -> float | None:
        return self._mean("stable_rank_diff")

    @property
    def mean_l2_diff(self) -> float | None:
        return self._mean("l2_norm_diff")

    @property
    def mean_cka(self) -> float | None:
        return self._mean("cka")

    def layer(self, layer_id: int | str) -> LayerSimilarity:
        for r in self.per_layer:
            if r.layer == layer_id:
                return r
        row = LayerSimilarity(layer_id)
        self.per_layer.append(row)
        return row


@dataclass
class CKAProfile:
    per_layer: list[float | None]

    @property
    def mean(self) -> float | None:
        vals = [v for v in self.per_layer if v is not None]
        return float(np.mean(vals)) if vals else None


# -- parametric measures --------------------------------------------------------

def _layer_vectors(ck: Checkpoint, names: list[str]) -> np.ndarray:
    return np.concatenate([ck[n].ravel().astype(np.float64) for n in names])


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(u @ u), float(v @ v)
    if nu == 0.0 and nv == 0.0:
        return 1.0
    if nu == 0.0 or nv == 0.0:
        return 0.0
    c = float(u @ v) / math.sqrt(nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_layerwise(a: Checkpoint, b: Checkpoint, grouping: LayerGrouping | None = None) -> dict[int | str, float]:
    """Cosine between each layer's concatenated, flattened parameters."""
    grouping = grouping or LayerGrouping()
    check_compatible(a, b)
    return {
        layer: _cosine(_layer_vectors(a, names), _layer_vectors(b, names))
        for layer, names in grouping.group(a.names()).items()
    }


def power_iteration(gram: np.ndarray, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0) -> tuple[float, int, bool]:
    """Largest eigenvalue of a symmetric PSD matrix.

    Starts from the normalized all-ones vector; if an iterate collapses to zero
    (start vector in the null space) it restarts once from a seeded random
    vector. Stops when the Rayleigh quotient changes by less than ``tol``
    relative. Returns (eigenvalue, iterations used, converged).
    """
    n = gram.shape[0]
    v = np.ones(n) / math.sqrt(n)
    lam_prev = None
    restarted = False
    for it in range(1, max_iter + 1):
        w = gram @ v
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            if restarted:
                return 0.0, it, True
            v = np.random.default_rng(seed).standard_normal(n)
            v /= np.linalg.norm(v)
            restarted = True
            lam_prev = None
            continue
        lam = float(v @ w) / float(v @ v)
        v = w / wn
        if lam_prev is not None and abs(lam - lam_prev) <= tol * abs(lam):
            return lam, it, True
        lam_prev = lam
    warnings.warn(f"power iteration did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    return lam, max_iter, False


def _as_matrix(t: np.ndarray) -> np.ndarray:
    if t.ndim < 2:
        raise ArgumentError(f"stable rank needs a tensor with >= 2 axes, got shape {t.shape}")
    m = np.asarray(t, dtype=np.float64).reshape(t.shape[0], -1)
    if m.shape[0] < 2 or m.shape[1] < 2:
        raise ArgumentError(f"stable rank needs both matrix dims >= 2, got {m.shape}")
    return m


def stable_rank(t: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> float:
    """||W||_F^2 / sigma_max^2 with W = t reshaped to (dim0, rest)."""
    w = _as_matrix(t)
    fro2 = float(np.sum(w * w))
    if fro2 == 0.0:
        raise DegenerateError("stable rank of a zero matrix is undefined")
    # W^T W and W W^T share their top eigenvalue; iterate on the smaller one
    gram = w.T @ w if w.shape[1] <= w.shape[0] else w @ w.T
    smax2, _, _ = power_iteration(gram, tol=tol, max_iter=max_iter)
    return fro2 / smax2


def _stable_rank_eligible(t: np.ndarray) -> bool:
    return t.ndim >= 2 and t.shape[0] >= 2 and t.size // t.shape[0] >= 2


def parametric_diff(a: Checkpoint, b: Checkpoint, grouping: LayerGrouping | None = None) -> SimilarityReport:
    """Per-layer cosine, |stable-rank difference|, and |L2-norm difference|."""
    grouping = grouping or LayerGrouping()
    check_compatible(a, b)
    report = SimilarityReport(include_other=grouping.include_other)
    for layer, names in grouping.group(a.names()).items():
        u, v = _layer_vectors(a, names), _layer_vectors(b, names)
        diffs = []
        for n in names:
            if not _stable_rank_eligible(a[n]):
                continue
            try:
                diffs.append(abs(stable_rank(a[n]) - stable_rank(b[n])))
            except DegenerateError:
                continue
        report.per_layer.append(
            LayerSimilarity(
                layer=layer,
                cosine=_cosine(u, v),
                stable_rank_diff=float(np.mean(diffs)) if diffs else None,
                l2_norm_diff=abs(math.sqrt(float(u @ u)) - math.sqrt(float(v @ v))),
            )
        )
    return report


# -- CKA ------------------------------------------------------------------------

def _centered(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError(f"{name} must be a 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ArgumentError(f"{name} has non-finite entries")
    xc = x - x.mean(axis=0, keepdims=True)
    if not np.any(xc):
        raise DegenerateError(f"{name} has zero variance after centering")
    return xc


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ArgumentError(f"CKA inputs need equal row counts, got {x.shape} and {y.shape}")
    if x.shape[0] < 3:
        raise ArgumentError("CKA needs at least 3 samples")
    xc, yc = _centered(x, "x"), _centered(y, "y")
    n, d1, d2 = xc.shape[0], xc.shape[1], yc.shape[1]
    if n < max(d1, d2):
        kx, ky = xc @ xc.T, yc @ yc.T
        cross = float(np.sum(kx * ky))
        nx, ny = float(np.linalg.norm(kx)), float(np.linalg.norm(ky))
    else:
        cross = float(np.linalg.norm(yc.T @ xc) ** 2)
        nx, ny = float(np.linalg.norm(xc.T @ xc)), float(np.linalg.norm(yc.T @ yc))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateError("CKA undefined for a zero Gram matrix")
    return min(1.0, max(0.0, cross / (nx * ny)))


def hsic_cka(x: np.ndarray, y: np.ndarray) -> float:
    """CKA from centered Gram matrices, HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    kc = h @ (x @ x.T) @ h
    lc = h @ (y @ y.T) @ h
    hxy = float(np.sum(kc * lc))
    hxx = float(np.sum(kc * kc))
    hyy = float(np.sum(lc * lc))
    if hxx == 0.0 or hyy == 0.0:
        raise DegenerateError("CKA undefined for a zero Gram matrix")
    return hxy / math.sqrt(hxx * hyy)


def _subsample(n: int, max_rows: int | None, seed: int) -> np.ndarray | None:
    if max_rows is None or n <= max_rows:
        return None
    return np.sort(np.random.default_rng(seed).choice(n, size=max_rows, replace=False))


def cka_profile(a: ActivationSet, b: ActivationSet, max_rows: int | None = 2048, seed: int = 0) -> CKAProfile:
    """Layer-by-layer CKA at equal depth; degenerate layers come back as None."""
    if a.probe_id != b.probe_id:
        raise ArgumentError(f"probe mismatch: {a.probe_id!r} vs {b.probe_id!r}")
    if a.n_samples != b.n_samples:
        raise ArgumentError(f"sample count mismatch: {a.n_samples} vs {b.n_samples}")
    if len(a) != len(b):
        raise ArgumentError(f"layer count mismatch: {len(a)} vs {len(b)}")
    rows = _subsample(a.n_samples, max_rows, seed)
    values: list[float | None] = []
    for xa, xb in zip(a.layers, b.layers):
        if rows is not None:
            xa, xb = xa[rows], xb[rows]
        try:
            values.append(linear_cka(xa, xb))
        except DegenerateError:
            values.append(None)
    return CKAProfile(values)


def similarity_report(
    a: Checkpoint,
    b: Checkpoint,
    grouping: LayerGrouping | None = None,
    activations: tuple[ActivationSet, ActivationSet] | None = None,
) -> SimilarityReport:
    """Parametric report, with CKA filled in at layer ``i`` from activation layer ``i``."""
    report = parametric_diff(a, b, grouping)
    if activations is not None:
        prof = cka_profile(*activations)
        for i, v in enumerate(prof.per_layer):
            report.layer(i).cka = v
        report.per_layer.sort(key=lambda r: (r.layer == OTHER, r.layer if r.layer != OTHER else 0))
    return report


# -- file interfaces ------------------------------------------------------------

_LAYER_NAME = re.compile(r"^layer_(\d+)$")


def save_activations(acts: ActivationSet, path: str | PathLike, dtype: str = "float32") -> None:
    ck = Checkpoint({f"layer_{i}": x for i, x in enumerate(acts.layers)}, {"probe_id": acts.probe_id})
    save_checkpoint(ck, path, dtype)


def load_activations(path: str | PathLike) -> ActivationSet:
    ck = load_checkpoint(path)
    if "probe_id" not in ck.metadata:
        raise FormatError(f"{path}: activation file lacks a 'probe_id' metadata entry")
    idx = {}
    for name in ck:
        m = _LAYER_NAME.match(name)
        if m is None:
            raise FormatError(f"{path}: unexpected tensor {name!r}; expected layer_<i>")
        idx[int(m.group(1))] = name
    if sorted(idx) != list(range(len(idx))):
        raise FormatError(f"{path}: layer indices must be 0..{len(idx) - 1}")
    return ActivationSet([ck[idx[i]] for i in range(len(idx))], ck.metadata["probe_id"])


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(report: SimilarityReport, include_cka: bool | None = None) -> str:
    """CSV text: layer, cosine, stable_rank_diff, l2_norm_diff[, cka], then a mean row."""
    if include_cka is None:
        include_cka = any(r.cka is not None for r in report.per_layer)
    cols = ["layer", "cosine", "stable_rank_diff", "l2_norm_diff"] + (["cka"] if include_cka else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in report.per_layer:
        row = [str(r.layer), _fmt(r.cosine), _fmt(r.stable_rank_diff), _fmt(r.l2_norm_diff)]
        if include_cka:
            row.append(_fmt(r.cka))
        w.writerow(row)
    mean = ["mean", _fmt(report.mean_cosine), _fmt(report.mean_stable_rank_diff), _fmt(report.mean_l2_diff)]
    if include_cka:
        mean.append(_fmt(report.mean_cka))
    w.writerow(mean)
    return buf.getvalue()


def read_report_csv(text: str) -> dict[str, dict[str, float | None]]:
    """Parse :func:`report_to_csv` output into {layer: {column: value}}."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict[str, dict[str, float | None]] = {}
    for row in rows:
        out[row["layer"]] = {k: (float(v) if v != "" else None) for k, v in row.items() if k != "layer"}
    return out
