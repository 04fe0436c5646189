import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mergelab import (
    ActivationSet,
    ArgumentError,
    Checkpoint,
    DegenerateError,
    LayerGrouping,
    MismatchError,
    cka_profile,
    cosine_layerwise,
    linear_cka,
    parametric_diff,
    similarity_report,
    stable_rank,
)
from mergelab.errors import FormatError, ValidationError
from mergelab.similarity import (
    hsic_cka,
    load_activations,
    power_iteration,
    read_report_csv,
    report_to_csv,
    save_activations,
)

import oracles
from conftest import random_checkpoint


def ortho(d: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q * np.sign(np.diag(r))


# -- grouping ------------------------------------------------------------------------

def test_default_grouping():
    g = LayerGrouping()
    assert g.layer_of("model.layers.3.mlp.w") == 3
    assert g.layer_of("layer_0.w") == 0
    assert g.layer_of("transformer.h.11.attn") == 11
    assert g.layer_of("embed.weight") == "other"
    assert list(g.group(["layer_10.w", "layer_2.b", "emb", "layer_2.w"])) == [2, 10, "other"]


def test_custom_grouping_and_validation():
    g = LayerGrouping(r"^enc(\d+)/")
    assert g.layer_of("enc7/kernel") == 7
    with pytest.raises(ArgumentError):
        LayerGrouping(r"no_group")
    with pytest.raises(ArgumentError):
        LayerGrouping(r"(")


# -- cosine -----------------------------------------------------------------------------

def one_layer(a, b):
    return cosine_layerwise(Checkpoint({"layer_0.w": np.array(a, float)}), Checkpoint({"layer_0.w": np.array(b, float)}))[0]


def test_cosine_examples():
    assert one_layer([1, 0], [0, 1]) == 0.0
    assert one_layer([1, 2], [2, 4]) == pytest.approx(1.0, abs=1e-15)
    assert one_layer([0, 0], [0, 0]) == 1.0
    assert one_layer([0, 0], [1, 0]) == 0.0


@given(st.integers(0, 10_000))
def test_cosine_symmetric_and_bounded(seed):
    a, b = random_checkpoint(seed), random_checkpoint(seed + 1)
    ab, ba = cosine_layerwise(a, b), cosine_layerwise(b, a)
    assert ab == ba
    assert all(-1.0 <= v <= 1.0 for v in ab.values())


# -- stable rank / power iteration -------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 8, 32])
def test_stable_rank_identity_exact(n):
    assert stable_rank(np.eye(n)) == n


def test_stable_rank_diag():
    assert stable_rank(np.diag([2.0, 1.0])) == pytest.approx(1.25, abs=1e-6)


def test_stable_rank_rank_one():
    rng = np.random.default_rng(0)
    assert stable_rank(np.outer(rng.standard_normal(7), rng.standard_normal(5))) == pytest.approx(1.0, abs=1e-6)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.booleans())
def test_stable_rank_scale_invariant_and_bounded(seed, c, neg):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((int(rng.integers(2, 12)), int(rng.integers(2, 12))))
    c = -c if neg else c
    sr = stable_rank(w)
    assert abs(stable_rank(c * w) - sr) <= 1e-8 * sr
    assert 1.0 - 1e-9 <= sr <= min(w.shape) + 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_stable_rank_matches_svd(seed):
    w = np.random.default_rng(seed).standard_normal((32, 32))
    assert stable_rank(w) == pytest.approx(oracles.stable_rank_svd(w), rel=1e-8)


def test_stable_rank_reshapes_higher_rank_tensors():
    t = np.random.default_rng(1).standard_normal((4, 3, 2))
    assert stable_rank(t) == pytest.approx(oracles.stable_rank_svd(t.reshape(4, 6)), rel=1e-8)


def test_stable_rank_errors():
    with pytest.raises(DegenerateError):
        stable_rank(np.zeros((3, 3)))
    with pytest.raises(ArgumentError):
        stable_rank(np.ones(4))
    with pytest.raises(ArgumentError):
        stable_rank(np.ones((1, 4)))


def test_power_iteration_restarts_from_null_start():
    # all-ones start vector lies in the null space of this PSD matrix
    m = np.array([[1.0, -1.0], [-1.0, 1.0]])
    lam, _, converged = power_iteration(m)
    assert converged and lam == pytest.approx(2.0, rel=1e-10)


def test_power_iteration_warns_when_capped():
    m = np.diag([1.0, 0.999999])
    with pytest.warns(RuntimeWarning):
        _, iters, converged = power_iteration(m, tol=1e-16, max_iter=5)
    assert not converged and iters == 5


# -- parametric diff --------------------------------------------------------------------

def test_parametric_diff_self_exact():
    a = random_checkpoint(0)
    for row in parametric_diff(a, a).per_layer:
        assert row.cosine == 1.0 and row.stable_rank_diff == 0.0 and row.l2_norm_diff == 0.0


def test_parametric_diff_doubling():
    a = random_checkpoint(1)
    b = a.map(lambda _, t: 2 * t)
    rep = parametric_diff(a, b)
    for row in rep.per_layer:
        names = [n for n in a if LayerGrouping().layer_of(n) == row.layer]
        norm = math.sqrt(sum(float(np.sum(a[n].astype(float) ** 2)) for n in names))
        assert row.cosine == pytest.approx(1.0, abs=1e-12)
        assert row.l2_norm_diff == pytest.approx(norm, rel=1e-12)
        assert row.stable_rank_diff == pytest.approx(0.0, abs=1e-12)


def test_parametric_diff_hand_example():
    a = Checkpoint({"layer_0.w": np.array([[1.0, 0.0], [0.0, 1.0]]), "layer_0.b": np.array([1.0, 1.0]),
                    "layer_1.w": np.array([[2.0, 0.0], [0.0, 1.0]])})
    b = Checkpoint({"layer_0.w": np.array([[1.0, 1.0], [0.0, 1.0]]), "layer_0.b": np.array([0.0, 1.0]),
                    "layer_1.w": np.array([[1.0, 0.0], [0.0, 1.0]])})
    rep = parametric_diff(a, b)
    # layer 0: vectors sorted by name (b then w): [1,1,1,0,0,1] vs [0,1,1,1,0,1]
    u, v = np.array([1, 1, 1, 0, 0, 1.0]), np.array([0, 1, 1, 1, 0, 1.0])
    r0, r1 = rep.layer(0), rep.layer(1)
    assert r0.cosine == pytest.approx(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), abs=1e-15)
    assert r0.l2_norm_diff == pytest.approx(0.0, abs=1e-15)
    golden = (3 + math.sqrt(5)) / 2  # top eigenvalue of [[1,1],[1,2]]
    assert r0.stable_rank_diff == pytest.approx(abs(2.0 - 3.0 / golden), rel=1e-9)
    assert r1.cosine == pytest.approx(3 / math.sqrt(10), abs=1e-15)
    assert r1.stable_rank_diff == pytest.approx(abs(1.25 - 2.0), rel=1e-9)
    assert r1.l2_norm_diff == pytest.approx(math.sqrt(5) - math.sqrt(2), rel=1e-12)
    assert rep.mean_cosine == pytest.approx((r0.cosine + r1.cosine) / 2)


def test_other_bucket_excluded_from_means_by_default():
    a = Checkpoint({"layer_0.w": np.ones((2, 2)), "embed": np.array([1.0, 0.0])})
    b = Checkpoint({"layer_0.w": np.ones((2, 2)), "embed": np.array([0.0, 1.0])})
    assert parametric_diff(a, b).mean_cosine == 1.0
    assert parametric_diff(a, b, LayerGrouping(include_other=True)).mean_cosine == 0.5


def test_parametric_diff_mismatch():
    with pytest.raises(MismatchError):
        parametric_diff(random_checkpoint(0), Checkpoint({"x": np.ones(1)}))


# -- CKA ------------------------------------------------------------------------------

def test_cka_self_is_one():
    x = np.random.default_rng(0).standard_normal((50, 8))
    assert abs(linear_cka(x, x) - 1.0) <= 1e-9


def test_cka_hand_example_matches_gram_oracle():
    x = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0], [2.0, 2.0]])
    y = np.array([[0.5, 0.0], [1.0, 1.0], [-1.0, 2.0], [0.0, 3.0]])
    assert linear_cka(x, y) == pytest.approx(oracles.cka_gram(x, y), abs=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_cka_invariances_and_hsic_agreement(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((10, 5)), rng.standard_normal((10, 5))
    base = linear_cka(x, y)
    assert abs(base - linear_cka(y, x)) <= 1e-12
    assert abs(base - linear_cka(x @ ortho(5, seed), y)) <= 1e-6
    assert abs(base - linear_cka(x, 3.7 * y)) <= 1e-6
    assert abs(base - hsic_cka(x, y)) <= 1e-8
    assert abs(base - oracles.cka_gram(x, y)) <= 1e-8
    assert abs(linear_cka(x, x @ ortho(5, seed + 1)) - 1.0) <= 1e-6


def test_cka_wide_inputs_use_gram_path():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((6, 40)), rng.standard_normal((6, 30))
    assert linear_cka(x, y) == pytest.approx(oracles.cka_gram(x, y), abs=1e-10)


def test_cka_errors():
    with pytest.raises(ArgumentError):
        linear_cka(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ArgumentError):
        linear_cka(np.ones((4, 2)), np.ones((5, 2)))
    with pytest.raises(DegenerateError):
        linear_cka(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))


def acts(seed: int, n: int = 40, dims=(6, 4)) -> ActivationSet:
    rng = np.random.default_rng(seed)
    return ActivationSet([rng.standard_normal((n, d)) for d in dims], "probe")


def test_cka_profile_self_and_column_permutation():
    a = acts(0)
    prof = cka_profile(a, a)
    assert prof.per_layer == pytest.approx([1.0, 1.0], abs=1e-12) and prof.mean == pytest.approx(1.0)
    b = acts(1)
    perm = ActivationSet([m[:, ::-1] for m in b.layers], "probe")
    assert cka_profile(a, perm).per_layer == pytest.approx(cka_profile(a, b).per_layer, abs=1e-12)


def test_cka_profile_matches_reference():
    a, b = acts(2), acts(3)
    ref = [oracles.cka_gram(x, y) for x, y in zip(a.layers, b.layers)]
    assert cka_profile(a, b).per_layer == pytest.approx(ref, abs=1e-8)


def test_cka_profile_degenerate_layer_is_missing():
    a = ActivationSet([np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2))], "probe")
    b = acts(4, n=5, dims=(2, 2))
    prof = cka_profile(a, b)
    assert prof.per_layer[0] is None and prof.per_layer[1] is not None


def test_cka_profile_mismatches():
    with pytest.raises(ArgumentError):
        cka_profile(acts(0), ActivationSet(acts(1).layers, "other-probe"))
    with pytest.raises(ArgumentError):
        cka_profile(acts(0), acts(1, dims=(6,)))
    with pytest.raises(ArgumentError):
        cka_profile(acts(0), acts(1, n=30))


def test_cka_profile_subsamples_large_probes():
    a, b = acts(5, n=100), acts(6, n=100)
    small = cka_profile(a, b, max_rows=50, seed=1)
    assert small.per_layer != cka_profile(a, b).per_layer
    assert small.per_layer == cka_profile(a, b, max_rows=50, seed=1).per_layer


def test_activation_set_validation():
    with pytest.raises(ValidationError):
        ActivationSet([np.ones((3, 2)), np.ones((4, 2))], "p")
    with pytest.raises(ValidationError):
        ActivationSet([np.array([[np.nan, 1.0]])], "p")
    with pytest.raises(ValidationError):
        ActivationSet([], "p")


# -- report and files ----------------------------------------------------------------

def test_activation_file_round_trip(tmp_path):
    a = ActivationSet([np.arange(12.0).reshape(4, 3), np.ones((4, 2))], "probe-7")
    save_activations(a, tmp_path / "a.safetensors")
    back = load_activations(tmp_path / "a.safetensors")
    assert back.probe_id == "probe-7"
    assert [m.tolist() for m in back.layers] == [m.tolist() for m in a.layers]


def test_activation_file_requires_probe_id(tmp_path):
    from mergelab import save_checkpoint

    save_checkpoint(Checkpoint({"layer_0": np.ones((3, 2))}), tmp_path / "x.safetensors")
    with pytest.raises(FormatError):
        load_activations(tmp_path / "x.safetensors")
    save_checkpoint(Checkpoint({"layer_1": np.ones((3, 2))}, {"probe_id": "p"}), tmp_path / "y.safetensors")
    with pytest.raises(FormatError):
        load_activations(tmp_path / "y.safetensors")


def test_report_csv_columns_and_mean_row():
    a, b = random_checkpoint(0), random_checkpoint(1)
    rep = similarity_report(a, b, activations=(acts(0, dims=(3, 2)), acts(1, dims=(3, 2))))
    text = report_to_csv(rep)
    assert text.splitlines()[0] == "layer,cosine,stable_rank_diff,l2_norm_diff,cka"
    parsed = read_report_csv(text)
    assert list(parsed) == ["0", "1", "mean"]
    assert parsed["mean"]["cka"] == pytest.approx(rep.mean_cka)
    assert parsed["0"]["cosine"] == rep.layer(0).cosine
    no_cka = report_to_csv(parametric_diff(a, b))
    assert no_cka.splitlines()[0] == "layer,cosine,stable_rank_diff,l2_norm_diff"


def test_report_means_are_arithmetic_means_of_present_entries():
    rep = parametric_diff(random_checkpoint(2), random_checkpoint(3))
    rep.layer(0).cka, rep.layer(1).cka = 0.2, None
    assert rep.mean_cka == 0.2
    assert rep.mean_cosine == pytest.approx(np.mean([r.cosine for r in rep.per_layer]))
