import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shifteq import harness
from shifteq.conv import ConvFilter, strided_conv
from shifteq.harness import (
    AuditReport,
    EquivarianceVerdict,
    ShiftSampler,
    best_output_shift,
    consistency,
    equivariance_test,
    invariance_audit,
    feature_audit,
    lemma_suite,
    logits_variance,
    reports_to_csv,
    shift_sweep,
    worst_of_n_shift,
)
from shifteq.models import Model, ModelSpec
from shifteq.tensor import Rng, Shift2D, circular_shift, rng_normal

from _oracles import roll

SMALL = dict(image=(3, 16, 16), patch_stride=2, embed_dim=8, depth=1, mlp_dim=16, classes=4)


class ConstantModel:
    def __init__(self, classes=3):
        self.classes = classes

    def logits(self, X):
        X = np.asarray(X)
        return np.zeros((X.shape[0], self.classes)) if X.ndim == 4 else np.zeros(self.classes)

    def predict(self, X):
        return np.argmax(self.logits(X), axis=-1)


def inputs(n, shape, seed=0):
    return [rng_normal(Rng(seed).child(str(i)), shape) for i in range(n)]


# ---------------------------------------------------------------- shift test

def test_identity_map_matches_the_input_shift():
    x = rng_normal(Rng(0), (2, 6, 6))
    for g in [(0, 0), (1, 4), (5, 5), (-2, 3)]:
        v = equivariance_test(lambda a: a, x, g)
        assert v.passed and v.residual == 0.0
        assert v.matched_shift == Shift2D(*g).mod(6, 6)


def test_shift_map_commutes_with_shifts():
    x = rng_normal(Rng(1), (1, 5, 7))
    F = lambda a: circular_shift(a, (1, 1))
    for g in [(2, 0), (3, 6), (4, 4)]:
        v = equivariance_test(F, x, g)
        assert v.passed and v.residual == 0.0 and v.matched_shift == Shift2D(*g)


def test_strided_conv_fails_for_some_shift():
    r = Rng(2)
    x = rng_normal(r.child("x"), (3, 8, 8))
    f = ConvFilter(rng_normal(r.child("w"), (3, 3, 2, 2)), 2)
    verdicts = shift_sweep(lambda a: strided_conv(a, f), x, ShiftSampler.full(8, 8).shifts())
    assert max(v.residual for v in verdicts) > 1e-3
    assert not all(v.passed for v in verdicts)


def test_best_output_shift_matches_roll_oracle():
    r = np.random.default_rng(3)
    fx = r.normal(size=(2, 4, 5))
    fgx = r.normal(size=(2, 4, 5))
    res, g = best_output_shift(fgx, fx)
    ref = min((np.linalg.norm(fgx - roll(fx, a, b)), (a, b)) for a in range(4) for b in range(5))
    assert res == pytest.approx(ref[0], abs=1e-14) and tuple(g) == ref[1]


def test_candidate_modes():
    x = rng_normal(Rng(4), (1, 4, 4))
    F = lambda a: circular_shift(a, (0, 1))
    assert equivariance_test(F, x, (1, 2), candidates="same").passed
    assert not equivariance_test(F, x, (1, 2), candidates="identity").passed
    v = equivariance_test(F, x, (1, 2), candidates=lambda g: [(0, 0), (g[0], g[1])])
    assert v.passed and v.matched_shift == (1, 2)
    pooled = lambda a: a.sum(axis=(-2, -1))
    assert equivariance_test(pooled, x, (3, 1)).passed


@given(st.integers(0, 1000), st.floats(0.1, 10.0))
def test_residual_scales_linearly(seed, c):
    # for linear F the best residual is homogeneous in the input
    r = Rng(seed)
    x = rng_normal(r.child("x"), (2, 4, 4))
    f = ConvFilter(rng_normal(r.child("w"), (2, 2, 2, 2)), 2)
    F = lambda a: strided_conv(a, f)
    a = equivariance_test(F, x, (1, 0)).residual
    b = equivariance_test(F, c * x, (1, 0)).residual
    assert b == pytest.approx(c * a, rel=1e-9, abs=1e-12)


def test_shape_change_is_a_failure():
    v = harness._verdict_for(np.ones((1, 3, 3)), np.ones((1, 4, 4)), (0, 0), "exhaustive", 1e-10, "", None)
    assert not v.passed and v.residual == float("inf")


# ---------------------------------------------------------------- sampler

def test_sampler_exhaustive_and_full():
    assert len(ShiftSampler().shifts()) == 121
    full = ShiftSampler.full(3, 4).shifts()
    assert len(full) == 12 and full[0] == (0, 0) and full[-1] == (2, 3)


@given(st.integers(1, 40), st.integers(0, 10_000))
def test_sampler_prefix_property(n, seed):
    long = ShiftSampler("uniform_random", ((-15, 15), (-15, 15)), 40, seed).shifts()
    short = ShiftSampler("uniform_random", ((-15, 15), (-15, 15)), n, seed).shifts()
    assert short == long[:n]
    assert all(-15 <= a <= 15 and -15 <= b <= 15 for a, b in long)


def test_sampler_validation():
    with pytest.raises(ValueError):
        ShiftSampler("gaussian")
    with pytest.raises(ValueError):
        ShiftSampler(range=((3, 1), (0, 0)))
    with pytest.raises(ValueError):
        ShiftSampler(count=0)
    with pytest.raises(ValueError):
        ShiftSampler(range=((-20, 20), (0, 0))).check_bounds(16, 16)


# ---------------------------------------------------------------- model metrics

def test_logits_variance():
    poly = Model(ModelSpec(variant="vit_poly", **SMALL))
    base = Model(ModelSpec(variant="vit", **SMALL))
    x = rng_normal(Rng(5), SMALL["image"])
    assert logits_variance(poly, x) <= 1e-18
    assert logits_variance(base, x) > 0
    assert logits_variance(ConstantModel(), x) == 0.0


def test_consistency():
    xs = inputs(4, SMALL["image"])
    sampler = ShiftSampler("uniform_random", ((-7, 7), (-7, 7)), 10)
    assert consistency(ConstantModel(), xs, sampler) == 1.0
    assert consistency(Model(ModelSpec(variant="twins_poly", **SMALL)), xs, sampler) == 1.0


def test_worst_of_n():
    xs = inputs(8, SMALL["image"])
    g, frac = worst_of_n_shift(Model(ModelSpec(variant="vit", **SMALL)), xs, 1, ((0, 0), (0, 0)))
    assert frac == 1.0 and g == (0, 0)
    _, frac = worst_of_n_shift(Model(ModelSpec(variant="vit_poly", **SMALL)), xs, 12)
    assert frac == 1.0
    base = Model(ModelSpec(variant="vit", **SMALL))
    fracs = [worst_of_n_shift(base, xs, n, seed=3)[1] for n in (1, 5, 30)]
    assert fracs[0] >= fracs[1] >= fracs[2]
    with pytest.raises(ValueError):
        worst_of_n_shift(base, xs, 0)


def test_invariance_audit_metrics():
    m = Model(ModelSpec(variant="vit_poly", **SMALL))
    xs = inputs(3, SMALL["image"])
    shifts = ShiftSampler("uniform_random", ((-7, 7), (-7, 7)), 5).shifts()
    rep = invariance_audit(m, xs, shifts, seeds=[10, 11, 12])
    assert rep.ok and rep.metrics["consistency"] == 1.0
    assert rep.metrics["trials"] == 3 and len(rep.tests) == 15
    assert rep.metrics["max_residual"] <= 1e-9 and rep.metrics["max_logits_variance"] <= 1e-18
    strict = invariance_audit(m, xs, shifts, tol=0.0)
    assert strict.metrics["max_residual"] == rep.metrics["max_residual"]


def test_feature_audit_poly_vs_baseline():
    xs = inputs(1, SMALL["image"])
    shifts = [(1, 0), (2, 3)]
    assert feature_audit(Model(ModelSpec(variant="twins_poly", **SMALL)), xs, shifts).ok
    assert not feature_audit(Model(ModelSpec(variant="twins", **SMALL)), xs, shifts).ok


# ---------------------------------------------------------------- proof suites

def test_window_suite_passes_every_trial():
    rep = lemma_suite("lemma3", trials=50)
    assert rep.metrics["trials_passed"] == 50 and rep.ok
    assert len(rep.tests) == 50 * 64


def test_anchor_matches_are_stride_multiples():
    rep = lemma_suite("corollary1", trials=10)
    assert rep.ok
    assert rep.metrics["matched_multiple_of_stride"] == rep.metrics["matched_total"] == 640
    assert all(v.matched_shift.dy % 2 == 0 and v.matched_shift.dx % 2 == 0 for v in rep.tests)


def test_relpe_counterexample_fails_every_trial():
    rep = lemma_suite("relpe_counterexample", trials=50)
    assert rep.metrics["trials_failed"] == 50 and rep.ok and not rep.expect_equivariant
    assert rep.metrics["min_worst_residual"] > 1e-3


@pytest.mark.parametrize("which", ["lemma1", "lemma2", "lemma4", "composition", "relpe_circulant",
                                   "abspe_counterexample", "negative_strided_conv",
                                   "negative_window_attention", "negative_gsa"])
def test_other_suites_meet_expectation(which):
    assert lemma_suite(which, trials=4, seed=1).ok


def test_suite_is_seed_deterministic():
    a = lemma_suite("lemma2", trials=3, seed=9).to_json()
    b = lemma_suite("lemma2", trials=3, seed=9).to_json()
    assert a == b
    assert a != lemma_suite("lemma2", trials=3, seed=10).to_json()


def test_unknown_suite():
    with pytest.raises(KeyError):
        lemma_suite("lemma9")


# ---------------------------------------------------------------- reports

def test_report_semantics_and_serialization():
    ok = EquivarianceVerdict(True, 0.0, Shift2D(0, 0), "op", 1, Shift2D(1, 2))
    bad = EquivarianceVerdict(False, 0.5, None, "op", 2, Shift2D(0, 1))
    rep = AuditReport("s", [ok, bad], {"trials": 2, "trials_passed": 1, "trials_failed": 1})
    assert not rep.ok
    rep.expect_equivariant = False
    assert not rep.ok
    doc = json.loads(rep.to_json())
    assert doc["tests"][1]["matched_shift"] is None and doc["tests"][0]["shift"] == [1, 2]
    rows = list(csv.DictReader(io.StringIO(reports_to_csv([rep]))))
    assert len(rows) == 2 and rows[0]["shift_dx"] == "2" and rows[1]["passed"] == "False"
