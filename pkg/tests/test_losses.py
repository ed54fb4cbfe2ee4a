import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefalign.embedcore import EmbeddingBatch, EmbeddingVec
from prefalign.exceptions import (
    IndexOutOfRange,
    LambdaOutOfRange,
    MissingDirection,
    NonPositiveTau,
    PositiveMissingFromPool,
    SizeMismatch,
)
from prefalign.losses import (
    DuplicatePositiveWarning,
    LossConfig,
    LossOutput,
    RPAInput,
    combined_loss,
    contrast_pref_loss,
    contrastive_loss,
    contrastive_loss_expanded,
    finite_difference_grads,
    preference_logit_loss,
    rpa_listwise_dir,
    rpa_pairwise_dir,
    rpa_total,
)
from prefalign.prefbuild import ListwisePreferenceSet, PairwisePreferenceSet, build_listwise, build_pairwise, rank_candidates

import gradcheck
import oracles
from conftest import unit_rows

LN2 = math.log(2)
SOFTPLUS_M1 = 0.31326168751822286  # ln(1 + e^-1)


def batch(ids, mod, X):
    return EmbeddingBatch(tuple(ids), mod, np.asarray(X, dtype=float))


def pair_batches(T, I):
    n = len(T)
    return batch([f"t{i}" for i in range(n)], "text", T), batch([f"i{i}" for i in range(n)], "image", I)


def vec(id, v, mod="text"):
    return EmbeddingVec(id, mod, np.asarray(v, dtype=float))


# --- contrastive -----------------------------------------------------------


def test_contrastive_examples():
    t, i = pair_batches([[1.0, 0.0]], [[0.0, 1.0]])
    assert contrastive_loss(t, i, 0.07).value == 0.0
    for n in (2, 5):
        t, i = pair_batches(np.tile([0.6, 0.8], (n, 1)), np.tile([0.6, 0.8], (n, 1)))
        assert abs(contrastive_loss(t, i, 0.3).value - math.log(n)) < 1e-12
    t, i = pair_batches(np.eye(2), np.eye(2))
    assert abs(contrastive_loss(t, i, 1.0).value - SOFTPLUS_M1) < 1e-15


def test_contrastive_matches_scalar_oracle(rng):
    T, I = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    t, i = pair_batches(T, I)
    assert abs(contrastive_loss(t, i, 0.5).value - oracles.contrastive(T.tolist(), I.tolist(), 0.5)) < 1e-12
    # frozen from the scalar oracle on a fixed draw
    r = np.random.default_rng(7)
    T = r.standard_normal((3, 4))
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    I = r.standard_normal((3, 4))
    I /= np.linalg.norm(I, axis=1, keepdims=True)
    assert abs(contrastive_loss(*pair_batches(T, I), 0.5).value - 2.2737686584453747) < 1e-12


def test_contrastive_errors():
    t, i = pair_batches(np.eye(2), np.eye(2))
    with pytest.raises(SizeMismatch):
        contrastive_loss(t, batch(["x"], "image", [[1.0, 0.0]]), 0.1)
    with pytest.raises(NonPositiveTau):
        contrastive_loss(t, i, 0.0)
    with pytest.raises(NonPositiveTau):
        LossConfig(tau=-1.0)


@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_contrastive_permutation_equivariance(n, d, seed):  # L-1
    r = np.random.default_rng(seed)
    T, I = unit_rows(r, n, d), unit_rows(r, n, d)
    p = r.permutation(n)
    a = contrastive_loss(*pair_batches(T, I), 0.2).value
    b = contrastive_loss(*pair_batches(T[p], I[p]), 0.2).value
    assert abs(a - b) < 1e-12


# --- expanded pool ---------------------------------------------------------


def test_expanded_reduces_to_plain(rng):
    T, I = unit_rows(rng, 4, 5), unit_rows(rng, 4, 5)
    t, i = pair_batches(T, I)
    plain = contrastive_loss(t, i, 0.1)
    exp = contrastive_loss_expanded(t, i, t, i, 0.1)
    assert abs(plain.value - exp.value) < 1e-12
    for k in plain.grads:
        np.testing.assert_allclose(plain.grads[k], exp.grads[k], atol=1e-12)
    assert abs(plain.grad_tau - exp.grad_tau) < 1e-12


def test_expanded_far_negative_and_duplicate():
    T = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    I = np.array([[0.8, 0.6, 0.0], [0.6, 0.8, 0.0]])
    t, i = pair_batches(T, I)
    base = contrastive_loss_expanded(t, i, t, i, 0.07).value
    far = -np.array([0.7, 0.7, 0.0]) / np.linalg.norm([0.7, 0.7])
    img_pool = batch([*i.ids, "far"], "image", np.vstack([I, far]))
    txt_pool = batch([*t.ids, "far_t"], "text", np.vstack([T, far]))
    with_far = contrastive_loss_expanded(t, i, txt_pool, img_pool, 0.07).value
    assert 0 <= with_far - base < 1e-3
    dup_pool = batch([*i.ids, "copy"], "image", np.vstack([I, I[0]]))
    with pytest.warns(DuplicatePositiveWarning):
        with_dup = contrastive_loss_expanded(t, i, t, dup_pool, 0.07).value
    assert with_dup > base


def test_expanded_missing_positive():
    t, i = pair_batches(np.eye(2), np.eye(2))
    with pytest.raises(PositiveMissingFromPool):
        contrastive_loss_expanded(t, i, t, i.subset(["i0"]), 0.1)


def test_expanded_gradients_fd(rng):
    T, I = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3)
    P = unit_rows(rng, 2, 3)
    ids_t, ids_i = ["t0", "t1"], ["i0", "i1"]

    def run(x):
        t = batch(ids_t, "text", x["T"])
        i = batch(ids_i, "image", x["I"])
        ip = batch([*ids_i, "n0", "n1"], "image", np.vstack([x["I"], x["P"]]))
        return contrastive_loss_expanded(t, i, t, ip, x["tau"])

    inputs = {"T": T, "I": I, "P": P, "tau": 0.3}
    out = run(inputs)
    num = finite_difference_grads(lambda x: run(x).value, inputs)
    assert gradcheck.rel_err([out.grads[k] for k in ids_t], num["T"]) < 1e-6
    assert gradcheck.rel_err([out.grads[k] for k in ids_i], num["I"]) < 1e-6
    assert gradcheck.rel_err([out.grads["n0"], out.grads["n1"]], num["P"]) < 1e-6
    assert gradcheck.rel_err(out.grad_tau, num["tau"]) < 1e-6


# --- preference logit ------------------------------------------------------


def test_preference_logit_examples():
    assert abs(preference_logit_loss(0.4, 0.4) - LN2) < 1e-15
    assert abs(preference_logit_loss(1.5, 0.5) - SOFTPLUS_M1) < 1e-15
    assert preference_logit_loss(50.0, 0.0) < 1e-12
    assert math.isfinite(preference_logit_loss(-1e4, 1e4))


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_preference_logit_pair_sum(a, b):  # L-7
    total = preference_logit_loss(a, b) + preference_logit_loss(b, a)
    if a == b:
        assert abs(total - 2 * LN2) < 1e-12
    else:
        assert total > 2 * LN2 - 1e-12
    if abs(a - b) > 1e-3:
        assert total > 2 * LN2


# --- RPA -------------------------------------------------------------------


def prefs_for(scores, kind):
    r = rank_candidates(scores)
    return build_pairwise(r) if kind == "pairwise" else build_listwise(r)


FN = {"pairwise": rpa_pairwise_dir, "listwise": rpa_listwise_dir}
ORACLE = {"pairwise": oracles.pairwise_rpa, "listwise": oracles.listwise_rpa}


def test_rpa_k1_equal_sims_half_ln2():
    a = vec("a", [1.0, 0.0])
    c = batch(["c0", "c1"], "image", [[0.6, 0.8], [0.6, -0.8]])
    for kind in FN:
        out = FN[kind](a, c, prefs_for([0.9, 0.4], kind), 5.0)
        assert abs(out.value - 0.5 * LN2) < 1e-15


@pytest.mark.parametrize("kind", ["pairwise", "listwise"])
def test_rpa_zero_weight_identity(kind, rng):  # L-3
    a = vec("a", unit_rows(rng, 1, 4)[0])
    c = batch([f"c{k}" for k in range(4)], "image", unit_rows(rng, 4, 4))
    out = FN[kind](a, c, prefs_for([0.3] * 4, kind), 7.0)
    assert out.value == 0.0 and out.grad_beta == 0.0
    assert all(np.all(g == 0.0) for g in out.grads.values())


def test_rpa_planted_values():
    a = vec("a", [1.0, 0.0, 0.0])
    c = batch(["c0", "c1", "c2"], "image", [[0.6, 0.8, 0.0], [0.0, 1.0, 0.0], [0.8, 0.0, 0.6]])
    pw = rpa_pairwise_dir(a, c, prefs_for([0.3, 0.9, 0.5], "pairwise"), 2.0).value
    assert abs(pw - 1.6941328272381448) < 1e-12
    a = vec("a", [0.0, 0.0, 1.0])
    c = batch(["c0", "c1", "c2", "c3"], "image", [[0.0, 0.6, 0.8], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -0.8, 0.6]])
    lw = rpa_listwise_dir(a, c, prefs_for([0.8, 0.2, 0.6, 0.1], "listwise"), 3.0).value
    assert abs(lw - 0.951544246686796) < 1e-12


@pytest.mark.parametrize("kind", ["pairwise", "listwise"])
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_rpa_matches_scalar_oracle(kind, K, d, seed):
    r = np.random.default_rng(seed)
    A = unit_rows(r, 1, d)[0]
    C = unit_rows(r, K + 1, d)
    s = r.uniform(0, 1, K + 1).tolist()
    beta = float(r.uniform(1, 15))
    got = FN[kind](vec("a", A), batch([f"c{k}" for k in range(K + 1)], "image", C), prefs_for(s, kind), beta).value
    want = ORACLE[kind](A.tolist(), C.tolist(), s, beta)
    assert abs(got - want) < 1e-10 * max(1.0, abs(want))


@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(0.5, 30))
def test_k1_listwise_equals_pairwise(d, seed, beta):  # L-4
    r = np.random.default_rng(seed)
    a = vec("a", unit_rows(r, 1, d)[0])
    c = batch(["c0", "c1"], "image", unit_rows(r, 2, d))
    s = r.uniform(0, 1, 2)
    lw = rpa_listwise_dir(a, c, prefs_for(s, "listwise"), beta).value
    pw = rpa_pairwise_dir(a, c, prefs_for(s, "pairwise"), beta).value
    assert abs(lw - pw) < 1e-12


@pytest.mark.parametrize("kind", ["pairwise", "listwise"])
@given(K=st.integers(1, 4), seed=st.integers(0, 2**32 - 1), bump=st.floats(0.01, 0.5))
def test_rpa_monotone_in_preferred_similarity(kind, K, seed, bump):  # L-5
    r = np.random.default_rng(seed)
    s = r.uniform(0, 1, K + 1)
    if np.max(s) - np.min(s) < 1e-6:
        return
    top = int(np.argmax(s))
    a = np.array([1.0, 0.0])
    angles = r.uniform(0.5, 2.5, K + 1)
    C = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ids = [f"c{k}" for k in range(K + 1)]
    prefs = prefs_for(s, kind)
    before = FN[kind](vec("a", a), batch(ids, "image", C), prefs, 4.0).value
    C2 = C.copy()
    new = angles[top] - bump
    C2[top] = [np.cos(new), np.sin(new)]  # closer to the anchor at angle 0
    after = FN[kind](vec("a", a), batch(ids, "image", C2), prefs, 4.0).value
    assert after < before


@pytest.mark.parametrize("kind", ["pairwise", "listwise"])
@given(K=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_rpa_relabel_invariance(kind, K, seed):  # L-6
    r = np.random.default_rng(seed)
    A = unit_rows(r, 1, 3)[0]
    C = unit_rows(r, K + 1, 3)
    s = r.uniform(0, 1, K + 1)
    p = r.permutation(K + 1)
    ids = [f"c{k}" for k in range(K + 1)]
    v1 = FN[kind](vec("a", A), batch(ids, "image", C), prefs_for(s, kind), 3.0).value
    v2 = FN[kind](vec("a", A), batch([ids[k] for k in p], "image", C[p]), prefs_for(s[p], kind), 3.0).value
    assert abs(v1 - v2) < 1e-12


def test_rpa_index_errors():
    a = vec("a", [1.0, 0.0])
    c = batch(["c0", "c1"], "image", np.eye(2))
    with pytest.raises(IndexOutOfRange):
        rpa_pairwise_dir(a, c, PairwisePreferenceSet(((0, 5, 0.1),)), 1.0)
    with pytest.raises(IndexOutOfRange):
        rpa_listwise_dir(a, c, ListwisePreferenceSet(np.array([0, 1, 2]), np.array([0.1, 0.1])), 1.0)


# --- totals ----------------------------------------------------------------


def _inputs(T, I, t2i_scores, i2t_scores, kind):
    tb, ib = pair_batches(T, I)
    t2i = [RPAInput(tb[0], ib.subset(["i0", "i1"]), prefs_for(t2i_scores[0], kind)),
           RPAInput(tb[1], ib.subset(["i1", "i0"]), prefs_for(t2i_scores[1], kind))]
    i2t = [RPAInput(ib[0], tb.subset(["t0", "t1"]), prefs_for(i2t_scores[0], kind)),
           RPAInput(ib[1], tb.subset(["t1", "t0"]), prefs_for(i2t_scores[1], kind))]
    return t2i, i2t


def test_rpa_total_planted():
    T = [[1.0, 0.0], [0.0, 1.0]]
    I = [[0.6, 0.8], [0.8, 0.6]]
    t2i, i2t = _inputs(T, I, [[0.9, 0.2], [0.7, 0.4]], [[0.9, 0.3], [0.6, 0.6]], "listwise")
    assert abs(rpa_total(t2i, i2t, "listwise", 1.0).value - 0.31925554775263676) < 1e-12


def test_rpa_total_averaging_identities():
    T = [[1.0, 0.0], [0.0, 1.0]]
    I = [[0.6, 0.8], [0.8, 0.6]]
    t2i, _ = _inputs(T, I, [[0.9, 0.2], [0.7, 0.4]], [[0.5, 0.5]] * 2, "pairwise")
    single = (rpa_pairwise_dir(t2i[0].anchor, t2i[0].candidates, t2i[0].prefs, 2.0).value
              + rpa_pairwise_dir(t2i[1].anchor, t2i[1].candidates, t2i[1].prefs, 2.0).value) / 2
    assert abs(rpa_total(t2i, t2i, "pairwise", 2.0).value - single) < 1e-12
    _, flat = _inputs(T, I, [[0.5, 0.5]] * 2, [[0.5, 0.5]] * 2, "pairwise")
    assert abs(rpa_total(t2i, flat, "pairwise", 2.0).value - single / 2) < 1e-12


def test_rpa_total_errors():
    T = [[1.0, 0.0], [0.0, 1.0]]
    t2i, i2t = _inputs(T, T, [[0.9, 0.2]] * 2, [[0.9, 0.2]] * 2, "listwise")
    with pytest.raises(MissingDirection):
        rpa_total(t2i, [], "listwise", 1.0)
    with pytest.raises(MissingDirection):
        rpa_total(t2i, i2t[:1], "listwise", 1.0)
    with pytest.raises(TypeError):
        rpa_total(t2i, i2t, "pairwise", 1.0)


def test_contrast_pref_loss_is_candidate_infonce():
    T = [[1.0, 0.0], [0.0, 1.0]]
    I = [[0.6, 0.8], [0.8, 0.6]]
    t2i, i2t = _inputs(T, I, [[0.9, 0.2]] * 2, [[0.9, 0.2]] * 2, "listwise")
    got = contrast_pref_loss(t2i, i2t, 0.5).value

    def term(inp):
        d = inp.candidates.values @ inp.anchor.values / 0.5
        return oracles.lse(d.tolist()) - d[0]

    want = 0.5 * (sum(map(term, t2i)) / 2 + sum(map(term, i2t)) / 2)
    assert abs(got - want) < 1e-12


# --- combined --------------------------------------------------------------


def _lo(v, g):
    return LossOutput(v, {"x": np.array(g, dtype=float)}, grad_tau=v, grad_beta=-v)


def test_combined_examples():
    r, c = _lo(0.2, [1.0, 2.0]), _lo(0.4, [3.0, -1.0])
    assert combined_loss(r, c, 0.0).value == 0.4
    assert combined_loss(r, c, 1.0).value == 0.2
    assert abs(combined_loss(r, c, 0.5).value - 0.3) < 1e-15
    with pytest.raises(LambdaOutOfRange):
        combined_loss(r, c, 1.5)


def test_combined_merges_grads_by_id():
    a = LossOutput(1.0, {"x": np.ones(2)})
    b = LossOutput(2.0, {"x": np.ones(2), "y": np.full(2, 3.0)})
    out = combined_loss(a, b, 0.25)
    np.testing.assert_allclose(out.grads["x"], [1.0, 1.0])
    np.testing.assert_allclose(out.grads["y"], [2.25, 2.25])


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_combined_linear_in_lambda(vr, vc, l1, l2, l3):  # L-8
    r, c = _lo(vr, [vr, 1.0]), _lo(vc, [vc, -1.0])
    pts = [(l, combined_loss(r, c, l)) for l in (l1, l2, l3)]
    for l, out in pts:
        assert abs(out.value - (l * vr + (1 - l) * vc)) < 1e-12
        np.testing.assert_allclose(out.grads["x"], l * r.grads["x"] + (1 - l) * c.grads["x"], atol=1e-12)
    (a, fa), (b, fb), (x, fx) = [(l, o.value) for l, o in pts]
    assert abs((fb - fa) * (x - a) - (fx - fa) * (b - a)) < 1e-12


# --- gradients ---------------------------------------------------------------


def test_fd_quadratic():
    g = finite_difference_grads(lambda x: x["x"] ** 2, {"x": 3.0}, h=1e-4)
    assert abs(g["x"] - 6.0) < 1e-7
    with pytest.raises(ValueError):
        finite_difference_grads(lambda x: 0.0, {"x": 1.0}, h=0)


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_analytic_gradients(name):  # L-2
    r = np.random.default_rng(2024)
    worst = max(gradcheck.CHECKS[name](r) for _ in range(100))
    assert worst < 1e-4


def test_spec_gradient_examples():
    # contrastive N=3, d=4 and listwise K=3 at fixed seeds
    r = np.random.default_rng(3)
    T, I = unit_rows(r, 3, 4), unit_rows(r, 3, 4)
    t, i = pair_batches(T, I)
    out = contrastive_loss(t, i, 0.07)
    num = finite_difference_grads(
        lambda x: contrastive_loss(*pair_batches(x["T"], x["I"]), x["tau"]).value, {"T": T, "I": I, "tau": 0.07}
    )
    assert gradcheck.rel_err([out.grads[k] for k in t.ids], num["T"]) < 1e-4
    assert gradcheck.rel_err(out.grad_tau, num["tau"]) < 1e-4
    A, C = unit_rows(r, 1, 4)[0], unit_rows(r, 4, 4)
    prefs = prefs_for([0.9, 0.1, 0.5, 0.3], "listwise")
    ids = ["c0", "c1", "c2", "c3"]
    out = rpa_listwise_dir(vec("a", A), batch(ids, "image", C), prefs, 1 / 0.07)
    num = finite_difference_grads(
        lambda x: rpa_listwise_dir(vec("a", x["a"]), batch(ids, "image", x["C"]), prefs, x["beta"]).value,
        {"a": A, "C": C, "beta": 1 / 0.07},
    )
    assert gradcheck.rel_err(out.grads["a"], num["a"]) < 1e-4
    assert gradcheck.rel_err(out.grad_beta, num["beta"]) < 1e-4
