"""Training objectives with closed-form gradients.

Every loss returns a :class:`LossOutput` whose ``grads`` maps embedding id to
the gradient of the loss with respect to that (already normalized) embedding
vector, plus scalar gradients for the temperature ``tau`` and the preference
scale ``beta``. Gradients stop at the embeddings; the trainer chains them
through the encoders.

Notation: for an anchor ``z_a`` and candidates ``z_c``, the scaled similarity
is ``s_c = beta * (z_a . z_c)``.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .embedcore import EmbeddingBatch, EmbeddingVec
from .exceptions import (
    IndexOutOfRange,
    MissingDirection,
    PositiveMissingFromPool,
    SizeMismatch,
)
from .prefbuild import ListwisePreferenceSet, PairwisePreferenceSet
from .validation import check_lambda, check_positive


class DuplicatePositiveWarning(UserWarning):
    """A pool item other than the positive is numerically identical to it."""


class RPAVariant(str, Enum):
    PAIRWISE = "pairwise"
    LISTWISE = "listwise"


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    beta: float = 1.0 / 0.07
    lam: float = 0.5

    def __post_init__(self):
        check_positive(self.tau, "tau")
        check_positive(self.beta, "beta")
        check_lambda(self.lam)


@dataclass
class LossOutput:
    value: float
    grads: dict = field(default_factory=dict)
    grad_tau: float = 0.0
    grad_beta: float = 0.0

    def scaled(self, c):
        return LossOutput(
            c * self.value, {k: c * g for k, g in self.grads.items()}, c * self.grad_tau, c * self.grad_beta
        )

    def __add__(self, other):
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossOutput(
            self.value + other.value, grads, self.grad_tau + other.grad_tau, self.grad_beta + other.grad_beta
        )


def _add_grads(grads, ids, rows):
    for k, g in zip(ids, rows):
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g.copy()


def _logsumexp_rows(L, axis):
    m = np.max(L, axis=axis, keepdims=True)
    return (np.log(np.sum(np.exp(L - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def _check_pair_batches(txt, img):
    if len(txt) != len(img):
        raise SizeMismatch(f"{len(txt)} texts vs {len(img)} images")
    if txt.dim != img.dim:
        raise SizeMismatch(f"embedding dims differ: {txt.dim} vs {img.dim}")


# ---------------------------------------------------------------------------
# contrastive


def contrastive_loss(txt, img, tau):
    """Symmetric InfoNCE over index-aligned text/image batches.

    ``value = 1/(2N) Σ_i [lse_j(S_ij/τ) - S_ii/τ + lse_j(S_ji/τ) - S_ii/τ]``
    with ``S = T Iᵀ``.
    """
    _check_pair_batches(txt, img)
    tau = check_positive(tau, "tau")
    T, I = txt.values, img.values
    N = T.shape[0]
    S = T @ I.T
    L = S / tau
    lse_r = _logsumexp_rows(L, axis=1)
    lse_c = _logsumexp_rows(L, axis=0)
    diag = np.diag(L)
    value = float(np.sum(lse_r - diag) + np.sum(lse_c - diag)) / (2 * N)

    P_r = np.exp(L - lse_r[:, None])
    P_c = np.exp(L - lse_c[None, :])
    G = (P_r + P_c - 2.0 * np.eye(N)) / (2 * N)  # dValue/dL
    dS = G / tau
    grads = {}
    _add_grads(grads, txt.ids, dS @ I)
    _add_grads(grads, img.ids, dS.T @ T)
    grad_tau = -float(np.sum(G * S)) / tau**2
    return LossOutput(value, grads, grad_tau=grad_tau)


def _one_sided_pool_term(A, pool, pos_cols, tau):
    """Σ_i [lse_j(A_i·P_j/τ) - A_i·P_pos(i)/τ] and its gradients."""
    S = A @ pool.T
    L = S / tau
    lse = _logsumexp_rows(L, axis=1)
    rows = np.arange(A.shape[0])
    value = float(np.sum(lse - L[rows, pos_cols]))
    G = np.exp(L - lse[:, None])
    G[rows, pos_cols] -= 1.0
    return value, G, S


def _warn_duplicate_positive(pool, pos_cols):
    for p in set(pos_cols.tolist()):
        sims = pool.values @ pool.values[p]
        sims[p] = -np.inf
        j = int(np.argmax(sims))
        if sims[j] >= 1.0 - 1e-9:
            warnings.warn(
                f"pool item {pool.ids[j]!r} duplicates positive {pool.ids[p]!r}; it will be treated as a negative",
                DuplicatePositiveWarning,
                stacklevel=3,
            )


def contrastive_loss_expanded(txt, img, txt_pool, img_pool, tau):
    """Symmetric InfoNCE whose denominators range over expanded pools.

    Text anchor ``i`` is contrasted against every item in ``img_pool`` (which
    must contain ``img.ids[i]``) and image anchor ``i`` against ``txt_pool``.
    Gradients of anchors that also appear in a pool are summed by id.
    """
    _check_pair_batches(txt, img)
    tau = check_positive(tau, "tau")
    N = len(txt)
    try:
        pos_t = np.array([img_pool.index_of(i) for i in img.ids])
        pos_i = np.array([txt_pool.index_of(t) for t in txt.ids])
    except KeyError as exc:
        raise PositiveMissingFromPool(f"positive {exc.args[0]!r} not in pool") from None
    _warn_duplicate_positive(img_pool, pos_t)
    _warn_duplicate_positive(txt_pool, pos_i)

    v_t, G_t, S_t = _one_sided_pool_term(txt.values, img_pool.values, pos_t, tau)
    v_i, G_i, S_i = _one_sided_pool_term(img.values, txt_pool.values, pos_i, tau)
    scale = 1.0 / (2 * N)
    value = (v_t + v_i) * scale
    G_t *= scale
    G_i *= scale
    grads = {}
    _add_grads(grads, txt.ids, G_t @ img_pool.values / tau)
    _add_grads(grads, img_pool.ids, G_t.T @ txt.values / tau)
    _add_grads(grads, img.ids, G_i @ txt_pool.values / tau)
    _add_grads(grads, txt_pool.ids, G_i.T @ img.values / tau)
    grad_tau = -(float(np.sum(G_t * S_t)) + float(np.sum(G_i * S_i))) / tau**2
    return LossOutput(value, grads, grad_tau=grad_tau)


# ---------------------------------------------------------------------------
# preference losses


def preference_logit_loss(s_w, s_l):
    """``-log σ(s_w - s_l)``, evaluated as ``softplus(s_l - s_w)``."""
    return float(np.logaddexp(0.0, -(float(s_w) - float(s_l))))


def preference_logit_grad(s_w, s_l):
    """``(d/ds_w, d/ds_l)`` of :func:`preference_logit_loss`."""
    g = -float(_sigmoid_neg(float(s_w) - float(s_l)))
    return g, -g


def _sigmoid_neg(m):
    """σ(-m) without overflow."""
    return np.exp(-np.logaddexp(0.0, m))


def _scaled_sims(anchor, candidates, beta):
    if anchor.dim != candidates.dim:
        raise SizeMismatch(f"anchor dim {anchor.dim} vs candidate dim {candidates.dim}")
    dots = candidates.values @ anchor.values
    return dots, beta * dots


def _direction_output(anchor, candidates, value, ds, dots, beta):
    # ds = dValue/ds_c; s_c = beta * a·c
    grads = {}
    _add_grads(grads, [anchor.id], [beta * (ds @ candidates.values)])
    _add_grads(grads, candidates.ids, beta * np.outer(ds, anchor.values))
    return LossOutput(value, grads, grad_beta=float(ds @ dots))


def rpa_pairwise_dir(anchor, candidates, prefs, beta):
    """Σ_pairs weight · (-log σ(s_pref - s_disp)) for one anchor."""
    beta = check_positive(beta, "beta")
    n = len(candidates)
    dots, s = _scaled_sims(anchor, candidates, beta)
    ds = np.zeros(n)
    value = 0.0
    for p, q, w in prefs.pairs:
        if not (0 <= p < n and 0 <= q < n):
            raise IndexOutOfRange(f"pair ({p}, {q}) outside {n} candidates")
        m = s[p] - s[q]
        value += w * float(np.logaddexp(0.0, -m))
        g = -w * _sigmoid_neg(m)
        ds[p] += g
        ds[q] -= g
    return _direction_output(anchor, candidates, value, ds, dots, beta)


def rpa_listwise_dir(anchor, candidates, prefs, beta):
    """Σ_k w_k · (-log softmax over the suffix r_k..r_K, evaluated at r_k)."""
    beta = check_positive(beta, "beta")
    n = len(candidates)
    r = np.asarray(prefs.ranked_indices)
    if r.size != n or np.any(r < 0) or np.any(r >= n):
        raise IndexOutOfRange(f"ranking {r.tolist()} does not index {n} candidates")
    w = np.asarray(prefs.suffix_weights, dtype=np.float64)
    dots, s = _scaled_sims(anchor, candidates, beta)
    ds = np.zeros(n)
    value = 0.0
    for k in range(n - 1):
        suf = r[k:]
        ss = s[suf]
        top = int(np.argmax(ss))
        m = ss[top]
        # log1p over the non-max terms keeps tiny losses accurate
        log_norm = float(np.log1p(np.sum(np.exp(np.delete(ss, top) - m))))
        value += w[k] * ((m - s[r[k]]) + log_norm)
        ds[suf] += w[k] * np.exp(ss - m - log_norm)
        ds[r[k]] -= w[k]
    return _direction_output(anchor, candidates, value, ds, dots, beta)


@dataclass(frozen=True)
class RPAInput:
    """One anchor's view for one direction: the anchor, its candidates, its preferences."""

    anchor: EmbeddingVec
    candidates: EmbeddingBatch
    prefs: object


def _direction_mean(inputs, fn, beta):
    total = LossOutput(0.0)
    for inp in inputs:
        total = total + fn(inp.anchor, inp.candidates, inp.prefs, beta)
    return total.scaled(1.0 / len(inputs))


def rpa_total(txt2img, img2txt, variant, beta):
    """Half the sum of the per-direction anchor means."""
    variant = RPAVariant(variant)
    txt2img, img2txt = list(txt2img), list(img2txt)
    if not txt2img or not img2txt:
        raise MissingDirection("both txt2img and img2txt inputs are required")
    if len(txt2img) != len(img2txt):
        raise MissingDirection(f"{len(txt2img)} txt2img anchors vs {len(img2txt)} img2txt anchors")
    fn = rpa_pairwise_dir if variant is RPAVariant.PAIRWISE else rpa_listwise_dir
    want = PairwisePreferenceSet if variant is RPAVariant.PAIRWISE else ListwisePreferenceSet
    for inp in txt2img + img2txt:
        if not isinstance(inp.prefs, want):
            raise TypeError(f"{variant.value} RPA needs {want.__name__}, got {type(inp.prefs).__name__}")
    return (_direction_mean(txt2img, fn, beta) + _direction_mean(img2txt, fn, beta)).scaled(0.5)


def _candidate_infonce(anchor, candidates, tau):
    dots = candidates.values @ anchor.values
    L = dots / tau
    m = np.max(L)
    p = np.exp(L - m)
    lse = float(np.log(np.sum(p))) + m
    p /= np.sum(p)
    value = lse - L[0]
    dL = p.copy()
    dL[0] -= 1.0
    dd = dL / tau
    grads = {}
    _add_grads(grads, [anchor.id], [dd @ candidates.values])
    _add_grads(grads, candidates.ids, np.outer(dd, anchor.values))
    return LossOutput(float(value), grads, grad_tau=-float(dL @ dots) / tau**2)


def contrast_pref_loss(txt2img, img2txt, tau):
    """Plain InfoNCE over each anchor's own candidate set (positive at index 0).

    The preference scores are ignored; this is the "contrastive loss on
    preference examples" control arm.
    """
    tau = check_positive(tau, "tau")
    txt2img, img2txt = list(txt2img), list(img2txt)
    if not txt2img or not img2txt:
        raise MissingDirection("both txt2img and img2txt inputs are required")

    def mean(inputs):
        total = LossOutput(0.0)
        for inp in inputs:
            total = total + _candidate_infonce(inp.anchor, inp.candidates, tau)
        return total.scaled(1.0 / len(inputs))

    return (mean(txt2img) + mean(img2txt)).scaled(0.5)


def combined_loss(rpa, contrast, lam):
    """``lam * rpa + (1 - lam) * contrast``; the endpoints return the pure terms."""
    lam = check_lambda(lam)
    if lam == 0.0:
        return contrast.scaled(1.0)
    if lam == 1.0:
        return rpa.scaled(1.0)
    return rpa.scaled(lam) + contrast.scaled(1.0 - lam)


# ---------------------------------------------------------------------------
# verification


def finite_difference_grads(loss_fn, inputs, h=1e-5):
    """Central-difference gradient of ``loss_fn(inputs) -> float``.

    ``inputs`` maps names to arrays or scalars (e.g. ``"tau"``); every
    coordinate of every entry is perturbed by ``±h``. Returns a dict with the
    same keys and shapes.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: (np.array(v, dtype=np.float64) if np.ndim(v) else float(v)) for k, v in inputs.items()}
    out = {}
    for k, v in work.items():
        if isinstance(v, float):
            work[k] = v + h
            fp = loss_fn(work)
            work[k] = v - h
            fm = loss_fn(work)
            work[k] = v
            out[k] = (fp - fm) / (2 * h)
            continue
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            fp = loss_fn(work)
            v[idx] = orig - h
            fm = loss_fn(work)
            v[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out[k] = g
    return out
