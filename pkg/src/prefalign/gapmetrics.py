"""Modality-gap metrics built on the 1-D Wasserstein distance.

The distributional gap compares, for each anchor caption ``t0``, the
distribution of its similarities to all matching-side images against its
similarities to the other matching-side captions. The discriminative gap
compares the matching-side image similarities against the non-matching-side
ones. Both are averaged over anchors and their ratio is ``delta_gap``.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .embedcore import mean_embedding
from .exceptions import DimensionMismatch, EmptyBatch, EmptySample, NonFiniteValue, TooFewInstances, UnknownAnchor


def _sample(x, name):
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise EmptySample(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return a


def wasserstein1(a, b):
    """Exact 1-Wasserstein distance between two empirical distributions.

    Both samples are sorted and the distance is the integral over ``u`` in
    [0, 1] of ``|Qa(u) - Qb(u)|`` with piecewise-constant quantile functions.
    Breakpoints ``k/n`` and ``l/m`` are merged on the integer grid ``1/(n*m)``
    so no floating comparison decides which quantile step is active.

    Parameters
    ----------
    a, b : array-like of float
        Non-empty samples, possibly of different sizes.

    Returns
    -------
    float
    """
    a = np.sort(_sample(a, "a"))
    b = np.sort(_sample(b, "b"))
    n, m = a.size, b.size
    if n == m:
        return float(np.sum(np.abs(a - b))) / n
    ends = np.union1d(np.arange(1, n + 1, dtype=np.int64) * m, np.arange(1, m + 1, dtype=np.int64) * n)
    widths = np.diff(ends, prepend=0)
    ia = (ends - 1) // m
    ib = (ends - 1) // n
    return float(np.sum(widths * np.abs(a[ia] - b[ib]))) / (n * m)


def mean_gap(T, I):
    """Norm of the difference between the mean text and mean image embedding."""
    vt = getattr(T, "values", T)
    vi = getattr(I, "values", I)
    vt, vi = np.asarray(vt, dtype=np.float64), np.asarray(vi, dtype=np.float64)
    if vt.size == 0 or vi.size == 0:
        raise EmptyBatch("mean_gap needs non-empty batches")
    if vt.shape != vi.shape:
        raise DimensionMismatch(f"batch shapes differ: {vt.shape} vs {vi.shape}")
    d = mean_embedding(vt) - mean_embedding(vi)
    return float(np.sqrt(np.dot(d, d)))


def delta_gap_from(w_dist, w_disc):
    """``w_dist / w_disc``, or None when the discriminative gap is zero."""
    if w_disc <= 0.0:
        return None
    return w_dist / w_disc


@dataclass(frozen=True)
class FineGrainedInstance:
    """Two matched pairs (t0, i0) and (t1, i1) of hard-to-separate items."""

    t0: str
    t1: str
    i0: str
    i1: str

    def __post_init__(self):
        if len({self.t0, self.t1, self.i0, self.i1}) != 4:
            raise ValueError(f"instance ids must be distinct: {self}")

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["t0"]), str(d["t1"]), str(d["i0"]), str(d["i1"]))

    def to_dict(self):
        return {"t0": self.t0, "t1": self.t1, "i0": self.i0, "i1": self.i1}


@dataclass(frozen=True)
class GapReport:
    w_dist_gap: float
    w_disc_gap: float
    delta_gap: float | None
    n_anchors: int

    @property
    def delta_defined(self):
        return self.delta_gap is not None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def per_anchor_distributions(anchor_id, dataset, scorer):
    """Similarity samples seen from one ``t0`` caption.

    Returns ``(cross_matched, intra, cross_mismatched)``: scores against every
    ``i0`` (including the anchor's own image), against every other ``t0``,
    and against every ``i1``.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise TooFewInstances(f"need at least 2 instances, got {len(dataset)}")
    if not any(inst.t0 == anchor_id for inst in dataset):
        raise UnknownAnchor(anchor_id)
    cross_matched = np.array([scorer(anchor_id, inst.i0) for inst in dataset], dtype=np.float64)
    intra = np.array([scorer(anchor_id, inst.t0) for inst in dataset if inst.t0 != anchor_id], dtype=np.float64)
    cross_mismatched = np.array([scorer(anchor_id, inst.i1) for inst in dataset], dtype=np.float64)
    return cross_matched, intra, cross_mismatched


def gap_report(dataset, scorer, pooled=False):
    """Mean distributional and discriminative gaps over all ``t0`` anchors.

    With ``pooled=True`` the three distributions are pooled over every anchor
    and a single distance is computed for each gap instead of a mean of
    per-anchor distances.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise TooFewInstances(f"need at least 2 instances, got {len(dataset)}")
    per_anchor = [per_anchor_distributions(inst.t0, dataset, scorer) for inst in dataset]
    if pooled:
        cm = np.concatenate([p[0] for p in per_anchor])
        it = np.concatenate([p[1] for p in per_anchor])
        mm = np.concatenate([p[2] for p in per_anchor])
        w_dist, w_disc = wasserstein1(cm, it), wasserstein1(cm, mm)
    else:
        dist = [wasserstein1(cm, it) for cm, it, _ in per_anchor]
        disc = [wasserstein1(cm, mm) for cm, _, mm in per_anchor]
        w_dist = math.fsum(dist) / len(dist)
        w_disc = math.fsum(disc) / len(disc)
    return GapReport(w_dist, w_disc, delta_gap_from(w_dist, w_disc), len(dataset))


def gap_curve(checkpoints, dataset, scorer_factory, pooled=False):
    """One :class:`GapReport` per checkpoint, in order.

    ``scorer_factory`` maps a checkpoint (e.g. an encoder state) to a
    ``scorer(a_id, b_id) -> float``.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("gap_curve needs at least one checkpoint")
    return [gap_report(dataset, scorer_factory(ck), pooled=pooled) for ck in checkpoints]


class EmbeddingScorer:
    """Cosine scorer over a fixed id -> unit-vector lookup."""

    def __init__(self, *batches):
        self._vecs = {}
        for batch in batches:
            for i, id in enumerate(batch.ids):
                self._vecs[id] = batch.values[i]

    def __call__(self, a, b):
        d = float(np.dot(self._vecs[a], self._vecs[b]))
        return min(1.0, max(-1.0, d))
