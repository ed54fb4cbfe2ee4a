"""Preference-data construction.

Offline: near-duplicate filtering of the image gallery and top-K hard
negative mining, giving each anchor an image candidate set and an
index-aligned text candidate set. Online: candidate scores from a judge are
sorted into a ranking, which is then structured either as weighted
preference pairs or as per-suffix listwise weights.

Ties are broken by ascending index (or ascending id) everywhere.
"""

import itertools
import json
import random
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embedcore import EmbeddingBatch, normalize_rows
from .exceptions import (
    ConfigInvalid,
    EmptyBatch,
    EmptyScores,
    KTooLarge,
    MissingCaption,
    TooFewCandidates,
    UnknownAnchor,
)
from .validation import check_fraction, check_int, check_matrix


# ---------------------------------------------------------------------------
# semantic deduplication


@dataclass(frozen=True)
class DedupConfig:
    n_clusters: int = 1  # one cluster = exact scan; raise it for large galleries
    epsilon: float = 0.07
    seed: int = 0
    max_iter: int = 50

    def __post_init__(self):
        check_int(self.n_clusters, "dedup.n_clusters", minimum=1)
        # epsilon = 0 is accepted and disables dropping of distinct items
        check_fraction(self.epsilon, "dedup.epsilon", 0.0, 1.0, open_hi=True)
        check_int(self.seed, "dedup.seed")
        check_int(self.max_iter, "dedup.max_iter", minimum=1)


def _farthest_point_init(X, n_clusters, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    best = X @ X[chosen[0]]
    for _ in range(1, n_clusters):
        # farthest = lowest max-cosine to the chosen centers; argmin takes the first on ties
        nxt = int(np.argmin(best))
        chosen.append(nxt)
        best = np.maximum(best, X @ X[nxt])
    return X[chosen].copy()


def spherical_kmeans(X, n_clusters, seed=0, max_iter=50):
    """Lloyd iterations on the unit sphere with farthest-point seeding.

    Returns ``(labels, centers)``. Empty clusters keep their previous center.
    """
    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(X, n_clusters, rng)
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmax(X @ centers.T, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(n_clusters):
            members = X[labels == c]
            if len(members):
                s = members.sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 0:
                    centers[c] = s / norm
    return labels, centers


class SemanticDeduplicator(BaseEstimator):
    """Cluster-then-threshold near-duplicate filter.

    Items are clustered with spherical k-means; inside each cluster items are
    scanned in ascending id order and an item is dropped when its cosine to an
    already kept member exceeds ``1 - epsilon``. Results depend only on the
    (id, vector) multiset, not on input order.

    Follows the outlier-detector convention: :meth:`fit_predict` returns +1
    for kept rows and -1 for dropped duplicates.

    Attributes
    ----------
    keep_mask_ : ndarray of bool, in input order
    labels_ : ndarray of int, cluster of each input row
    kept_ids_ : list of str, ascending
    """

    def __init__(self, n_clusters=1, epsilon=0.07, seed=0, max_iter=50):
        self.n_clusters = n_clusters
        self.epsilon = epsilon
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None, ids=None):
        cfg = DedupConfig(self.n_clusters, self.epsilon, self.seed, self.max_iter)
        X = normalize_rows(check_matrix(X, "X"))
        n = X.shape[0]
        if ids is None:
            ids = [f"{i:08d}" for i in range(n)]
        ids = [str(i) for i in ids]
        if len(ids) != n:
            raise ValueError(f"{len(ids)} ids for {n} rows")
        if cfg.n_clusters > n:
            raise ConfigInvalid(f"dedup.n_clusters: {cfg.n_clusters} exceeds gallery size {n}")
        order = sorted(range(n), key=lambda i: ids[i])
        Xc = X[order]
        labels_c, centers = spherical_kmeans(Xc, cfg.n_clusters, cfg.seed, cfg.max_iter)
        threshold = 1.0 - cfg.epsilon
        keep_c = np.zeros(n, dtype=bool)
        for c in range(cfg.n_clusters):
            kept = []
            for i in np.flatnonzero(labels_c == c):
                if kept and np.max(np.clip(Xc[kept] @ Xc[i], -1.0, 1.0)) > threshold:
                    continue
                kept.append(i)
            keep_c[kept] = True
        self.keep_mask_ = np.zeros(n, dtype=bool)
        self.labels_ = np.zeros(n, dtype=np.int64)
        self.keep_mask_[order] = keep_c
        self.labels_[order] = labels_c
        self.cluster_centers_ = centers
        self.kept_ids_ = sorted(ids[i] for i in range(n) if self.keep_mask_[i])
        self.dropped_ids_ = sorted(ids[i] for i in range(n) if not self.keep_mask_[i])
        return self

    def fit_predict(self, X, y=None, ids=None):
        self.fit(X, ids=ids)
        return np.where(self.keep_mask_, 1, -1)

    def transform(self, X):
        """Rows of the fitted gallery that survived deduplication."""
        check_is_fitted(self, "keep_mask_")
        X = check_matrix(X, "X")
        if X.shape[0] != self.keep_mask_.shape[0]:
            raise ValueError("transform expects the gallery passed to fit")
        return X[self.keep_mask_]


def semantic_dedup(gallery, cfg):
    """Ids kept by :class:`SemanticDeduplicator`, ascending."""
    est = SemanticDeduplicator(cfg.n_clusters, cfg.epsilon, cfg.seed, cfg.max_iter)
    return est.fit(gallery.values, ids=gallery.ids).kept_ids_


# ---------------------------------------------------------------------------
# hard negative mining


def _id_ranks(ids):
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return ranks


def _top_k_rows(sims, id_ranks, exclude, K):
    # lexsort: last key is primary
    order = np.lexsort((id_ranks, -sims))
    return [j for j in order if j != exclude][:K]


def mine_hard_negatives(anchor_id, gallery, K):
    """Ids of the ``K`` gallery items most similar to the anchor, most similar first."""
    if anchor_id not in gallery:
        raise UnknownAnchor(anchor_id)
    K = int(K)
    if K < 0 or K > len(gallery) - 1:
        raise KTooLarge(f"K={K} but gallery has only {len(gallery) - 1} non-anchor items")
    a = gallery.index_of(anchor_id)
    sims = np.clip(gallery.values @ gallery.values[a], -1.0, 1.0)
    rows = _top_k_rows(sims, _id_ranks(gallery.ids), a, K)
    return [gallery.ids[j] for j in rows]


def mine_all_hard_negatives(gallery, K, anchor_ids=None):
    """:func:`mine_hard_negatives` for many anchors with one similarity matrix."""
    K = int(K)
    if K < 0 or K > len(gallery) - 1:
        raise KTooLarge(f"K={K} but gallery has only {len(gallery) - 1} non-anchor items")
    anchor_ids = list(gallery.ids if anchor_ids is None else anchor_ids)
    for a in anchor_ids:
        if a not in gallery:
            raise UnknownAnchor(a)
    rows = [gallery.index_of(a) for a in anchor_ids]
    sims = np.clip(gallery.values[rows] @ gallery.values.T, -1.0, 1.0)
    ranks = _id_ranks(gallery.ids)
    return {
        a: [gallery.ids[j] for j in _top_k_rows(sims[q], ranks, r, K)]
        for q, (a, r) in enumerate(zip(anchor_ids, rows))
    }


# ---------------------------------------------------------------------------
# candidate sets


class Direction(str, Enum):
    TXT2IMG = "txt2img"
    IMG2TXT = "img2txt"


@dataclass(frozen=True)
class CandidateSet:
    """An anchor and its candidates; ``candidate_ids[0]`` is the anchor's own positive."""

    anchor_id: str
    direction: Direction
    candidate_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "candidate_ids", tuple(self.candidate_ids))
        if not self.candidate_ids:
            raise ValueError("candidate set needs at least the positive")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ValueError(f"duplicate candidate ids for anchor {self.anchor_id!r}")

    @property
    def K(self):
        return len(self.candidate_ids) - 1

    @property
    def positive_id(self):
        return self.candidate_ids[0]

    def to_dict(self):
        return {"anchor": self.anchor_id, "direction": self.direction.value, "candidates": list(self.candidate_ids)}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["anchor"]), Direction(d["direction"]), tuple(str(c) for c in d["candidates"]))


class MultiCaptionSource:
    """Maps image ids to one caption (text item id) chosen from several.

    The pick is a seeded function of ``(seed, image id)``, so it is stable
    across runs and independent of query order.
    """

    def __init__(self, captions, seed=0):
        self.captions = {str(k): list(v) for k, v in captions.items()}
        self.seed = seed

    @classmethod
    def from_jsonl(cls, path, seed=0):
        caps = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    caps[str(rec["image"])] = [str(c) for c in rec["captions"]]
        return cls(caps, seed)

    def __contains__(self, image_id):
        return bool(self.captions.get(image_id))

    def __getitem__(self, image_id):
        options = self.captions.get(image_id)
        if not options:
            raise KeyError(image_id)
        if len(options) == 1:
            return options[0]
        return random.Random(f"{self.seed}:{image_id}").choice(options)


def build_candidate_sets(anchor_pairs, gallery, K, captions, mined=None):
    """Image and text candidate sets for every ``(text_id, image_id)`` anchor pair.

    The image set is the anchor image followed by its ``K`` mined neighbours;
    the text set is the anchor text followed by the caption of each mined
    image, index-aligned with the image set. ``captions`` maps image id ->
    text id. Pass ``mined`` (image id -> neighbour ids) to reuse a previous
    mining pass.

    Returns
    -------
    list of (CandidateSet, CandidateSet)
        ``(txt2img set, img2txt set)`` per anchor.
    """
    anchor_pairs = [(str(t), str(i)) for t, i in anchor_pairs]
    if mined is None:
        mined = mine_all_hard_negatives(gallery, K, [i for _, i in anchor_pairs]) if K > 0 else {}
    out = []
    for t, i in anchor_pairs:
        neigh = list(mined.get(i, []))[:K]
        texts = []
        for m in neigh:
            if m not in captions:
                raise MissingCaption(f"no caption for mined image {m!r}")
            texts.append(captions[m])
        out.append(
            (CandidateSet(t, Direction.TXT2IMG, (i, *neigh)), CandidateSet(i, Direction.IMG2TXT, (t, *texts)))
        )
    return out


# ---------------------------------------------------------------------------
# online structuring


@dataclass(frozen=True, eq=False)
class PreferenceRanking:
    ranked_indices: np.ndarray
    scores: np.ndarray

    @property
    def K(self):
        return len(self.scores) - 1

    @property
    def ranked_scores(self):
        return self.scores[self.ranked_indices]


def rank_candidates(scores):
    """Indices sorted by descending score; equal scores keep ascending index order."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise EmptyScores("no scores to rank")
    order = np.argsort(-s, kind="stable")
    return PreferenceRanking(order, s)


@dataclass(frozen=True)
class PairwisePreferenceSet:
    """``(preferred_index, dispreferred_index, weight)`` triples over candidate indices."""

    pairs: tuple

    def __len__(self):
        return len(self.pairs)

    @property
    def weights(self):
        return np.array([w for _, _, w in self.pairs])


def build_pairwise(r, max_pairs=None, seed=0):
    """All ``(r_a, r_b)`` with ``a < b``, weighted by ``scores[r_a] - scores[r_b]``.

    ``max_pairs`` keeps a seeded random subset (in enumeration order) when the
    full ``C(K+1, 2)`` set is too large.
    """
    if r.K < 1:
        raise TooFewCandidates("pairwise preferences need K >= 1")
    ri = r.ranked_indices
    pairs = [
        (int(ri[a]), int(ri[b]), float(r.scores[ri[a]] - r.scores[ri[b]]))
        for a, b in itertools.combinations(range(len(ri)), 2)
    ]
    if max_pairs is not None and len(pairs) > max_pairs:
        keep = sorted(random.Random(seed).sample(range(len(pairs)), max_pairs))
        pairs = [pairs[k] for k in keep]
    return PairwisePreferenceSet(tuple(pairs))


@dataclass(frozen=True, eq=False)
class ListwisePreferenceSet:
    ranked_indices: np.ndarray
    suffix_weights: np.ndarray

    @property
    def K(self):
        return len(self.ranked_indices) - 1


def build_listwise(r):
    """Ranking plus, for each rank ``k < K``, the mean score margin over lower ranks."""
    if r.K < 1:
        raise TooFewCandidates("listwise preferences need K >= 1")
    rs = r.ranked_scores
    K = r.K
    w = np.array([float(np.sum(rs[k] - rs[k + 1:])) / (K - k) for k in range(K)])
    return ListwisePreferenceSet(r.ranked_indices.copy(), w)


def expand_negative_pool(candidate_sets):
    """Deduplicated union of the candidates of a batch, in first-occurrence order.

    Each set contributes its positive and its ``K`` mined candidates, so the
    pool has at most ``N * (1 + K)`` ids. Apply it per direction: txt2img sets
    yield an image pool, img2txt sets a text pool.
    """
    candidate_sets = list(candidate_sets)
    if not candidate_sets:
        raise EmptyBatch("no candidate sets to pool")
    return tuple(dict.fromkeys(cid for cs in candidate_sets for cid in cs.candidate_ids))


def pool_batch(pool_ids, lookup):
    """Stack pooled ids into an :class:`EmbeddingBatch` using an id -> batch lookup."""
    vecs = [lookup.get(i) for i in pool_ids]
    return EmbeddingBatch.from_vecs(vecs)


def read_candidates_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [CandidateSet.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_candidates_jsonl(path, sets):
    with open(path, "w", encoding="utf-8") as fh:
        for cs in sets:
            fh.write(json.dumps(cs.to_dict()) + "\n")
