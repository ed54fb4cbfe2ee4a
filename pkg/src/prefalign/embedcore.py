"""Embedding algebra: normalization, cosine similarity, similarity matrices, means."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import DimensionMismatch, EmptyBatch, ZeroVector
from .validation import check_matrix, check_vector

ZERO_NORM_TOL = 1e-12


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"

    def other(self):
        return Modality.IMAGE if self is Modality.TEXT else Modality.TEXT


def normalize(v):
    """Scale ``v`` to unit L2 norm.

    Raises
    ------
    ZeroVector
        If ``‖v‖ <= 1e-12``.
    """
    v = check_vector(v, "v")
    n = float(np.sqrt(np.dot(v, v)))
    if n <= ZERO_NORM_TOL:
        raise ZeroVector(f"cannot normalize vector with norm {n:g}")
    return v / n


def normalize_rows(m):
    m = check_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms <= ZERO_NORM_TOL):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has norm {norms[bad]:g}")
    return m / norms[:, None]


@dataclass(frozen=True, eq=False)
class EmbeddingVec:
    id: str
    modality: Modality
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "values", check_vector(self.values, f"embedding {self.id!r}"))

    @property
    def dim(self):
        return self.values.shape[0]

    @classmethod
    def normalized(cls, id, modality, values):
        return cls(id, modality, normalize(values))


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Ordered, single-modality collection of embeddings stored as an (N, d) array."""

    ids: tuple
    modality: Modality
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        if not ids:
            raise EmptyBatch("embedding batch must be non-empty")
        values = check_matrix(self.values, "batch values")
        if values is self.values or values.base is not None:
            values = values.copy()
        if values.shape[0] != len(ids):
            raise DimensionMismatch(f"{len(ids)} ids but {values.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("embedding ids must be unique within a batch")
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(ids)})

    @classmethod
    def from_vecs(cls, vecs):
        vecs = list(vecs)
        if not vecs:
            raise EmptyBatch("embedding batch must be non-empty")
        mods = {v.modality for v in vecs}
        if len(mods) != 1:
            raise ValueError(f"mixed modalities in batch: {sorted(m.value for m in mods)}")
        dims = {v.dim for v in vecs}
        if len(dims) != 1:
            raise DimensionMismatch(f"mixed dimensions in batch: {sorted(dims)}")
        return cls(tuple(v.id for v in vecs), vecs[0].modality, np.stack([v.values for v in vecs]))

    @classmethod
    def normalized(cls, ids, modality, values):
        return cls(tuple(ids), modality, normalize_rows(values))

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return EmbeddingVec(self.ids[i], self.modality, self.values[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __contains__(self, id):
        return id in self._index

    @property
    def dim(self):
        return self.values.shape[1]

    def index_of(self, id):
        return self._index[id]

    def get(self, id):
        return self[self._index[id]]

    def subset(self, ids):
        ids = list(ids)
        rows = [self._index[i] for i in ids]
        return EmbeddingBatch(tuple(ids), self.modality, self.values[rows])


def _as_array(x):
    if isinstance(x, (EmbeddingVec, EmbeddingBatch)):
        return x.values
    return np.asarray(x, dtype=np.float64)


def cosine(a, b):
    """Dot product of two normalized embeddings, clamped to [-1, 1]."""
    va, vb = _as_array(a), _as_array(b)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dimension mismatch: {va.shape} vs {vb.shape}")
    d = 0.0
    # sequential sum keeps cosine(a, b) == cosine(b, a) bit-for-bit
    for x, y in zip(va.tolist(), vb.tolist()):
        d += x * y
    return min(1.0, max(-1.0, d))


def similarity_matrix(A, B):
    """|A| x |B| matrix of clamped cosines between rows of two batches."""
    va, vb = _as_array(A), _as_array(B)
    if va.ndim == 1:
        va = va[None, :]
    if vb.ndim == 1:
        vb = vb[None, :]
    if va.shape[1] != vb.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {va.shape[1]} vs {vb.shape[1]}")
    return np.clip(va @ vb.T, -1.0, 1.0)


def mean_embedding(batch):
    """Arithmetic mean of the batch vectors; not renormalized."""
    v = _as_array(batch)
    if v.ndim != 2 or v.shape[0] == 0:
        raise EmptyBatch("mean of an empty batch")
    acc = np.zeros(v.shape[1])
    for row in v:
        acc = acc + row
    return acc / v.shape[0]


def mean_pairwise_dot(A, B):
    """(1/(|A||B|)) Σ_i Σ_j A_i · B_j without clamping."""
    va, vb = _as_array(A), _as_array(B)
    if va.shape[1] != vb.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {va.shape[1]} vs {vb.shape[1]}")
    return float(np.sum(va @ vb.T)) / (va.shape[0] * vb.shape[0])
