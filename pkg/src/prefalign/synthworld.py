"""Seeded synthetic two-modality world with planted near-duplicate concepts.

Each concept has a unit latent vector. A text view and an image view are
produced by two different fixed linear maps of the latent plus isotropic
noise. A share of the concepts come in planted pairs whose latents sit at a
prescribed cosine; these pairs are the fine-grained "hard" cases.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .embedcore import EmbeddingBatch, Modality, normalize_rows
from .exceptions import ConfigInvalid, NotEnoughDuplicatePairs
from .gapmetrics import FineGrainedInstance
from .validation import check_fraction, check_int


@dataclass(frozen=True)
class WorldConfig:
    n_concepts: int = 512
    latent_dim: int = 16
    raw_dim: int = 32
    view_noise: float = 0.05
    duplicate_fraction: float = 0.25
    near_dup_cosine: float = 0.95
    seed: int = 0
    identity_maps: bool = False

    def __post_init__(self):
        check_int(self.n_concepts, "world.n_concepts", minimum=1)
        check_int(self.latent_dim, "world.latent_dim", minimum=1)
        check_int(self.raw_dim, "world.raw_dim", minimum=1)
        check_int(self.seed, "world.seed")
        if self.raw_dim < self.latent_dim:
            raise ConfigInvalid(f"world.raw_dim: {self.raw_dim} < world.latent_dim {self.latent_dim}")
        if self.view_noise < 0:
            raise ConfigInvalid(f"world.view_noise: must be >= 0, got {self.view_noise}")
        check_fraction(self.duplicate_fraction, "world.duplicate_fraction")
        check_fraction(self.near_dup_cosine, "world.near_dup_cosine", open_lo=True, open_hi=True)
        if self.identity_maps and self.raw_dim != self.latent_dim:
            raise ConfigInvalid("world.identity_maps requires raw_dim == latent_dim")
        if self.latent_dim < 2 and self.duplicate_fraction > 0:
            raise ConfigInvalid("world.latent_dim: planted pairs need latent_dim >= 2")

    @property
    def n_pairs(self):
        return int(self.duplicate_fraction * self.n_concepts) // 2


def text_id(k):
    return f"txt-{k:05d}"


def image_id(k):
    return f"img-{k:05d}"


@dataclass(frozen=True, eq=False)
class WorldItem:
    concept_id: int
    latent: np.ndarray
    raw_text: np.ndarray
    raw_image: np.ndarray
    hard_neighbor_ids: tuple = ()

    @property
    def text_id(self):
        return text_id(self.concept_id)

    @property
    def image_id(self):
        return image_id(self.concept_id)


@dataclass(eq=False)
class World:
    config: WorldConfig
    latents: np.ndarray
    raw_text: np.ndarray
    raw_image: np.ndarray
    text_map: np.ndarray
    image_map: np.ndarray
    near_dup_pairs: list = field(default_factory=list)

    @property
    def n(self):
        return self.latents.shape[0]

    @property
    def text_ids(self):
        return tuple(text_id(k) for k in range(self.n))

    @property
    def image_ids(self):
        return tuple(image_id(k) for k in range(self.n))

    @property
    def items(self):
        partner = {}
        for a, b in self.near_dup_pairs:
            partner[a], partner[b] = b, a
        return [
            WorldItem(
                k,
                self.latents[k],
                self.raw_text[k],
                self.raw_image[k],
                (image_id(partner[k]),) if k in partner else (),
            )
            for k in range(self.n)
        ]

    def latent_lookup(self):
        """Item id (text or image) -> latent, for the synthetic judge."""
        out = {}
        for k in range(self.n):
            out[text_id(k)] = self.latents[k]
            out[image_id(k)] = self.latents[k]
        return out

    def raw_batch(self, modality, normalized=True):
        modality = Modality(modality)
        raw = self.raw_text if modality is Modality.TEXT else self.raw_image
        ids = self.text_ids if modality is Modality.TEXT else self.image_ids
        if normalized:
            return EmbeddingBatch.normalized(ids, modality, raw)
        return EmbeddingBatch(ids, modality, raw)

    def captions(self):
        """Image id -> text id of the same concept."""
        return {image_id(k): text_id(k) for k in range(self.n)}

    def truth_records(self):
        partner = {}
        for a, b in self.near_dup_pairs:
            partner[a], partner[b] = b, a
        return [
            {
                "concept": k,
                "text": text_id(k),
                "image": image_id(k),
                "latent": self.latents[k].tolist(),
                "near_duplicates": [image_id(partner[k])] if k in partner else [],
            }
            for k in range(self.n)
        ]


def _random_orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # sign fix makes the factorization unique
    return q * np.sign(np.diag(r))


def generate_world(cfg):
    """Build the world described by ``cfg``; a pure function of ``cfg``.

    Draw order (all from one ``default_rng(cfg.seed)``): latents, pair
    permutation, pair offsets, text map, image map, text noise, image noise.
    Noise is scaled so its expected norm is ``view_noise``.
    """
    if not isinstance(cfg, WorldConfig):
        raise ConfigInvalid(f"expected WorldConfig, got {type(cfg).__name__}")
    rng = np.random.default_rng(cfg.seed)
    n, L, D = cfg.n_concepts, cfg.latent_dim, cfg.raw_dim
    latents = normalize_rows(rng.standard_normal((n, L)))

    perm = rng.permutation(n)
    pairs = []
    c = cfg.near_dup_cosine
    for k in range(cfg.n_pairs):
        a, b = sorted((int(perm[2 * k]), int(perm[2 * k + 1])))
        u = rng.standard_normal(L)
        u -= np.dot(u, latents[a]) * latents[a]
        u /= np.linalg.norm(u)
        v = c * latents[a] + np.sqrt(1.0 - c * c) * u
        latents[b] = v / np.linalg.norm(v)
        pairs.append((a, b))
    pairs.sort()

    if cfg.identity_maps:
        text_map = np.eye(D)
        image_map = np.eye(D)
        _random_orthonormal(rng, D, L), _random_orthonormal(rng, D, L)
    else:
        text_map = _random_orthonormal(rng, D, L)
        image_map = _random_orthonormal(rng, D, L)
    sigma = cfg.view_noise / np.sqrt(D)
    raw_text = latents @ text_map.T + sigma * rng.standard_normal((n, D))
    raw_image = latents @ image_map.T + sigma * rng.standard_normal((n, D))
    return World(cfg, latents, raw_text, raw_image, text_map, image_map, pairs)


def make_finegrained_benchmark(world, n_instances, seed=0):
    """Sample ``n_instances`` planted pairs as two-caption/two-image instances.

    Each instance takes ``(t0, i0)`` from one member of a planted pair and
    ``(t1, i1)`` from the other. Selection is seeded; instances are returned
    in ascending concept order.
    """
    n_instances = int(n_instances)
    pairs = world.near_dup_pairs
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if n_instances > len(pairs):
        raise NotEnoughDuplicatePairs(f"requested {n_instances} instances, world has {len(pairs)} planted pairs")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(pairs), size=n_instances, replace=False).tolist())
    return [
        FineGrainedInstance(text_id(a), text_id(b), image_id(a), image_id(b))
        for a, b in (pairs[i] for i in chosen)
    ]


def config_dict(cfg):
    return asdict(cfg)
