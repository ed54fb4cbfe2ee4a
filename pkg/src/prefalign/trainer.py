"""Toy dual encoder and the preference-regularized training loop.

Each modality has an affine map followed by L2 normalization::

    z = normalize(W x + b)

The per-modality bias starts at a random offset, so a freshly initialized
encoder places the two modalities in separate cones (a modality gap) that
training has to close. The temperature and preference scale are learned in
log space, which keeps them positive.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embedcore import EmbeddingBatch, EmbeddingVec, Modality, normalize
from .exceptions import ConfigInvalid, DimensionMismatch, NonFiniteLoss
from .judge import batch_score
from .losses import (
    RPAInput,
    RPAVariant,
    combined_loss,
    contrast_pref_loss,
    contrastive_loss,
    contrastive_loss_expanded,
    rpa_total,
)
from .prefbuild import build_listwise, build_pairwise, expand_negative_pool, rank_candidates
from .validation import check_fraction, check_int, check_matrix, check_positive

INIT_TAU = 0.07
INIT_BETA = 1.0 / 0.07
# log-space clamps for the learned scales; the amplified scale learning rate
# would otherwise fling them to 0 or infinity while embeddings are collapsed
LOG_TAU_RANGE = (math.log(0.01), math.log(1.0))
LOG_BETA_RANGE = (math.log(1.0), math.log(100.0))
CHECKPOINT_FORMAT = "prefalign-encoder"
CHECKPOINT_VERSION = 1


class Variant(str, Enum):
    NONE = "none"
    PAIRWISE = "pairwise"
    LISTWISE = "listwise"
    CONTRAST_PREF = "contrast_pref"


@dataclass(eq=False)
class EncoderState:
    W_text: np.ndarray
    b_text: np.ndarray
    W_image: np.ndarray
    b_image: np.ndarray
    log_tau: float = math.log(INIT_TAU)
    # -log(0.07) rather than log(1/0.07): exp(log 0.07) is exact, so beta starts at exactly 1/0.07
    log_beta: float = -math.log(INIT_TAU)

    @property
    def tau(self):
        return math.exp(self.log_tau)

    @property
    def beta(self):
        return 1.0 / math.exp(-self.log_beta)

    @property
    def raw_dim(self):
        return self.W_text.shape[1]

    @property
    def embed_dim(self):
        return self.W_text.shape[0]

    def params(self, modality):
        if Modality(modality) is Modality.TEXT:
            return self.W_text, self.b_text
        return self.W_image, self.b_image

    def copy(self):
        return EncoderState(
            self.W_text.copy(), self.b_text.copy(), self.W_image.copy(), self.b_image.copy(), self.log_tau, self.log_beta
        )

    def equals(self, other):
        return (
            all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("W_text", "b_text", "W_image", "b_image"))
            and self.log_tau == other.log_tau
            and self.log_beta == other.log_beta
        )

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "W_text": self.W_text.tolist(),
            "b_text": self.b_text.tolist(),
            "W_image": self.W_image.tolist(),
            "b_image": self.b_image.tolist(),
            "log_tau": self.log_tau,
            "log_beta": self.log_beta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"not a v{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
        return cls(
            np.array(d["W_text"], dtype=np.float64),
            np.array(d["b_text"], dtype=np.float64),
            np.array(d["W_image"], dtype=np.float64),
            np.array(d["b_image"], dtype=np.float64),
            float(d["log_tau"]),
            float(d["log_beta"]),
        )

    def save(self, path):
        # json writes floats with repr precision, so load(save(s)) is exact
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_encoders(raw_dim, embed_dim, seed=0, init_scale=0.05, modality_offset=1.0):
    """Small random weights plus a random per-modality bias of norm ``modality_offset``.

    ``tau`` starts at 0.07 and ``beta`` at 1/0.07.
    """
    raw_dim = check_int(raw_dim, "raw_dim", minimum=1)
    embed_dim = check_int(embed_dim, "embed_dim", minimum=1)
    if init_scale < 0 or modality_offset < 0:
        raise ConfigInvalid("init_scale and modality_offset must be >= 0")
    rng = np.random.default_rng(seed)
    W_t = rng.standard_normal((embed_dim, raw_dim)) * (init_scale / math.sqrt(raw_dim))
    W_i = rng.standard_normal((embed_dim, raw_dim)) * (init_scale / math.sqrt(raw_dim))
    b_t = rng.standard_normal(embed_dim)
    b_i = rng.standard_normal(embed_dim)
    b_t *= modality_offset / np.linalg.norm(b_t)
    b_i *= modality_offset / np.linalg.norm(b_i)
    return EncoderState(W_t, b_t, W_i, b_i)


def _forward(state, X, modality):
    W, b = state.params(modality)
    Y = X @ W.T + b
    norms = np.sqrt(np.einsum("ij,ij->i", Y, Y))
    return Y / norms[:, None], norms


def _forward_split(state, X, modality, n_head):
    # the first n_head rows are encoded on their own so their values do not
    # depend on how many other rows share the matmul
    Zh, nh = _forward(state, X[:n_head], modality)
    if n_head >= X.shape[0]:
        return Zh, nh
    Zt, nt = _forward(state, X[n_head:], modality)
    return np.vstack([Zh, Zt]), np.concatenate([nh, nt])


def encode(state, raw, modality, id=""):
    """Embed one raw vector: modality-specific affine map, then normalize."""
    W, b = state.params(modality)
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != W.shape[1]:
        raise DimensionMismatch(f"raw vector of shape {x.shape} for encoder with raw_dim {W.shape[1]}")
    return EmbeddingVec(id, modality, normalize(W @ x + b))


def encode_batch(state, raw_batch, modality=None):
    """Embed every row of an :class:`EmbeddingBatch` of raw features."""
    modality = Modality(modality or raw_batch.modality)
    X = check_matrix(raw_batch.values, n_cols=state.raw_dim)
    W, b = state.params(modality)
    Y = X @ W.T + b
    norms = np.sqrt(np.einsum("ij,ij->i", Y, Y))
    if np.any(norms <= 1e-12):
        normalize(np.zeros(1))  # raises ZeroVector with the standard message
    return EmbeddingBatch(raw_batch.ids, modality, Y / norms[:, None])


# ---------------------------------------------------------------------------
# data + config


@dataclass(eq=False)
class TrainingData:
    """Raw features by id, the anchor pairs, and their scored candidate sets.

    ``candidate_sets[i]`` is ``(txt2img set, img2txt set)`` for ``anchors[i]``
    and ``scores[i]`` the matching pair of judge-score vectors.
    """

    text: EmbeddingBatch
    image: EmbeddingBatch
    anchors: list
    candidate_sets: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def __post_init__(self):
        if self.candidate_sets and len(self.candidate_sets) != len(self.anchors):
            raise ValueError("candidate_sets must align with anchors")
        if self.scores and len(self.scores) != len(self.candidate_sets):
            raise ValueError("scores must align with candidate_sets")

    @property
    def has_preferences(self):
        return bool(self.candidate_sets) and bool(self.scores)


def score_candidate_sets(candidate_sets, judge):
    """Judge scores for every ``(txt2img, img2txt)`` candidate-set pair."""
    return [
        (batch_score(t2i.anchor_id, t2i, judge), batch_score(i2t.anchor_id, i2t, judge))
        for t2i, i2t in candidate_sets
    ]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.5
    scale_lr_multiplier: float = 1.0
    lam: float = 0.5
    variant: str = "listwise"
    expanded_negatives: bool = False
    seed: int = 0
    momentum: float = 0.0
    embed_dim: int = 16
    init_scale: float = 0.05
    modality_offset: float = 1.0
    max_pairs: int | None = None

    def __post_init__(self):
        check_int(self.epochs, "train.epochs", minimum=0)
        check_int(self.batch_size, "train.batch_size", minimum=2)
        check_int(self.seed, "train.seed")
        check_int(self.embed_dim, "train.embed_dim", minimum=1)
        if self.learning_rate < 0 or self.scale_lr_multiplier < 0:
            raise ConfigInvalid("train.learning_rate and train.scale_lr_multiplier must be >= 0")
        check_fraction(self.lam, "loss.lambda")
        check_fraction(self.momentum, "train.momentum", open_hi=True)
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigInvalid(f"loss.variant: unknown variant {self.variant!r}") from None
        if self.max_pairs is not None:
            check_int(self.max_pairs, "loss.max_pairs", minimum=1)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss_total: float
    loss_rpa: float
    loss_contrast: float
    tau: float
    beta: float

    CSV_HEADER = "step,loss_total,loss_rpa,loss_contrast,tau,beta"

    def csv_row(self):
        vals = (self.loss_total, self.loss_rpa, self.loss_contrast, self.tau, self.beta)
        return ",".join([str(int(self.step)), *(repr(float(v)) for v in vals)])


def write_metric_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(StepMetrics.CSV_HEADER + "\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")


# ---------------------------------------------------------------------------
# one step


class GradientDescent:
    """Gradient descent with optional heavy-ball momentum.

    The log-temperature and log-scale use ``learning_rate * scale_lr_multiplier``
    and are clamped to ``tau in [0.01, 1]`` and ``beta in [1, 100]``.
    """

    def __init__(self, learning_rate, scale_lr_multiplier=1.0, momentum=0.0):
        self.learning_rate = learning_rate
        self.scale_lr_multiplier = scale_lr_multiplier
        self.momentum = momentum
        self._velocity = None

    def step(self, state, grads):
        names = ("W_text", "b_text", "W_image", "b_image", "log_tau", "log_beta")
        if self.momentum > 0:
            if self._velocity is None:
                self._velocity = {k: np.zeros_like(np.asarray(grads[k])) for k in names}
            for k in names:
                self._velocity[k] = self.momentum * self._velocity[k] + grads[k]
            grads = self._velocity
        lr = self.learning_rate
        slr = lr * self.scale_lr_multiplier
        return EncoderState(
            state.W_text - lr * grads["W_text"],
            state.b_text - lr * grads["b_text"],
            state.W_image - lr * grads["W_image"],
            state.b_image - lr * grads["b_image"],
            _clamp(state.log_tau - slr * float(grads["log_tau"]), LOG_TAU_RANGE),
            _clamp(state.log_beta - slr * float(grads["log_beta"]), LOG_BETA_RANGE),
        )


def _clamp(x, bounds):
    return min(max(x, bounds[0]), bounds[1])


def _unique(seq):
    return list(dict.fromkeys(seq))


def _preference_inputs(sets, scores, emb_t, emb_i, variant, max_pairs, seed):
    t2i_inputs, i2t_inputs = [], []
    if not scores:
        scores = [(None, None)] * len(sets)
    for (t2i, i2t), (s_t2i, s_i2t) in zip(sets, scores):
        for cs, s, anchor_emb, cand_emb, out in (
            (t2i, s_t2i, emb_t, emb_i, t2i_inputs),
            (i2t, s_i2t, emb_i, emb_t, i2t_inputs),
        ):
            prefs = None
            if variant is Variant.PAIRWISE:
                prefs = build_pairwise(rank_candidates(s), max_pairs=max_pairs, seed=seed)
            elif variant is Variant.LISTWISE:
                prefs = build_listwise(rank_candidates(s))
            out.append(RPAInput(anchor_emb.get(cs.anchor_id), cand_emb.subset(cs.candidate_ids), prefs))
    return t2i_inputs, i2t_inputs


def batch_objective(state, data, batch, cfg):
    """Loss pieces for one batch of anchor indices.

    Returns ``(total, rpa_value, contrast_value, cache)`` where ``total`` is a
    :class:`~prefalign.losses.LossOutput` over embeddings and ``cache`` holds
    what :func:`backprop` needs.
    """
    variant = Variant(cfg.variant)
    anchors = [data.anchors[i] for i in batch]
    uses_sets = variant is not Variant.NONE or cfg.expanded_negatives
    if uses_sets and not data.candidate_sets:
        raise ValueError(f"variant {variant.value!r} needs candidate sets")
    sets = [data.candidate_sets[i] for i in batch] if uses_sets else []
    scores = [data.scores[i] for i in batch] if variant in (Variant.PAIRWISE, Variant.LISTWISE) else []

    text_ids = _unique([t for t, _ in anchors] + [c for _, i2t in sets for c in i2t.candidate_ids])
    image_ids = _unique([i for _, i in anchors] + [c for t2i, _ in sets for c in t2i.candidate_ids])
    X_t = data.text.subset(text_ids).values
    X_i = data.image.subset(image_ids).values
    Z_t, n_t = _forward_split(state, X_t, Modality.TEXT, len(anchors))
    Z_i, n_i = _forward_split(state, X_i, Modality.IMAGE, len(anchors))
    emb_t = EmbeddingBatch(tuple(text_ids), Modality.TEXT, Z_t)
    emb_i = EmbeddingBatch(tuple(image_ids), Modality.IMAGE, Z_i)

    tau, beta = state.tau, state.beta
    anc_t = emb_t.subset([t for t, _ in anchors])
    anc_i = emb_i.subset([i for _, i in anchors])
    if cfg.expanded_negatives:
        img_pool = emb_i.subset(expand_negative_pool(t2i for t2i, _ in sets))
        txt_pool = emb_t.subset(expand_negative_pool(i2t for _, i2t in sets))
        contrast = contrastive_loss_expanded(anc_t, anc_i, txt_pool, img_pool, tau)
    else:
        contrast = contrastive_loss(anc_t, anc_i, tau)

    if variant is Variant.NONE:
        pref = None
        total = contrast
    else:
        t2i_in, i2t_in = _preference_inputs(sets, scores, emb_t, emb_i, variant, cfg.max_pairs, cfg.seed)
        if variant is Variant.CONTRAST_PREF:
            pref = contrast_pref_loss(t2i_in, i2t_in, tau)
        else:
            pref = rpa_total(t2i_in, i2t_in, RPAVariant(variant.value), beta)
        total = combined_loss(pref, contrast, cfg.lam)
    cache = (text_ids, image_ids, X_t, X_i, Z_t, Z_i, n_t, n_i)
    return total, (pref.value if pref is not None else 0.0), contrast.value, cache


def backprop(state, total, cache):
    """Chain embedding gradients through normalization and the affine maps."""
    text_ids, image_ids, X_t, X_i, Z_t, Z_i, n_t, n_i = cache
    grads = {}
    for ids, X, Z, norms, wk, bk in (
        (text_ids, X_t, Z_t, n_t, "W_text", "b_text"),
        (image_ids, X_i, Z_i, n_i, "W_image", "b_image"),
    ):
        # only rows that carry gradient, so zero rows never change the summation order
        rows = [r for r, id in enumerate(ids) if id in total.grads]
        if not rows:
            grads[wk] = np.zeros((Z.shape[1], X.shape[1]))
            grads[bk] = np.zeros(Z.shape[1])
            continue
        dZ = np.array([total.grads[ids[r]] for r in rows])
        Z, X, norms = Z[rows], X[rows], norms[rows]
        # d normalize(y) = (I - z zᵀ) / ‖y‖
        dY = (dZ - Z * np.einsum("ij,ij->i", Z, dZ)[:, None]) / norms[:, None]
        grads[wk] = dY.T @ X
        grads[bk] = dY.sum(axis=0)
    grads["log_tau"] = total.grad_tau * state.tau
    grads["log_beta"] = total.grad_beta * state.beta
    return grads


def train_step(state, data, batch, cfg, optimizer=None, step=0):
    """One gradient step of the configured objective on a batch of anchor indices.

    Returns ``(new_state, StepMetrics)``; the metrics carry the loss terms
    evaluated before the update and ``tau``/``beta`` after it.
    """
    total, rpa_v, con_v, cache = batch_objective(state, data, batch, cfg)
    if not all(math.isfinite(v) for v in (total.value, rpa_v, con_v)):
        raise NonFiniteLoss(
            f"step {step}: loss_total={total.value} loss_rpa={rpa_v} loss_contrast={con_v} "
            f"tau={state.tau} beta={state.beta}"
        )
    grads = backprop(state, total, cache)
    if optimizer is None:
        optimizer = GradientDescent(cfg.learning_rate, cfg.scale_lr_multiplier, cfg.momentum)
    new_state = optimizer.step(state, grads)
    return new_state, StepMetrics(step, total.value, rpa_v, con_v, new_state.tau, new_state.beta)


@dataclass(eq=False)
class TrainResult:
    state: EncoderState
    log: list
    checkpoints: list


def train(data, cfg, state=None):
    """Epochs of seeded shuffled mini-batches.

    ``checkpoints[0]`` is the initial state and ``checkpoints[e]`` the state
    after epoch ``e``.
    """
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if state is None:
        state = init_encoders(
            data.text.dim, cfg.embed_dim, np.random.default_rng(init_seq), cfg.init_scale, cfg.modality_offset
        )
    rng = np.random.default_rng(shuffle_seq)
    opt = GradientDescent(cfg.learning_rate, cfg.scale_lr_multiplier, cfg.momentum)
    checkpoints = [state.copy()]
    log = []
    n = len(data.anchors)
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size].tolist()
            if len(batch) < 2:
                continue
            state, m = train_step(state, data, batch, cfg, optimizer=opt, step=step)
            log.append(m)
            step += 1
        checkpoints.append(state.copy())
    return TrainResult(state, log, checkpoints)


# ---------------------------------------------------------------------------
# estimator facade


class DualEncoder(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit`` takes index-aligned raw text and image feature matrices; pass
    ``candidate_sets`` and ``scores`` (see :func:`score_candidate_sets`) for
    any variant other than ``"none"``. ``transform`` embeds raw features of
    either modality.
    """

    def __init__(
        self,
        embed_dim=16,
        epochs=10,
        batch_size=32,
        learning_rate=0.5,
        scale_lr_multiplier=1.0,
        lam=0.5,
        variant="listwise",
        expanded_negatives=False,
        momentum=0.0,
        init_scale=0.05,
        modality_offset=1.0,
        max_pairs=None,
        seed=0,
    ):
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.scale_lr_multiplier = scale_lr_multiplier
        self.lam = lam
        self.variant = variant
        self.expanded_negatives = expanded_negatives
        self.momentum = momentum
        self.init_scale = init_scale
        self.modality_offset = modality_offset
        self.max_pairs = max_pairs
        self.seed = seed

    def _config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X_text, X_image, text_ids=None, image_ids=None, candidate_sets=None, scores=None):
        cfg = self._config()
        X_text = check_matrix(X_text, "X_text")
        X_image = check_matrix(X_image, "X_image", n_cols=X_text.shape[1])
        if X_text.shape[0] != X_image.shape[0]:
            raise ValueError("X_text and X_image must have the same number of rows")
        n = X_text.shape[0]
        text_ids = list(text_ids) if text_ids is not None else [f"t{i}" for i in range(n)]
        image_ids = list(image_ids) if image_ids is not None else [f"i{i}" for i in range(n)]
        data = TrainingData(
            EmbeddingBatch(tuple(text_ids), Modality.TEXT, X_text),
            EmbeddingBatch(tuple(image_ids), Modality.IMAGE, X_image),
            list(zip(text_ids, image_ids)),
            list(candidate_sets or []),
            list(scores or []),
        )
        result = train(data, cfg)
        self.state_ = result.state
        self.log_ = result.log
        self.checkpoints_ = result.checkpoints
        self.n_features_in_ = X_text.shape[1]
        return self

    def transform(self, X, modality="text"):
        check_is_fitted(self, "state_")
        X = check_matrix(X, "X", n_cols=self.n_features_in_)
        return _forward(self.state_, X, Modality(modality))[0]

    def score(self, X_text, X_image):
        """Mean of text->image and image->text recall@1 on aligned pairs."""
        Zt = self.transform(X_text, "text")
        Zi = self.transform(X_image, "image")
        S = Zt @ Zi.T
        idx = np.arange(S.shape[0])
        r_t = np.mean(np.argmax(S, axis=1) == idx)
        r_i = np.mean(np.argmax(S, axis=0) == idx)
        return float((r_t + r_i) / 2)


def config_dict(cfg):
    return asdict(cfg)
