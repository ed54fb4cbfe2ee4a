"""Alignment judges: yes/no logits to scores, a synthetic judge, and a JSONL cache.

A judge answers "does this candidate match this anchor?" with a pair of
logits. Any external model can be plugged in by writing its logits to the
score-cache format and replaying them through :class:`CachedJudge`.
"""

import json
import math
import os
import threading
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .exceptions import CacheCorrupt, CacheMiss, DimensionMismatch, JudgeFailure, NonFiniteLogit
from .validation import check_positive, check_vector

DEFAULT_MARGIN = 0.5


@dataclass(frozen=True)
class JudgeLogits:
    l_yes: float
    l_no: float

    def __post_init__(self):
        if not (math.isfinite(self.l_yes) and math.isfinite(self.l_no)):
            raise NonFiniteLogit(f"non-finite logits ({self.l_yes}, {self.l_no})")


def score_from_logits(l):
    """Probability of "yes" under a two-way softmax of the logits.

    Computed as ``exp(l_yes - m) / (exp(l_yes - m) + exp(l_no - m))`` with
    ``m = max(l_yes, l_no)``, so large logits never overflow.
    """
    if not isinstance(l, JudgeLogits):
        l = JudgeLogits(float(l[0]), float(l[1]))
    m = max(l.l_yes, l.l_no)
    ey = math.exp(l.l_yes - m)
    en = math.exp(l.l_no - m)
    return ey / (ey + en)


def synthetic_judge_logits(latent_a, latent_b, sharpness, margin=DEFAULT_MARGIN):
    """Logits of a judge that sees ground-truth latents.

    ``l_yes = sharpness * (cos(latent_a, latent_b) - margin)`` and ``l_no = 0``.
    """
    a = check_vector(latent_a, "latent_a")
    b = check_vector(latent_b, "latent_b")
    if a.shape != b.shape:
        raise DimensionMismatch(f"latent dims differ: {a.shape[0]} vs {b.shape[0]}")
    sharpness = check_positive(sharpness, "sharpness")
    cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    cos = min(1.0, max(-1.0, cos))
    return JudgeLogits(sharpness * (cos - margin), 0.0)


class AlignmentJudge(Protocol):
    def judge(self, anchor_id: str, candidate_id: str) -> JudgeLogits: ...


class SyntheticJudge:
    """Judge backed by an id -> latent lookup."""

    def __init__(self, latents, sharpness=4.0, margin=DEFAULT_MARGIN):
        self.latents = dict(latents)
        self.sharpness = check_positive(sharpness, "sharpness")
        self.margin = float(margin)
        self.calls = 0

    def judge(self, anchor_id, candidate_id):
        self.calls += 1
        return synthetic_judge_logits(self.latents[anchor_id], self.latents[candidate_id], self.sharpness, self.margin)


class ConstantJudge:
    def __init__(self, l_yes=0.0, l_no=0.0):
        self.logits = JudgeLogits(float(l_yes), float(l_no))

    def judge(self, anchor_id, candidate_id):
        return self.logits


def batch_score(anchor_id, candidates, judge):
    """Alignment score for each candidate, in candidate order.

    ``candidates`` is a :class:`~prefalign.prefbuild.CandidateSet` or a plain
    sequence of ids.
    """
    ids = list(getattr(candidates, "candidate_ids", candidates))
    if not ids:
        raise ValueError("candidate set is empty")
    out = np.empty(len(ids))
    for k, cid in enumerate(ids):
        try:
            out[k] = score_from_logits(judge.judge(anchor_id, cid))
        except Exception as exc:
            raise JudgeFailure(k, cid, exc) from exc
    return out


def _parse_record(line, lineno, path):
    try:
        rec = json.loads(line)
        key = (str(rec["anchor"]), str(rec["candidate"]))
        logits = JudgeLogits(float(rec["l_yes"]), float(rec["l_no"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheCorrupt(f"{path}:{lineno}: {exc}") from None
    return key, logits


def read_score_cache(path):
    """Load a score-cache JSONL file; for duplicate keys the last record wins."""
    records = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            key, logits = _parse_record(line, lineno, path)
            records[key] = logits
    return records


def format_cache_record(anchor_id, candidate_id, logits):
    return json.dumps(
        {"anchor": anchor_id, "candidate": candidate_id, "l_yes": logits.l_yes, "l_no": logits.l_no}
    )


class CachedJudge:
    """Memoizing judge persisted as JSONL.

    Misses are delegated to ``inner`` and appended to ``cache_path``; hits
    replay the stored logits exactly (floats are written with ``repr``
    precision). With ``inner=None`` or ``read_only=True`` an unknown pair
    raises :class:`CacheMiss`.
    """

    def __init__(self, inner, cache_path, read_only=False):
        self.inner = inner
        self.cache_path = os.fspath(cache_path)
        self.read_only = read_only or inner is None
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        if os.path.exists(self.cache_path):
            self._records = read_score_cache(self.cache_path)
        elif self.read_only:
            raise CacheMiss(f"score cache {self.cache_path} does not exist")
        else:
            self._records = {}

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return key in self._records

    def judge(self, anchor_id, candidate_id):
        key = (anchor_id, candidate_id)
        with self._lock:
            hit = self._records.get(key)
            if hit is not None:
                self.hits += 1
                return hit
            if self.read_only:
                raise CacheMiss(f"no cached logits for {key}")
            self.misses += 1
            logits = self.inner.judge(anchor_id, candidate_id)
            with open(self.cache_path, "a", encoding="utf-8") as fh:
                fh.write(format_cache_record(anchor_id, candidate_id, logits) + "\n")
            self._records[key] = logits
            return logits
