"""File formats and pipeline stages shared by the CLI and the test-suite.

Stages are plain functions over in-memory objects; the ``read_*``/``write_*``
helpers fix the on-disk formats. A stage never reads files itself, so the
same code path serves both the CLI and direct library use.
"""

import hashlib
import json
import os

import numpy as np

from .embedcore import EmbeddingBatch, Modality, normalize_rows
from .evalkit import evaluate_embeddings
from .exceptions import MissingArtifact, PrefAlignError
from .gapmetrics import EmbeddingScorer, FineGrainedInstance, gap_report
from .judge import CachedJudge, SyntheticJudge
from .prefbuild import (
    CandidateSet,
    Direction,
    MultiCaptionSource,
    build_candidate_sets,
    semantic_dedup,
)
from .synthworld import generate_world, make_finegrained_benchmark
from .trainer import TrainingData, encode_batch, score_candidate_sets

EMBEDDINGS = "embeddings.jsonl"
INSTANCES = "instances.jsonl"
TRUTH = "truth.jsonl"
CANDIDATES = "candidates.jsonl"
DEDUP_REPORT = "dedup_report.json"
MANIFEST = "manifest.jsonl"


# ---------------------------------------------------------------------------
# file helpers


def dumps(obj):
    """Canonical JSON used for every artifact (sorted keys, repr floats)."""
    return json.dumps(obj, sort_keys=True)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")


def read_jsonl(path):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing artifact: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise PrefAlignError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing artifact: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def append_manifest(run_dir, command, config_digest, inputs=(), outputs=(), notes=None):
    """Append one record to ``manifest.jsonl``; paths are stored relative to ``run_dir``."""

    def hashes(paths):
        return {os.path.relpath(p, run_dir).replace(os.sep, "/"): file_sha256(p) for p in sorted(paths)}

    rec = {
        "command": command,
        "config_sha256": config_digest,
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
        "notes": notes or {},
    }
    with open(os.path.join(run_dir, MANIFEST), "a", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(rec) + "\n")
    return rec


# ---------------------------------------------------------------------------
# embeddings / instances / truth


def embedding_records(*batches):
    return [
        {"id": id, "modality": b.modality.value, "vec": b.values[i].tolist()}
        for b in batches
        for i, id in enumerate(b.ids)
    ]


def read_embeddings(path):
    """Text and image batches from ``embeddings.jsonl``, unit-normalized on ingest.

    Returns ``(text, image, n_renormalized)`` where the count is the number of
    input vectors whose norm was not already 1 (within 1e-9).
    """
    rows = {Modality.TEXT: ([], []), Modality.IMAGE: ([], [])}
    for rec in read_jsonl(path):
        ids, vecs = rows[Modality(rec["modality"])]
        ids.append(str(rec["id"]))
        vecs.append(rec["vec"])
    out = []
    n_renorm = 0
    for m in (Modality.TEXT, Modality.IMAGE):
        ids, vecs = rows[m]
        if not ids:
            raise PrefAlignError(f"{path}: no {m.value} embeddings")
        raw = np.asarray(vecs, dtype=np.float64)
        n_renorm += int(np.sum(np.abs(np.linalg.norm(raw, axis=1) - 1.0) > 1e-9))
        out.append(EmbeddingBatch(tuple(ids), m, normalize_rows(raw)))
    return out[0], out[1], n_renorm


def read_instances(path):
    return [FineGrainedInstance.from_dict(r) for r in read_jsonl(path)]


def truth_pairs(truth_records):
    """Ground-truth ``(text_id, image_id)`` pairs in file order."""
    return [(str(r["text"]), str(r["image"])) for r in truth_records]


def truth_latents(truth_records):
    """Item id -> latent for the synthetic judge, or ``None`` if any record lacks one."""
    out = {}
    for r in truth_records:
        if "latent" not in r:
            return None
        lat = np.asarray(r["latent"], dtype=np.float64)
        out[str(r["text"])] = lat
        out[str(r["image"])] = lat
    return out


def synthesize(world_cfg, n_instances=None, benchmark_seed=0):
    """Records for ``embeddings.jsonl``, ``instances.jsonl`` and ``truth.jsonl``.

    Embeddings are the raw (unnormalized) views; instances are the planted
    pairs, all of them unless ``n_instances`` is given.
    """
    world = generate_world(world_cfg)
    n = len(world.near_dup_pairs) if n_instances is None else n_instances
    instances = make_finegrained_benchmark(world, n, benchmark_seed) if n else []
    return {
        EMBEDDINGS: embedding_records(world.raw_batch("text", False), world.raw_batch("image", False)),
        INSTANCES: [x.to_dict() for x in instances],
        TRUTH: world.truth_records(),
    }


# ---------------------------------------------------------------------------
# offline preference construction


def prepare(image, pairs, dedup_cfg, K, captions):
    """Deduplicate the image pool, then mine candidate sets inside it.

    Only anchor pairs whose image survives deduplication are kept; the
    survivors also form the mining gallery. ``captions`` maps image id to a
    text id. Returns ``(candidate_sets, report)``.
    """
    kept = semantic_dedup(image, dedup_cfg) if dedup_cfg is not None else list(image.ids)
    kept_set = set(kept)
    gallery = image.subset(kept)
    anchors = [(t, i) for t, i in pairs if i in kept_set]
    sets = build_candidate_sets(anchors, gallery, K, captions)
    report = {
        "gallery": len(image),
        "kept": len(kept),
        "dropped": len(image) - len(kept),
        "dropped_ids": sorted(set(image.ids) - kept_set),
        "anchors": len(anchors),
        "K": int(K),
    }
    return sets, report


def caption_source(pairs, captions_path=None, seed=0):
    if captions_path is not None:
        if not os.path.exists(captions_path):
            raise MissingArtifact(f"missing artifact: {captions_path}")
        return MultiCaptionSource.from_jsonl(captions_path, seed)
    return {i: t for t, i in pairs}


def flatten_sets(sets):
    return [cs for pair in sets for cs in pair]


def pair_sets(flat):
    """Inverse of :func:`flatten_sets`: match each txt2img set with the img2txt set of its positive."""
    i2t = {cs.anchor_id: cs for cs in flat if cs.direction is Direction.IMG2TXT}
    out = []
    for cs in flat:
        if cs.direction is Direction.TXT2IMG:
            partner = i2t.get(cs.positive_id)
            if partner is None:
                raise PrefAlignError(f"no img2txt candidate set for image {cs.positive_id!r}")
            out.append((cs, partner))
    return out


def read_candidate_sets(path):
    return pair_sets([CandidateSet.from_dict(r) for r in read_jsonl(path)])


def make_judge(truth_records, judge_cfg, cache_path, read_only=False):
    """Cached synthetic judge over the truth latents; cache-only when latents are absent."""
    latents = None if read_only else truth_latents(truth_records)
    inner = SyntheticJudge(latents, judge_cfg.sharpness, judge_cfg.margin) if latents is not None else None
    return CachedJudge(inner, cache_path)


def training_data(text, image, sets, scores=None):
    anchors = [(t2i.anchor_id, t2i.positive_id) for t2i, _ in sets]
    return TrainingData(text, image, anchors, list(sets), list(scores or []))


def build_training_data(text, image, sets, judge):
    return training_data(text, image, sets, score_candidate_sets(sets, judge))


# ---------------------------------------------------------------------------
# evaluation


def embed(state, text, image):
    """Encoder outputs for both modalities, or the inputs themselves when ``state`` is None."""
    if state is None:
        return text, image
    return encode_batch(state, text), encode_batch(state, image)


def evaluate_state(state, text, image, pairs, instances, ks=(1,)):
    et, ei = embed(state, text, image)
    return evaluate_embeddings(et, ei, dict(pairs), instances, ks)


def gap_for_state(state, text, image, instances, pooled=False):
    et, ei = embed(state, text, image)
    return gap_report(instances, EmbeddingScorer(et, ei), pooled=pooled)
