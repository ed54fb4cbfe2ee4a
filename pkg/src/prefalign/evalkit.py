"""Retrieval and fine-grained evaluation, plus ablation tables."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import KTooLarge, MissingBaseline, MissingScore, MissingTruth
from .gapmetrics import EmbeddingScorer


def _rank_of_truth(sims, ids, truth_col):
    """0-based rank of the true item; ties are ordered by ascending id."""
    s_true = sims[truth_col]
    t_id = ids[truth_col]
    better = int(np.sum(sims > s_true))
    tied_before = sum(1 for j in np.flatnonzero(sims == s_true) if ids[j] < t_id)
    return better + tied_before


def recall_at_k(queries, gallery, truth, k):
    """Fraction of queries whose true gallery item ranks in the top ``k`` by cosine."""
    k = int(k)
    if k < 1 or k > len(gallery):
        raise KTooLarge(f"k={k} for a gallery of {len(gallery)}")
    sims = np.clip(queries.values @ gallery.values.T, -1.0, 1.0)
    hits = 0
    for q, qid in enumerate(queries.ids):
        if qid not in truth:
            raise MissingTruth(f"no ground truth for query {qid!r}")
        gid = truth[qid]
        if gid not in gallery:
            raise MissingTruth(f"true item {gid!r} of query {qid!r} is not in the gallery")
        if _rank_of_truth(sims[q], gallery.ids, gallery.index_of(gid)) < k:
            hits += 1
    return hits / len(queries)


@dataclass
class EvalResult:
    recall_at: dict = field(default_factory=dict)
    text_score: float = 0.0
    image_score: float = 0.0
    per_instance: list = field(default_factory=list)
    recall_directional: dict = field(default_factory=dict)

    @property
    def fine_grained_mean(self):
        return (self.text_score + self.image_score) / 2

    def to_dict(self):
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "recall_directional": dict(sorted(self.recall_directional.items())),
            "text_score": self.text_score,
            "image_score": self.image_score,
            "per_instance": [[bool(t), bool(i)] for t, i in self.per_instance],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            {int(k): float(v) for k, v in d.get("recall_at", {}).items()},
            float(d["text_score"]),
            float(d["image_score"]),
            [tuple(x) for x in d.get("per_instance", [])],
            dict(d.get("recall_directional", {})),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def winoground_scores(instances, scorer):
    """Text and Image scores over two-pair instances.

    Image correct: ``s(t0,i0) > s(t0,i1)`` and ``s(t1,i1) > s(t1,i0)``.
    Text correct: ``s(i0,t0) > s(i0,t1)`` and ``s(i1,t1) > s(i1,t0)``.
    Ties count as wrong.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("no instances to score")

    def s(a, b):
        try:
            return scorer(a, b)
        except KeyError as exc:
            raise MissingScore(f"no score for ({a!r}, {b!r})") from exc

    per = []
    for x in instances:
        image_ok = s(x.t0, x.i0) > s(x.t0, x.i1) and s(x.t1, x.i1) > s(x.t1, x.i0)
        text_ok = s(x.i0, x.t0) > s(x.i0, x.t1) and s(x.i1, x.t1) > s(x.i1, x.t0)
        per.append((bool(text_ok), bool(image_ok)))
    text = sum(t for t, _ in per) / len(per)
    image = sum(i for _, i in per) / len(per)
    return EvalResult({}, text, image, per)


def group_by_tag(result, tags):
    """Per-tag Text/Image scores; ``tags[i]`` labels ``result.per_instance[i]``."""
    groups = {}
    for (t, i), tag in zip(result.per_instance, tags):
        groups.setdefault(tag, []).append((t, i))
    return {
        tag: {"text_score": sum(t for t, _ in v) / len(v), "image_score": sum(i for _, i in v) / len(v), "n": len(v)}
        for tag, v in sorted(groups.items())
    }


def evaluate_embeddings(text, image, truth, instances, ks=(1,), scorer=None):
    """Recall@k in both directions plus fine-grained scores for one embedding set.

    ``truth`` maps text id -> image id; its inverse is used for image->text.
    ``recall_at[k]`` is the mean of the two directions, which are kept in
    ``recall_directional`` under ``"t2i@k"`` and ``"i2t@k"``.
    """
    inverse = {v: k for k, v in truth.items()}
    fg = winoground_scores(instances, scorer or EmbeddingScorer(text, image))
    for k in ks:
        t2i = recall_at_k(text, image, truth, k)
        i2t = recall_at_k(image, text, inverse, k)
        fg.recall_directional[f"t2i@{k}"] = t2i
        fg.recall_directional[f"i2t@{k}"] = i2t
        fg.recall_at[int(k)] = (t2i + i2t) / 2
    return fg


METRIC_COLUMNS = ("r_at_1", "text_score", "image_score", "fine_grained_mean", "w_dist_gap", "w_disc_gap", "delta_gap")


def _run_metrics(run):
    ev, gap = run
    r1 = ev.recall_at.get(1)
    return {
        "r_at_1": r1,
        "text_score": ev.text_score,
        "image_score": ev.image_score,
        "fine_grained_mean": ev.fine_grained_mean,
        "w_dist_gap": gap.w_dist_gap if gap is not None else None,
        "w_disc_gap": gap.w_disc_gap if gap is not None else None,
        "delta_gap": gap.delta_gap if gap is not None else None,
    }


def _delta(a, b):
    if a is None or b is None:
        return None
    return a - b


@dataclass
class AblationTable:
    baseline: str
    rows: list  # (name, metrics dict, deltas dict)

    @property
    def delta_rows(self):
        """Rows other than the baseline."""
        return [r for r in self.rows if r[0] != self.baseline]

    def to_dict(self):
        return {"baseline": self.baseline, "rows": [{"name": n, "metrics": m, "delta": d} for n, m, d in self.rows]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", *METRIC_COLUMNS, *(f"delta_{c}" for c in METRIC_COLUMNS)])
        for name, m, d in self.rows:
            w.writerow([name, *("" if m[c] is None else repr(m[c]) for c in METRIC_COLUMNS),
                        *("" if d[c] is None else repr(d[c]) for c in METRIC_COLUMNS)])
        return buf.getvalue()

    def to_text(self):
        def fmt(v, signed=False):
            if v is None:
                return "n/a"
            return f"{v:+.4f}" if signed else f"{v:.4f}"

        header = ["run", *METRIC_COLUMNS]
        lines = [header]
        for name, m, d in self.rows:
            cells = [name]
            for c in METRIC_COLUMNS:
                cell = fmt(m[c])
                if name != self.baseline:
                    cell += f" ({fmt(d[c], True)})"
                cells.append(cell)
            lines.append(cells)
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines) + "\n"


def ablation_report(runs, baseline="baseline"):
    """Metric table with deltas against the baseline run.

    ``runs`` maps a run name to ``(EvalResult, GapReport or None)``.
    """
    if baseline not in runs:
        raise MissingBaseline(f"no run named {baseline!r}")
    if len(runs) < 2:
        raise ValueError("an ablation needs at least two runs")
    base = _run_metrics(runs[baseline])
    rows = []
    for name in [baseline, *sorted(k for k in runs if k != baseline)]:
        m = _run_metrics(runs[name])
        rows.append((name, m, {c: _delta(m[c], base[c]) for c in METRIC_COLUMNS}))
    return AblationTable(baseline, rows)
