"""Command-line driver: ``prefalign <subcommand> --run-dir DIR [--config FILE]``.

Subcommands, in pipeline order::

    synth   write embeddings.jsonl, instances.jsonl, truth.jsonl
    prep    dedup + hard-negative mining -> candidates.jsonl, dedup_report.json
    score   fill the judge score cache for every candidate set
    train   train one configuration -> runs/NAME/{checkpoints/, metrics.csv}
    eval    retrieval + fine-grained scores for a checkpoint
    gap     gap report for a checkpoint, plus the per-epoch gap curve
    sweep   train/eval/gap over a lambda grid -> sweep.csv
    report  ablation table over all evaluated runs -> report/

Every subcommand appends a record with config and file hashes to
``manifest.jsonl``. Failures exit with status 1 and a JSON error object on
stderr.
"""

import argparse
import csv
import dataclasses
import io
import json
import os
import sys

from . import experiment as ex
from .config import ExperimentConfig
from .evalkit import EvalResult, ablation_report
from .exceptions import ConfigInvalid, MissingArtifact, PrefAlignError
from .gapmetrics import GapReport
from .trainer import EncoderState, Variant, score_candidate_sets, train, write_metric_log


class Context:
    def __init__(self, args):
        self.args = args
        self.run_dir = args.run_dir
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        self.cfg = cfg
        self.quiet = args.quiet

    def path(self, *parts):
        return os.path.join(self.run_dir, *parts)

    def input(self, override, default):
        """Configured path if given, else the run-directory default; must exist."""
        p = override if override is not None else self.path(default)
        if not os.path.exists(p):
            raise MissingArtifact(f"missing artifact: {p}")
        return p

    def emit(self, obj):
        if not self.quiet:
            print(json.dumps(obj, sort_keys=True))

    def manifest(self, command, inputs=(), outputs=(), notes=None, cfg=None):
        ex.append_manifest(self.run_dir, command, (cfg or self.cfg).digest(), inputs, outputs, notes)

    # shared inputs
    def embeddings_path(self):
        return self.input(self.cfg.eval.embeddings, ex.EMBEDDINGS)

    def truth_path(self):
        return self.input(self.cfg.eval.truth, ex.TRUTH)

    def instances_path(self):
        return self.input(self.cfg.eval.instances, ex.INSTANCES)

    def cache_path(self):
        p = self.cfg.judge.cache
        return p if os.path.isabs(p) else self.path(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(ctx):
    files = ex.synthesize(ctx.cfg.world, ctx.cfg.eval.n_instances, ctx.cfg.eval.benchmark_seed)
    outputs = []
    for name, records in files.items():
        p = ctx.path(name)
        ex.write_jsonl(p, records)
        outputs.append(p)
    ctx.manifest("synth", outputs=outputs)
    ctx.emit({"concepts": ctx.cfg.world.n_concepts, "instances": len(files[ex.INSTANCES])})


def cmd_prep(ctx):
    emb, truth = ctx.embeddings_path(), ctx.truth_path()
    _, image, n_renorm = ex.read_embeddings(emb)
    pairs = ex.truth_pairs(ex.read_jsonl(truth))
    captions = ex.caption_source(pairs, ctx.cfg.mining.captions, ctx.cfg.mining.caption_seed)
    sets, report = ex.prepare(image, pairs, ctx.cfg.dedup, ctx.cfg.mining.K, captions)
    out_c, out_r = ctx.path(ex.CANDIDATES), ctx.path(ex.DEDUP_REPORT)
    ex.write_jsonl(out_c, [cs.to_dict() for cs in ex.flatten_sets(sets)])
    ex.write_json(out_r, report)
    ctx.manifest("prep", [emb, truth], [out_c, out_r], {"normalized_on_ingest": True, "n_renormalized": n_renorm})
    ctx.emit({k: report[k] for k in ("gallery", "kept", "dropped", "anchors", "K")})


def cmd_score(ctx):
    cand, truth = ctx.input(None, ex.CANDIDATES), ctx.truth_path()
    sets = ex.read_candidate_sets(cand)
    judge = ex.make_judge(ex.read_jsonl(truth), ctx.cfg.judge, ctx.cache_path())
    score_candidate_sets(sets, judge)
    ctx.manifest("score", [cand, truth], [ctx.cache_path()], {"hits": judge.hits, "misses": judge.misses})
    ctx.emit({"sets": len(sets), "cached": len(judge), "hits": judge.hits, "misses": judge.misses})


def _train_config(ctx, variant=None, lam=None):
    t = ctx.cfg.train
    if variant is not None:
        t = dataclasses.replace(t, variant=variant)
    if lam is not None:
        t = dataclasses.replace(t, lam=lam)
    return t


def _default_run_name(tcfg):
    return "baseline" if Variant(tcfg.variant) is Variant.NONE else tcfg.variant


def _load_training_inputs(ctx, tcfg):
    emb, cand = ctx.embeddings_path(), ctx.input(None, ex.CANDIDATES)
    text, image, n_renorm = ex.read_embeddings(emb)
    sets = ex.read_candidate_sets(cand)
    inputs = [emb, cand]
    if Variant(tcfg.variant) in (Variant.PAIRWISE, Variant.LISTWISE):
        cache = ctx.cache_path()
        if not os.path.exists(cache):
            raise MissingArtifact(f"missing artifact: {cache} (run 'score' first)")
        data = ex.build_training_data(text, image, sets, ex.make_judge([], ctx.cfg.judge, cache, read_only=True))
        inputs.append(cache)
    else:
        data = ex.training_data(text, image, sets)
    return data, inputs, n_renorm


def _train_run(ctx, name, tcfg, command="train"):
    data, inputs, n_renorm = _load_training_inputs(ctx, tcfg)
    result = train(data, tcfg)
    run = ctx.path("runs", name)
    os.makedirs(os.path.join(run, "checkpoints"), exist_ok=True)
    outputs = []
    for e, state in enumerate(result.checkpoints):
        p = os.path.join(run, "checkpoints", f"epoch-{e:03d}.json")
        state.save(p)
        outputs.append(p)
    metrics = os.path.join(run, "metrics.csv")
    write_metric_log(metrics, result.log)
    cfg_path = os.path.join(run, "train_config.json")
    ex.write_json(cfg_path, dataclasses.asdict(tcfg))
    outputs += [metrics, cfg_path]
    cfg = dataclasses.replace(ctx.cfg, train=tcfg)
    ctx.manifest(command, inputs, outputs, {"run": name, "n_renormalized": n_renorm}, cfg=cfg)
    return result


def cmd_train(ctx):
    tcfg = _train_config(ctx, ctx.args.variant, ctx.args.lam)
    name = ctx.args.name or _default_run_name(tcfg)
    result = _train_run(ctx, name, tcfg)
    last = result.log[-1] if result.log else None
    ctx.emit({"run": name, "steps": len(result.log), "epochs": tcfg.epochs,
              "final_loss": last.loss_total if last else None, "tau": result.state.tau, "beta": result.state.beta})


def _checkpoints(ctx, name):
    d = ctx.path("runs", name, "checkpoints")
    if not os.path.isdir(d):
        raise MissingArtifact(f"missing artifact: {d} (run 'train' first)")
    files = sorted(f for f in os.listdir(d) if f.startswith("epoch-") and f.endswith(".json"))
    if not files:
        raise MissingArtifact(f"missing artifact: no checkpoints in {d}")
    return [os.path.join(d, f) for f in files]


def _resolve_checkpoint(ctx, name, label):
    files = _checkpoints(ctx, name)
    if label == "final":
        return files[-1], "final"
    try:
        e = int(label)
    except ValueError:
        raise PrefAlignError(f"--checkpoint must be 'final' or an epoch number, got {label!r}") from None
    p = ctx.path("runs", name, "checkpoints", f"epoch-{e:03d}.json")
    if not os.path.exists(p):
        raise MissingArtifact(f"missing artifact: {p}")
    return p, f"epoch-{e:03d}"


def _target(ctx):
    """(state, checkpoint path or None, output dir, label) for eval/gap."""
    if ctx.args.raw:
        return None, None, ctx.run_dir, "raw"
    name = ctx.args.name or _default_run_name(ctx.cfg.train)
    ckpt, label = _resolve_checkpoint(ctx, name, ctx.args.checkpoint)
    return EncoderState.load(ckpt), ckpt, ctx.path("runs", name), label


def _evaluate(ctx, state, out_dir, label, extra_inputs=()):
    emb, truth, inst = ctx.embeddings_path(), ctx.truth_path(), ctx.instances_path()
    text, image, _ = ex.read_embeddings(emb)
    pairs = ex.truth_pairs(ex.read_jsonl(truth))
    res = ex.evaluate_state(state, text, image, pairs, ex.read_instances(inst), ctx.cfg.eval.ks)
    out = os.path.join(out_dir, f"eval-{label}.json")
    ex.write_json(out, res.to_dict())
    ctx.manifest("eval", [emb, truth, inst, *extra_inputs], [out])
    return res


def cmd_eval(ctx):
    state, ckpt, out_dir, label = _target(ctx)
    res = _evaluate(ctx, state, out_dir, label, [ckpt] if ckpt else [])
    ctx.emit({"checkpoint": label, "recall_at": {str(k): v for k, v in res.recall_at.items()},
              "text_score": res.text_score, "image_score": res.image_score})


GAP_CURVE_HEADER = ["epoch", "w_dist_gap", "w_disc_gap", "delta_gap"]


def _gap_row(label, g):
    return [label, repr(g.w_dist_gap), repr(g.w_disc_gap), "" if g.delta_gap is None else repr(g.delta_gap)]


def _gap(ctx, state, out_dir, label, extra_inputs=(), curve_states=None):
    emb, inst = ctx.embeddings_path(), ctx.instances_path()
    text, image, _ = ex.read_embeddings(emb)
    instances = ex.read_instances(inst)
    pooled = ctx.cfg.eval.pooled
    g = ex.gap_for_state(state, text, image, instances, pooled)
    out = os.path.join(out_dir, f"gap-{label}.json")
    ex.write_json(out, {**g.to_dict(), "delta_defined": g.delta_defined, "pooled": pooled})
    outputs = [out]
    if curve_states:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GAP_CURVE_HEADER)
        for e, path in enumerate(curve_states):
            w.writerow(_gap_row(e, ex.gap_for_state(EncoderState.load(path), text, image, instances, pooled)))
        curve = os.path.join(out_dir, "gap_curve.csv")
        with open(curve, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(buf.getvalue())
        outputs.append(curve)
    ctx.manifest("gap", [emb, inst, *extra_inputs, *(curve_states or [])], outputs)
    return g


def cmd_gap(ctx):
    state, ckpt, out_dir, label = _target(ctx)
    curve = None
    if state is not None and not ctx.args.no_curve:
        curve = _checkpoints(ctx, ctx.args.name or _default_run_name(ctx.cfg.train))
    g = _gap(ctx, state, out_dir, label, [ckpt] if ckpt else [], curve)
    ctx.emit({"checkpoint": label, **g.to_dict(), "delta_defined": g.delta_defined})


SWEEP_HEADER = ["lambda", "run", "r_at_1", "text_score", "image_score", "fine_grained_mean",
                "w_dist_gap", "w_disc_gap", "delta_gap"]


def _parse_grid(text):
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigInvalid(f"--lambdas: expected comma-separated numbers, got {text!r}") from None
    if not grid:
        raise ConfigInvalid("--lambdas: empty grid")
    return grid


def cmd_sweep(ctx):
    rows = []
    for lam in _parse_grid(ctx.args.lambdas):
        tcfg = _train_config(ctx, ctx.args.variant, lam)
        name = f"sweep-{tcfg.variant}-lambda-{lam:g}"
        _train_run(ctx, name, tcfg, command="sweep")
        ckpt = _checkpoints(ctx, name)[-1]
        state = EncoderState.load(ckpt)
        out_dir = ctx.path("runs", name)
        ev = _evaluate(ctx, state, out_dir, "final", [ckpt])
        g = _gap(ctx, state, out_dir, "final", [ckpt])
        rows.append([repr(lam), name, repr(ev.recall_at.get(1)), repr(ev.text_score), repr(ev.image_score),
                     repr(ev.fine_grained_mean), *_gap_row(None, g)[1:]])
    out = ctx.path("sweep.csv")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    ctx.manifest("sweep", outputs=[out])
    ctx.emit({"rows": len(rows), "path": out})


def cmd_report(ctx):
    runs_dir = ctx.path("runs")
    runs, inputs, curves = {}, [], []
    names = sorted(os.listdir(runs_dir)) if os.path.isdir(runs_dir) else []
    for name in names:
        ev_path = os.path.join(runs_dir, name, "eval-final.json")
        if not os.path.exists(ev_path):
            continue
        gap_path = os.path.join(runs_dir, name, "gap-final.json")
        gap = None
        if os.path.exists(gap_path):
            d = ex.read_json(gap_path)
            gap = GapReport(d["w_dist_gap"], d["w_disc_gap"], d["delta_gap"], d["n_anchors"])
            inputs.append(gap_path)
        runs[name] = (EvalResult.from_dict(ex.read_json(ev_path)), gap)
        inputs.append(ev_path)
        curve = os.path.join(runs_dir, name, "gap_curve.csv")
        if os.path.exists(curve):
            with open(curve, encoding="utf-8") as fh:
                curves += [[name, *row] for row in list(csv.reader(fh))[1:]]
            inputs.append(curve)
    if not runs:
        raise MissingArtifact(f"missing artifact: no runs/*/eval-final.json under {ctx.run_dir}")
    table = ablation_report(runs, ctx.args.baseline)
    out = ctx.path("report")
    os.makedirs(out, exist_ok=True)
    paths = {ext: os.path.join(out, f"ablation.{ext}") for ext in ("csv", "txt", "json")}
    for ext, text in (("csv", table.to_csv()), ("txt", table.to_text()), ("json", table.to_json() + "\n")):
        with open(paths[ext], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    outputs = list(paths.values())
    if curves:
        p = os.path.join(out, "gap_curves.csv")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", *GAP_CURVE_HEADER])
            w.writerows(curves)
        outputs.append(p)
    ctx.manifest("report", inputs, outputs)
    if not ctx.quiet:
        sys.stdout.write(table.to_text())


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "score": cmd_score,
    "train": cmd_train,
    "eval": cmd_eval,
    "gap": cmd_gap,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser():
    def global_flags(parser, suppress):
        # subparsers must not reset flags given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", default=d(None), help="YAML experiment config (defaults apply when omitted)")
        parser.add_argument("--run-dir", default=d("."), help="run directory (default: current directory)")
        parser.add_argument("--seed", type=int, default=d(None), help="override every seed in the config")
        parser.add_argument("--quiet", action="store_true", default=d(False), help="no summary output on stdout")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="prefalign", description=__doc__.splitlines()[0])
    global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "prep", "score"):
        sub.add_parser(name, parents=[common])

    variants = [v.value for v in Variant]
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--name", help="run name (default: 'baseline' for variant none, else the variant)")
    t.add_argument("--variant", choices=variants)
    t.add_argument("--lambda", dest="lam", type=float)

    for name in ("eval", "gap"):
        e = sub.add_parser(name, parents=[common])
        e.add_argument("--name", help="run to evaluate")
        e.add_argument("--checkpoint", default="final", help="'final' or an epoch number (0 = initial state)")
        e.add_argument("--raw", action="store_true", help="score the ingested embeddings without an encoder")
        if name == "gap":
            e.add_argument("--no-curve", action="store_true", help="skip gap_curve.csv")

    s = sub.add_parser("sweep", parents=[common])
    s.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    s.add_argument("--variant", choices=variants)

    r = sub.add_parser("report", parents=[common])
    r.add_argument("--baseline", default="baseline")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args)
        os.makedirs(ctx.run_dir, exist_ok=True)
        COMMANDS[args.command](ctx)
    except (PrefAlignError, OSError, ValueError, KeyError) as exc:
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, MissingArtifact):
            err["artifact"] = True
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
