"""Command-line entry point: ``tangle <subcommand> ...``.

Exit codes: 0 success, 1 domain failure, 2 usage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import analysis, dataio, evaluation, training
from .errors import TangleError

log = logging.getLogger("tangle")

SUBCOMMANDS = ("pretrain", "embed", "probe", "prototype", "retrieve", "rank", "attribute", "synth")


EMBEDDINGS_CSV = "slide_embeddings.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _read_config(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise TangleError(f"config file {path} must hold a mapping")
    return data


def _prepare_out(out: str, snapshot: dict) -> Path:
    """Create the run directory (atomically when new) holding the config snapshot."""
    target = Path(out)
    payload = json.dumps(snapshot, sort_keys=True, indent=2, default=str) + "\n"
    if target.exists():
        if not target.is_dir():
            raise TangleError(f"output path {target} exists and is not a directory")
        (target / "run_config.json").write_text(payload)
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    (tmp / "run_config.json").write_text(payload)
    try:
        os.rename(tmp, target)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        if not target.is_dir():
            raise
        (target / "run_config.json").write_text(payload)
    return target


def _snapshot(args, **resolved) -> dict:
    opts = {k: v for k, v in vars(args).items() if k not in ("out", "func", "log_level")}
    return {"subcommand": args.command, "options": opts, **resolved}


def write_embedding_table(path, ids, X) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id"] + [f"e{j}" for j in range(X.shape[1])])
        for sid, row in zip(ids, X):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_embedding_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "slide_id":
            raise TangleError(f"{path}: expected a 'slide_id,e0,...' header")
        ids, rows = [], []
        for row in reader:
            if row:
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
    if not ids:
        raise TangleError(f"{path}: no embeddings")
    return ids, np.array(rows)


def _embeddings_source(args) -> tuple[list[str], np.ndarray]:
    """Precomputed embeddings, or embed the manifest on the fly with a checkpoint."""
    if getattr(args, "embeddings", None):
        path = Path(args.embeddings)
        return read_embedding_table(path / EMBEDDINGS_CSV if path.is_dir() else path)
    if getattr(args, "ckpt", None) and getattr(args, "manifest", None):
        ckpt = training.load_checkpoint(args.ckpt)
        ds = dataio.load_dataset(args.manifest, getattr(args, "split", None))
        X, _ = evaluation.embed_dataset(ckpt, ds)
        return ds.slide_ids, X
    raise UsageError(f"{args.command}: give --embeddings, or --ckpt together with --manifest")


def _manifest_index(path) -> dict[str, dataio.ManifestRecord]:
    return {r.slide_id: r for r in dataio.load_manifest(path, check_files=False)}


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _id_list(text: str) -> list[str]:
    if text.startswith("@"):
        return [line.strip() for line in Path(text[1:]).read_text().splitlines() if line.strip()]
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> None:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = dataio.SynthConfig.from_dict(raw)
    cfg.validate()
    out = _prepare_out(args.out, _snapshot(args, synth_config=asdict(cfg)))
    ds = dataio.synth_generate(cfg, out)
    log.info("synth: wrote %d slides to %s", len(ds), out)


def cmd_pretrain(args) -> None:
    raw = _read_config(args.config)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("patches_per_slide", "patches_per_slide"), ("lr_peak", "lr_peak")):
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    cfg = training.TrainConfig.from_dict(raw)
    out = _prepare_out(args.out, _snapshot(args, train_config=cfg.to_dict()))
    ds = dataio.load_dataset(args.manifest, args.split)
    log.info("pretrain: %d records, %d-dim patches, %d genes", len(ds), ds.patch_dim, ds.n_genes)
    ckpt, rows = training.pretrain(ds, cfg)
    training.save_checkpoint(ckpt, out / "checkpoint.tngl")
    training.write_loss_log(out / "loss_log.csv", rows)
    means = training.epoch_means(rows)
    log.info("pretrain: epoch-mean loss %.5f -> %.5f over %d steps", means[0], means[max(means)], ckpt.step)


def cmd_embed(args) -> None:
    out = _prepare_out(args.out, _snapshot(args))
    ckpt = training.load_checkpoint(args.ckpt)
    ds = dataio.load_dataset(args.manifest, args.split)
    X, attention = evaluation.embed_dataset(ckpt, ds)
    write_embedding_table(out / EMBEDDINGS_CSV, ds.slide_ids, X)
    if args.attention:
        (out / "attention").mkdir(exist_ok=True)
        for sid, pes, a in zip(ds.slide_ids, ds.patches, attention):
            coords = pes.coords if pes.coords is not None else np.zeros((len(a), 2))
            analysis.export_attention(sid, coords, a, out / "attention" / f"{sid}.csv")
    log.info("embed: %d slide embeddings of dimension %d", X.shape[0], X.shape[1])


def cmd_probe(args) -> None:
    ids, X = _embeddings_source(args)
    labels_path = args.labels or args.manifest
    if labels_path is None:
        raise UsageError("probe: --labels (a manifest) is required")
    out = _prepare_out(args.out, _snapshot(args))
    index = _manifest_index(labels_path)
    missing = [s for s in ids if s not in index]
    if missing:
        raise TangleError(f"{len(missing)} embedded slides have no labels, e.g. {missing[0]!r}")
    Y = np.array([index[s].labels for s in ids], dtype=np.float64)
    rows = []
    for k in args.k:
        aucs = evaluation.few_shot_eval(X, Y, k, args.runs, args.seed, args.l2)
        rows += [{"task": "probe", "k": k, "run": r, "metric": "macro_auc", "value": v} for r, v in enumerate(aucs)]
        log.info("probe: k=%d macro-AUC %.4f ± %.4f", k, np.mean(aucs), np.std(aucs))
    evaluation.write_results(out / "results.csv", rows)


def cmd_prototype(args) -> None:
    ids, X = _embeddings_source(args)
    out = _prepare_out(args.out, _snapshot(args))
    pos_ids, normal_ids = _id_list(args.pos_ids), _id_list(args.normal_ids)
    where = {s: i for i, s in enumerate(ids)}
    for s in pos_ids + normal_ids:
        if s not in where:
            raise TangleError(f"prototype slide {s!r} has no embedding")
    index = _manifest_index(args.labels) if args.labels else None
    rows, preds = [], []
    for k in args.k:
        if k > len(pos_ids) or k > len(normal_ids):
            raise TangleError(f"k={k} exceeds the {len(pos_ids)} positive / {len(normal_ids)} normal candidates")
        for run in range(args.runs):
            rng = np.random.default_rng([args.seed, k, run])
            pos = [pos_ids[i] for i in rng.choice(len(pos_ids), k, replace=False)]
            nor = [normal_ids[i] for i in rng.choice(len(normal_ids), k, replace=False)]
            p_pos = evaluation.build_prototype([X[where[s]] for s in pos], evaluation.POSITIVE)
            p_nor = evaluation.build_prototype([X[where[s]] for s in nor], evaluation.NORMAL)
            used = set(pos) | set(nor)
            queries = [s for s in ids if s not in used]
            scores = []
            for s in queries:
                score, label = evaluation.prototype_classify(X[where[s]], p_pos, p_nor)
                scores.append(score)
                preds.append((k, run, s, score, label))
            if index is not None:
                y = np.array([index[s].labels[args.positive_class] for s in queries], dtype=np.float64)
                auc = evaluation.macro_auc(np.array(scores), y)
                rows.append({"task": "prototype", "k": k, "run": run, "metric": "auc", "value": auc})
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "run", "slide_id", "score", "label"])
        for k, run, s, score, label in preds:
            w.writerow([k, run, s, repr(score), label])
    if rows:
        evaluation.write_results(out / "results.csv", rows)


def cmd_retrieve(args) -> None:
    ids, X = _embeddings_source(args)
    groups_path = args.groups or args.manifest
    if groups_path is None:
        raise UsageError("retrieve: --groups (a manifest with group_id) is required")
    out = _prepare_out(args.out, _snapshot(args))
    index = _manifest_index(groups_path)
    groups = [index[s].group_id if s in index else None for s in ids]
    rows = []
    kmax = max(args.k)
    with open(out / "rankings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank", "slide_id"])
        for qid in ids:
            for r, sid in enumerate(evaluation.retrieve(qid, ids, X, min(kmax, len(ids) - 1)), start=1):
                w.writerow([qid, r, sid])
    for k in args.k:
        value = evaluation.mean_recall_at_k(ids, X, groups, k)
        rows.append({"task": "retrieve", "k": k, "run": 0, "metric": "recall_at_k", "value": value})
        rows.append({"task": "retrieve", "k": k, "run": 0, "metric": "random_recall_at_k",
                     "value": evaluation.random_recall_expectation(groups, k)})
        log.info("retrieve: Recall@%d = %.4f", k, value)
    evaluation.write_results(out / "results.csv", rows)


def cmd_rank(args) -> None:
    _, X = _embeddings_source(args)
    out = _prepare_out(args.out, _snapshot(args))
    report = analysis.rankme(X, args.epsilon)
    analysis.write_rank_report(out / "rank.csv", report)
    log.info("rank: smooth rank %.4f (n=%d, d=%d)", report.smooth_rank, report.n, report.d)


def cmd_attribute(args) -> None:
    out = _prepare_out(args.out, _snapshot(args))
    ckpt = training.load_checkpoint(args.ckpt)
    reference = None
    if args.reference_embeddings:
        ref_ids, ref_X = read_embedding_table(args.reference_embeddings)
        if args.reference_id not in ref_ids:
            raise TangleError(f"reference slide {args.reference_id!r} not in {args.reference_embeddings}")
        reference = ref_X[ref_ids.index(args.reference_id)]
    target = args.target or ("cosine" if reference is not None else "projection")
    baseline_profile = None
    if args.baseline != "zero":
        baseline_profile = dataio.load_expression(args.baseline)
    attributions = []
    for path in args.expression:
        prof = dataio.load_expression(path)
        if baseline_profile is not None and baseline_profile.gene_ids != prof.gene_ids:
            raise TangleError(f"baseline genes differ from {path}")
        attr = analysis.integrated_gradients(
            ckpt, prof.values, None if baseline_profile is None else baseline_profile.values,
            args.steps, target, reference, prof.gene_ids)
        attr.sample_id = Path(path).stem
        attributions.append(attr)
        log.info("attribute: %s completeness residual %.3g (delta %.4g)", attr.sample_id, attr.residual, attr.delta)
    with open(out / "attributions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "gene_id", "score"])
        for a in attributions:
            for gene, s in zip(a.gene_ids, a.scores):
                w.writerow([a.sample_id, gene, repr(float(s))])
    with open(out / "completeness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "steps", "target", "delta", "residual"])
        for a in attributions:
            w.writerow([a.sample_id, a.steps, a.target, repr(a.delta), repr(a.residual)])
    k = min(args.top_k, len(attributions[0].scores))
    analysis.write_frequency_table(out / "top_genes.csv", analysis.top_gene_frequency(attributions, k))


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tangle", description="Slide/expression pretraining and slide-embedding evaluation.")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic slide/expression corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="contrastive slide/expression pretraining")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", help="only use manifest records with this split tag")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patches-per-slide", type=int)
    s.add_argument("--lr-peak", type=float)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("embed", help="infer slide embeddings with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--attention", action="store_true", help="also export per-slide attention CSVs")
    s.set_defaults(func=cmd_embed)

    def source(sp):
        sp.add_argument("--embeddings", help="precomputed slide_embeddings.csv, or the embed run directory holding it")
        sp.add_argument("--ckpt", help="checkpoint to embed --manifest on the fly")
        sp.add_argument("--manifest")
        sp.add_argument("--split")

    s = sub.add_parser("probe", help="few-shot linear probing (macro-AUC)")
    source(s)
    s.add_argument("--labels", help="manifest providing labels (defaults to --manifest)")
    s.add_argument("--k", type=_int_list, default=[10])
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--l2", type=float, default=1e-4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("prototype", help="prototype classification by L2 distance")
    source(s)
    s.add_argument("--pos-ids", required=True, help="comma-separated ids or @file")
    s.add_argument("--normal-ids", required=True, help="comma-separated ids or @file")
    s.add_argument("--k", type=_int_list, default=[1, 3, 5])
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labels", help="manifest for scoring predictions")
    s.add_argument("--positive-class", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prototype)

    s = sub.add_parser("retrieve", help="slide retrieval with Recall@k")
    source(s)
    s.add_argument("--groups", help="manifest providing group_id (defaults to --manifest)")
    s.add_argument("--k", type=_int_list, default=[5, 10, 20])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("rank", help="smooth rank of the embedding matrix")
    source(s)
    s.add_argument("--epsilon", type=float, default=analysis.RANKME_EPS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("attribute", help="Integrated Gradients over the expression encoder")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--expression", required=True, nargs="+")
    s.add_argument("--steps", type=int, default=128)
    s.add_argument("--baseline", default="zero", help="'zero' or an expression CSV")
    s.add_argument("--target", choices=["cosine", "projection"])
    s.add_argument("--reference-embeddings", help="slide_embeddings.csv holding the reference slide")
    s.add_argument("--reference-id")
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attribute)
    return p


def _thread_limit():
    value = os.environ.get("TANGLE_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tangle: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s")
    if args.command == "attribute" and bool(args.reference_embeddings) != bool(args.reference_id):
        print("tangle: error: --reference-embeddings and --reference-id go together", file=sys.stderr)
        return 2
    try:
        with _thread_limit():
            args.func(args)
    except UsageError as exc:
        print(f"tangle: error: {exc}", file=sys.stderr)
        return 2
    except (TangleError, OSError, KeyError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
