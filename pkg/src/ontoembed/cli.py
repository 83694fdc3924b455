"""Command-line entry point.

Subcommands: verbalize, train (contrastive | sts | self-distill | xlingual),
soup, eval, embed, pipeline. Every command writes its outputs atomically
(temp file + rename) and, on success, drops a run manifest next to each
primary output with the config snapshot, seed and input digests needed to
re-run it bit-identically. Exit codes: 0 success, 1 I/O, 2 domain or
validation failure, 64 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import encoder as enc
from . import evalsuite as ev
from . import ontology as onto
from . import soup as soup_mod
from . import trainer

log = logging.getLogger("ontoembed")

EXIT_OK = 0
EXIT_IO = 1
EXIT_DOMAIN = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Small helpers


def _atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_output: str, command: str, config: dict,
                    inputs: list[str], seed, outputs: list[str],
                    started: float, metrics: dict) -> str:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.time() - started, 3),
        "metrics": metrics,
    }
    path = f"{primary_output}.manifest.json"
    _atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _save_checkpoint(path: str, ckpt: enc.Checkpoint) -> None:
    _atomic_write_bytes(path, enc.checkpoint_to_bytes(ckpt))


def _load_kg(ontology_path, templates_path=None, glossary_path=None):
    kg = onto.load_ontology(ontology_path)
    if templates_path:
        kg = kg.with_templates(onto.load_templates(templates_path))
    stats = None
    if glossary_path:
        kg, stats = onto.merge_glossary(kg, glossary_path)
    return kg, stats


def _fmt_float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# verbalize


def cmd_verbalize(args) -> int:
    started = time.time()
    kg, gloss_stats = _load_kg(args.ontology, args.templates, args.glossary)
    pairs = onto.build_corpus(kg, args.per_concept, args.seed)
    lines = [onto.corpus_line(p) for p in pairs]
    _atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    metrics = {"pairs": len(pairs), "concepts": len(kg)}
    if gloss_stats:
        metrics["glossary_added"] = gloss_stats.added
        metrics["glossary_skipped"] = gloss_stats.skipped_unknown
    inputs = [args.ontology, args.templates] + ([args.glossary] if args.glossary else [])
    _write_manifest(args.out, "verbalize", vars_snapshot(args), inputs,
                    args.seed, [args.out], started, metrics)
    print(f"wrote {len(pairs)} training pairs to {args.out}")
    return EXIT_OK


def vars_snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}


# ---------------------------------------------------------------------------
# train


def _train_cfg_from_args(args) -> trainer.TrainConfig:
    mapping = trainer.parse_kv_file(args.config) if args.config else {}
    cfg = trainer.train_config_from_mapping(mapping)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _base_checkpoint(args, mapping: dict[str, str]) -> enc.Checkpoint:
    if args.base:
        return enc.load_checkpoint(args.base)
    config = enc.config_from_mapping(mapping)
    return enc.Checkpoint(config=config, phase="base", params=enc.init_params(config))


def cmd_train(args) -> int:
    started = time.time()
    mapping = trainer.parse_kv_file(args.config) if args.config else {}
    cfg = _train_cfg_from_args(args)
    inputs = [p for p in (args.config,) if p]

    if args.phase == "contrastive":
        if not args.corpus:
            raise UsageError("train contrastive requires --corpus")
        base = _base_checkpoint(args, mapping)
        corpus = onto.load_corpus(args.corpus)
        kg, _ = _load_kg(args.ontology, args.templates) if args.ontology \
            else (onto.KnowledgeGraph({}), None)
        if cfg.hard_negatives_per_batch > 0 and not args.ontology:
            raise UsageError("--ontology is required when hard negatives are enabled")
        ckpt, stats = trainer.train_contrastive(base, corpus, kg, cfg)
        inputs += [p for p in (args.base, args.corpus, args.ontology, args.templates) if p]
    elif args.phase == "sts":
        if not args.data:
            raise UsageError("train sts requires --data")
        base = _base_checkpoint(args, mapping)
        dataset = ev.load_sts_dataset(args.data)
        ckpt, stats = trainer.adapt_sts(base, dataset, cfg)
        inputs += [p for p in (args.base, args.data) if p]
    elif args.phase == "self-distill":
        if not (args.base and args.teacher and args.ontology and args.templates):
            raise UsageError(
                "train self-distill requires --base, --teacher, --ontology and --templates"
            )
        base = enc.load_checkpoint(args.base)
        teacher = enc.load_checkpoint(args.teacher)
        kg, _ = _load_kg(args.ontology, args.templates, args.glossary)
        _, targets = trainer.build_targets(teacher, kg, k=args.pca_dim)
        ckpt, stats = trainer.train_self_distill(base, targets, kg, cfg)
        inputs += [p for p in (args.base, args.teacher, args.ontology,
                               args.templates, args.glossary) if p]
    elif args.phase == "xlingual":
        if not (args.teacher and args.pairs):
            raise UsageError("train xlingual requires --teacher and --pairs")
        teacher = enc.load_checkpoint(args.teacher)
        pairs = onto.load_parallel_pairs(args.pairs)
        student_cfg = enc.config_from_mapping(mapping, defaults=teacher.config)
        ckpt, stats = trainer.train_xlingual(teacher, student_cfg, pairs, cfg)
        inputs += [args.teacher, args.pairs]
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown phase {args.phase!r}")

    _save_checkpoint(args.out, ckpt)
    metrics = {"steps": stats.steps, "final_loss": stats.final_loss,
               "phase": ckpt.phase}
    _write_manifest(args.out, f"train {args.phase}", vars_snapshot(args),
                    inputs, cfg.seed, [args.out], started, metrics)
    print(f"phase={ckpt.phase} steps={stats.steps} final_loss={stats.final_loss:.6f} "
          f"-> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# soup


def _metric_fn(metric: str, args):
    if metric == "pearson":
        dataset = ev.load_sts_dataset(args.val)
        return lambda ckpt: ev.eval_sts(ckpt, dataset).value
    if metric == "spearman":
        dataset = ev.load_bcr_dataset(args.val)
        return lambda ckpt: ev.eval_bcr(ckpt, dataset).value
    if metric == "nel-top1":
        if not args.ontology:
            raise UsageError("--ontology is required with --metric nel-top1")
        kg, _ = _load_kg(args.ontology)
        dataset = ev.load_nel_dataset(args.val)
        return lambda ckpt: ev.eval_nel(ckpt, kg, dataset, [1])[0].value
    raise UsageError(f"unknown metric {metric!r}")


def cmd_soup(args) -> int:
    started = time.time()
    if args.strategy == "greedy" and not args.val:
        raise UsageError("greedy soup requires --val")
    evaluate = _metric_fn(args.metric, args) if args.val else None
    inputs = []
    candidates: list[soup_mod.SoupCandidate] = []

    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            listing = json.load(fh)
        inputs.append(args.manifest)
        for entry in listing["candidates"]:
            ckpt = enc.load_checkpoint(entry["path"])
            inputs.append(entry["path"])
            label = entry.get("label") or os.path.basename(entry["path"])
            candidates.append(soup_mod.candidate_from_checkpoint(
                ckpt, float(entry["score"]), label))
    elif args.models:
        if evaluate is None:
            raise UsageError("--val is required when candidates carry no scores")
        for path in args.models:
            ckpt = enc.load_checkpoint(path)
            inputs.append(path)
            candidates.append(soup_mod.candidate_from_checkpoint(
                ckpt, evaluate(ckpt), os.path.basename(path)))
    else:
        raise UsageError("soup needs --models or --manifest")

    scores = {c.label: c.validation_score for c in candidates}
    if args.strategy == "uniform":
        result = soup_mod.uniform_soup(candidates)
        kept = sorted(c.label for c in candidates)
    else:
        result, kept = soup_mod.greedy_soup(candidates, evaluate)
    if args.val:
        inputs.append(args.val)

    soup_score = evaluate(result) if evaluate else None
    _save_checkpoint(args.out, result)
    report = {
        "strategy": args.strategy,
        "metric": args.metric,
        "ingredient_scores": scores,
        "kept": kept,
        "rejected": sorted(set(scores) - set(kept)),
        "soup_score": soup_score,
    }
    report_path = f"{args.out}.soup_report.json"
    _atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_manifest(args.out, "soup", vars_snapshot(args), inputs, None,
                    [args.out, report_path], started,
                    {"kept": len(kept), "soup_score": soup_score})
    print(f"soup of {len(kept)}/{len(candidates)} ingredients -> {args.out}"
          + (f" (score {soup_score:.6f})" if soup_score is not None else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    started = time.time()
    model = enc.load_checkpoint(args.model)
    inputs = [args.model, args.data]
    if args.benchmark == "sts":
        reports = [ev.eval_sts(model, ev.load_sts_dataset(args.data))]
    elif args.benchmark == "bcr":
        reports = [ev.eval_bcr(model, ev.load_bcr_dataset(args.data))]
    elif args.benchmark == "nel":
        if not args.ontology:
            raise UsageError("eval nel requires --ontology")
        kg, _ = _load_kg(args.ontology)
        inputs.append(args.ontology)
        k_list = [int(k) for k in args.topk.split(",")]
        reports = ev.eval_nel(model, kg, ev.load_nel_dataset(args.data), k_list)
    else:
        reports = [ev.eval_nli_triplets(model, ev.load_nli_dataset(args.data))]

    lines = [r.to_json() for r in reports]
    for line in lines:
        print(line)
    _atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    _write_manifest(args.out, f"eval {args.benchmark}", vars_snapshot(args),
                    inputs, None, [args.out], started,
                    {r.metric: r.value for r in reports})
    return EXIT_OK


# ---------------------------------------------------------------------------
# embed


def cmd_embed(args) -> int:
    started = time.time()
    model = enc.load_checkpoint(args.model)
    with open(args.infile, encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh]
    out_lines = []
    for text in texts:
        if "\t" in text:
            raise ValueError("input texts must not contain tab characters")
        emb = enc.encode(model.params, model.config, text)
        out_lines.append(text + "\t" + ",".join(_fmt_float(x) for x in emb))
    _atomic_write_text(args.out, "".join(line + "\n" for line in out_lines))
    _write_manifest(args.out, "embed", vars_snapshot(args), [args.model, args.infile],
                    None, [args.out], started, {"rows": len(out_lines)})
    print(f"embedded {len(out_lines)} texts -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _phase_cfg(mapping: dict[str, str], prefix: str, seed: int) -> trainer.TrainConfig:
    """Phase config from prefixed keys; the pipeline-derived seed applies
    unless the config pins one explicitly for this phase."""
    cfg = trainer.train_config_from_mapping(mapping, prefix=prefix)
    if prefix + "seed" not in mapping:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def cmd_pipeline(args) -> int:
    started = time.time()
    mapping = trainer.parse_kv_file(args.config)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    out_dir = args.out_dir or mapping.get("out_dir", "pipeline_out")
    os.makedirs(out_dir, exist_ok=True)

    def path_of(key: str) -> str:
        if key not in mapping:
            raise UsageError(f"pipeline config is missing the {key!r} path")
        return _resolve(base_dir, mapping[key])

    seed = int(mapping.get("seed", 7))
    kg, gloss_stats = _load_kg(
        path_of("ontology"), path_of("templates"),
        _resolve(base_dir, mapping["glossary"]) if "glossary" in mapping else None,
    )
    corpus = onto.build_corpus(kg, int(mapping.get("per_concept_templated", 2)), seed)
    sts_train = ev.load_sts_dataset(path_of("sts_train"))
    sts_val = ev.load_sts_dataset(path_of("sts_val"))
    sts_test = ev.load_sts_dataset(path_of("sts_test"))
    bcr = ev.load_bcr_dataset(path_of("bcr"))
    nel = ev.load_nel_dataset(path_of("nel"))
    nli = ev.load_nli_dataset(path_of("nli"))
    inputs = [path_of(k) for k in ("ontology", "templates", "sts_train", "sts_val",
                                   "sts_test", "bcr", "nel", "nli")]
    if "glossary" in mapping:
        inputs.append(_resolve(base_dir, mapping["glossary"]))

    def benchmarks(ckpt: enc.Checkpoint) -> dict[str, ev.EvalReport]:
        return {
            "sts_val": ev.eval_sts(ckpt, sts_val),
            "sts_test": ev.eval_sts(ckpt, sts_test),
            "bcr": ev.eval_bcr(ckpt, bcr),
            "nel": ev.eval_nel(ckpt, kg, nel, [1])[0],
            "nli": ev.eval_nli_triplets(ckpt, nli),
        }

    def save(name: str, ckpt: enc.Checkpoint) -> str:
        path = os.path.join(out_dir, name)
        _save_checkpoint(path, ckpt)
        return path

    enc_cfg = enc.config_from_mapping(mapping)
    log.info("pipeline: %d concepts, %d training pairs", len(kg), len(corpus))

    base = enc.Checkpoint(config=enc_cfg, phase="base", params=enc.init_params(enc_cfg))
    save("base.ckpt", base)

    adapted, _ = trainer.adapt_sts(base, sts_train, _phase_cfg(mapping, "adapt_", seed))
    save("adapted.ckpt", adapted)
    log.info("adaptation done")

    contrastive, stats = trainer.train_contrastive(
        adapted, corpus, kg, _phase_cfg(mapping, "contrastive_", seed))
    save("contrastive.ckpt", contrastive)
    log.info("contrastive done: %d steps, final loss %.4f", stats.steps, stats.final_loss)

    second_adapt = mapping.get("second_adapt", "before_distill")
    if second_adapt == "before_distill":
        readapted, _ = trainer.adapt_sts(
            contrastive, sts_train, _phase_cfg(mapping, "readapt_", seed))
        save("readapted.ckpt", readapted)
    elif second_adapt == "none":
        readapted = contrastive
    else:
        raise UsageError(f"second_adapt must be before_distill or none, got {second_adapt!r}")

    teacher_choice = mapping.get("distill_teacher", "adapted")
    if teacher_choice == "adapted":
        teacher = readapted
    elif teacher_choice == "contrastive":
        teacher = contrastive
    else:
        raise UsageError(f"distill_teacher must be adapted or contrastive, got {teacher_choice!r}")

    pca_dim = int(mapping.get("pca_dim", 64))
    _, targets = trainer.build_targets(teacher, kg, k=pca_dim)

    runs = int(mapping.get("distill_runs", 7))
    candidates = []
    distill_detail = []
    for i in range(runs):
        run_cfg = _phase_cfg(mapping, "distill_", seed + i)
        distilled, dstats = trainer.train_self_distill(adapted, targets, kg, run_cfg)
        label = f"distill_{i + 1:02d}"
        save(label + ".ckpt", distilled)
        val = ev.eval_sts(distilled, sts_val).value
        candidates.append(soup_mod.candidate_from_checkpoint(distilled, val, label))
        distill_detail.append({"label": label, "seed": seed + i,
                               "val_pearson": val,
                               "final_loss": dstats.final_loss})
        log.info("%s: val pearson %.4f", label, val)

    soup_metric_fn = lambda ckpt: ev.eval_sts(ckpt, sts_val).value  # noqa: E731
    strategy = mapping.get("soup_strategy", "greedy")
    if strategy == "greedy":
        souped, kept = soup_mod.greedy_soup(candidates, soup_metric_fn)
    elif strategy == "uniform":
        souped = soup_mod.uniform_soup(candidates)
        kept = sorted(c.label for c in candidates)
    else:
        raise UsageError(f"soup_strategy must be greedy or uniform, got {strategy!r}")
    save("soup.ckpt", souped)

    best_idx = int(np.argmax([c.validation_score for c in candidates]))
    best_single = candidates[best_idx]
    phases = [
        ("base", base),
        ("sts_adapted", adapted),
        ("contrastive", contrastive),
        ("self_distilled", best_single.checkpoint),
        ("souped", souped),
    ]
    if second_adapt == "before_distill":
        phases.insert(3, ("readapted", readapted))

    rows = []
    for phase_name, ckpt in phases:
        for bench, report in benchmarks(ckpt).items():
            rows.append({
                "phase": phase_name,
                "benchmark": bench,
                "metric": report.metric,
                "value": report.value,
                "n": report.n,
            })

    report = {
        "seed": seed,
        "concepts": len(kg),
        "training_pairs": len(corpus),
        "glossary_added": gloss_stats.added if gloss_stats else 0,
        "phases": [name for name, _ in phases],
        "rows": rows,
        "distill_runs": distill_detail,
        "soup": {
            "strategy": strategy,
            "kept": kept,
            "validation_pearson": soup_metric_fn(souped),
            "best_single_label": best_single.label,
            "best_single_validation": best_single.validation_score,
        },
    }
    report_path = os.path.join(out_dir, "report.json")
    _atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")

    outputs = [report_path] + [os.path.join(out_dir, f) for f in sorted(os.listdir(out_dir))
                               if f.endswith(".ckpt")]
    _write_manifest(report_path, "pipeline", dict(sorted(mapping.items())),
                    inputs, seed, outputs, started,
                    {"soup_validation_pearson": report["soup"]["validation_pearson"]})

    print(f"{'phase':<16} {'benchmark':<10} {'metric':<16} value")
    for row in rows:
        print(f"{row['phase']:<16} {row['benchmark']:<10} {row['metric']:<16} "
              f"{row['value']:+.4f}")
    print(f"soup kept {len(kept)}/{len(candidates)} ingredients; "
          f"validation pearson {report['soup']['validation_pearson']:.4f} "
          f"(best single {best_single.validation_score:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> _Parser:
    parser = _Parser(prog="ontoembed", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verbalize", help="build the contrastive corpus from an ontology")
    p.add_argument("--ontology", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--glossary")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-concept", dest="per_concept", type=int, default=2)
    p.set_defaults(func=cmd_verbalize)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("phase", choices=["contrastive", "sts", "self-distill", "xlingual"])
    p.add_argument("--base", help="base checkpoint (contrastive/sts: omit to init "
                                  "a fresh base from the config's encoder keys)")
    p.add_argument("--teacher", help="teacher checkpoint (self-distill, xlingual)")
    p.add_argument("--corpus", help="training-pair JSONL (contrastive)")
    p.add_argument("--data", help="STS TSV (sts)")
    p.add_argument("--pairs", help="parallel TSV (xlingual)")
    p.add_argument("--ontology")
    p.add_argument("--templates")
    p.add_argument("--glossary")
    p.add_argument("--pca-dim", dest="pca_dim", type=int, default=64)
    p.add_argument("--config", help="key=value training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("soup", help="average checkpoints")
    p.add_argument("--models", nargs="+")
    p.add_argument("--manifest", help="JSON listing of {path, score, label} candidates")
    p.add_argument("--val", help="validation dataset for the metric")
    p.add_argument("--metric", choices=["pearson", "spearman", "nel-top1"],
                   default="pearson")
    p.add_argument("--ontology", help="required for nel-top1")
    p.add_argument("--strategy", choices=["uniform", "greedy"], default="greedy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_soup)

    p = sub.add_parser("eval", help="run one benchmark")
    p.add_argument("benchmark", choices=["sts", "bcr", "nel", "nli"])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ontology")
    p.add_argument("--topk", default="1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="embed one text per input line")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("pipeline", help="end-to-end demo pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (onto.OntologyError, ev.EvalError, trainer.TrainError, soup_mod.SoupError,
            enc.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
