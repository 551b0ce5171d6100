"""Command-line entry point: synth, build-kg, fuse, train, eval, predict, explain, experiment."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import torch

from .config import PipelineConfig, load_config
from .encoding import make_encoder
from .errors import ConfigError, ExtractionUnavailable, MissingArtifact, ProtoKGError
from .experiments import DEFAULT_VALUES, KINDS, run_experiment
from .explanation import dumps_explanations, explain_records
from .fusion import dumps_graph, fuse, load_graph
from .keywords import dumps_stats, load_stats
from .kg_construction import (DisabledChatClient, LiveChatClient, RecordedChatClient,
                              RuleBasedChatClient, define_relations, definitions_from_rows,
                              definitions_to_rows, dumps_jsonl, extract_corpus, read_jsonl,
                              triplets_from_rows, triplets_to_rows)
from .model import Featurizer, GraphContext
from .patient import load_records
from .pipeline import FittedPipeline, fit
from .synthetic import CLINICAL_FIELDS, GENDERS, SyntheticSpec, generate_synthetic, write_synthetic
from .training import checkpoint_bytes, dumps_loss_trace, load_checkpoint

log = logging.getLogger("protokg")


class OverwriteRefused(ProtoKGError):
    pass


def write_artifact(path: Path, content: str | bytes, force: bool) -> bool:
    """Write unless an existing file differs and ``force`` is off; True when written."""
    data = content.encode("utf-8") if isinstance(content, str) else content
    if path.exists():
        if path.read_bytes() == data:
            log.info("unchanged %s", path)
            return False
        if not force:
            raise OverwriteRefused(f"{path} exists with different content; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    log.info("wrote %s", path)
    return True


def require(path: Path, what: str, stage: str | None = None) -> Path:
    if not path.exists():
        hint = f"; run `protokg {stage}` first" if stage else ""
        raise MissingArtifact(f"missing {what}: {path}{hint}")
    return path


def _encoder(cfg: PipelineConfig):
    e = cfg.encoder
    return make_encoder(e.kind, dim=e.dim, seed=e.seed, endpoint=e.endpoint,
                        credential_env=e.credential_env, model_name=e.model_name)


def _encoder_info(cfg: PipelineConfig) -> dict:
    e = cfg.encoder
    return {"kind": e.kind, "dim": e.dim, "seed": e.seed, "model_name": e.model_name}


def _client(cfg: PipelineConfig, for_explanation: bool = False):
    c = cfg.client
    transcripts = Path(c.transcripts)
    if not transcripts.is_absolute():
        transcripts = Path(cfg.base_dir) / transcripts
    if c.mode == "mock":
        return RecordedChatClient(transcripts)
    if c.mode == "live":
        if not c.endpoint or not c.model:
            raise ConfigError("client.mode live needs client.endpoint and client.model")
        live = LiveChatClient(c.endpoint, c.model, credential_env=c.credential_env,
                              max_retries=c.max_retries, rate_limit=c.rate_limit)
        return RecordedChatClient(transcripts, upstream=live)
    if c.mode == "rules":
        return RuleBasedChatClient()
    return None if for_explanation else DisabledChatClient()


def _corpus(cfg: PipelineConfig) -> list[dict]:
    rows = read_jsonl(require(cfg.path("corpus"), "disease corpus"))
    for i, r in enumerate(rows, 1):
        if not r.get("label") or not r.get("description"):
            raise ConfigError(f"corpus row {i} needs 'label' and 'description'")
    return rows


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- commands --------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, args) -> int:
    spec = SyntheticSpec(categories=args.categories, tags_per_category=args.tags_per_category,
                         records_per_tag=tuple(args.records_per_tag),
                         keyword_signal_strength=args.keyword_signal, finding_signal=args.finding_signal,
                         seed=cfg.train.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        existing = out / "meta.json"
        if not existing.exists() or json.loads(existing.read_text())["spec"] != json.loads(
                json.dumps(asdict(spec))):
            raise OverwriteRefused(f"{out} is not empty; pass --force to overwrite")
    data = generate_synthetic(spec)
    write_synthetic(data, out)
    config = {"train": {"clinical_fields": list(CLINICAL_FIELDS), "genders": list(GENDERS),
                        "seed": cfg.train.seed},
              "client": {"mode": "mock", "transcripts": "transcripts"}}
    write_artifact(out / "config.json", json.dumps(config, indent=1, sort_keys=True) + "\n", True)
    print(f"synthetic fixture: {len(data.tags)} diseases, {len(data.train)}/{len(data.valid)}/"
          f"{len(data.test)} records -> {out}")
    return 0


def cmd_build_kg(cfg: PipelineConfig, args) -> int:
    corpus = _corpus(cfg)
    client = _client(cfg)
    results = extract_corpus(client, corpus, workers=cfg.client.workers)
    triplets = [t for r in results for t in r.triplets]
    definitions = define_relations(client, triplets, [c["label"] for c in corpus])
    write_artifact(cfg.path("triplets"), dumps_jsonl(triplets_to_rows(triplets)), args.force)
    write_artifact(cfg.path("definitions"), dumps_jsonl(definitions_to_rows(definitions)), args.force)
    poor = [r.disease for r in results if r.empty]
    print(f"{len(triplets)} triplets, {len(definitions)} relation definitions"
          + (f"; knowledge-poor: {', '.join(poor)}" if poor else ""))
    return 0


def cmd_fuse(cfg: PipelineConfig, args) -> int:
    corpus = _corpus(cfg)
    triplets = triplets_from_rows(read_jsonl(require(cfg.path("triplets"), "triplets", "build-kg")))
    definitions = definitions_from_rows(read_jsonl(require(cfg.path("definitions"), "relation definitions",
                                                           "build-kg")))
    cats = {c["label"]: c["category"] for c in corpus if c.get("category")}
    graph = fuse(triplets, definitions, cfg.train.delta, _encoder(cfg),
                 disease_labels=[c["label"] for c in corpus], disease_categories=cats)
    write_artifact(cfg.path("graph"), dumps_graph(graph, _encoder_info(cfg)), args.force)
    print(f"unified graph: {len(graph.nodes)} nodes, {len(graph.relations)} relations, "
          f"{len(graph.edges)} edges, corpus hash {graph.corpus_hash[:12]}")
    return 0


def _graph(cfg: PipelineConfig):
    return load_graph(require(cfg.path("graph"), "unified graph", "fuse"))


def cmd_train(cfg: PipelineConfig, args) -> int:
    graph = _graph(cfg)
    train = load_records(require(cfg.path("train"), "training records"))
    valid_path = cfg.path("valid")
    valid = load_records(valid_path) if valid_path.exists() else []
    hp = cfg.hyperparams()
    t0 = time.perf_counter()
    fitted = fit(graph, _encoder(cfg), hp, train, valid)
    log.info("trained in %.1f s, best epoch %d", time.perf_counter() - t0, fitted.result.best_epoch)
    extra = {"encoder": _encoder_info(cfg), "best_epoch": fitted.result.best_epoch,
             "history": fitted.result.history}
    write_artifact(cfg.path("stats"), dumps_stats(fitted.stats, graph.corpus_hash), args.force)
    write_artifact(cfg.path("checkpoint"), checkpoint_bytes(fitted.model, graph.corpus_hash, extra), args.force)
    write_artifact(cfg.path("loss_trace"), dumps_loss_trace(fitted.result.trace), args.force)
    best = fitted.result.history[fitted.result.best_epoch] if fitted.result.history else {}
    print(f"checkpoint {cfg.path('checkpoint')} (best epoch {fitted.result.best_epoch}, "
          f"valid hit@1 {best.get('valid_hit1', float('nan')):.4f})")
    return 0


def _fitted(cfg: PipelineConfig) -> tuple[FittedPipeline, str]:
    graph = _graph(cfg)
    ckpt = require(cfg.path("checkpoint"), "checkpoint", "train")
    model, meta = load_checkpoint(ckpt)
    if meta.get("corpus_hash") != graph.corpus_hash:
        raise ConfigError(f"checkpoint {ckpt} was trained on a different graph; retrain")
    stats = load_stats(require(cfg.path("stats"), "keyword statistics", "train"), graph.corpus_hash)
    if stats is None:
        raise ConfigError(f"keyword statistics {cfg.path('stats')} belong to a different graph; retrain")
    ctx = GraphContext(graph)
    encoder = _encoder(cfg)
    featurizer = Featurizer(encoder, model.hp, ctx.label_index, stats)
    return FittedPipeline(model, ctx, featurizer, stats), _sha(ckpt.read_bytes())[:16]


def _records(args, cfg: PipelineConfig, default: str):
    path = Path(args.records) if getattr(args, "records", None) else cfg.path(default)
    return load_records(require(path, "record file"))


def cmd_eval(cfg: PipelineConfig, args) -> int:
    fitted, ckpt_id = _fitted(cfg)
    records = _records(args, cfg, "test")
    report = fitted.evaluate(records, checkpoint_id=ckpt_id, setting={"split": args.records or "test"})
    out = Path(args.out) if args.out else cfg.path("reports") / "eval.json"
    write_artifact(out, report.dumps(), args.force)
    write_artifact(out.with_suffix(".tsv"), report.table(), args.force)
    print(report.table(), end="")
    return 0


def cmd_predict(cfg: PipelineConfig, args) -> int:
    fitted, _ = _fitted(cfg)
    records = [r.without_label() for r in _records(args, cfg, "test")]
    preds = fitted.predict(records)
    k = args.top_k or len(fitted.ctx.labels)
    rows = [{"record_id": r.id, "ranked_labels": p.ranked_labels[:k], "scores": p.scores[:k]}
            for r, p in zip(records, preds)]
    out = Path(args.out) if args.out else cfg.path("reports") / "predictions.jsonl"
    write_artifact(out, dumps_jsonl(rows), args.force)
    print(f"{len(rows)} predictions -> {out}")
    return 0


def cmd_explain(cfg: PipelineConfig, args) -> int:
    fitted, _ = _fitted(cfg)
    records = [r.without_label() for r in _records(args, cfg, "test")]
    if args.limit:
        records = records[:args.limit]
    preds = fitted.predict(records)
    explanations = explain_records(fitted.model, fitted.ctx, fitted.featurizer, records, preds,
                                   _client(cfg, for_explanation=True), cfg.explain.top_n)
    out = Path(args.out) if args.out else cfg.path("reports") / "explanations.jsonl"
    write_artifact(out, dumps_explanations(explanations), args.force)
    gens = sorted({e.generator for e in explanations})
    print(f"{len(explanations)} explanations ({', '.join(gens)}) -> {out}")
    return 0


def cmd_experiment(cfg: PipelineConfig, args) -> int:
    graph = _graph(cfg)
    train = load_records(require(cfg.path("train"), "training records"))
    valid = load_records(require(cfg.path("valid"), "validation records"))
    test = load_records(require(cfg.path("test"), "test records"))
    values = args.values or cfg.experiment.values
    if values is not None and args.kind != "ablation":
        values = [float(v) for v in values]
    target = args.target_category or cfg.experiment.target_category
    if args.kind == "single_class_imbalance" and target is None:
        target = sorted(set(graph.disease_categories.values()))[0]
    series = run_experiment(args.kind, graph, _encoder(cfg), cfg.hyperparams(), train, valid, test,
                            values=values, target_category=target,
                            on_setting=lambda r: log.info("setting %s done", r.name))
    out = Path(args.out) if args.out else cfg.path("reports") / f"experiment-{args.kind}"
    write_artifact(out / f"{args.kind}.json", series.dumps(), args.force)
    write_artifact(out / f"{args.kind}.tsv", series.table(), args.force)
    for r in series.results:
        write_artifact(out / f"{args.kind}-{r.name}.json", r.report.dumps(), args.force)
    print(series.table(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth, "build-kg": cmd_build_kg, "fuse": cmd_fuse, "train": cmd_train,
    "eval": cmd_eval, "predict": cmd_predict, "explain": cmd_explain, "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="override train.seed from the config")
    common.add_argument("--force", action="store_true", help="overwrite artifacts whose content differs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="protokg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus, splits and transcripts")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--categories", type=int, default=6, help="number of disease categories")
    p.add_argument("--tags-per-category", type=int, default=5, help="diseases per category")
    p.add_argument("--records-per-tag", type=int, nargs=3, default=(40, 10, 10),
                   metavar=("TRAIN", "VALID", "TEST"), help="records per disease and split")
    p.add_argument("--keyword-signal", type=float, default=0.9,
                   help="probability that a narrative word is a disease keyword")
    p.add_argument("--finding-signal", type=float, default=0.0,
                   help="probability that a non-keyword word is a graph-only finding")

    sub.add_parser("build-kg", parents=[common], help="extract triplets and relation definitions")
    sub.add_parser("fuse", parents=[common], help="fuse triplets into the unified graph")
    sub.add_parser("train", parents=[common], help="train and write checkpoint, loss trace, keyword stats")

    for name, text in (("eval", "evaluate a checkpoint and write the report"),
                       ("predict", "rank all diseases for each record"),
                       ("explain", "explain each record's top-1 prediction")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--records", help="record file (JSONL); defaults to paths.test")
        p.add_argument("--out", help="output file; defaults under paths.reports")
        if name == "predict":
            p.add_argument("--top-k", type=int, default=0, help="truncate rankings (0 keeps all)")
        if name == "explain":
            p.add_argument("--limit", type=int, default=0, help="explain only the first N records")

    p = sub.add_parser("experiment", parents=[common], help="run a sweep and write one report per setting")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--values", nargs="+",
                   help="settings to run; defaults: " + "; ".join(
                       f"{k}={' '.join(map(str, v))}" for k, v in DEFAULT_VALUES.items()))
    p.add_argument("--target-category", help="category subsampled by single_class_imbalance")
    p.add_argument("--out", help="output directory; defaults under paths.reports")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, int(os.environ.get("PROTOKG_THREADS", "1"))))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"protokg {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except ExtractionUnavailable as exc:
        print(f"protokg {args.command}: extraction unavailable: {exc}", file=sys.stderr)
        return 3
    except (ProtoKGError, FileNotFoundError) as exc:
        print(f"protokg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
