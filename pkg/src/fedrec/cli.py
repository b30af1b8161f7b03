"""Command-line entry point.

Exit codes: 0 success, 2 bad configuration or input (including missing files), 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import build_sequences, five_core_filter, load_catalog, load_interactions, read_sequences, write_sequences
from .errors import ConfigError, IntegrityError, ParseError
from .federation import load_global_model, run_federated_training, save_global_model
from .harness import (
    PROFILES,
    ExperimentConfig,
    ablation,
    build_rerank,
    compute_scores,
    evaluate_scores,
    format_report,
    format_sweep,
    load_config,
    prepare_data,
    run_experiment,
    sensitivity_sweep,
    with_seed,
    write_json,
)
from .hybrid import read_candidates, write_candidates
from .rerank import ChatLimits, RequestBudget, RerankConfig, RerankJob, make_client, rerank_batch
from .text_retriever import render_passage, render_query

log = logging.getLogger("fedrec")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args, cfg, catalog, split, out):
    if getattr(args, "model", None):
        return load_global_model(args.model)
    model = run_federated_training(split, catalog, cfg.rounds, metrics_log=out / "rounds.jsonl")
    save_global_model(model, out / "checkpoints" / "global")
    return model


def cmd_ingest(args) -> None:
    out = _out(args)
    interactions, catalog = load_interactions(args.interactions, args.items)
    n_raw = len(interactions)
    if not args.no_five_core:
        interactions = five_core_filter(interactions)
        catalog = catalog.restrict(it.item_id for it in interactions)
    sequences = build_sequences(interactions, args.max_len)
    write_sequences(out / "sequences.jsonl", sequences)
    catalog.to_jsonl(out / "catalog.jsonl")
    stats = {"raw_interactions": n_raw, "interactions": len(interactions), "users": len(sequences),
             "items": len(catalog)}
    write_json(out / "ingest.json", stats)
    print(json.dumps(stats))


def cmd_split(args) -> None:
    cfg, out = _config(args), _out(args)
    catalog, split = prepare_data(cfg)
    split.write_manifest(out / "split.json")
    catalog.to_jsonl(out / "catalog.jsonl")
    write_sequences(out / "sequences.jsonl", [s for c in split.clients for s in c] + list(split.test_users))
    sizes = [len(c) for c in split.clients]
    print(f"{len(sizes)} clients of sizes {sizes}; {len(split.test_users)} cold-start test users")


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    catalog, split = prepare_data(cfg)
    (out / "rounds.jsonl").unlink(missing_ok=True)
    model = run_federated_training(split, catalog, cfg.rounds, metrics_log=out / "rounds.jsonl",
                                   checkpoint_dir=out / "checkpoints")
    save_global_model(model, out / "checkpoints" / "global")
    print(f"trained {model.round} round(s); checksum {model.checksum()}")


def cmd_evaluate(args) -> None:
    cfg, out = _config(args), _out(args)
    catalog, split = prepare_data(cfg)
    model = _model(args, cfg, catalog, split, out)
    scores = compute_scores(model, split.test_users, catalog, cfg.template)
    client, rerank_cfg = build_rerank(cfg, catalog, split)
    hybrid = replace(cfg.hybrid, lam=cfg.effective_lambda)
    rep = evaluate_scores(scores, catalog, hybrid.lam, hybrid, client, rerank_cfg, cfg.rerank.max_in_flight)
    write_json(out / "report.json", rep.to_dict())
    write_candidates(out / "candidates.jsonl", rep.candidates)
    text = format_report(rep)
    (out / "report.txt").write_text(text + "\n")
    print(text)


def cmd_sweep(args) -> None:
    cfg, out = _config(args), _out(args)
    catalog, split = prepare_data(cfg)
    model = _model(args, cfg, catalog, split, out)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else list(cfg.lambda_grid)
    scores = compute_scores(model, split.test_users, catalog, cfg.template)
    rows = sensitivity_sweep(scores, catalog, cfg.hybrid, grid)
    write_json(out / "sweep.json", [{"lambda": lam, **r.to_dict()} for lam, r in rows])
    print(format_sweep(rows))


def cmd_ablate(args) -> None:
    cfg, out = _config(args), _out(args)
    catalog, split = prepare_data(cfg)
    model = _model(args, cfg, catalog, split, out)
    scores = compute_scores(model, split.test_users, catalog, cfg.template)
    client, rerank_cfg = build_rerank(replace(cfg, use_rerank=True), catalog, split)
    table = ablation(scores, catalog, cfg.hybrid, client, rerank_cfg, cfg.rerank.max_in_flight)
    write_json(out / "ablation.json", table.to_dict())
    (out / "ablation.txt").write_text(table.format() + "\n")
    print(table.format())


def cmd_run(args) -> None:
    cfg, out = _config(args), _out(args)
    art = run_experiment(cfg, out)
    print((art.out_dir / "report.txt").read_text(), end="")


def _catalog_and_sequences(args):
    if args.catalog:
        catalog = load_catalog(args.catalog)
        sequences = read_sequences(args.sequences) if getattr(args, "sequences", None) else []
        return catalog, sequences
    if args.config:
        catalog, split = prepare_data(_config(args))
        return catalog, [s for c in split.clients for s in c] + list(split.test_users)
    raise ConfigError("pass --catalog (and --sequences) or --config")


def cmd_rerank(args) -> None:
    out = _out(args)
    catalog, sequences = _catalog_and_sequences(args)
    by_user = {s.user_id: s for s in sequences}
    candidates = read_candidates(args.candidates)
    missing = [c.user_id for c in candidates if c.user_id not in by_user]
    if missing:
        raise IntegrityError(f"no history for {len(missing)} candidate user(s), e.g. {missing[:3]}")
    truth = {u: s.target for u, s in by_user.items()}
    client = make_client(args.client, catalog=catalog, truth=truth, transcript=args.transcript,
                         base_url=args.base_url, model=args.model, seed=args.seed or 0, record_to=args.record)
    cfg = RerankConfig(args.threshold, PROFILES[args.profile], ChatLimits(budget=RequestBudget(args.budget)))
    jobs = [RerankJob(c, by_user[c.user_id].history, None if args.no_gate else by_user[c.user_id].target)
            for c in candidates]
    outcomes = rerank_batch(jobs, client, cfg, catalog, args.max_in_flight)
    with open(out / "rerank.jsonl", "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_dict()) + "\n")
    counts = {s: sum(o.source == s for o in outcomes) for s in ("reranked", "stage1-fallback", "skipped")}
    print(json.dumps(counts))


def cmd_render(args) -> None:
    catalog, _ = _catalog_and_sequences(args)
    attrs = not args.no_attributes
    if args.passage:
        for item in args.passage:
            print(render_passage(item, catalog, attrs, args.noun_phrase))
    if args.query:
        print(render_query(args.query, catalog, attrs, args.last_n, args.noun_phrase))
    if not args.passage and not args.query:
        raise ConfigError("render needs --query ITEM... and/or --passage ITEM...")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fedrec", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse, 5-core filter and build sequences")
    p.add_argument("--interactions", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--no-five-core", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="write the federated split manifest")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="federated training of both retrievers")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "two-stage evaluation on cold-start users"),
                                 ("sweep", cmd_sweep, "stage-1 lambda sensitivity"),
                                 ("ablate", cmd_ablate, "component ablation table")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", help="checkpoint directory to evaluate instead of training")
        if name == "sweep":
            p.add_argument("--grid", help="comma-separated lambdas")
        p.set_defaults(func=func)

    p = sub.add_parser("run", parents=[common], help="full experiment: train, evaluate, sweep, ablate")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rerank", parents=[common], help="re-rank a candidates file")
    p.add_argument("--candidates", required=True)
    p.add_argument("--client", choices=("identity", "oracle", "transcript", "http", "adversarial"), default="identity")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--catalog")
    p.add_argument("--sequences", help="JSON-lines sequences supplying histories and targets")
    p.add_argument("--transcript")
    p.add_argument("--record", help="append http exchanges to this transcript file")
    p.add_argument("--base-url")
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--profile", choices=sorted(PROFILES), default="generic")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--no-gate", action="store_true", help="ignore ground truth; re-rank every user")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("render", parents=[common], help="print query/passage templates")
    p.add_argument("--catalog")
    p.add_argument("--query", nargs="+", metavar="ITEM")
    p.add_argument("--passage", nargs="+", metavar="ITEM")
    p.add_argument("--no-attributes", action="store_true")
    p.add_argument("--last-n", type=int)
    p.add_argument("--noun-phrase", default="an item")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ParseError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
