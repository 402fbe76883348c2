"""Command line entry point: ``python -m queryclf <command> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import data, serving
from .data import ConfigError, CorpusError
from .graph import GraphBundle, build_graph_bundle
from .trainer import (
    ABLATIONS,
    ModelState,
    TrainConfig,
    Workspace,
    evaluate,
    label_forward,
    prepare,
    semi_targets_for,
    train,
)
from .tensorfile import FormatVersionError

log = logging.getLogger("queryclf")

ABLATION_COLUMNS = ("micro_p", "micro_r", "micro_f1", "macro_p", "macro_r", "macro_f1")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "event": record.getMessage()})


def _setup_logging(out_dir: Path | None, verbose: bool) -> None:
    root = logging.getLogger("queryclf")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(err)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "events.jsonl", mode="a", encoding="utf-8")
        fh.setFormatter(_JsonFormatter())
        root.addHandler(fh)
    root.propagate = False


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "no_semi", False):
        cfg = cfg.with_overrides(use_semi=False)
    if getattr(args, "no_knowledge", False):
        cfg = cfg.with_overrides(use_knowledge=False)
    return cfg


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError("split", f"cannot parse {text!r}") from None
    if len(parts) != 3:
        raise ConfigError("split", "expected three comma-separated ratios")
    return parts


def _load_corpus(args):
    taxonomy = data.load_taxonomy(args.taxonomy)
    knowledge = data.load_knowledge(args.knowledge) if getattr(args, "knowledge", None) else {}
    samples = data.load_clicks(args.clicks, taxonomy, knowledge or None)
    return taxonomy, samples, knowledge


def _load_model(args, taxonomy):
    model, _ = ModelState.load(args.model)
    if list(taxonomy.leaf_index) != list(model.leaf_ids):
        raise CorpusError("taxonomy leaves do not match the model checkpoint")
    graph = GraphBundle.load(args.graph) if args.graph else None
    return model, graph


def _out_dir(args) -> Path:
    return Path(args.out_dir) if args.out_dir else Path(".")


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args) -> None:
    taxonomy = data.load_taxonomy(args.taxonomy) if args.taxonomy else None
    stats = data.compute_stats(data.load_clicks(args.clicks, taxonomy))
    print(stats.to_json())


def cmd_synth(args) -> None:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    tax, samples, knowledge = data.generate_synthetic(args.labels, args.queries, args.tail_fraction, seed)
    paths = data.write_corpus(out, tax, samples, knowledge)
    if args.probes:
        probes = data.generate_probes(args.labels, args.probes, args.tail_fraction, seed)
        data.save_clicks(probes, out / "probes.jsonl")
        paths["probes"] = out / "probes.jsonl"
    print(json.dumps({k: str(v) for k, v in paths.items()}))


def cmd_build_graph(args) -> None:
    cfg = _config(args)
    taxonomy, samples, knowledge = _load_corpus(args)
    if args.model:
        # rebuild the similarity graph from a trained encoder
        model, _ = ModelState.load(args.model)
        ws = Workspace.build(taxonomy, model.vocab, model.config, knowledge)
        leaf_emb = label_forward(model, ws).x[taxonomy.num_internal :]
        cfg = model.config
        graph = build_graph_bundle(
            taxonomy, samples, leaf_emb, cfg.alpha_threshold, cfg.beta_threshold,
            cfg.use_graph_coo, cfg.use_graph_sim, cfg.use_graph_hier,
        )
    else:
        if not cfg.use_structure:
            raise ConfigError("use_structure", "graph building needs the structure module enabled")
        _, graph, _ = prepare(cfg, samples, taxonomy, knowledge)
    graph.save(args.out)
    log.info("wrote graph bundle to %s", args.out)


def cmd_train(args) -> None:
    cfg = _config(args)
    taxonomy, samples, knowledge = _load_corpus(args)
    out = _out_dir(args)
    if args.val_clicks:
        train_s, val_s = samples, data.load_clicks(args.val_clicks, taxonomy, knowledge or None)
    else:
        train_s, val_s, test_s = data.split_dataset(samples, _ratios(args.split), cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        for name, part in (("train", train_s), ("val", val_s), ("test", test_s)):
            data.save_clicks(part, out / f"{name}.jsonl")
    graph = GraphBundle.load(args.graph) if args.graph else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    res = train(cfg, train_s, val_s, taxonomy, knowledge, out_dir=out, graph=graph)
    if res.log:
        last = res.log[-1]
        print(json.dumps({"epochs": len(res.log), "final": last}, sort_keys=True))


def cmd_eval(args) -> None:
    taxonomy = data.load_taxonomy(args.taxonomy)
    samples = data.load_clicks(args.clicks, taxonomy)
    model, graph = _load_model(args, taxonomy)
    ws = Workspace.build(taxonomy, model.vocab, model.config, graph=graph)
    rep = evaluate(model, ws, samples, args.threshold)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")
    if args.per_label:
        with open(args.per_label, "w", encoding="utf-8") as fh:
            fh.write("id\tname\tclicks\ttp\tfp\tfn\tp\tr\tf1\n")
            for lid, row in rep.per_label.items():
                fh.write(
                    f"{lid}\t{taxonomy.by_id[lid].name}\t{model.leaf_clicks.get(lid, 0)}\t"
                    f"{row['tp']}\t{row['fp']}\t{row['fn']}\t{row['p']!r}\t{row['r']!r}\t{row['f1']!r}\n"
                )


def cmd_export_cache(args) -> None:
    taxonomy = data.load_taxonomy(args.taxonomy)
    model, graph = _load_model(args, taxonomy)
    cache = serving.export_cache(model, graph, taxonomy, args.out)
    log.info("wrote cache with %d leaves to %s", len(cache.leaf_ids), args.out)


def cmd_predict(args) -> None:
    cache = serving.load_cache(args.cache)
    resp = serving.handle_request(cache, json.dumps({"query": args.query, "threshold": args.threshold or cache.threshold}))
    print(json.dumps(resp, ensure_ascii=False))


def cmd_serve(args) -> None:
    cache = serving.load_cache(args.cache)
    if not args.listen:
        serving.serve_stream(cache, sys.stdin, sys.stdout)
        return
    host, _, port = args.listen.rpartition(":")
    server = serving.CacheServer(cache, (host or "127.0.0.1", int(port)))
    log.info("serving on %s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_batch_predict(args) -> None:
    cache = serving.load_cache(args.cache)
    n = serving.batch_predict(args.input, cache, args.output, args.threshold)
    log.info("wrote %d predictions to %s", n, args.output)


def cmd_semi_targets(args) -> None:
    taxonomy, samples, knowledge = _load_corpus(args)
    model, graph = _load_model(args, taxonomy)
    ws = Workspace.build(taxonomy, model.vocab, model.config, knowledge, graph)
    targets = semi_targets_for(model, ws, samples, args.tau)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s, t in zip(samples, targets):
            pairs = sorted(t.entries.items(), key=lambda p: (-p[1], p[0]))
            fh.write(json.dumps({"query": s.query_text, "targets": [[lid, v] for lid, v in pairs]}, ensure_ascii=False) + "\n")


def run_ablation(base: TrainConfig, train_s, val_s, eval_sets: dict, taxonomy, knowledge, out_dir=None) -> list[dict]:
    """Train every ablation variant and score it on each named evaluation set.

    Each row has ``variant`` plus ``<set>_<metric>`` for every set in
    ``eval_sets`` and every metric in ``ABLATION_COLUMNS``, and
    ``<set>_tail_recall`` when the tail bucket is defined.
    """
    rows = []
    for name, overrides in ABLATIONS.items():
        cfg = base.with_overrides(**overrides)
        sub = None if out_dir is None else Path(out_dir) / _variant_dir(name)
        res = train(cfg, train_s, val_s, taxonomy, knowledge, out_dir=sub)
        ws = Workspace.build(taxonomy, res.model.vocab, cfg, knowledge, res.graph)
        row = {"variant": name}
        for set_name, samples in eval_sets.items():
            rep = evaluate(res.model, ws, samples)
            row.update({f"{set_name}_{k}": v for k, v in rep.row().items()})
            if rep.tail is not None:
                row[f"{set_name}_tail_recall"] = rep.tail.recall
            log.info("%s [%s] micro_f1=%.4f macro_f1=%.4f", name, set_name, rep.micro.f1, rep.macro.f1)
        rows.append(row)
    return rows


def _variant_dir(name: str) -> str:
    return name.replace("w/o ", "wo_").replace("&", "_").replace("-", "_").replace(" ", "_")


def cmd_ablate(args) -> None:
    base = _config(args)
    taxonomy, samples, knowledge = _load_corpus(args)
    train_s, val_s, test_s = data.split_dataset(samples, _ratios(args.split), base.seed)
    eval_sets = {"test": test_s}
    if args.eval_clicks:
        eval_sets["eval"] = data.load_clicks(args.eval_clicks, taxonomy)
    out = _out_dir(args)
    rows = run_ablation(base, train_s, val_s, eval_sets, taxonomy, knowledge, out / "runs")
    columns = [f"{s}_{c}" for s in eval_sets for c in ABLATION_COLUMNS]
    with open(out / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("variant\t" + "\t".join(columns) + "\n")
        for r in rows:
            fh.write(r["variant"] + "\t" + "\t".join(f"{r[c]:.4f}" for c in columns) + "\n")
    print((out / "ablation.tsv").read_text(), end="")


# ---------------------------------------------------------------------------
# parser


def _add_global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--config", default=default, help="flat key = value training config")
    parser.add_argument("--out-dir", default=default)
    parser.add_argument("-v", "--verbose", action="store_true", default=default or False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="queryclf", description=__doc__.splitlines()[0])
    _add_global_flags(p, default=None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        # suppressed defaults so a flag given before the subcommand survives
        _add_global_flags(sp, default=argparse.SUPPRESS)
        sp.set_defaults(func=fn)
        return sp

    def corpus(sp, knowledge=True):
        sp.add_argument("--taxonomy", required=True)
        sp.add_argument("--clicks", required=True)
        if knowledge:
            sp.add_argument("--knowledge")

    sp = add("stats", cmd_stats, "dataset statistics of a click log")
    sp.add_argument("--clicks", required=True)
    sp.add_argument("--taxonomy")

    sp = add("synth", cmd_synth, "write a synthetic corpus")
    sp.add_argument("--labels", type=int, default=50)
    sp.add_argument("--queries", type=int, default=5000)
    sp.add_argument("--tail-fraction", type=float, default=0.0)
    sp.add_argument("--probes", type=int, default=0, help="also write N held-out true-intent queries")

    sp = add("build-graph", cmd_build_graph, "build the label graph bundle")
    corpus(sp)
    sp.add_argument("--model", help="take label embeddings from this checkpoint")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model")
    corpus(sp)
    sp.add_argument("--val-clicks")
    sp.add_argument("--split", default="0.8,0.1,0.1")
    sp.add_argument("--graph")
    sp.add_argument("--no-semi", action="store_true", help="same as use_semi = false")
    sp.add_argument("--no-knowledge", action="store_true", help="same as use_knowledge = false")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    corpus(sp, knowledge=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--graph")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out")
    sp.add_argument("--per-label", help="write a per-label TSV here")

    sp = add("export-cache", cmd_export_cache, "export leaf embeddings for serving")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--graph")
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "classify one query from a cache")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--threshold", type=float)

    sp = add("serve", cmd_serve, "line-delimited JSON classification endpoint")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--listen", help="host:port; omit to use stdin/stdout")

    sp = add("batch-predict", cmd_batch_predict, "classify a JSONL file of queries")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--threshold", type=float)

    sp = add("semi-targets", cmd_semi_targets, "dump semi-supervised targets for audit")
    corpus(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--graph")
    sp.add_argument("--tau", type=float, default=0.8)
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "train every ablation variant and tabulate metrics")
    corpus(sp)
    sp.add_argument("--split", default="0.8,0.1,0.1")
    sp.add_argument("--eval-clicks", help="also score variants on this file (e.g. true-intent probes)")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(Path(args.out_dir) if args.out_dir else None, args.verbose)
    try:
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        if args.config or args.command in ("train", "ablate", "build-graph"):
            resolved["config"] = asdict(_config(args))
        print(json.dumps({"command": args.command, "resolved": resolved}, sort_keys=True, default=str), file=sys.stderr)
        args.func(args)
    except (CorpusError, ConfigError, FormatVersionError) as exc:
        log.error("%s", exc)
        return 1
    except (FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
