"""Command-line pipeline: pool -> score -> normalize -> select -> stats -> loss-eval -> report.

Each stage writes its artifact atomically next to a ``<artifact>.manifest.json``
recording the config hash, seed and input digests.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import analysis, losses
from .clients import Clients
from .core import (
    CalsetError,
    NormalizationStats,
    StrategyId,
    atomic_write_lines,
    dumps,
    iter_jsonl,
    load_examples,
    load_pool,
    load_selected,
    load_stats,
    write_pool,
    write_selected,
    write_stats,
)
from .corruptions import EntityIndex, PoolConfig, build_pool, load_beams
from .metrics import AggregateWeights, REL_METRICS, FAITH_METRICS, fit_stats, normalize_pool, score_pool
from .selection import CATALOG, SelectionConfig, select

logger = logging.getLogger("calset")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "pool": {},
    "selection": {},
    "weights": {},
    "endpoints": {},
    "losses": {},
}

UPSTREAM = {
    "examples": "the corpus export (or `calset toy`)",
    "beams": "the trainer's diverse-beam decoding",
    "pool": "`calset pool`",
    "scores": "`calset score`",
    "normalized": "`calset normalize`",
    "selected": "`calset select`",
    "stats": "`calset stats`",
    "latents": "the trainer's latent export",
}


class UsageError(CalsetError):
    pass


# ---------------------------------------------------------------------------
# config and manifests


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file {path} not found")
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must be a mapping")
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for k, v in user.items():
            cfg[k] = v
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: str, stage: str, cfg: dict, seed: int, inputs: dict[str, str | None], extra: dict | None = None) -> None:
    manifest = {
        "stage": stage,
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "inputs": {
            name: {"file": Path(p).name, "sha256": file_digest(p)}
            for name, p in sorted(inputs.items())
            if p is not None
        },
        "output": {"file": Path(out).name, "sha256": file_digest(out)},
    }
    if extra:
        manifest.update(extra)
    atomic_write_lines(f"{out}.manifest.json", [json.dumps(manifest, indent=2, sort_keys=True)])


def need(path: str | None, what: str) -> str:
    if path is None:
        raise UsageError(f"missing --{what} input; it comes from {UPSTREAM[what]}")
    if not os.path.exists(path):
        raise UsageError(f"{what} file {path} not found; produce it with {UPSTREAM[what]} first")
    return path


def infer_kind(path: str) -> str:
    for _, obj in iter_jsonl(path):
        if "candidate_id" in obj:
            return "relevance" if obj.get("method") == "diverse_beam" else "faithfulness"
        if "kind" in obj and "strategy" in obj:
            return obj["kind"]
    raise UsageError(f"cannot infer pool kind from {path}; pass --kind")


def _clients(cfg: dict, offline: bool) -> Clients:
    return Clients.from_config(cfg.get("endpoints"), offline=offline)


def _weights(cfg: dict) -> AggregateWeights:
    w = cfg.get("weights") or {}
    kwargs = {k: dict(v) for k, v in w.items() if k in ("rel", "faith")}
    return AggregateWeights(**kwargs)


# ---------------------------------------------------------------------------
# stages


def cmd_index_entities(args, cfg) -> int:
    examples = load_examples(need(args.examples, "examples"))
    index = EntityIndex.from_examples(examples.values())
    n = index.write_tsv(args.out)
    write_manifest(args.out, "index-entities", cfg, args.seed, {"examples": args.examples})
    print(f"wrote {n} entity index entries to {args.out}")
    return 0


def cmd_pool(args, cfg) -> int:
    examples = load_examples(need(args.examples, "examples"))
    pool_cfg = PoolConfig.from_mapping(cfg.get("pool"))
    clients = _clients(cfg, args.offline)
    beams = None
    index = None
    if args.kind == "relevance":
        beams = load_beams(need(args.beams, "beams"))
    else:
        if args.entity_index:
            index = EntityIndex.read_tsv(args.entity_index)
        else:
            index = EntityIndex.from_examples(examples.values())
    pools = []
    for eid in sorted(examples):
        pools.append(
            build_pool(
                examples[eid],
                args.kind,
                pool_cfg,
                clients,
                rng_seed=args.seed,
                entity_index=index,
                beams=(beams or {}).get(eid, []) if beams is not None else None,
            )
        )
    n = write_pool(pools, args.out)
    write_manifest(
        args.out,
        "pool",
        cfg,
        args.seed,
        {"examples": args.examples, "beams": args.beams, "entity_index": args.entity_index},
        {"pool_kind": args.kind, "offline": bool(args.offline)},
    )
    counts = sorted({len(p) for p in pools})
    print(f"wrote {n} candidates for {len(pools)} examples ({'/'.join(map(str, counts))} per example) to {args.out}")
    return 0


def cmd_score(args, cfg) -> int:
    path = need(args.pool, "pool")
    kind = args.kind or infer_kind(path)
    pools, _ = load_pool(path, kind)
    clients = _clients(cfg, args.offline)
    lines = []
    for pool in pools:
        scored = score_pool(pool, clients, neural=not args.native_only)
        for c in scored.candidates:
            lines.append(dumps({"candidate_id": c.candidate_id, "scores": c.scores.to_json()}))
    atomic_write_lines(args.out, lines)
    write_manifest(args.out, "score", cfg, args.seed, {"pool": path}, {"offline": bool(args.offline)})
    print(f"wrote scores for {len(lines)} candidates to {args.out}")
    return 0


def _merge_scores(pools, scores_path):
    from .core import ScoreVector

    cache = {}
    for lineno, obj in iter_jsonl(scores_path):
        cache[obj["candidate_id"]] = obj["scores"]
    out = []
    for pool in pools:
        cands = []
        for c in pool.candidates:
            if c.candidate_id not in cache:
                raise UsageError(f"candidate {c.candidate_id} missing from {scores_path}; rerun `calset score`")
            merged = {**c.scores.to_json(), **cache[c.candidate_id]}
            cands.append(dataclasses.replace(c, scores=ScoreVector.from_json(merged)))
        out.append(dataclasses.replace(pool, candidates=tuple(cands)))
    return out


def cmd_normalize(args, cfg) -> int:
    path = need(args.pool, "pool")
    kind = args.kind or infer_kind(path)
    pools, _ = load_pool(path, kind)
    if args.scores:
        pools = _merge_scores(pools, need(args.scores, "scores"))
    if args.stats:
        stats = load_stats(args.stats)
    elif args.fit_stats:
        rows = [c.scores.to_json() for p in pools for c in p.candidates]
        stats = fit_stats(rows, REL_METRICS + FAITH_METRICS, provenance=f"fit on {Path(path).name}")
        write_stats(stats, args.fit_stats)
    else:
        raise UsageError("normalize needs --stats FILE (baseline statistics) or --fit-stats OUT")
    weights = _weights(cfg)
    pools = [normalize_pool(p, stats, weights) for p in pools]
    n = write_pool(pools, args.out)
    write_manifest(
        args.out, "normalize", cfg, args.seed,
        {"pool": path, "scores": args.scores, "stats": args.stats or args.fit_stats},
    )
    print(f"wrote {n} normalized candidates to {args.out}")
    return 0


def selection_config(cfg: dict, strategy: str, seed: int) -> SelectionConfig:
    sel = dict(cfg.get("selection") or {})
    return SelectionConfig(strategy=StrategyId.parse(strategy), rng_seed=seed, **sel)


def cmd_select(args, cfg) -> int:
    path = need(args.pool, "normalized")
    kind = args.kind or infer_kind(path)
    try:
        strategy = StrategyId.parse(args.strategy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if strategy not in CATALOG[kind]:
        known = ", ".join(str(s) for s in CATALOG[kind])
        raise UsageError(f"unknown strategy {strategy} for {kind}; choose one of: {known}")
    pools, _ = load_pool(path, kind)
    sc = selection_config(cfg, args.strategy, args.seed)
    sets = []
    for pool in pools:
        try:
            sets.append(select(pool, sc))
        except CalsetError as exc:
            msg = str(exc)
            if "requires rel_agg" in msg or "requires faith_agg" in msg:
                msg += "; run `calset normalize` first"
            elif "requires extractive_density" in msg or "requires loglik" in msg:
                msg += "; run `calset score` and `calset normalize` first"
            raise CalsetError(msg) from None
    n = write_selected(sets, args.out)
    write_manifest(args.out, "select", cfg, args.seed, {"pool": path}, {"strategy": str(strategy)})
    print(f"wrote {n} {kind} sets ({strategy}) to {args.out}")
    return 0


def cmd_stats(args, cfg) -> int:
    sel_path = need(args.selected, "selected")
    pool_path = need(args.pool, "normalized")
    sets = load_selected(sel_path)
    kind = args.kind or infer_kind(pool_path)
    pools = {p.example_id: p for p in load_pool(pool_path, kind)[0]}
    rows = []
    for s in sets:
        if s.example_id not in pools:
            raise UsageError(f"selected set {s.example_id} has no pool in {pool_path}")
        rows.append(analysis.set_statistics(s, pools[s.example_id]).to_json())
    atomic_write_lines(args.out, (dumps(r) for r in rows))
    write_manifest(args.out, "stats", cfg, args.seed, {"selected": sel_path, "pool": pool_path})
    print(analysis.format_table(rows, ["example_id", "strategy", *analysis.STAT_COLUMNS]))
    return 0


def _hparams(cfg: dict, kind: str) -> losses.LossHyperParams:
    over = dict(cfg.get("losses") or {})
    dataset = over.pop("dataset", None)
    base = losses.HPARAMS.get((kind, dataset), losses.LossHyperParams()) if dataset else losses.LossHyperParams()
    return dataclasses.replace(base, **over)


def cmd_loss_eval(args, cfg) -> int:
    sel_path = need(args.selected, "selected")
    pool_path = need(args.pool, "normalized")
    sets = load_selected(sel_path)
    kind = args.kind or infer_kind(pool_path)
    pools = {p.example_id: p for p in load_pool(pool_path, kind)[0]}
    latents = {}
    if args.latents:
        for _, obj in iter_jsonl(need(args.latents, "latents")):
            latents[obj["candidate_id"]] = obj["h"]
    hp = _hparams(cfg, kind)
    rows = []
    for s in sets:
        by_id = pools[s.example_id].by_id()
        row: dict[str, Any] = {"example_id": s.example_id, "strategy": str(s.strategy)}
        notes = []
        if s.kind == "relevance":
            cands = [by_id[i] for i in s.rank_order]
            if all(c.token_logprobs for c in cands):
                f = [losses.length_normalized_score(c.token_logprobs, hp.scale, hp.length_penalty) for c in cands]
                row["margin_rank"] = losses.margin_rank_loss(f, hp.lambda_margin)
                ref = [c for c in pools[s.example_id].candidates if c.method == "reference"]
                if ref and ref[0].token_logprobs:
                    row["mle"] = losses.mle_loss(ref[0].token_logprobs)
                    row["combined"] = losses.combined_objective(row["mle"], row["margin_rank"], hp.lambda_mle, hp.lambda_ca)
            else:
                notes.append("margin_rank skipped: token_logprobs missing")
        else:
            P = [by_id[i] for i in s.positives]
            N = [by_id[i] for i in s.negatives]
            if all(c.candidate_id in latents for c in P + N) and len(P) >= 2:
                row["contrastive"] = losses.contrastive_loss(
                    [latents[c.candidate_id] for c in P],
                    [latents[c.candidate_id] for c in N],
                    hp.temperature,
                    hp.include_positive_in_denominator,
                )
            else:
                notes.append("contrastive skipped: latents missing")
            seq = [_sequence_loglik(c) for c in P + N]
            if all(v is not None for v in seq):
                row["conseq"] = losses.conseq_loss(seq[: len(P)], seq[len(P) :])
            else:
                notes.append("conseq skipped: likelihoods missing")
            ref = by_id.get(f"{s.example_id}:reference:00")
            if ref is not None and ref.token_logprobs:
                row["mle"] = losses.mle_loss(ref.token_logprobs)
                if "contrastive" in row:
                    row["combined"] = losses.combined_objective(row["mle"], row["contrastive"], hp.lambda_mle, hp.lambda_ca)
        if notes:
            row["notes"] = notes
        rows.append(row)
    atomic_write_lines(args.out, (dumps(r) for r in rows))
    write_manifest(args.out, "loss-eval", cfg, args.seed, {"selected": sel_path, "pool": pool_path, "latents": args.latents})
    print(f"wrote loss report for {len(rows)} sets to {args.out}")
    return 0


def _sequence_loglik(c) -> float | None:
    """Full-sequence log-likelihood; falls back to mean x length."""
    if c.token_logprobs:
        return sum(c.token_logprobs)
    if c.scores.model_loglik is not None:
        return c.scores.model_loglik * c.scores.n_tokens
    return None


def run_name(path) -> str:
    """``relevance_margin-max.stats.jsonl`` -> ``relevance_margin-max``; keys for --downstream."""
    name = Path(path).name
    for suffix in (".jsonl", ".stats"):
        name = name.removesuffix(suffix)
    return name


def cmd_report(args, cfg) -> int:
    runs = []
    for p in args.stats:
        rows = [obj for _, obj in iter_jsonl(need(p, "stats"))]
        means = analysis.mean_statistics(rows)
        runs.append({"run": run_name(p), **means})
    downstream = {}
    if args.downstream:
        with open(args.downstream, encoding="utf-8") as fh:
            downstream = json.load(fh)
    lines = [dumps({"type": "run", **r}) for r in runs]
    text = [analysis.format_table(runs, ["run", *analysis.STAT_COLUMNS])]
    if downstream:
        table = []
        for r in runs:
            d = downstream.get(r["run"])
            if d is None:
                logger.warning("no downstream value for run %s; skipped in correlations", r["run"])
                continue
            if isinstance(d, dict):
                table.append({**r, **{k: v for k, v in d.items()}})
            else:
                table.append({**r, args.target: d})
        unused = sorted(set(downstream) - {r["run"] for r in runs})
        if unused:
            logger.warning("downstream keys match no stats file: %s", ", ".join(unused))
        extra_cols = sorted({k for r in table for k in r} - set(analysis.STAT_COLUMNS) - {"run", args.target})
        cols = [*analysis.STAT_COLUMNS, *extra_cols]
        corr = analysis.correlate_runs(table, target=args.target, columns=cols)
        corr_rows = [dataclasses.asdict(c) for c in corr]
        lines += [dumps({"type": "correlation", "target": args.target, **c}) for c in corr_rows]
        text += ["", f"pearson vs {args.target}", analysis.format_table(corr_rows)]
    if args.out:
        atomic_write_lines(args.out, lines)
        write_manifest(args.out, "report", cfg, args.seed, {f"stats{i}": p for i, p in enumerate(args.stats)} | {"downstream": args.downstream})
    print("\n".join(text))
    return 0


def cmd_toy(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = resources.files("calset") / "data"
    for name in ("toy_examples.jsonl", "toy_beams.jsonl"):
        with resources.as_file(data / name) as src:
            shutil.copyfile(src, out / name)
    print(f"toy corpus written to {out}")
    if args.run:
        run_toy_pipeline(out, seed=args.seed, config=args.config)
    return 0


def run_toy_pipeline(out: Path, seed: int = 0, config: str | None = None, strategies: dict | None = None) -> None:
    """Every stage end-to-end on the toy corpus with offline stubs."""
    out = Path(out)
    common = ["--seed", str(seed), "--offline"] + (["--config", config] if config else [])
    ex, beams = str(out / "toy_examples.jsonl"), str(out / "toy_beams.jsonl")
    strategies = strategies or {"relevance": ["likelihood:top_beam", "margin:max"], "faithfulness": ["likelihood:hard", "margin:max"]}

    def run(*argv):
        code = main([*argv, *common])
        if code:
            raise CalsetError(f"stage {argv[0]} failed with exit code {code}")

    run("index-entities", "--examples", ex, "--out", str(out / "entities.tsv"))
    stats_files = []
    for kind in ("faithfulness", "relevance"):
        pool = str(out / f"{kind}_pool.jsonl")
        extra = ["--beams", beams] if kind == "relevance" else ["--entity-index", str(out / "entities.tsv")]
        run("pool", "--kind", kind, "--examples", ex, *extra, "--out", pool)
        run("score", "--pool", pool, "--out", str(out / f"{kind}_scores.jsonl"))
        norm = str(out / f"{kind}_normalized.jsonl")
        run("normalize", "--pool", pool, "--scores", str(out / f"{kind}_scores.jsonl"),
            "--fit-stats", str(out / f"{kind}_stats.json"), "--out", norm)
        for strat in strategies[kind]:
            tag = strat.replace(":", "-")
            sel = str(out / f"{kind}_{tag}_selected.jsonl")
            run("select", "--pool", norm, "--strategy", strat, "--out", sel)
            st = str(out / f"{kind}_{tag}.stats.jsonl")
            run("stats", "--selected", sel, "--pool", norm, "--out", st)
            run("loss-eval", "--selected", sel, "--pool", norm, "--out", str(out / f"{kind}_{tag}_losses.jsonl"))
            stats_files.append(st)
    run("report", *stats_files, "--out", str(out / "report.jsonl"))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    common.add_argument("--offline", action="store_true", help="use the deterministic service stubs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="calset", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-entities", parents=[common], help="build the extrinsic-swap entity index")
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index_entities)

    p = sub.add_parser("pool", parents=[common], help="build candidate pools")
    p.add_argument("--kind", choices=("faithfulness", "relevance"), required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--beams")
    p.add_argument("--entity-index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("score", parents=[common], help="compute per-candidate metrics")
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=("faithfulness", "relevance"))
    p.add_argument("--native-only", action="store_true", help="skip service-backed metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("normalize", parents=[common], help="z-normalize and aggregate scores")
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=("faithfulness", "relevance"))
    p.add_argument("--scores")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stats", help="baseline mean/stddev file")
    g.add_argument("--fit-stats", help="fit stats on this pool and write them here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("select", parents=[common], help="select calibration sets")
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=("faithfulness", "relevance"))
    p.add_argument("--strategy", required=True, help="family:mode, e.g. margin:max")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("stats", parents=[common], help="set statistics for selected sets")
    p.add_argument("--selected", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=("faithfulness", "relevance"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("loss-eval", parents=[common], help="evaluate calibration losses per set")
    p.add_argument("--selected", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=("faithfulness", "relevance"))
    p.add_argument("--latents")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loss_eval)

    p = sub.add_parser("report", parents=[common], help="aggregate stats files and correlate")
    p.add_argument("stats", nargs="+")
    p.add_argument("--downstream", help="JSON mapping run name -> downstream delta (or a dict of columns)")
    p.add_argument("--target", default="delta")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy", parents=[common], help="export the bundled toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--run", action="store_true", help="also run the full pipeline on it")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.offline:
        os.environ["CALSET_OFFLINE"] = "1"
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        cfg["seed"] = args.seed
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"calset {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CalsetError, ValueError, KeyError) as exc:
        print(f"calset {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
