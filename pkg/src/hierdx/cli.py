"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from hierdx import __version__
from hierdx.config import ToolConfig, setup_logging

logger = logging.getLogger("hierdx.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which is reserved for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False))


def _out_path(args: argparse.Namespace, default: str) -> Path:
    out = Path(args.out or default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_tree(args, cfg: ToolConfig):
    from hierdx.taxonomy import load_taxonomy

    return load_taxonomy(args.taxonomy or cfg.taxonomy)


def _load_ddx(args, cfg: ToolConfig, tree):
    from hierdx.taxonomy import load_ddx

    return load_ddx(args.ddx or cfg.ddx, tree)


def _load_items(path: str):
    from hierdx.corpus import read_jsonl
    from hierdx.mcq import McqItem

    return [McqItem.from_dict(r) for r in read_jsonl(path)]


def _load_predictions(path: str):
    from hierdx.corpus import read_jsonl
    from hierdx.evaluation import PredictionRecord

    return [PredictionRecord.from_dict(r) for r in read_jsonl(path)]


# -- subcommands ------------------------------------------------------------

def cmd_validate(args, cfg: ToolConfig) -> int:
    from hierdx.corpus import load_cases

    tree = _load_tree(args, cfg)
    ddx = _load_ddx(args, cfg, tree)
    summary: dict[str, Any] = {
        "taxonomy_nodes": len(tree),
        "roots": len(tree.roots),
        "max_depth": max((tree.depth(l) for l in tree), default=0),
        "ddx_nodes": len(ddx),
        "ddx_edges": len(ddx.edges()),
        "warnings": tree.warnings + ddx.warnings,
    }
    if args.cases:
        cases = load_cases(args.cases)
        unknown = sorted({c.diagnosis for c in cases if c.diagnosis not in tree})
        summary.update(cases=len(cases), unresolved_diagnoses=unknown)
    _emit(summary)
    return EXIT_OK


def cmd_synthesize(args, cfg: ToolConfig) -> int:
    from hierdx.corpus import load_cases, render_sft, synthesize, write_jsonl
    from hierdx.generation import ChatCompletionGenerator, TemplateGenerator

    tree = _load_tree(args, cfg)
    ddx = _load_ddx(args, cfg, tree)
    cases = load_cases(args.cases)
    try:
        mix = tuple(float(x) for x in args.mix.split(":"))
    except ValueError:
        raise UsageError(f"--mix must look like 1:1:1, got {args.mix!r}") from None
    if args.generator == "remote":
        url = args.generator_url or cfg.generator_url
        if not url:
            raise UsageError("--generator remote needs --generator-url (or generator_url in the config)")
        generator = ChatCompletionGenerator(
            url,
            args.model or cfg.generator_model,
            temperature=cfg.generator_temperature,
            timeout=cfg.generator_timeout,
            retries=cfg.generator_retries,
            credential_env=cfg.credential_env,
        )
    else:
        generator = TemplateGenerator()
    seed = args.seed if args.seed is not None else cfg.seeds.get("synthesize", 0)
    result = synthesize(cases, tree, ddx, generator, seed, mix, max_workers=args.workers)

    out_dir = Path(args.out or "synth")
    out_dir.mkdir(parents=True, exist_ok=True)
    n_traj = write_jsonl(out_dir / "trajectories.jsonl", (t.to_dict() for t in result.trajectories))
    n_sft = write_jsonl(out_dir / "sft.jsonl", (render_sft(t).to_dict() for t in result.trajectories))
    by_kind: dict[str, int] = {}
    for t in result.trajectories:
        by_kind[t.kind] = by_kind.get(t.kind, 0) + 1
    _emit({"trajectories": n_traj, "sft_records": n_sft, "by_kind": by_kind, "skipped": result.skipped})
    return EXIT_OK


def cmd_build_mcq(args, cfg: ToolConfig) -> int:
    from hierdx.corpus import read_jsonl, write_jsonl
    from hierdx.mcq import build_items, build_lesion_condition
    from hierdx.taxonomy import load_taxonomy

    tree = _load_tree(args, cfg)
    local = load_taxonomy(args.local_taxonomy) if args.local_taxonomy else None
    records = read_jsonl(args.cases)
    seed = args.seed if args.seed is not None else cfg.seeds.get("mcq", 0)
    items = build_items(
        records,
        tree,
        local,
        args.n_opts or cfg.n_opts,
        seed,
        p_local=cfg.p_local if args.p_local is None else args.p_local,
        inject_ancestor=args.inject_ancestor,
        gran_scale=cfg.gran_scale,
    )
    if args.lesion:
        items = [build_lesion_condition(it) for it in items]
    n = write_jsonl(_out_path(args, "items.jsonl"), (it.to_dict() for it in items))
    _emit({"items": n, "variant": "lesion_condition" if args.lesion else "standard"})
    return EXIT_OK


def cmd_build_targeted(args, cfg: ToolConfig) -> int:
    from hierdx.corpus import write_jsonl
    from hierdx.mcq import ItemSkipped, build_ddx_variant, build_hierarchical_variant

    tree = _load_tree(args, cfg)
    ddx = _load_ddx(args, cfg, tree) if args.variant == "ddx" else None
    items = _load_items(args.items)
    seed = args.seed if args.seed is not None else cfg.seeds.get("mcq", 0)
    built, skipped = [], []
    for item in items:
        try:
            if args.variant == "hierarchical":
                built.append(build_hierarchical_variant(item, tree, seed, args.n_opts, gran_scale=cfg.gran_scale))
            else:
                built.append(build_ddx_variant(item, ddx, seed, args.n_opts, tree=tree, gran_scale=cfg.gran_scale))
        except ItemSkipped as exc:
            skipped.append({"item_id": exc.item_id, "reason": exc.reason})
    out = _out_path(args, f"items.{args.variant}.jsonl")
    n = write_jsonl(out, (it.to_dict() for it in built))
    report = {"variant": args.variant, "items": n, "skipped": len(skipped), "skip_report": skipped}
    if args.skip_report:
        Path(args.skip_report).write_text(json.dumps(skipped, indent=2), encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_score(args, cfg: ToolConfig) -> int:
    from hierdx.corpus import write_jsonl
    from hierdx.reward import total_reward

    items = {it.id: it for it in _load_items(args.items)}
    preds = _load_predictions(args.predictions)
    missing = [p.item_id for p in preds if p.item_id not in items]
    if missing:
        raise KeyError(f"prediction references unknown item {missing[0]!r}")
    tags = args.tags or cfg.tag_preset
    rows = []
    for p in preds:
        rb = total_reward(
            p.raw_completion, items[p.item_id], tags, args.mode, gran_scale=cfg.gran_scale, ordered=args.ordered
        )
        rows.append({"item_id": p.item_id, "dataset_tag": p.dataset_tag, **rb.to_dict()})
    n = write_jsonl(_out_path(args, "scores.jsonl"), rows)
    mean = sum(r["total"] for r in rows) / n if n else 0.0
    _emit({"scored": n, "mean_total": mean})
    return EXIT_OK


def cmd_evaluate(args, cfg: ToolConfig) -> int:
    from hierdx.evaluation import evaluate

    items = {it.id: it for it in _load_items(args.items)}
    preds = _load_predictions(args.predictions)
    modes = ["strict", "lenient"] if args.mode == "both" else [args.mode]
    reports = {m: evaluate(preds, items, m, weighted=args.weighted) for m in modes}
    for r in reports.values():
        print(r.table())
        print()
    out = _out_path(args, "eval_report.json")
    out.write_text(json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args, cfg: ToolConfig) -> int:
    from hierdx.grpo import GrpoConfig, simulate
    from hierdx.mcq import synthetic_items

    if args.items:
        items = [it for it in _load_items(args.items) if it.variant != "lesion_condition"]
    else:
        tree = _load_tree(args, cfg)
        items = synthetic_items(tree, args.n_items, args.n_opts or cfg.n_opts, args.seed or 0)
    seed = args.seed if args.seed is not None else cfg.seeds.get("simulate", 0)
    try:
        config = GrpoConfig(
            group_size=args.group_size,
            clip_eps=args.clip,
            kl_coeff=args.kl,
            temperature=args.temperature,
            learning_rate=args.lr,
            steps=args.steps,
            batch_size=args.batch_size,
            format_corruption=args.format_corruption,
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report, _ = simulate(items, config)
    out_dir = Path(args.out or "simulation")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "reward_curve.csv").write_text(report.to_csv(), encoding="utf-8")
    _emit(
        {
            "steps": len(report.curve),
            "initial_greedy_accuracy": report.initial_greedy_accuracy,
            "final_greedy_accuracy": report.final_greedy_accuracy,
            "final_mean_kl": report.final_mean_kl,
            "out": str(out_dir),
        }
    )
    return EXIT_OK


def cmd_serve(args, cfg: ToolConfig) -> int:
    from hierdx.service import serve

    serve(args.taxonomy or cfg.taxonomy, args.host, args.port, gran_scale=cfg.gran_scale)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hierdx", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON tool configuration")
    p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, taxonomy=True, ddx=False, seed=False, out=False):
        if taxonomy:
            sp.add_argument("--taxonomy", help="taxonomy JSON (default: bundled fixture)")
        if ddx:
            sp.add_argument("--ddx", help="DDx edge-list JSON (default: bundled fixture)")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")

    sp = sub.add_parser("validate", help="check taxonomy/DDx (and optional case) files")
    common(sp, ddx=True)
    sp.add_argument("--cases")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("synthesize", help="build Type-1/2/3 trajectories and SFT records")
    common(sp, ddx=True, seed=True, out=True)
    sp.add_argument("--cases", required=True)
    sp.add_argument("--mix", default="1:1:1", help="type1:type2:type3 proportions")
    sp.add_argument("--generator", choices=["mock", "remote"], default="mock")
    sp.add_argument("--generator-url")
    sp.add_argument("--model")
    sp.add_argument("--workers", type=int, default=4)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("build-mcq", help="build standard (or lesion-condition) MCQ items")
    common(sp, seed=True, out=True)
    sp.add_argument("--cases", required=True, help="JSONL with id, diagnosis, image_ref")
    sp.add_argument("--local-taxonomy")
    sp.add_argument("--n-opts", type=int)
    sp.add_argument("--p-local", type=float)
    sp.add_argument("--inject-ancestor", action="store_true")
    sp.add_argument("--lesion", action="store_true", help="emit lesion-condition items instead")
    sp.set_defaults(func=cmd_build_mcq)

    sp = sub.add_parser("build-targeted", help="hierarchical or DDx variants of existing items")
    common(sp, ddx=True, seed=True, out=True)
    sp.add_argument("--items", required=True)
    sp.add_argument("--variant", choices=["hierarchical", "ddx"], required=True)
    sp.add_argument("--n-opts", type=int)
    sp.add_argument("--skip-report")
    sp.set_defaults(func=cmd_build_targeted)

    sp = sub.add_parser("score", help="reward breakdown per prediction")
    common(sp, taxonomy=False, out=True)
    sp.add_argument("--items", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--mode", choices=["strict", "lenient"], default="strict")
    sp.add_argument("--tags", choices=["rl", "sft"])
    sp.add_argument("--ordered", action="store_true", help="require think block before answer block")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="accuracy / macro-F1 per dataset")
    common(sp, taxonomy=False, out=True)
    sp.add_argument("--items", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--mode", choices=["strict", "lenient", "both"], default="both")
    sp.add_argument("--weighted", action="store_true", help="weight the average by dataset size")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("simulate", help="GRPO on a synthetic categorical policy")
    common(sp, seed=True, out=True)
    sp.add_argument("--items", help="item JSONL (default: synthetic items over the taxonomy)")
    sp.add_argument("--n-items", type=int, default=50)
    sp.add_argument("--n-opts", type=int)
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--group-size", type=int, default=4)
    sp.add_argument("--clip", type=float, default=0.2)
    sp.add_argument("--kl", type=float, default=0.01)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--format-corruption", type=float, default=0.05)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("serve", help="run the HTTP reward service")
    common(sp)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    from hierdx.corpus import CorpusError
    from hierdx.evaluation import EvalError
    from hierdx.mcq import McqError
    from hierdx.taxonomy import TaxonomyError, UnknownLabelError

    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = ToolConfig.load(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"hierdx: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hierdx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        OSError,
        json.JSONDecodeError,
        TaxonomyError,
        UnknownLabelError,
        CorpusError,
        McqError,
        EvalError,
        KeyError,
        ValueError,
    ) as exc:
        logger.error("data error: %s", exc)
        print(f"hierdx: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
