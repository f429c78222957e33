"""Command-line front end: ``moelab <command> ...``.

Exit codes: 0 success, 2 usage, 3 capacity/planting, 4 empty routing, 5 numeric.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import (
    correlation_csv,
    evaluate,
    gain_profile,
    head_expert_correlation,
    json_dump,
    qwen_like_boundaries,
    stage_contributions,
    table1_csv,
    table1_row,
    thirds_boundaries,
)
from .attribution import attribute_relation
from .errors import (
    CapacityError,
    ConfigError,
    DatasetError,
    DomainError,
    EmptyRoutingError,
    FormatError,
    MoELabError,
    NumericError,
    PlantingError,
    ShapeError,
    SpecError,
    TraceError,
    VocabularyError,
)
from .interventions import block_sweep, causal_suite
from .knowledge import Dataset, PlantPlan, PlantReport, generate_dataset, plant_model, preset
from .model import InterventionSpec, ModelConfig, RoutingMode
from .moefile import atomic_write_bytes, load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_ROUTING, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(MoELabError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> Path:
    atomic_write_bytes(path, text.encode("utf-8"))
    return path


def _address(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected layer:index, got {text!r}") from None


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: list[Path],
                    outputs: list[Path], started: float) -> None:
    """Deterministic manifest next to the outputs; wall-clock time goes to a separate timing file."""
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                if k not in ("func",)}
    resolved = json.loads(json.dumps(resolved, default=str))
    manifest = dict(
        command=command, version=__version__, arguments=resolved, seed=resolved.get("seed"),
        inputs={str(p): _sha256(p) for p in sorted(inputs, key=str) if p.is_file()},
        outputs={p.name: _sha256(p) for p in sorted(outputs, key=lambda q: q.name)},
    )
    _write_text(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    _write_text(out / "timing.json", json.dumps(dict(command=command, wall_clock_s=time.time() - started)) + "\n")


def _load_data(path: Path) -> Dataset:
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return Dataset.read(path)


def _load_model(path: Path):
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _prompts_for(ds: Dataset, relation: str | None):
    if relation is None:
        return ds.prompts
    if relation not in ds.relation_names():
        raise UsageError(f"unknown relation {relation!r}; known: {', '.join(ds.relation_names())}")
    return ds.prompts_for(relation)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.time()
    ds = generate_dataset(args.seed, args.relations, args.subjects, args.vocab)
    out = Path(args.out)
    files = ds.write(out)
    _write_manifest(out, "gen-data", args, [], files, t0)
    print(f"wrote {len(ds.prompts)} prompts, vocabulary {len(ds.tokenizer)} to {out}")
    return EXIT_OK


def cmd_plant(args) -> int:
    t0 = time.time()
    ds = _load_data(args.data)
    inputs = [Path(args.data) / n for n in ("dataset.jsonl", "tokenizer.json", "relations.json")]
    if args.plan in ("deep", "shallow"):
        cfg, plan = preset(args.plan, ds, args.seed)
    else:
        plan_path = Path(args.plan)
        if not plan_path.is_file():
            raise UsageError(f"plan file not found: {plan_path}")
        plan = PlantPlan.from_json(plan_path.read_text("utf-8"))
        cfg, _ = preset(plan.preset, ds, plan.seed)
        inputs.append(plan_path)
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        cfg = ModelConfig.from_dict(json.loads(cfg_path.read_text("utf-8")))
        inputs.append(cfg_path)
    report = PlantReport()
    weights = plant_model(cfg, ds, plan, report)
    out = Path(args.out)
    save_model(weights, out / "model.moem")
    _write_text(out / "plan.json", json.dumps(plan.to_dict(), sort_keys=True, indent=1) + "\n")
    _write_text(out / "plant_report.json", json_dump(dict(
        key_gap=report.key_gap, answer_scale=report.answer_scale, backup_scale=report.backup_scale,
        worst_margin=report.worst_margin)))
    _write_manifest(out, "plant", args, inputs, [out / "model.moem", out / "plan.json", out / "plant_report.json"], t0)
    print(f"planted {len(ds.prompts)} facts ({args.plan}); worst answer margin {report.worst_margin:.3f} nats")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    w = _load_model(args.model)
    ds = _load_data(args.data)
    ds.check(w.config.vocab_size)
    spec = InterventionSpec(blocked_experts=frozenset(args.block), forced_experts=frozenset(args.force),
                            suppressed_heads=frozenset(args.suppress),
                            routing_mode=RoutingMode.parse(args.mode)).validate_for(w.config)
    prompts = _prompts_for(ds, args.relation)
    res = evaluate(w, prompts, spec)
    out = Path(args.out)
    body = dict(res.to_dict(), mode=args.mode, relation=args.relation,
                blocked=sorted(map(list, spec.blocked_experts)), forced=sorted(map(list, spec.forced_experts)),
                suppressed=sorted(map(list, spec.suppressed_heads)))
    p = _write_text(out / "eval.json", json_dump(body))
    _write_manifest(out, "eval", args, [Path(args.model)], [p], t0)
    print(f"hit@10 {res.hit_at_10:.4f}  mrr {res.mrr:.4f}  (n={len(res.ranks)})")
    return EXIT_OK


def cmd_attribute(args) -> int:
    t0 = time.time()
    w = _load_model(args.model)
    ds = _load_data(args.data)
    _prompts_for(ds, args.relation)
    rep = attribute_relation(w, ds, args.relation, args.topk)
    out = Path(args.out)
    files = [_write_text(out / "attribution.json", rep.to_json() + "\n"),
             _write_text(out / "attribution.csv", rep.to_csv())]
    _write_manifest(out, "attribute", args, [Path(args.model)], files, t0)
    top = rep.membership.top(1)
    print(f"top expert {top[0][0]}:{top[0][1]}" if top else "no routed experts in the ranking",
          f"routed fraction {rep.membership.routed_fraction:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    t0 = time.time()
    w = _load_model(args.model)
    ds = _load_data(args.data)
    relations = [args.relation] if args.relation else ds.relation_names()
    for r in relations:
        _prompts_for(ds, r)
    out = Path(args.out)
    csv_parts, results = [], []
    for i, r in enumerate(relations):
        rep = attribute_relation(w, ds, r, args.topk)
        sweep = block_sweep(w, ds.prompts_for(r), rep.ranked_experts(), args.sizes, relation=r)
        csv_parts.append(sweep.to_csv(header=i == 0))
        results.append(sweep.to_dict())
    files = [_write_text(out / "sweep.csv", "".join(csv_parts)), _write_text(out / "sweep.json", json_dump(results))]
    _write_manifest(out, "ablate", args, [Path(args.model)], files, t0)
    for res in results:
        print(res["relation"], " ".join(f"n={row['n_blocked']}:{row['mrr']:.3f}" for row in res["rows"]))
    return EXIT_OK


def cmd_causal(args) -> int:
    t0 = time.time()
    w = _load_model(args.model)
    ds = _load_data(args.data)
    prompts = _prompts_for(ds, args.relation)
    InterventionSpec(forced_experts=frozenset([args.expert]),
                     suppressed_heads=frozenset([args.head])).validate_for(w.config)
    bundle = causal_suite(w, prompts, args.head, args.expert, args.ig_steps, args.ig_prompts)
    out = Path(args.out)
    p = _write_text(out / "causal.json", json_dump(dict(bundle.to_dict(), relation=args.relation)))
    _write_manifest(out, "causal", args, [Path(args.model)], [p], t0)
    d = bundle.to_dict()
    print(f"gate change {d['expert_gate_relative_change']:+.3f}  mrr change "
          f"{d['suppression']['mrr_relative_change']:+.3f}  recovery {bundle.recovery:.3f}  "
          f"head fraction {bundle.fraction:.3f}  max IG gap {d['ig']['max_relative_gap']:.2e}")
    return EXIT_OK


def cmd_report(args) -> int:
    t0 = time.time()
    ds = _load_data(args.data)
    named = []
    for item in args.inputs:
        name, _, path = item.rpartition("=")
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"input not found: {path}")
        named.append((name or (path.parent.name if path.stem == "model" else path.stem), path))
    out = Path(args.out)
    rows, files = [], []
    for name, path in named:
        w = load_model(path)
        res = evaluate(w, ds.prompts)
        prof = gain_profile(w, ds.prompts)
        rows.append(table1_row(name, res, prof))
        L = w.config.num_layers
        bounds = qwen_like_boundaries(L) if args.stages == "qwen" else thirds_boundaries(L)
        sub = out / name
        reps = [head_expert_correlation(w, ds.prompts_for(r), relation=r) for r in ds.relation_names()
                if len(ds.prompts_for(r)) >= 3]
        files += [_write_text(sub / "curve.csv", prof.curve_csv()),
                  _write_text(sub / "correlation.csv", correlation_csv(reps)),
                  _write_text(sub / "stages.json", json_dump(stage_contributions(prof.ffn, bounds).to_dict()))]
    files.append(_write_text(out / "table1.csv", table1_csv(rows)))
    _write_manifest(out, "report", args, [p for _, p in named], files, t0)
    print(f"report for {len(rows)} model(s) in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab", description="Planted-knowledge MoE interpretability lab")
    p.add_argument("--version", action="version", version=f"moelab {__version__}")
    p.add_argument("--help-json", action="store_true", help="print the command/flag tree as JSON and exit")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate relations, facts, prompts and tokenizer")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--relations", type=int, default=5)
    g.add_argument("--subjects", type=int, default=20)
    g.add_argument("--vocab", type=int, default=384, help="vocabulary budget (distractor words fill the rest)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("plant", help="plant the dataset's facts into a model")
    g.add_argument("--data", required=True)
    g.add_argument("--plan", default="deep", help="deep, shallow, or a plan JSON path")
    g.add_argument("--config", help="optional model config JSON overriding the preset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plant)

    g = sub.add_parser("eval", help="HIT@10 / MRR under optional interventions")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--relation")
    g.add_argument("--block", type=_address, action="append", default=[], metavar="L:E")
    g.add_argument("--force", type=_address, action="append", default=[], metavar="L:E")
    g.add_argument("--suppress", type=_address, action="append", default=[], metavar="L:H")
    g.add_argument("--mode", default="default", help="default | only_shared | top_zero | shared_plus_top:M | top_only:M")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("attribute", help="rank neurons for one relation")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--relation", required=True)
    g.add_argument("--topk", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_attribute)

    g = sub.add_parser("ablate", help="block the top-ranked experts and re-evaluate")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--relation", help="default: every relation")
    g.add_argument("--sizes", type=_sizes, default=[1, 5, 10])
    g.add_argument("--topk", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("causal", help="head suppression, expert forcing and integrated gradients")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--relation")
    g.add_argument("--head", type=_address, required=True, metavar="L:H")
    g.add_argument("--expert", type=_address, required=True, metavar="L:E")
    g.add_argument("--ig-steps", type=int, default=256)
    g.add_argument("--ig-prompts", type=int, default=None, help="limit IG to the first N prompts")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_causal)

    g = sub.add_parser("report", help="table1.csv plus per-model curve, correlation and stage files")
    g.add_argument("--inputs", nargs="+", required=True, metavar="[NAME=]MODEL")
    g.add_argument("--data", required=True)
    g.add_argument("--stages", choices=["thirds", "qwen"], default="thirds")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_report)
    return p


def help_json(parser: argparse.ArgumentParser) -> dict:
    def flags(p):
        out = []
        for a in p._actions:
            if isinstance(a, (argparse._HelpAction, argparse._SubParsersAction)):
                continue
            out.append(dict(flags=a.option_strings, dest=a.dest, required=bool(a.required),
                            default=a.default if isinstance(a.default, (int, float, str, list, type(None))) else str(a.default),
                            help=a.help, nargs=a.nargs if not isinstance(a.nargs, int) else a.nargs))
        return out

    cmds = {}
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            helps = {c.dest: c.help for c in a._choices_actions}
            for name, sp in a.choices.items():
                cmds[name] = dict(help=helps.get(name), flags=flags(sp))
    return dict(prog=parser.prog, version=__version__, flags=flags(parser), commands=cmds,
                exit_codes={"0": "success", "2": "usage", "3": "capacity or planting", "4": "empty routing",
                            "5": "numeric"})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.help_json:
        print(json.dumps(help_json(parser), indent=1, sort_keys=True))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (CapacityError, PlantingError) as exc:
        margin = getattr(exc, "worst_margin", None)
        extra = f" (worst margin {margin:.4f})" if margin is not None else ""
        print(f"error: {exc}{extra}", file=sys.stderr)
        return EXIT_CAPACITY
    except EmptyRoutingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ROUTING
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DomainError, SpecError, ConfigError, DatasetError, VocabularyError, FormatError,
            ShapeError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
