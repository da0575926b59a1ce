"""Command-line entry point.

Every subcommand reads and writes the plain file formats of the library
(graph JSON, plan JSON, trace CSV, sequence text, NUPARAMS1 checkpoints), so
stages compose through the filesystem.

Exit codes: 0 success, 1 hard error, 2 completed with warnings.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import tomli

from . import experiment as ex
from .generator import generate_dataset
from .graph import ComputationGraph, build_vocabulary, encode_sequence, parse_sequence
from .nmt import load_checkpoint, save_checkpoint, train_nmt, translate_many
from .obfuscators import Attacker, ea_obfuscate, redlock_obfuscate
from .passes import ObfuscationPlan, apply_plan
from .scas import ScasModel, predict_sequence, recover_dimensions
from .trace import RuntimeTrace, save_labels, simulate_trace


def load_config(path: str | None) -> ex.ExperimentConfig:
    if not path:
        return ex.ExperimentConfig()
    with open(path, "rb") as fh:
        return ex.config_from_mapping(tomli.load(fh))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args, cfg):
    rows = generate_dataset(args.role, args.n, args.seed, _out(args), cfg.generator)
    print(f"wrote {len(rows)} graphs to {args.out}")
    return 0


def cmd_obfuscate(args, cfg):
    g = ComputationGraph.load(args.graph)
    out = _out(args)
    if args.plan:
        plan = ObfuscationPlan.load(args.plan)
        obf, _, applied = apply_plan(g, plan)
        obf.save(out / "graph.json")
        print(f"applied {len(applied)} ops")
        return 0
    if not args.scas:
        print("error: --scas is required unless --plan is given", file=sys.stderr)
        return 1
    attacker = Attacker(ScasModel.load(args.scas), cfg.cost)
    if args.method == "ea":
        obf, report = ea_obfuscate(g, attacker, cfg.ea, args.seed)
    else:
        obf, report = redlock_obfuscate(g, args.seed, attacker, cfg.redlock_trials)
    obf.save(out / "graph.json")
    report.best.plan.save(out / "plan.json")
    report.save(out / "candidates.csv")
    (out / "extracted.txt").write_text(report.best.extracted.render() + "\n")
    print(f"chosen candidate {report.chosen}: ler {report.best.ler:.3f}, latency x{report.latency_ratio:.3f}")
    return 0


def cmd_trace(args, cfg):
    g = ComputationGraph.load(args.graph)
    out = _out(args)
    t = simulate_trace(g, replace(cfg.cost, seed=args.seed))
    t.save(out / "trace.csv")
    if args.labels:
        save_labels(out / "labels.csv", encode_sequence(g).words)
    print(f"{len(t)} rows")
    return 0


def cmd_scas_train(args, cfg):
    out = _out(args)
    data = Path(args.data)
    cfg = replace(cfg, seed=args.seed)
    # the stage expects <out>/data/A
    link = out / "data" / "A"
    if not link.exists():
        link.parent.mkdir(parents=True, exist_ok=True)
        link.symlink_to(data.resolve(), target_is_directory=True)
    model = ex.stage_scas(cfg, out)
    print(f"validation accuracy per tagger: {model.history.get('val_acc')}")
    return 0


def cmd_scas_attack(args, cfg):
    model = ScasModel.load(args.scas)
    trace = RuntimeTrace.load(args.trace)
    kinds = predict_sequence(model, trace)
    shape = tuple(int(x) for x in args.input_shape.split(","))
    seq = recover_dimensions(kinds, trace, cfg.cost, shape)
    out = _out(args)
    (out / "extracted.txt").write_text(seq.render() + "\n")
    print(seq.render())
    return 0


def _read_pairs(path):
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n}: expected '<source>\\t<target>'")
        src, tgt = line.split("\t")
        pairs.append((parse_sequence(src), parse_sequence(tgt)))
    return pairs


def cmd_nmt_train(args, cfg):
    pairs = _read_pairs(args.pairs)
    vocab = build_vocabulary([s for p in pairs for s in p])
    out = _out(args)
    vocab.save(out / "vocab.txt")
    model, log = train_nmt(
        pairs,
        vocab,
        replace(cfg.nmt, seed=args.seed),
        cfg.nmt_model,
        out / "train_log.csv",
        lambda e: print(f"epoch {e.epoch}: loss {e.loss:.4f} token_acc {e.token_acc:.3f}", flush=True),
    )
    save_checkpoint(model, out / "model.nup")
    return 0


def cmd_deobfuscate(args, cfg):
    model = load_checkpoint(args.model)
    sources = [parse_sequence(line) for line in Path(args.input).read_text().splitlines() if line.strip()]
    outs = translate_many(model, sources)
    out = _out(args)
    (out / "recovered.txt").write_text("".join(", ".join(t.words) + "\n" for t in outs))
    failed = sum(not t.parsed for t in outs)
    if failed:
        print(f"warning: {failed} translation(s) did not parse", file=sys.stderr)
        return 2
    return 0


def cmd_evaluate(args, cfg):
    cfg = replace(cfg, seed=args.seed)
    report = ex.run_experiment(cfg, args.out, progress=lambda msg: print(msg, flush=True))
    print(ex.report_table(report), end="")
    return 0 if report.rows else 2


def cmd_report(args, cfg):
    report = ex.LerReport.from_json(Path(args.report).read_text())
    code = ex.report_render(report, _out(args))
    print(ex.report_table(report), end="")
    if code:
        print("warning: report has no test rows", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqdeobf", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a dataset of graphs")
    s.add_argument("--role", choices=("A", "B", "C"), default="A")
    s.add_argument("--n", type=int, default=100)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("obfuscate", help="obfuscate one graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--method", choices=("ea", "redlock"), default="redlock")
    s.add_argument("--scas", help="extraction model checkpoint")
    s.add_argument("--plan", help="replay a saved plan instead of searching")
    s.set_defaults(func=cmd_obfuscate)

    s = sub.add_parser("trace", help="simulate a run-time trace")
    s.add_argument("--graph", required=True)
    s.add_argument("--labels", action="store_true", help="also write the label sidecar")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("scas-train", help="train the extraction model on a dataset directory")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_scas_train)

    s = sub.add_parser("scas-attack", help="extract a layer sequence from a trace")
    s.add_argument("--scas", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--input-shape", default="3,32,32")
    s.set_defaults(func=cmd_scas_attack)

    s = sub.add_parser("nmt-train", help="train the translator on '<source>\\t<target>' lines")
    s.add_argument("--pairs", required=True)
    s.set_defaults(func=cmd_nmt_train)

    s = sub.add_parser("deobfuscate", help="translate sequences (one per line)")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_deobfuscate)

    s = sub.add_parser("evaluate", help="run the full experiment")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render a saved report.json")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - top-level error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
