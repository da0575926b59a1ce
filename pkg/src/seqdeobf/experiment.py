"""End-to-end LER experiment and report rendering.

Stages, each writing its artifacts under the output directory so any stage
can be re-run on its own:

    data/        dataset A (extraction training) and B (translator) graphs
    scas/        training traces, label sidecars, extraction model
    obf/<name>/  per-DNN obfuscated graph, plan, candidate report, trace,
                 extracted sequence
    nmt/<name>/  vocabulary, translator checkpoint, training log
    rec/<name>/  recovered sequences for the test split
    report.*     LerReport as JSON, CSV and text
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .generator import GeneratorConfig, generate_dataset, read_manifest
from .graph import ComputationGraph, LayerSequence, build_vocabulary, encode_sequence, parse_sequence
from .metrics import ler
from .nmt import ModelConfig, TrainingConfig, load_checkpoint, save_checkpoint, train_nmt, translate_many
from .obfuscators import Attacker, EAConfig, ea_obfuscate, random_plan, redlock_obfuscate
from .passes import ObfuscationPlan, apply_plan
from .scas import ScasConfig, ScasModel, train_scas
from .trace import CostModelConfig, RuntimeTrace, save_labels, simulate_trace

SCHEMA_VERSION = 1
OBFUSCATORS = ("ea", "redlock")
ROW_FIELDS = ("obfuscator", "id", "role", "n_words", "ler1", "ler2", "ler_rec_obf", "latency_ratio", "parsed")
AGG_FIELDS = ("obfuscator", "metric", "measured", "paper")
# published averages, kept for side-by-side context only
REFERENCE = {
    ("ea", "ler1"): 0.62,
    ("redlock", "ler1"): 0.74,
    ("ea", "ler2"): 0.2,
    ("redlock", "ler2"): 0.6,
    ("ea", "ler_rec_obf"): 0.7,
    ("ea", "latency_ratio"): 1.37,
    ("redlock", "latency_ratio"): 2.0,
    ("all", "resilience_ratio"): 2.16,
}

_STAGE_KEYS = {"data_a": 1, "data_b": 2, "scas": 3, "scas_aug": 4, "ea": 5, "redlock": 6, "nmt": 7, "noise": 8}


class StageError(RuntimeError):
    def __init__(self, stage: str, item: str, exc: Exception):
        super().__init__(f"stage {stage} failed on {item}: {exc}")
        self.stage, self.item = stage, item


def sub_seed(master: int, stage: str, index: int = 0) -> int:
    """Independent 31-bit seed for ``(stage, index)`` under a master seed."""
    ss = np.random.SeedSequence([master, _STAGE_KEYS[stage], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0] >> 1)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_a: int = 600
    n_b: int = 400
    train_fraction: float = 0.8
    sigma: float = 0.05
    obfuscators: tuple[str, ...] = OBFUSCATORS
    redlock_trials: int = 20
    include_benchmarks: bool = True
    scas: ScasConfig = field(default_factory=ScasConfig)
    nmt: TrainingConfig = field(default_factory=TrainingConfig)
    nmt_model: ModelConfig = field(default_factory=ModelConfig)
    ea: EAConfig = field(default_factory=EAConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        for name in self.obfuscators:
            if name not in OBFUSCATORS:
                raise ValueError(f"unknown obfuscator {name!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def cost(self) -> CostModelConfig:
        return CostModelConfig(noise_sigma=self.sigma)


_SECTIONS = {
    "scas": ScasConfig,
    "nmt": TrainingConfig,
    "nmt_model": ModelConfig,
    "ea": EAConfig,
    "generator": GeneratorConfig,
}


def config_from_mapping(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from parsed TOML: top-level keys plus ``[scas]``, ``[nmt]``, ... tables."""
    base = base or ExperimentConfig()
    top = {f.name for f in fields(ExperimentConfig)}
    updates = {}
    for key, value in data.items():
        if key in _SECTIONS:
            section = getattr(base, key)
            known = {f.name for f in fields(section)}
            unknown = set(value) - known
            if unknown:
                raise ValueError(f"unknown keys in [{key}]: {sorted(unknown)}")
            updates[key] = replace(section, **{k: _coerce(v) for k, v in value.items()})
        elif key in top:
            updates[key] = _coerce(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(base, **updates)


def _coerce(v):
    if isinstance(v, list):
        return tuple(_coerce(x) for x in v)
    if isinstance(v, float) and math.isinf(v):
        return v
    return v


def config_to_dict(config: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(config), default=list))


# ---------------------------------------------------------------------------
# Report


@dataclass
class LerRow:
    obfuscator: str
    id: str
    role: str
    n_words: int
    ler1: float
    ler2: float
    ler_rec_obf: float
    latency_ratio: float
    parsed: bool


@dataclass
class LerReport:
    rows: list[LerRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregates(self) -> list[tuple[str, str, float, float | None]]:
        """(obfuscator, metric, measured, paper) over the role-B test rows."""
        out = []
        means = {}
        for name in OBFUSCATORS:
            rows = [r for r in self.rows if r.obfuscator == name and r.role == "B"]
            if not rows:
                continue
            for metric in ("ler1", "ler2", "ler_rec_obf", "latency_ratio"):
                m = float(np.mean([getattr(r, metric) for r in rows]))
                means[(name, metric)] = m
                out.append((name, metric, m, REFERENCE.get((name, metric))))
        if ("ea", "ler2") in means and ("redlock", "ler2") in means:
            ea = means[("ea", "ler2")]
            ratio = means[("redlock", "ler2")] / ea if ea > 0 else math.inf
            out.append(("all", "resilience_ratio", ratio, REFERENCE[("all", "resilience_ratio")]))
        return out

    def aggregate(self, obfuscator: str, metric: str) -> float:
        for name, m, value, _ in self.aggregates():
            if name == obfuscator and m == metric:
                return value
        raise KeyError((obfuscator, metric))

    def to_json(self) -> str:
        data = {
            "schema_version": SCHEMA_VERSION,
            "meta": self.meta,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": [
                {"obfuscator": o, "metric": m, "measured": v, "paper": p} for o, m, v, p in self.aggregates()
            ],
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LerReport":
        data = json.loads(text)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {data.get('schema_version')!r}")
        return cls([LerRow(**r) for r in data["rows"]], data.get("meta", {}))

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, f)) for f in ROW_FIELDS])
        return buf.getvalue()

    def aggregates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for o, m, v, p in self.aggregates():
            w.writerow([o, m, repr(v), "" if p is None else repr(p)])
        return buf.getvalue()

    @classmethod
    def from_rows_csv(cls, text: str) -> "LerReport":
        rows = []
        for d in csv.DictReader(io.StringIO(text)):
            rows.append(
                LerRow(
                    d["obfuscator"],
                    d["id"],
                    d["role"],
                    int(d["n_words"]),
                    float(d["ler1"]),
                    float(d["ler2"]),
                    float(d["ler_rec_obf"]),
                    float(d["latency_ratio"]),
                    d["parsed"] == "1",
                )
            )
        return cls(rows)


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def report_table(report: LerReport) -> str:
    lines = []
    if report.rows:
        lines.append(f"{'obfuscator':<10} {'id':<14} {'role':<4} {'words':>5} {'ler1':>7} {'ler2':>7} {'rec_obf':>7} {'latency':>8}")
        for r in report.rows:
            lines.append(
                f"{r.obfuscator:<10} {r.id:<14} {r.role:<4} {r.n_words:>5} {r.ler1:>7.3f} {r.ler2:>7.3f} "
                f"{r.ler_rec_obf:>7.3f} {r.latency_ratio:>8.3f}"
            )
        lines.append("")
    lines.append(f"{'obfuscator':<10} {'metric':<16} {'measured':>9} {'paper':>7}")
    aggs = report.aggregates()
    for o, m, v, p in aggs:
        lines.append(f"{o:<10} {m:<16} {v:>9.3f} {'' if p is None else f'{p:.2f}':>7}")
    if not aggs:
        lines.append("(no test rows)")
    return "\n".join(lines) + "\n"


def report_render(report: LerReport, out_dir) -> int:
    """Write report.json / report.csv / aggregates.csv / report.txt; returns the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.rows_csv())
    (out / "aggregates.csv").write_text(report.aggregates_csv())
    table = report_table(report)
    (out / "report.txt").write_text(table)
    return 0 if report.rows else 2


# ---------------------------------------------------------------------------
# Stages


def _graphs(data_dir: Path) -> list[tuple[str, ComputationGraph]]:
    rows = read_manifest(data_dir / "manifest.csv")
    return [(r.id, ComputationGraph.load(data_dir / r.graph_path)) for r in rows]


def stage_data(config: ExperimentConfig, out: Path) -> None:
    generate_dataset("A", config.n_a, sub_seed(config.seed, "data_a"), out / "data" / "A", config.generator)
    generate_dataset("B", config.n_b, sub_seed(config.seed, "data_b"), out / "data" / "B", config.generator)
    if config.include_benchmarks:
        generate_dataset("C", 0, 0, out / "data" / "C")


def stage_scas(config: ExperimentConfig, out: Path, progress=None) -> ScasModel:
    """Train the extraction model on dataset A, clean and randomly obfuscated."""
    d = out / "scas"
    (d / "traces").mkdir(parents=True, exist_ok=True)
    traces, labels = [], []
    for i, (gid, g) in enumerate(_graphs(out / "data" / "A")):
        variants = [("clean", g)]
        rng = np.random.default_rng(sub_seed(config.seed, "scas_aug", i))
        variants.append(("obf", apply_plan(g, random_plan(g, rng))[0]))
        for tag, gg in variants:
            t = simulate_trace(gg, replace(config.cost, seed=sub_seed(config.seed, "noise", 2 * i + (tag == "obf"))))
            words = encode_sequence(gg).words
            t.save(d / "traces" / f"{gid}_{tag}.csv")
            save_labels(d / "traces" / f"{gid}_{tag}.labels.csv", words)
            traces.append(t)
            labels.append([w.kind for w in words])
    model = train_scas(traces, labels, replace(config.scas, seed=sub_seed(config.seed, "scas")), progress)
    model.save(d / "model.nup")
    return model


def split_ids(ids: list[str], fraction: float) -> tuple[list[str], list[str]]:
    n_train = int(round(fraction * len(ids)))
    return ids[:n_train], ids[n_train:]


def _obfuscate_one(name, g, index, attacker, config):
    seed = sub_seed(config.seed, name, index)
    if name == "ea":
        return ea_obfuscate(g, attacker, config.ea, seed)
    return redlock_obfuscate(g, seed, attacker, config.redlock_trials)


def stage_obfuscate(config: ExperimentConfig, out: Path, name: str, model: ScasModel, roles=("B", "C")) -> None:
    attacker = Attacker(model, config.cost)
    for role in roles:
        data_dir = out / "data" / role
        if not (data_dir / "manifest.csv").exists():
            continue
        for i, (gid, g) in enumerate(_graphs(data_dir)):
            d = out / "obf" / name / gid
            d.mkdir(parents=True, exist_ok=True)
            try:
                obf, report = _obfuscate_one(name, g, i if role == "B" else 100000 + i, attacker, config)
            except Exception as exc:  # noqa: BLE001 - reported with coordinates
                raise StageError(f"obfuscate/{name}", gid, exc) from exc
            best = report.best
            obf.save(d / "graph.json")
            best.plan.save(d / "plan.json")
            report.save(d / "candidates.csv")
            (d / "extracted.txt").write_text(best.extracted.render() + "\n")
            (d / "original.txt").write_text(encode_sequence(g).render() + "\n")
            (d / "latency_ratio.txt").write_text(repr(best.latency_ratio) + "\n")


def _read_seq(path: Path) -> LayerSequence:
    return parse_sequence(path.read_text().strip())


def stage_nmt(config: ExperimentConfig, out: Path, name: str, progress=None):
    ids = [gid for gid, _ in _graphs(out / "data" / "B")]
    train_ids, _ = split_ids(ids, config.train_fraction)
    if not train_ids:
        raise StageError(f"nmt/{name}", "-", ValueError("empty training split"))
    pairs = [
        (_read_seq(out / "obf" / name / gid / "extracted.txt"), _read_seq(out / "obf" / name / gid / "original.txt"))
        for gid in train_ids
    ]
    vocab = build_vocabulary([s for p in pairs for s in p])
    d = out / "nmt" / name
    d.mkdir(parents=True, exist_ok=True)
    vocab.save(d / "vocab.txt")
    nmt_cfg = replace(config.nmt, seed=sub_seed(config.seed, "nmt", OBFUSCATORS.index(name)))
    model, log = train_nmt(pairs, vocab, nmt_cfg, config.nmt_model, d / "train_log.csv", progress)
    save_checkpoint(model, d / "model.nup")
    return model, log


def stage_translate(config: ExperimentConfig, out: Path, name: str) -> list[LerRow]:
    model = load_checkpoint(out / "nmt" / name / "model.nup")
    ids = [gid for gid, _ in _graphs(out / "data" / "B")]
    _, test_ids = split_ids(ids, config.train_fraction)
    items = [(gid, "B") for gid in test_ids]
    if config.include_benchmarks and (out / "obf" / name).exists():
        items += [(gid, "C") for gid, _ in _graphs(out / "data" / "C") if (out / "obf" / name / gid).exists()]
    if not items:
        return []
    srcs = [_read_seq(out / "obf" / name / gid / "extracted.txt") for gid, _ in items]
    outs = translate_many(model, srcs)
    rec_dir = out / "rec" / name
    rec_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for (gid, role), src, tr in zip(items, srcs, outs):
        truth = _read_seq(out / "obf" / name / gid / "original.txt")
        (rec_dir / f"{gid}.txt").write_text(", ".join(tr.words) + "\n")
        ratio = float((out / "obf" / name / gid / "latency_ratio.txt").read_text())
        rows.append(
            LerRow(
                name,
                gid,
                role,
                len(truth),
                ler(src, truth),
                ler(tr.words, truth),
                ler(tr.words, src),
                ratio,
                tr.parsed,
            )
        )
    return rows


def run_experiment(config: ExperimentConfig, out_dir, progress=None) -> LerReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(config), indent=1, sort_keys=True) + "\n")
    say = progress or (lambda msg: None)
    say("data")
    stage_data(config, out)
    say("scas")
    model = stage_scas(config, out)
    rows = []
    for name in config.obfuscators:
        say(f"obfuscate {name}")
        stage_obfuscate(config, out, name, model)
        say(f"nmt {name}")
        stage_nmt(config, out, name, progress=lambda e: say(f"  epoch {e.epoch} loss {e.loss:.4f} acc {e.token_acc:.3f}"))
        rows += stage_translate(config, out, name)
    report = LerReport(rows, {"seed": config.seed, "n_b": config.n_b, "sigma": config.sigma})
    report_render(report, out)
    return report
