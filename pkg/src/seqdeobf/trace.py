"""Synthetic per-operator run-time traces.

Stands in for GPU profiling.  Each executed operator yields one row of
cycles, DRAM reads/writes (bytes) and cache-hit rate, computed from an
analytic work count and a one-parameter cache model.  Only cycles carry
noise (multiplicative lognormal); the memory columns are exact, which is what
makes dimension recovery from memory traffic possible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .graph import ComputationGraph, GraphError, LayerWord, infer_shapes, validate_graph

# fraction of the input+weight traffic served from cache at hit rate 1
REUSE = 0.5
TRACE_FIELDS = ("step", "cycles", "dram_reads", "dram_writes", "cache_hit_rate")
LABEL_FIELDS = ("step", "kind", "in_ch", "out_ch", "k", "s", "p")


@dataclass(frozen=True)
class CostModelConfig:
    cycles_per_mac: float = 0.25
    launch_overhead: float = 500.0
    bytes_per_element: int = 4
    cache_capacity: float = float(2**20)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.cycles_per_mac, self.launch_overhead, self.bytes_per_element, self.cache_capacity) <= 0:
            raise ValueError("cost parameters must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass
class RuntimeTrace:
    cycles: np.ndarray
    dram_reads: np.ndarray
    dram_writes: np.ndarray
    cache_hit_rate: np.ndarray

    def __len__(self):
        return len(self.cycles)

    def as_array(self) -> np.ndarray:
        return np.stack([self.cycles, self.dram_reads, self.dram_writes, self.cache_hit_rate], axis=1)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            for i, row in enumerate(self.as_array()):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def load(cls, path) -> "RuntimeTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        return cls(col("cycles"), col("dram_reads"), col("dram_writes"), col("cache_hit_rate"))


@dataclass(frozen=True)
class OpCost:
    """Analytic volumes (elements) and work for one operator."""

    input_volume: int
    output_volume: int
    weight_volume: int
    work: int


def _volume(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def op_cost(word: LayerWord, in_shapes: list[tuple], out_shape: tuple) -> OpCost:
    vin = sum(_volume(s) for s in in_shapes)
    vout = _volume(out_shape)
    k = word.kind
    if k == "conv2d":
        spatial = _volume(out_shape[1:])
        weights = word.out_ch * word.in_ch * word.kernel**2 + word.out_ch
        work = spatial * word.out_ch * word.in_ch * word.kernel**2
    elif k == "fc":
        weights = word.in_ch * word.out_ch + word.out_ch
        work = word.in_ch * word.out_ch
    elif k == "bn":
        weights = 4 * out_shape[0]
        work = 2 * vout  # scale and shift
    elif k == "maxpool":
        weights, work = 0, vout * max(word.kernel**2 - 1, 1)
    elif k == "avgpool":
        weights, work = 0, vout * word.kernel**2
    elif k == "add":
        weights, work = 0, vout * max(len(in_shapes) - 1, 1)
    elif k == "softmax":
        weights, work = 0, 3 * vout  # exp, sum, divide
    else:  # relu, concat, identity (a slice streams its whole source)
        weights, work = 0, vout
    return OpCost(vin, vout, weights, work)


def graph_costs(graph: ComputationGraph) -> list[OpCost]:
    """Per-operator costs in canonical execution order."""
    report = validate_graph(graph)
    if not report.ok:
        raise GraphError("invalid graph: " + "; ".join(report.violations))
    shapes = infer_shapes(graph)
    out = []
    for nid in graph.canonical_order():
        ins = [shapes[p] for p in graph.producers(nid)]
        out.append(op_cost(graph.word(nid), ins, shapes[nid]))
    return out


def cache_hit_rate(cost: CostModelConfig, working_set_bytes):
    return np.clip(cost.cache_capacity / (cost.cache_capacity + working_set_bytes), 0.0, 1.0)


def simulate_trace(graph: ComputationGraph, cost: CostModelConfig | None = None) -> RuntimeTrace:
    cost = cost or CostModelConfig()
    ops = graph_costs(graph)
    bpe = cost.bytes_per_element
    vin = np.array([o.input_volume for o in ops], dtype=np.float64)
    vout = np.array([o.output_volume for o in ops], dtype=np.float64)
    wts = np.array([o.weight_volume for o in ops], dtype=np.float64)
    work = np.array([o.work for o in ops], dtype=np.float64)
    hit = cache_hit_rate(cost, bpe * (vin + wts + vout))
    reads = bpe * (vin + wts) * (1.0 - REUSE * hit)
    writes = bpe * vout
    cycles = cost.launch_overhead + cost.cycles_per_mac * work
    if cost.noise_sigma > 0 and len(ops):
        rng = np.random.default_rng(cost.seed)
        cycles = cycles * np.exp(rng.normal(0.0, cost.noise_sigma, len(ops)))
    return RuntimeTrace(cycles, reads, writes, hit)


def latency_of(trace: RuntimeTrace) -> float:
    if len(trace) == 0:
        raise ValueError("empty trace")
    return float(np.sum(trace.cycles))


def graph_latency(graph: ComputationGraph, cost: CostModelConfig | None = None) -> float:
    """Noise-free total cycles."""
    cost = replace(cost or CostModelConfig(), noise_sigma=0.0)
    return latency_of(simulate_trace(graph, cost))


def save_labels(path, words) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_FIELDS)
        for i, word in enumerate(words):
            w.writerow([i, word.kind, word.in_ch, word.out_ch, word.kernel, word.stride, word.padding])


def load_labels(path) -> list[LayerWord]:
    with open(path, newline="") as fh:
        return [
            LayerWord(r["kind"], int(r["in_ch"]), int(r["out_ch"]), int(r["k"]), int(r["s"]), int(r["p"]))
            for r in csv.DictReader(fh)
        ]
