"""Function-preserving graph rewrites and obfuscation plans.

Every pass takes a graph, a target node id and optionally a :class:`ParamSet`
and returns ``(graph, params)``; ``params`` is ``None`` when none was given.
The target keeps its id across rewrites (after branching it becomes the merge
node), so a plan addressing original node ids stays valid while it is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import INPUT, ComputationGraph, LayerWord, conv2d, infer_shapes, unary

OPS = ("branch_out", "branch_in", "skip", "deepen")
FAMILIES = ("branch", "skip", "deepen")
INSERT_KERNEL = 3


class PassError(ValueError):
    pass


def _insert_after(nodes, anchor, new):
    out = []
    for nid, w in nodes:
        out.append((nid, w))
        if nid == anchor:
            out.extend(new)
    return tuple(out)


def _insert_before(nodes, anchor, new, replace_anchor=None):
    out = []
    for nid, w in nodes:
        if nid == anchor:
            out.extend(new)
            out.append((nid, replace_anchor or w))
        else:
            out.append((nid, w))
    return tuple(out)


def _rewire_consumers(edges, src, dst, keep=()):
    """Point every ``src -> c`` edge at ``dst`` in place, except consumers in ``keep``."""
    return [(dst, b) if a == src and b not in keep else (a, b) for a, b in edges]


def _activation(graph: ComputationGraph, node: int, allowed=("relu",)) -> int:
    w = graph.word(node)
    if w.kind != "conv2d":
        raise PassError(f"node {node} is {w.kind}, expected conv2d")
    cons = graph.consumers(node)
    if len(cons) != 1:
        raise PassError(f"node {node} has {len(cons)} consumers; needs a single activation")
    act = cons[0]
    aw = graph.word(act)
    if aw.kind not in allowed or (aw.kind == "identity" and aw.in_ch != aw.out_ch):
        raise PassError(f"node {node} is followed by {aw.kind}, not a qualifying activation")
    return act


def branch_layer(graph: ComputationGraph, node: int, axis: str = "output", params=None):
    """Split a conv2d/fc into two partial operators.

    ``axis="output"`` splits the output channels (first half ``floor(j/2)``)
    and merges by concat.  ``axis="input"`` slices the input channels with
    two identity slices and merges the partial results by add; the bias stays
    with the first sibling.
    """
    w = graph.word(node)
    if w.kind not in ("conv2d", "fc"):
        raise PassError(f"node {node} ({w.kind}) cannot be branched")
    (prod,) = graph.producers(node)
    nid = graph.next_id()
    if axis == "output":
        j = w.out_ch
        if j < 2:
            raise PassError(f"node {node}: cannot split {j} output channels")
        h = j // 2
        u_word = LayerWord(w.kind, w.in_ch, h, w.kernel, w.stride, w.padding)
        v_word = LayerWord(w.kind, w.in_ch, j - h, w.kernel, w.stride, w.padding)
        u, v = nid, nid + 1
        nodes = _insert_before(graph.nodes, node, [(u, u_word), (v, v_word)], unary("concat", j))
        edges = []
        for a, b in graph.edges:
            if b == node:
                edges += [(a, u), (a, v)]
            else:
                edges.append((a, b))
        edges += [(u, node), (v, node)]
        new = graph.replace(nodes, edges)
        if params is not None:
            params = params.copy()
            p = params.pop(node)
            params[u] = {"W": p["W"][:h].copy(), "b": p["b"][:h].copy()}
            params[v] = {"W": p["W"][h:].copy(), "b": p["b"][h:].copy()}
        return new, params

    if axis != "input":
        raise PassError(f"unknown branch axis {axis!r}")
    in_shape = infer_shapes(graph)[prod]
    c = in_shape[0]
    if c < 2:
        raise PassError(f"node {node}: cannot split {c} input channels")
    m = c // 2
    spatial = int(np.prod(in_shape[1:])) if len(in_shape) > 1 else 1
    a_id, b_id, u, v = nid, nid + 1, nid + 2, nid + 3
    if w.kind == "conv2d":
        u_word = LayerWord("conv2d", m, w.out_ch, w.kernel, w.stride, w.padding)
        v_word = LayerWord("conv2d", c - m, w.out_ch, w.kernel, w.stride, w.padding)
    else:
        u_word = LayerWord("fc", m * spatial, w.out_ch)
        v_word = LayerWord("fc", (c - m) * spatial, w.out_ch)
    new_nodes = [
        (a_id, LayerWord("identity", c, m)),
        (b_id, LayerWord("identity", c, c - m)),
        (u, u_word),
        (v, v_word),
    ]
    nodes = _insert_before(graph.nodes, node, new_nodes, unary("add", w.out_ch))
    edges = []
    for a, b in graph.edges:
        if b == node:
            edges += [(a, a_id), (a, b_id)]
        else:
            edges.append((a, b))
    edges += [(a_id, u), (b_id, v), (u, node), (v, node)]
    new = graph.replace(nodes, edges)
    if params is not None:
        params = params.copy()
        p = params.pop(node)
        W = p["W"]
        if w.kind == "conv2d":
            wu, wv = W[:, :m], W[:, m:]
        else:
            W4 = W.reshape((w.out_ch, c, spatial))
            wu = W4[:, :m].reshape(w.out_ch, m * spatial)
            wv = W4[:, m:].reshape(w.out_ch, (c - m) * spatial)
        params[u] = {"W": wu.copy(), "b": p["b"].copy()}
        params[v] = {"W": wv.copy(), "b": np.zeros_like(p["b"])}
    return new, params


def skip_layer(graph: ComputationGraph, node: int, params=None, kernel: int = INSERT_KERNEL):
    """Add a zero-weight conv + ReLU branch off the node's ReLU, merged by add."""
    act = _activation(graph, node)
    j = graph.word(node).out_ch
    z, zr, add = graph.next_id(), graph.next_id() + 1, graph.next_id() + 2
    nodes = _insert_after(
        graph.nodes,
        act,
        [(z, conv2d(j, j, kernel, 1, kernel // 2)), (zr, unary("relu", j)), (add, unary("add", j))],
    )
    edges = _rewire_consumers(graph.edges, act, add)
    edges += [(act, z), (z, zr), (act, add), (zr, add)]
    new = graph.replace(nodes, edges)
    if params is not None:
        params = params.copy()
        params[z] = {"W": np.zeros((j, j, kernel, kernel)), "b": np.zeros(j)}
    return new, params


def deepen_layer(graph: ComputationGraph, node: int, params=None, kernel: int = INSERT_KERNEL):
    """Insert an identity-initialized conv (+ the same activation) after the node's activation."""
    if kernel % 2 == 0:
        raise PassError(f"deepening kernel must be odd, got {kernel}")
    act = _activation(graph, node, allowed=("relu", "identity"))
    j = graph.word(node).out_ch
    d, dr = graph.next_id(), graph.next_id() + 1
    nodes = _insert_after(
        graph.nodes,
        act,
        [(d, conv2d(j, j, kernel, 1, kernel // 2)), (dr, unary(graph.word(act).kind, j))],
    )
    edges = _rewire_consumers(graph.edges, act, dr)
    edges += [(act, d), (d, dr)]
    new = graph.replace(nodes, edges)
    if params is not None:
        params = params.copy()
        W = np.zeros((j, j, kernel, kernel))
        W[np.arange(j), np.arange(j), kernel // 2, kernel // 2] = 1.0
        params[d] = {"W": W, "b": np.zeros(j)}
    return new, params


# ---------------------------------------------------------------------------
# Plans


def target_nodes(graph: ComputationGraph) -> list[int]:
    """conv2d and fc nodes in canonical order."""
    return [nid for nid in graph.canonical_order() if graph.word(nid).kind in ("conv2d", "fc")]


def applicable_ops(graph: ComputationGraph, node: int) -> set[str]:
    w = graph.word(node)
    ops = set()
    if w.kind not in ("conv2d", "fc"):
        return ops
    if w.out_ch >= 2:
        ops.add("branch_out")
    (prod,) = graph.producers(node)
    c = graph.input_shape[0] if prod == INPUT else graph.word(prod).out_ch
    if c >= 2:
        ops.add("branch_in")
    if w.kind == "conv2d":
        cons = graph.consumers(node)
        if len(cons) == 1 and graph.word(cons[0]).kind == "relu":
            ops.update(("skip", "deepen"))
    return ops


@dataclass(frozen=True)
class ObfuscationPlan:
    """Per-target operation lists, replayable with :func:`apply_plan`."""

    targets: tuple[tuple[int, tuple[str, ...]], ...] = ()
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for _, ops in self.targets:
            for op in ops:
                if op not in OPS:
                    raise ValueError(f"unknown obfuscation op {op!r}")
            if "branch_out" in ops and "branch_in" in ops:
                raise ValueError("at most one branch axis per target")

    def ops_for(self, node: int) -> tuple[str, ...]:
        for nid, ops in self.targets:
            if nid == node:
                return ops
        return ()

    @property
    def op_count(self) -> int:
        return sum(len(ops) for _, ops in self.targets)

    def to_json(self) -> str:
        d = {
            "seed": self.seed,
            "targets": [{"node": nid, "ops": list(ops)} for nid, ops in self.targets],
        }
        if self.meta:
            d["meta"] = self.meta
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ObfuscationPlan":
        d = json.loads(text)
        targets = tuple((t["node"], tuple(t["ops"])) for t in d["targets"])
        return cls(targets, d.get("seed", 0), d.get("meta", {}))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ObfuscationPlan":
        return cls.from_json(Path(path).read_text())


def apply_plan(graph: ComputationGraph, plan: ObfuscationPlan, params=None):
    """Apply deepen, then skip, then branch at each target.

    Ops whose preconditions do not hold on this graph are skipped; the
    ``applied`` list in the result records what actually happened.
    """
    applied = []
    for nid, ops in plan.targets:
        if nid not in graph.ids:
            continue
        legal = applicable_ops(graph, nid)
        for op in ("deepen", "skip", "branch_out", "branch_in"):
            if op not in ops or op not in legal:
                continue
            if op == "deepen":
                graph, params = deepen_layer(graph, nid, params)
            elif op == "skip":
                graph, params = skip_layer(graph, nid, params)
            else:
                graph, params = branch_layer(graph, nid, op.split("_")[1] + "put", params)
            applied.append((nid, op))
    return graph, params, applied


def added_words(graph: ComputationGraph, plan: ObfuscationPlan) -> int:
    """Words a plan adds to the encoded sequence, without building the graph."""
    n = 0
    for nid, ops in plan.targets:
        if nid not in graph.ids:
            continue
        legal = applicable_ops(graph, nid)
        n += sum({"branch_out": 2, "branch_in": 4, "skip": 3, "deepen": 2}[op] for op in ops if op in legal)
    return n
