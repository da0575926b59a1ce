"""Deterministic float64 forward interpreter.

This is the numerical oracle for the obfuscation passes, so it trades speed
for a fixed summation order: every output channel of conv2d/fc accumulates
its terms one input position at a time, in the same order no matter how many
output channels the operator has.  Splitting an operator along its output
axis therefore reproduces the original bits exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import load_arrays, save_arrays
from .graph import INPUT, ComputationGraph, GraphError, validate_graph

BN_EPS = 1e-5


class InterpError(RuntimeError):
    pass


class ParamSet(dict):
    """``node id -> {name: array}``; conv ``W`` is (out, in, k, k)."""

    def copy(self) -> "ParamSet":
        return ParamSet({nid: {k: v.copy() for k, v in d.items()} for nid, d in self.items()})

    def save(self, path) -> None:
        arrays = {f"{nid}/{name}": arr for nid in sorted(self) for name, arr in sorted(self[nid].items())}
        save_arrays(path, arrays, {"kind": "paramset"})

    @classmethod
    def load(cls, path) -> "ParamSet":
        arrays, _ = load_arrays(path)
        out = cls()
        for key, arr in arrays.items():
            nid, name = key.split("/")
            out.setdefault(int(nid), {})[name] = arr
        return out


def param_shapes(graph: ComputationGraph) -> dict[int, dict[str, tuple]]:
    from .graph import infer_shapes

    shapes = infer_shapes(graph)
    out = {}
    for nid, w in graph.nodes:
        if w.kind == "conv2d":
            out[nid] = {"W": (w.out_ch, w.in_ch, w.kernel, w.kernel), "b": (w.out_ch,)}
        elif w.kind == "fc":
            out[nid] = {"W": (w.out_ch, w.in_ch), "b": (w.out_ch,)}
        elif w.kind == "bn":
            c = shapes[nid][0]
            out[nid] = {"scale": (c,), "shift": (c,), "mean": (c,), "var": (c,)}
    return out


def init_params(graph: ComputationGraph, seed: int = 0) -> ParamSet:
    """Seeded uniform[-1, 1] weights scaled by 1/sqrt(fan_in); BN var in [0.5, 1.5]."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for nid, shapes in param_shapes(graph).items():
        d = {}
        if "W" in shapes:
            fan_in = int(np.prod(shapes["W"][1:]))
            scale = 1.0 / np.sqrt(fan_in)
            d["W"] = rng.uniform(-1, 1, shapes["W"]) * scale
            d["b"] = rng.uniform(-1, 1, shapes["b"]) * scale
        else:
            c = shapes["scale"]
            d["scale"] = rng.uniform(0.5, 1.5, c)
            d["shift"] = rng.uniform(-1, 1, c)
            d["mean"] = rng.uniform(-0.5, 0.5, c)
            d["var"] = rng.uniform(0.5, 1.5, c)
        params[nid] = d
    return params


def conv2d(x, W, b, stride, padding):
    c_in, h, w = x.shape
    c_out, _, k, _ = W.shape
    if padding:
        xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    acc = np.zeros((c_out, ho, wo))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for c in range(c_in):
        for a in range(k):
            for bb in range(k):
                patch = xp[c, a : a + span_h : stride, bb : bb + span_w : stride]
                acc += W[:, c, a, bb][:, None, None] * patch[None]
    return acc + b[:, None, None]


def dense(x, W, b):
    x = x.reshape(-1)
    acc = np.zeros(W.shape[0])
    for i in range(x.shape[0]):
        acc += W[:, i] * x[i]
    return acc + b


def pool2d(x, kind, k, stride, padding):
    c, h, w = x.shape
    if padding:
        fill = -np.inf if kind == "maxpool" else 0.0
        xp = np.full((c, h + 2 * padding, w + 2 * padding), fill)
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = None
    for a in range(k):
        for bb in range(k):
            patch = xp[:, a : a + span_h : stride, bb : bb + span_w : stride]
            if out is None:
                out = patch.copy()
            elif kind == "maxpool":
                out = np.maximum(out, patch)
            else:
                out = out + patch
    return out if kind == "maxpool" else out / (k * k)


def softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def _bn(x, p):
    shape = (-1,) + (1,) * (x.ndim - 1)
    inv = 1.0 / np.sqrt(p["var"] + BN_EPS)
    return p["scale"].reshape(shape) * (x - p["mean"].reshape(shape)) * inv.reshape(shape) + p["shift"].reshape(shape)


def forward(graph: ComputationGraph, params: ParamSet, x: np.ndarray, check: bool = True) -> np.ndarray:
    """Run ``x`` through ``graph`` and return the sink's output."""
    if check:
        report = validate_graph(graph)
        if not report.ok:
            raise GraphError("invalid graph: " + "; ".join(report.violations))
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(graph.input_shape):
        raise InterpError(f"input shape {x.shape} != graph input {graph.input_shape}")
    vals = {INPUT: x}
    order = graph.canonical_order()
    if not order:
        return x
    for nid in order:
        w = graph.word(nid)
        ins = [vals[p] for p in graph.producers(nid)]
        p = params.get(nid)
        try:
            if w.kind == "conv2d":
                if p["W"].shape != (w.out_ch, w.in_ch, w.kernel, w.kernel):
                    raise InterpError(f"node {nid}: weight shape {p['W'].shape} does not match {w}")
                y = conv2d(ins[0], p["W"], p["b"], w.stride, w.padding)
            elif w.kind == "fc":
                if p["W"].shape != (w.out_ch, w.in_ch):
                    raise InterpError(f"node {nid}: weight shape {p['W'].shape} does not match {w}")
                y = dense(ins[0], p["W"], p["b"])
            elif w.kind == "relu":
                y = np.maximum(ins[0], 0.0)
            elif w.kind == "bn":
                y = _bn(ins[0], p)
            elif w.kind in ("maxpool", "avgpool"):
                y = pool2d(ins[0], w.kind, w.kernel, w.stride, w.padding)
            elif w.kind == "add":
                y = ins[0]
                for other in ins[1:]:
                    y = y + other
            elif w.kind == "concat":
                y = np.concatenate(ins, axis=0)
            elif w.kind == "softmax":
                y = softmax(ins[0])
            elif w.kind == "identity":
                if w.out_ch < w.in_ch:
                    off = graph.slice_offset(nid)
                    y = ins[0][off : off + w.out_ch].copy()
                else:
                    y = ins[0]
            else:  # pragma: no cover - kinds are closed
                raise InterpError(f"node {nid}: unsupported kind {w.kind}")
        except (KeyError, TypeError) as exc:
            raise InterpError(f"node {nid} ({w.kind}): missing or malformed parameters") from exc
        if not np.all(np.isfinite(y)):
            raise InterpError(f"node {nid} ({w.kind}): non-finite value")
        vals[nid] = y
    return vals[order[-1]]


@dataclass(frozen=True)
class EquivalenceReport:
    max_rel_err: float
    passed: bool
    trials: int


def relative_error(y, ref) -> float:
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    diff = float(np.max(np.abs(y - ref))) if ref.size else 0.0
    if diff == 0.0:
        return 0.0
    return diff / max(scale, np.finfo(float).tiny)


def equivalence_check(a, b, trials: int = 20, seed: int = 0, tol: float = 0.0) -> EquivalenceReport:
    """Compare two ``(graph, params)`` networks on seeded uniform inputs."""
    ga, pa = a
    gb, pb = b
    if tuple(ga.input_shape) != tuple(gb.input_shape) or ga.output_classes != gb.output_classes:
        raise InterpError("networks differ in input shape or class count")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.uniform(-1, 1, ga.input_shape)
        worst = max(worst, relative_error(forward(gb, pb, x), forward(ga, pa, x)))
    return EquivalenceReport(worst, worst <= tol, trials)
