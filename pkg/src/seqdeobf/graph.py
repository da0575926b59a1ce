"""Computation-graph IR and the layer-word sequence encoding.

A graph is a DAG of operator nodes.  The graph input is the reserved producer
id ``INPUT`` (-1); every node lists its producers through explicit edges, in
order.  Each node carries a :class:`LayerWord`, which is also the element of
the flat layer sequence that the attack and the translator work on.

A word always renders as six tokens::

    kind in_ch out_ch kernel stride padding

with the fields that do not apply to ``kind`` canonicalized to 0.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

KINDS = (
    "conv2d",
    "fc",
    "relu",
    "bn",
    "maxpool",
    "avgpool",
    "add",
    "concat",
    "softmax",
    "identity",
)
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}

PARAMETRIC = ("conv2d", "fc")
POOLS = ("maxpool", "avgpool")
ELEMENTWISE = ("relu", "bn", "softmax", "identity")
MERGES = ("add", "concat")

WORD_ARITY = 6
MAX_TOKENS = 500
UNK = "<unk>"
INPUT = -1


class ParseError(ValueError):
    """Malformed sequence text; ``index`` is the offending word position."""

    def __init__(self, index: int, message: str):
        super().__init__(f"word {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class LayerWord:
    """One operator with its dimension parameters.

    Dimension fields may be ``None`` when they could not be recovered from a
    trace; such fields render as ``<unk>``.
    """

    kind: str
    in_ch: int | None
    out_ch: int | None
    kernel: int | None = 0
    stride: int | None = 0
    padding: int | None = 0

    def __post_init__(self):
        if self.kind not in KIND_INDEX:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind not in ("conv2d",) + POOLS:
            object.__setattr__(self, "kernel", 0)
            object.__setattr__(self, "stride", 0)
            object.__setattr__(self, "padding", 0)
        for name in ("in_ch", "out_ch"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{self.kind}: {name} must be positive, got {v}")
        if self.kind in ("conv2d",) + POOLS:
            for name in ("kernel", "stride"):
                v = getattr(self, name)
                if v is not None and v < 1:
                    raise ValueError(f"{self.kind}: {name} must be positive, got {v}")
            if self.padding is not None and self.padding < 0:
                raise ValueError(f"{self.kind}: padding must be non-negative")

    @property
    def known(self) -> bool:
        return None not in (self.in_ch, self.out_ch, self.kernel, self.stride, self.padding)

    def tokens(self) -> list[str]:
        fields = (self.in_ch, self.out_ch, self.kernel, self.stride, self.padding)
        return [self.kind] + [UNK if v is None else str(v) for v in fields]

    def render(self) -> str:
        return " ".join(self.tokens())

    def __str__(self) -> str:
        return self.render()


def conv2d(in_ch, out_ch, kernel=3, stride=1, padding=None) -> LayerWord:
    if padding is None:
        padding = kernel // 2
    return LayerWord("conv2d", in_ch, out_ch, kernel, stride, padding)


def fc(in_ch, out_ch) -> LayerWord:
    return LayerWord("fc", in_ch, out_ch)


def unary(kind, ch) -> LayerWord:
    return LayerWord(kind, ch, ch)


def pool(kind, ch, kernel=2, stride=2, padding=0) -> LayerWord:
    return LayerWord(kind, ch, ch, kernel, stride, padding)


def parse_word(text: str, index: int = 0) -> LayerWord:
    toks = text.split()
    if not toks:
        raise ParseError(index, "empty word")
    if toks[0] not in KIND_INDEX:
        raise ParseError(index, f"unknown operator kind {toks[0]!r}")
    if len(toks) != WORD_ARITY:
        raise ParseError(index, f"expected {WORD_ARITY} tokens, got {len(toks)}")
    vals: list[int | None] = []
    for t in toks[1:]:
        if t == UNK:
            vals.append(None)
            continue
        try:
            vals.append(int(t))
        except ValueError:
            raise ParseError(index, f"non-integer token {t!r}") from None
    try:
        return LayerWord(toks[0], *vals)
    except ValueError as exc:
        raise ParseError(index, str(exc)) from None


@dataclass(frozen=True)
class LayerSequence:
    words: tuple[LayerWord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def __getitem__(self, i):
        return self.words[i]

    def tokens(self, framed: bool = False) -> list[str]:
        out = ["<start>"] if framed else []
        for w in self.words:
            out.extend(w.tokens())
        if framed:
            out.append("<end>")
        return out

    def token_count(self) -> int:
        """Token count including the two sentinels."""
        return WORD_ARITY * len(self.words) + 2

    def render(self) -> str:
        return ", ".join(w.render() for w in self.words)

    def rendered_words(self) -> list[str]:
        return [w.render() for w in self.words]

    def __str__(self) -> str:
        return self.render()


def parse_sequence(text: str) -> LayerSequence:
    """Parse the comma/space text form.  ``""`` is the empty sequence."""
    text = text.strip()
    if not text:
        return LayerSequence(())
    return LayerSequence(tuple(parse_word(w, i) for i, w in enumerate(text.split(","))))


def words_from_tokens(tokens: Sequence[str]) -> tuple[LayerSequence | None, list[str]]:
    """Group a flat token stream into words.

    Returns the parsed sequence (``None`` if any group is malformed) and the
    per-word strings, so callers can still score a malformed output.
    """
    groups = [list(tokens[i : i + WORD_ARITY]) for i in range(0, len(tokens), WORD_ARITY)]
    words = [" ".join(g) for g in groups]
    try:
        seq = LayerSequence(tuple(parse_word(w, i) for i, w in enumerate(words)))
    except ParseError:
        return None, words
    return seq, [w.render() for w in seq]


# ---------------------------------------------------------------------------
# Graph


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ComputationGraph:
    nodes: tuple[tuple[int, LayerWord], ...]
    edges: tuple[tuple[int, int], ...]
    input_shape: tuple[int, int, int] = (3, 32, 32)
    output_classes: int = 10
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((int(i), w) for i, w in self.nodes))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        words = {}
        for nid, w in self.nodes:
            if nid in words or nid == INPUT:
                raise GraphError(f"duplicate or reserved node id {nid}")
            words[nid] = w
        prod = {nid: [] for nid in words}
        cons = {nid: [] for nid in words}
        cons[INPUT] = []
        for a, b in self.edges:
            if b in prod:
                prod[b].append(a)
            if a in cons:
                cons[a].append(b)
        object.__setattr__(self, "_index", {"words": words, "prod": prod, "cons": cons})

    # lookups -------------------------------------------------------------
    def word(self, nid: int) -> LayerWord:
        return self._index["words"][nid]

    def producers(self, nid: int) -> list[int]:
        return list(self._index["prod"][nid])

    def consumers(self, nid: int) -> list[int]:
        return list(self._index["cons"].get(nid, ()))

    @property
    def ids(self) -> list[int]:
        return [nid for nid, _ in self.nodes]

    def __len__(self):
        return len(self.nodes)

    def next_id(self) -> int:
        return max(self.ids, default=-1) + 1

    def sink(self) -> int | None:
        sinks = [nid for nid in self.ids if not self._index["cons"][nid]]
        return sinks[0] if len(sinks) == 1 else None

    # ordering ------------------------------------------------------------
    def canonical_order(self) -> list[int]:
        """Post-order DFS from the sink; producers visited in edge order.

        Branch bodies therefore appear between their split point and their
        merge node, with the index-0 producer's branch first.
        """
        if not self.nodes:
            return []
        sink = self.sink()
        if sink is None:
            raise GraphError("graph must have exactly one sink")
        prod = self._index["prod"]
        order, done, on_stack = [], set(), set()
        stack = [(sink, 0)]
        on_stack.add(sink)
        while stack:
            nid, i = stack.pop()
            ps = prod[nid]
            while i < len(ps) and (ps[i] == INPUT or ps[i] in done):
                i += 1
            if i < len(ps):
                p = ps[i]
                if p in on_stack:
                    raise GraphError(f"cycle through node {p}")
                if p not in prod:
                    raise GraphError(f"node {nid} has unknown producer {p}")
                stack.append((nid, i + 1))
                stack.append((p, 0))
                on_stack.add(p)
            else:
                done.add(nid)
                on_stack.discard(nid)
                order.append(nid)
        return order

    def slice_offset(self, nid: int) -> int:
        """Channel offset of an identity slice node.

        Identity nodes whose out_ch is smaller than their in_ch select a
        contiguous channel range.  Offsets follow the order of the producer's
        outgoing edges: each slice starts where the previous slice sibling
        ended, wrapping to 0 once a group has tiled all channels.
        """
        (p,) = self.producers(nid)
        off = 0
        for c in self._index["cons"][p]:
            w = self.word(c)
            if c == nid:
                return off % w.in_ch
            if w.kind == "identity" and w.in_ch != w.out_ch:
                off += w.out_ch
        raise GraphError(f"node {nid} not a consumer of {p}")

    # construction helpers --------------------------------------------------
    def replace(self, nodes=None, edges=None) -> "ComputationGraph":
        return ComputationGraph(
            self.nodes if nodes is None else nodes,
            self.edges if edges is None else edges,
            self.input_shape,
            self.output_classes,
        )

    # serialization -----------------------------------------------------------
    def to_json(self) -> str:
        lines = [
            "{",
            f'  "input_shape": {json.dumps(list(self.input_shape))},',
            f'  "classes": {self.output_classes},',
            '  "nodes": [',
        ]
        rows = []
        for nid, w in self.nodes:
            rows.append(
                "    "
                + json.dumps(
                    {
                        "id": nid,
                        "kind": w.kind,
                        "in": w.in_ch,
                        "out": w.out_ch,
                        "k": w.kernel,
                        "s": w.stride,
                        "p": w.padding,
                    }
                )
            )
        lines.append(",\n".join(rows))
        lines.append("  ],")
        lines.append('  "edges": ' + json.dumps([list(e) for e in self.edges]))
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComputationGraph":
        d = json.loads(text)
        nodes = [
            (n["id"], LayerWord(n["kind"], n["in"], n["out"], n["k"], n["s"], n["p"]))
            for n in d["nodes"]
        ]
        return cls(tuple(nodes), tuple(tuple(e) for e in d["edges"]), tuple(d["input_shape"]), d["classes"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ComputationGraph":
        return cls.from_json(Path(path).read_text())


def chain(words: Iterable[LayerWord], input_shape=(3, 32, 32), classes=10) -> ComputationGraph:
    """Build a linear graph from consecutive words."""
    words = list(words)
    nodes = tuple(enumerate(words))
    edges = tuple((i - 1, i) for i in range(len(words)))
    return ComputationGraph(nodes, edges, input_shape, classes)


# ---------------------------------------------------------------------------
# Shape inference and validation


def _out_hw(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def infer_shapes(graph: ComputationGraph, violations: list | None = None) -> dict[int, tuple]:
    """Output shape of every node: ``(C, H, W)`` or ``(F,)``.

    Mismatches are appended to ``violations`` (if given) and inference carries
    on with the node's declared output so that all problems are reported.
    """
    bad = violations if violations is not None else []
    shapes: dict[int, tuple] = {INPUT: graph.input_shape}
    for nid in graph.canonical_order():
        w = graph.word(nid)
        ps = graph.producers(nid)
        ins = [shapes.get(p) for p in ps]
        name = f"node {nid} ({w.kind})"
        if any(s is None for s in ins):
            bad.append(f"{name}: producer shape unknown")
            ins = [s for s in ins if s is not None]
        multi = w.kind in MERGES
        if multi and len(ps) < 2:
            bad.append(f"{name}: merge needs at least 2 producers, has {len(ps)}")
        if not multi and len(ps) != 1:
            bad.append(f"{name}: expects exactly 1 producer, has {len(ps)}")
        if not ins:
            shapes[nid] = (w.out_ch,)
            continue
        x = ins[0]
        chans = x[0]

        def mismatch(expected, what="in_ch"):
            pdesc = ", ".join(f"node {p}" if p != INPUT else "input" for p in ps)
            bad.append(f"channel mismatch: {pdesc} -> {name}: {what} {getattr(w, 'in_ch')} != {expected}")

        if w.kind == "conv2d":
            if len(x) != 3:
                bad.append(f"{name}: conv2d needs a (C,H,W) input")
                shapes[nid] = (w.out_ch, 1, 1)
                continue
            if w.in_ch != chans:
                mismatch(chans)
            if w.kernel % 2 == 0:
                bad.append(f"{name}: even conv kernel {w.kernel}")
            h, wd = _out_hw(x[1], w.kernel, w.stride, w.padding), _out_hw(x[2], w.kernel, w.stride, w.padding)
            if h < 1 or wd < 1:
                bad.append(f"{name}: feature map collapses below 1x1")
                h, wd = max(h, 1), max(wd, 1)
            shapes[nid] = (w.out_ch, h, wd)
        elif w.kind == "fc":
            flat = 1
            for v in x:
                flat *= v
            if w.in_ch != flat:
                mismatch(flat)
            shapes[nid] = (w.out_ch,)
        elif w.kind in POOLS:
            if len(x) != 3:
                bad.append(f"{name}: pooling needs a (C,H,W) input")
                shapes[nid] = (w.out_ch, 1, 1)
                continue
            if w.in_ch != chans or w.out_ch != chans:
                mismatch(chans)
            h, wd = _out_hw(x[1], w.kernel, w.stride, w.padding), _out_hw(x[2], w.kernel, w.stride, w.padding)
            if h < 1 or wd < 1:
                bad.append(f"{name}: feature map collapses below 1x1")
                h, wd = max(h, 1), max(wd, 1)
            shapes[nid] = (chans, h, wd)
        elif w.kind == "identity":
            if w.in_ch != chans:
                mismatch(chans)
            if w.out_ch > w.in_ch:
                bad.append(f"{name}: slice wider than its input")
            elif w.out_ch < w.in_ch and len(ps) == 1:
                off = graph.slice_offset(nid)
                if off + w.out_ch > w.in_ch:
                    bad.append(f"{name}: slice [{off}, {off + w.out_ch}) exceeds {w.in_ch} channels")
            shapes[nid] = (w.out_ch,) + tuple(x[1:])
        elif w.kind in ELEMENTWISE:
            if w.in_ch != chans or w.out_ch != chans:
                mismatch(chans)
            shapes[nid] = tuple(x)
        elif w.kind == "add":
            for s in ins[1:]:
                if tuple(s) != tuple(x):
                    pdesc = ", ".join(str(p) for p in ps)
                    bad.append(f"channel mismatch: add {name} producers {pdesc} have shapes {[tuple(s) for s in ins]}")
                    break
            if w.in_ch != chans or w.out_ch != chans:
                mismatch(chans)
            shapes[nid] = tuple(x)
        elif w.kind == "concat":
            total = sum(s[0] for s in ins)
            if any(tuple(s[1:]) != tuple(x[1:]) for s in ins[1:]):
                bad.append(f"{name}: concat producers differ in spatial size")
            if w.in_ch != total or w.out_ch != total:
                mismatch(total)
            shapes[nid] = (total,) + tuple(x[1:])
    return shapes


def validate_graph(graph: ComputationGraph) -> ValidationReport:
    """Collect every structural violation; never raises."""
    bad: list[str] = []
    ids = set(graph.ids)
    for a, b in graph.edges:
        if a != INPUT and a not in ids:
            bad.append(f"edge ({a}, {b}): unknown producer {a}")
        if b not in ids:
            bad.append(f"edge ({a}, {b}): unknown consumer {b}")
    for nid, w in graph.nodes:
        if not w.known:
            bad.append(f"node {nid}: unknown dimensions")
    if not graph.nodes:
        return ValidationReport(tuple(bad))
    sinks = [nid for nid in graph.ids if not graph.consumers(nid)]
    if len(sinks) != 1:
        bad.append(f"expected exactly one sink, found {sinks}")
        return ValidationReport(tuple(bad))
    if not graph.consumers(INPUT):
        bad.append("graph input is not consumed")
    if bad:
        return ValidationReport(tuple(bad))
    try:
        order = graph.canonical_order()
    except GraphError as exc:
        return ValidationReport((str(exc),))
    if len(order) != len(graph.nodes):
        missing = sorted(ids - set(order))
        bad.append(f"dangling nodes not reaching the sink: {missing}")
    reach = {INPUT}
    for nid in order:
        if all(p in reach for p in graph.producers(nid)):
            reach.add(nid)
    for nid in order:
        if nid not in reach:
            bad.append(f"node {nid} not reachable from the input")
    shapes = infer_shapes(graph, bad)
    if not bad:
        out = shapes[sinks[0]]
        if out != (graph.output_classes,):
            bad.append(f"sink node {sinks[0]} produces {out}, expected ({graph.output_classes},)")
    return ValidationReport(tuple(bad))


def encode_sequence(graph: ComputationGraph) -> LayerSequence:
    report = validate_graph(graph)
    if not report.ok:
        raise GraphError("invalid graph: " + "; ".join(report.violations))
    return LayerSequence(tuple(graph.word(nid) for nid in graph.canonical_order()))


# ---------------------------------------------------------------------------
# Vocabulary

RESERVED = ("<start>", "<end>", "<pad>", "<unk>")
START, END, PAD, UNK_ID = range(4)


class Vocabulary:
    """Token <-> index map with occurrence counts; reserved ids 0..3."""

    def __init__(self, tokens: Sequence[str], counts: dict[str, int]):
        self.itos = list(tokens)
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("reserved tokens must occupy indices 0..3")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = {t: int(counts.get(t, 0)) for t in self.itos}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, index: int) -> str:
        return self.itos[index]

    def encode(self, seq: LayerSequence, framed: bool = True) -> list[int]:
        return [self.index(t) for t in seq.tokens(framed=framed)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_text(self) -> str:
        return "".join(f"{t} {i} {self.counts[t]}\n" for i, t in enumerate(self.itos))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        rows = []
        for line in text.splitlines():
            if not line.strip():
                continue
            tok, idx, cnt = line.split()
            rows.append((int(idx), tok, int(cnt)))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError("vocabulary indices must be contiguous from 0")
        return cls([r[1] for r in rows], {r[1]: r[2] for r in rows})

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


def build_vocabulary(corpus: Sequence[LayerSequence]) -> Vocabulary:
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter()
    for seq in corpus:
        counts.update(seq.tokens())
    for r in RESERVED:
        counts.pop(r, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ordered, dict(counts))
