"""Trace-to-architecture extraction.

An ensemble of single-layer LSTM taggers labels each trace row with an
operator kind; :func:`recover_dimensions` then fills in channel, kernel,
stride and padding values by inverting the cost model's memory-traffic
formulas row by row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, make_optimizer
from .container import ContainerError, load_arrays, save_arrays
from .generator import GeneratorConfig
from .graph import KIND_INDEX, KINDS, LayerSequence, LayerWord
from .trace import REUSE, CostModelConfig, RuntimeTrace

WIDTHS = (64, 96, 128, 256, 512)
FEATURES = (
    "log_cycles",
    "log_reads",
    "log_writes",
    "hit",
    "log_reads_per_write",
    "log_write_step_prev",
    "log_write_step_next",
    "log_cycles_per_write",
)


class ScasError(RuntimeError):
    pass


def trace_features(trace: RuntimeTrace) -> np.ndarray:
    """Per-row feature matrix ``(T, len(FEATURES))``."""
    if len(trace) == 0:
        raise ScasError("empty trace")
    lc = np.log(trace.cycles)
    lr = np.log(np.maximum(trace.dram_reads, 1.0))
    lw = np.log(np.maximum(trace.dram_writes, 1.0))
    prev = np.concatenate([[0.0], np.diff(lw)])
    nxt = np.concatenate([np.diff(lw), [0.0]])
    return np.stack([lc, lr, lw, trace.cache_hit_rate, lr - lw, prev, nxt, lc - lw], axis=1)


@dataclass(frozen=True)
class ScasConfig:
    widths: tuple[int, ...] = WIDTHS
    epochs: int = 20
    optimizer: str = "adam"
    lr: float = 0.005
    batch_size: int = 16
    clip: float = 5.0
    val_fraction: float = 0.1
    seed: int = 0


class Tagger:
    """LSTM over feature rows followed by a linear head over operator kinds."""

    def __init__(self, n_features: int, hidden: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(hidden)
        K = len(KINDS)
        self.hidden = hidden
        self.params = {
            "W": Tensor(rng.uniform(-s, s, (n_features + hidden, 4 * hidden)), True),
            "b": Tensor(np.zeros(4 * hidden), True),
            "Wo": Tensor(rng.uniform(-s, s, (hidden, K)), True),
            "bo": Tensor(np.zeros(K), True),
        }
        self.params["b"].value[hidden : 2 * hidden] = 1.0  # forget-gate bias

    def logits(self, tape: Tape, x: np.ndarray, mask: np.ndarray) -> Tensor:
        B, T, _ = x.shape
        p = self.params
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        hs = []
        for t in range(T):
            h, c = tape.lstm_cell(Tensor(x[:, t]), h, c, p["W"], p["b"], mask[:, t])
            hs.append(h)
        return tape.linear(tape.stack(hs, axis=1), p["Wo"], p["bo"])

    def proba(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        z = self.logits(Tape(record=False), x, mask).value
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def _pad(feats: list[np.ndarray]):
    T = max(len(f) for f in feats)
    x = np.zeros((len(feats), T, feats[0].shape[1]))
    mask = np.zeros((len(feats), T))
    for i, f in enumerate(feats):
        x[i, : len(f)] = f
        mask[i, : len(f)] = 1.0
    return x, mask


@dataclass
class ScasModel:
    taggers: list[Tagger]
    mean: np.ndarray
    std: np.ndarray
    history: dict = field(default_factory=dict)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(t.hidden for t in self.taggers)

    def normalize(self, trace: RuntimeTrace) -> np.ndarray:
        f = trace_features(trace)
        if f.shape[1] != len(self.mean):
            raise ScasError(f"feature arity {f.shape[1]} != model arity {len(self.mean)}")
        return (f - self.mean) / self.std

    def member_proba(self, traces: list[RuntimeTrace]) -> list[list[np.ndarray]]:
        """Per-tagger distributions: ``out[m][i]`` is ``(T_i, K)`` for trace i."""
        feats = [self.normalize(t) for t in traces]
        x, mask = _pad(feats)
        out = []
        for tagger in self.taggers:
            P = tagger.proba(x, mask)
            out.append([P[i, : len(f)] for i, f in enumerate(feats)])
        return out

    def proba(self, traces: list[RuntimeTrace]) -> list[np.ndarray]:
        """Ensemble mean distribution per trace."""
        members = self.member_proba(traces)
        return [np.mean([m[i] for m in members], axis=0) for i in range(len(traces))]

    def save(self, path) -> None:
        arrays = {}
        for i, t in enumerate(self.taggers):
            for k, v in t.params.items():
                arrays[f"tagger{i}/{k}"] = v.value
        meta = {
            "arch": "scas",
            "widths": list(self.widths),
            "kinds": list(KINDS),
            "features": list(FEATURES),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "history": self.history,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "ScasModel":
        arrays, meta = load_arrays(path)
        if meta.get("arch") != "scas":
            raise ContainerError(f"{path}: not an extraction model checkpoint")
        if meta["kinds"] != list(KINDS) or meta["features"] != list(FEATURES):
            raise ContainerError(f"{path}: kind or feature set differs from this build")
        taggers = []
        rng = np.random.default_rng(0)
        for i, width in enumerate(meta["widths"]):
            t = Tagger(len(FEATURES), width, rng)
            for k in t.params:
                t.params[k].value = arrays[f"tagger{i}/{k}"]
            taggers.append(t)
        return cls(taggers, np.array(meta["mean"]), np.array(meta["std"]), meta.get("history", {}))


def kinds_to_labels(kinds) -> np.ndarray:
    bad = [k for k in kinds if k not in KIND_INDEX]
    if bad:
        raise ScasError(f"unknown operator kind(s) {sorted(set(bad))}")
    return np.array([KIND_INDEX[k] for k in kinds])


def _accuracy(tagger: Tagger, x, mask, y) -> float:
    pred = np.argmax(tagger.proba(x, mask), axis=-1)
    return float(((pred == y) * mask).sum() / mask.sum())


def train_scas(
    traces: list[RuntimeTrace],
    labels: list[list[str]],
    config: ScasConfig | None = None,
    progress=None,
) -> ScasModel:
    """Fit the tagger ensemble on traces with aligned kind labels."""
    config = config or ScasConfig()
    if len(traces) < 2:
        raise ScasError("need at least two labeled traces")
    if len(traces) != len(labels):
        raise ScasError("trace and label lists differ in length")
    for i, (t, lab) in enumerate(zip(traces, labels)):
        if len(t) != len(lab):
            raise ScasError(f"trace {i}: {len(t)} rows but {len(lab)} labels")
    ys = [kinds_to_labels(lab) for lab in labels]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(traces))
    n_val = int(round(config.val_fraction * len(traces))) if len(traces) >= 10 else 0
    val, train = order[:n_val], order[n_val:]
    raw = [trace_features(t) for t in traces]
    stacked = np.concatenate([raw[i] for i in train])
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-6)
    feats = [(f - mean) / std for f in raw]

    def batch(idx):
        x, mask = _pad([feats[i] for i in idx])
        y = np.zeros(mask.shape, dtype=np.int64)
        for j, i in enumerate(idx):
            y[j, : len(ys[i])] = ys[i]
        return x, mask, y

    taggers, history = [], {"train_loss": [], "train_acc": [], "val_acc": []}
    for width in config.widths:
        tagger = Tagger(len(FEATURES), width, rng)
        opt = make_optimizer(config.optimizer, tagger.params.values(), config.lr, config.clip)
        # similar lengths share a batch so padding stays small
        by_len = sorted(train, key=lambda i: (len(feats[i]), i))
        batches = [by_len[i : i + config.batch_size] for i in range(0, len(by_len), config.batch_size)]
        losses = []
        for epoch in range(config.epochs):
            total, rows = 0.0, 0.0
            for bi in rng.permutation(len(batches)):
                x, mask, y = batch(batches[bi])
                tape = Tape()
                loss = tape.nll_loss(tagger.logits(tape, x, mask), y, mask)
                tape.backward(loss)
                opt.step()
                total += float(loss.value) * mask.sum()
                rows += mask.sum()
            losses.append(total / rows)
            if progress:
                progress(width, epoch + 1, losses[-1])
        x, mask, y = batch(list(train))
        history["train_acc"].append(_accuracy(tagger, x, mask, y))
        if len(val):
            x, mask, y = batch(list(val))
            history["val_acc"].append(_accuracy(tagger, x, mask, y))
        history["train_loss"].append(losses)
        taggers.append(tagger)
    return ScasModel(taggers, mean, std, history)


def predict_many(model: ScasModel, traces: list[RuntimeTrace], batch_size: int = 64) -> list[list[str]]:
    out = []
    for lo in range(0, len(traces), batch_size):
        for P in model.proba(traces[lo : lo + batch_size]):
            # argmax returns the first maximum, i.e. the lowest kind index on ties
            out.append([KINDS[i] for i in np.argmax(P, axis=1)])
    return out


def predict_sequence(model: ScasModel, trace: RuntimeTrace) -> list[str]:
    if len(trace) == 0:
        raise ScasError("empty trace")
    return predict_many(model, [trace])[0]


# ---------------------------------------------------------------------------
# Dimension recovery

CONV_GEOMETRIES = tuple((k, s, k // 2) for k in (3, 1, 5, 7) for s in (1, 2))
POOL_GEOMETRIES = ((2, 2, 0), (3, 2, 1), (3, 1, 1))
EXACT = 1e-6
SNAP_LIMIT = 0.05


def legal_channels(config: GeneratorConfig | None = None) -> np.ndarray:
    """Channel values the generator and the passes can emit."""
    config = config or GeneratorConfig()
    base = set(config.conv_channel_choices) | set(config.fc_dim_choices)
    base |= {config.classes, config.input_shape[0]}
    halves = {c // 2 for c in base} | {c - c // 2 for c in base}
    return np.array(sorted(v for v in base | halves if v > 0))


def snap(value: float, legal: np.ndarray | None = None) -> int | None:
    """Exact integers pass through; otherwise snap to the nearest legal value.

    Returns ``None`` when no legal value lies within 5% of the estimate.
    """
    if not math.isfinite(value) or value <= 0:
        return None
    n = round(value)
    if n >= 1 and abs(value - n) <= EXACT * max(n, 1):
        return int(n)
    if legal is None or not len(legal):
        return None
    best = int(legal[np.argmin(np.abs(legal - value))])
    return best if abs(best - value) <= SNAP_LIMIT * best else None


def _square_side(volume: float, channels: int | None) -> int | None:
    if not channels:
        return None
    side = math.sqrt(volume / channels)
    n = round(side)
    return int(n) if n >= 1 and abs(side - n) < 1e-6 * max(n, 1) else None


def recover_dimensions(
    kinds: list[str],
    trace: RuntimeTrace,
    cost: CostModelConfig | None = None,
    input_shape=(3, 32, 32),
    legal: np.ndarray | None = None,
) -> LayerSequence:
    """Rebuild full layer words from predicted kinds and memory traffic.

    Output volume comes from DRAM writes; input-plus-weight volume comes
    from DRAM reads with the cache discount undone.  Spatial size is carried
    forward from row to row.  Fields that admit no consistent legal value are
    left unknown.
    """
    cost = cost or CostModelConfig()
    if len(kinds) != len(trace):
        raise ScasError(f"{len(kinds)} kinds for {len(trace)} trace rows")
    if legal is None:
        legal = legal_channels()
    bpe = cost.bytes_per_element
    v_out = trace.dram_writes / bpe
    v_in = trace.dram_reads / (bpe * (1.0 - REUSE * trace.cache_hit_rate))
    side = input_shape[1]  # None once the tensor is flat
    group_side = None  # spatial size feeding an open channel-slice group
    words = []
    for r, kind in enumerate(kinds):
        vo, vi = float(v_out[r]), float(v_in[r])
        if kind == "identity" and group_side is None:
            group_side = side if side else -1
        if group_side is not None and kind in ("identity", "conv2d"):
            side = group_side if group_side > 0 else None
        if kind == "fc":
            out = snap(vo, legal)
            fin = snap((vi - vo) / (1.0 + vo)) if out else None
            words.append(LayerWord("fc", fin, out))
            side = None
            continue
        if kind == "conv2d":
            word, new_side = _recover_conv(vo, vi, float(trace.cycles[r]), side, cost, legal)
            words.append(word)
            side = new_side if new_side else side
            continue
        area = side * side if side else 1
        if kind in ("maxpool", "avgpool"):
            ch = snap(vi / area, legal) if side else None
            geom = _pool_geometry(side, vo / ch if ch else None)
            if geom is None:
                words.append(LayerWord(kind, ch, ch, None, None, None))
                continue
            k, s, p, new_side = geom
            words.append(LayerWord(kind, ch, ch, k, s, p))
            side = new_side
            continue
        if kind == "bn":
            ch = snap((vi - vo) / 4.0, legal)
            if ch and side is not None and _square_side(vo, ch) is None:
                ch = None
        elif kind == "identity":
            cin, cout = snap(vi / area, legal), snap(vo / area, legal)
            words.append(LayerWord(kind, cin, cout))
            continue
        else:  # relu, softmax, add, concat
            ch = snap(vo / area, legal)
            if kind == "add":
                group_side = None
        words.append(LayerWord(kind, ch, ch))
    return LayerSequence(tuple(words))


def _recover_conv(vo, vi, cycles, side, cost, legal):
    if not side:
        return LayerWord("conv2d", None, None, None, None, None), None
    best, best_score = None, math.inf
    for k, s, p in CONV_GEOMETRIES:
        ho = (side + 2 * p - k) // s + 1
        if ho < 1:
            continue
        out = snap(vo / (ho * ho), legal)
        if not out:
            continue
        cin = snap((vi - out) / (side * side + out * k * k), legal)
        if not cin:
            continue
        err = abs((vo - out * ho * ho) / vo) + abs((vi - cin * side * side - out * cin * k * k - out) / vi)
        predicted = cost.launch_overhead + cost.cycles_per_mac * ho * ho * out * cin * k * k
        score = err * 1e6 + abs(math.log(cycles / predicted))
        if score < best_score - 1e-12:
            best, best_score = (LayerWord("conv2d", cin, out, k, s, p), ho), score
    if best is None:
        return LayerWord("conv2d", None, None, None, None, None), None
    return best


def _pool_geometry(side, area_ratio):
    """Find (k, s, p, new_side) taking ``side`` to ``sqrt(out_volume / channels)``."""
    if not side or not area_ratio:
        return None
    target = math.sqrt(area_ratio)
    ho = round(target)
    if ho < 1 or abs(target - ho) > 1e-6 * ho:
        return None
    for k, s, p in POOL_GEOMETRIES:
        if (side + 2 * p - k) // s + 1 == ho:
            return k, s, p, ho
    if side % ho == 0:
        k = side // ho
        return k, k, 0, ho
    return None


def config_dict(config: ScasConfig) -> dict:
    return asdict(config)
