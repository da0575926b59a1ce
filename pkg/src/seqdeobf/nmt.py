"""Attention-based sequence-to-sequence translator over layer-sequence tokens.

Encoder and decoder are stacked LSTMs sharing one token embedding.  The
decoder uses dot-product attention over the top encoder states with input
feeding: the attentional state ``tanh(Wc [context; h])`` of step t is
concatenated to the embedding at step t+1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, clip_gradients, make_optimizer
from .container import ContainerError, load_arrays, save_arrays
from .graph import END, MAX_TOKENS, PAD, START, LayerSequence, Vocabulary, words_from_tokens

LOG_FIELDS = ("epoch", "loss", "token_acc", "seq_acc")
COMPONENTS = ("embedding", "encoder", "decoder", "attention", "output")
PRECISIONS = ("float64", "float32")


class TranslatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    emb: int = 78
    hidden: int = 500
    layers: int = 2
    init_scale: float = 0.1
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    optimizer: str = "sgd"
    lr: float = 1.0
    clip: float = 5.0
    teacher_forcing: float = 1.0
    batch_size: int = 16
    max_tokens: int = MAX_TOKENS
    seed: int = 0
    lr_decay: float = 1.0
    decay_start: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.teacher_forcing != 1.0:
            raise ValueError("only full teacher forcing is supported")


class Seq2SeqModel:
    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or ModelConfig()
        self.trained = False
        c = self.config
        self.dtype = np.dtype(c.precision)
        V, E, H = len(vocab), c.emb, c.hidden
        shapes = {"embedding": (V, E)}
        for side in ("enc", "dec"):
            for layer in range(c.layers):
                n_in = H if layer else (E + H if side == "dec" else E)
                shapes[f"{side}{layer}.W"] = (n_in + H, 4 * H)
                shapes[f"{side}{layer}.b"] = (4 * H,)
        shapes["attn.Wc"] = (2 * H, H)
        shapes["out.W"] = (H, V)
        shapes["out.b"] = (V,)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            value = rng.uniform(-c.init_scale, c.init_scale, shape)
            if name == "embedding":
                value[PAD] = 0.0
            self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    @staticmethod
    def component(name: str) -> str:
        if name == "embedding":
            return "embedding"
        if name.startswith("enc"):
            return "encoder"
        if name.startswith("dec"):
            return "decoder"
        if name.startswith("attn"):
            return "attention"
        return "output"

    # -- forward -----------------------------------------------------------

    def _encode(self, tape: Tape, src: np.ndarray, src_mask: np.ndarray):
        p, c = self.params, self.config
        B, T = src.shape
        H = c.hidden
        hs = [Tensor(np.zeros((B, H), self.dtype)) for _ in range(c.layers)]
        cs = [Tensor(np.zeros((B, H), self.dtype)) for _ in range(c.layers)]
        tops = []
        for t in range(T):
            x = tape.embedding(p["embedding"], src[:, t], PAD)
            for layer in range(c.layers):
                hs[layer], cs[layer] = tape.lstm_cell(
                    x, hs[layer], cs[layer], p[f"enc{layer}.W"], p[f"enc{layer}.b"], src_mask[:, t]
                )
                x = hs[layer]
            tops.append(x)
        return tape.stack(tops, axis=1), hs, cs

    def _decode_step(self, tape, y_prev, feed, hs, cs, memory, src_mask):
        p, c = self.params, self.config
        x = tape.concat([tape.embedding(p["embedding"], y_prev, PAD), feed])
        for layer in range(c.layers):
            hs[layer], cs[layer] = tape.lstm_cell(x, hs[layer], cs[layer], p[f"dec{layer}.W"], p[f"dec{layer}.b"])
            x = hs[layer]
        ctx = tape.attention(x, memory, src_mask)
        return tape.tanh(tape.linear(tape.concat([ctx, x]), p["attn.Wc"]))

    def loss(self, tape: Tape, src: np.ndarray, src_mask: np.ndarray, tgt: np.ndarray, tgt_mask: np.ndarray):
        """Per-token mean NLL under teacher forcing; ``tgt`` includes both sentinels."""
        B = src.shape[0]
        if tgt.shape[1] < 2:
            return Tensor(np.array(0.0)), None
        memory, hs, cs = self._encode(tape, src, src_mask)
        feed = Tensor(np.zeros((B, self.config.hidden), self.dtype))
        outs = []
        for t in range(tgt.shape[1] - 1):
            feed = self._decode_step(tape, tgt[:, t], feed, hs, cs, memory, src_mask)
            outs.append(feed)
        states = tape.stack(outs, axis=1)
        logits = tape.linear(states, self.params["out.W"], self.params["out.b"])
        return tape.nll_loss(logits, tgt[:, 1:], tgt_mask[:, 1:]), logits

    def translate_ids(self, sources: list[list[int]], max_tokens: int = MAX_TOKENS) -> list[list[int]]:
        """Greedy decoding from ``<start>`` until ``<end>`` or the token cap."""
        if not self.trained:
            raise TranslatorError("model is untrained")
        tape = Tape(record=False)
        src, src_mask = pad_batch(sources)
        B = len(sources)
        memory, hs, cs = self._encode(tape, src, src_mask)
        feed = Tensor(np.zeros((B, self.config.hidden), self.dtype))
        y = np.full(B, START)
        out = [[START] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        p = self.params
        for _ in range(max_tokens - 1):
            feed = self._decode_step(tape, y, feed, hs, cs, memory, src_mask)
            logits = feed.value @ p["out.W"].value + p["out.b"].value
            y = np.argmax(logits, axis=1)
            for i in np.flatnonzero(~done):
                out[i].append(int(y[i]))
            done |= y == END
            if done.all():
                break
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class Translation:
    tokens: list[str]
    sequence: LayerSequence | None
    words: list[str] = field(default_factory=list)

    @property
    def parsed(self) -> bool:
        return self.sequence is not None


def pad_batch(seqs: list[list[int]]):
    T = max(len(s) for s in seqs)
    arr = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return arr, mask


def _strip(ids: list[int]) -> list[int]:
    body = ids[1:] if ids and ids[0] == START else list(ids)
    return body[: body.index(END)] if END in body else body


def translate_many(model: Seq2SeqModel, sources: list[LayerSequence], batch_size: int = 32) -> list[Translation]:
    vocab = model.vocab
    out = []
    for lo in range(0, len(sources), batch_size):
        chunk = [vocab.encode(s) for s in sources[lo : lo + batch_size]]
        for ids in model.translate_ids(chunk):
            toks = vocab.decode(_strip(ids))
            seq, words = words_from_tokens(toks)
            out.append(Translation(toks, seq, words))
    return out


def translate(model: Seq2SeqModel, source: LayerSequence) -> Translation:
    return translate_many(model, [source])[0]


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    token_acc: float
    seq_acc: float


def _encode_pairs(pairs, vocab: Vocabulary, max_tokens: int):
    if not pairs:
        raise TranslatorError("no training pairs")
    data = []
    for i, (src, tgt) in enumerate(pairs):
        s, t = vocab.encode(src), vocab.encode(tgt)
        if len(s) > max_tokens or len(t) > max_tokens:
            raise TranslatorError(f"pair {i} exceeds the {max_tokens}-token cap ({len(s)}, {len(t)})")
        data.append((s, t))
    return data


def epoch_lr(config: TrainingConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: fixed up to ``decay_start``, then multiplied by ``lr_decay`` per epoch."""
    return config.lr * config.lr_decay ** max(0, epoch - config.decay_start)


def train_nmt(
    pairs: list[tuple[LayerSequence, LayerSequence]],
    vocab: Vocabulary,
    config: TrainingConfig | None = None,
    model_config: ModelConfig | None = None,
    log_path=None,
    progress=None,
) -> tuple[Seq2SeqModel, list[EpochLog]]:
    """Teacher-forced training; batches are length-bucketed to limit padding."""
    config = config or TrainingConfig()
    data = _encode_pairs(pairs, vocab, config.max_tokens)
    model = Seq2SeqModel(vocab, model_config, seed=config.seed)
    opt = make_optimizer(config.optimizer, model.parameters(), config.lr, config.clip)
    rng = np.random.default_rng(config.seed)
    order = sorted(range(len(data)), key=lambda i: (len(data[i][0]), len(data[i][1]), i))
    batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    log = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = epoch_lr(config, epoch)
        total, tokens, correct, exact = 0.0, 0, 0, 0
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            src, src_mask = pad_batch([data[i][0] for i in idx])
            tgt, tgt_mask = pad_batch([data[i][1] for i in idx])
            tape = Tape()
            loss, logits = model.loss(tape, src, src_mask, tgt, tgt_mask)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TranslatorError(f"non-finite loss at epoch {epoch}, batch {int(bi)}")
            tape.backward(loss)
            opt.step()
            n = int(tgt_mask[:, 1:].sum())
            total += value * n
            tokens += n
            if logits is not None:
                hit = (np.argmax(logits.value, axis=-1) == tgt[:, 1:]) | (tgt_mask[:, 1:] == 0)
                correct += int(((np.argmax(logits.value, axis=-1) == tgt[:, 1:]) * tgt_mask[:, 1:]).sum())
                exact += int(hit.all(axis=1).sum())
        entry = EpochLog(epoch, total / max(tokens, 1), correct / max(tokens, 1), exact / len(data))
        log.append(entry)
        if progress:
            progress(entry)
    model.trained = True
    if log_path is not None:
        write_log(log_path, log)
    return model, log


def write_log(path, log: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for e in log:
            w.writerow([e.epoch, repr(e.loss), repr(e.token_acc), repr(e.seq_acc)])


def sequence_accuracy(model: Seq2SeqModel, pairs) -> float:
    """Fraction of pairs translated to exactly the target sequence."""
    outs = translate_many(model, [s for s, _ in pairs])
    return float(np.mean([o.tokens == list(t.tokens(framed=False)) for o, (_, t) in zip(outs, pairs)]))


# ---------------------------------------------------------------------------
# Gradient check


def gradient_check(
    model: Seq2SeqModel,
    pair: tuple[list[int], list[int]],
    n_params: int = 20,
    seed: int = 0,
    component: str | None = None,
    h: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``pair`` holds framed token ids.  Entries are sampled uniformly from the
    parameters of ``component`` (all components if ``None``); frozen entries
    (the padding embedding row) are excluded.
    """
    src, src_mask = pad_batch([pair[0]])
    tgt, tgt_mask = pad_batch([pair[1]]) if pair[1] else (np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0)))

    def f():
        return float(model.loss(Tape(record=False), src, src_mask, tgt, tgt_mask)[0].value)

    for p in model.parameters():
        p.zero_grad()
    tape = Tape()
    loss, _ = model.loss(tape, src, src_mask, tgt, tgt_mask)
    tape.backward(loss)
    names = [n for n in model.params if component is None or model.component(n) == component]
    if not names:
        raise ValueError(f"unknown component {component!r}")
    rng = np.random.default_rng(seed)
    sizes = np.array([model.params[n].value.size for n in names])
    worst = 0.0
    for _ in range(n_params):
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[k]
        p = model.params[name]
        flat = int(rng.integers(p.value.size))
        idx = np.unravel_index(flat, p.value.shape)
        if name == "embedding" and idx[0] == PAD:
            continue
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        old = p.value[idx]
        p.value[idx] = old + h
        up = f()
        p.value[idx] = old - h
        down = f()
        p.value[idx] = old
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    for p in model.parameters():
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_ARCH = "seq2seq"


def save_checkpoint(model: Seq2SeqModel, path) -> None:
    c = model.config
    meta = {
        "arch": CHECKPOINT_ARCH,
        "emb": c.emb,
        "hidden": c.hidden,
        "layers": c.layers,
        "init_scale": c.init_scale,
        "precision": c.precision,
        "vocab_hash": model.vocab.digest(),
        "vocab": model.vocab.to_text(),
        "trained": model.trained,
    }
    save_arrays(path, {k: v.value for k, v in model.params.items()}, meta)


def load_checkpoint(path, vocab: Vocabulary | None = None) -> Seq2SeqModel:
    """Load a translator; if ``vocab`` is given its hash must match the checkpoint."""
    arrays, meta = load_arrays(path)
    if meta.get("arch") != CHECKPOINT_ARCH:
        raise ContainerError(f"{path}: not a translator checkpoint")
    stored = Vocabulary.from_text(meta["vocab"])
    if stored.digest() != meta["vocab_hash"]:
        raise ContainerError(f"{path}: embedded vocabulary does not match its hash")
    if vocab is not None and vocab.digest() != meta["vocab_hash"]:
        raise ContainerError(f"{path}: vocabulary hash {meta['vocab_hash']} != {vocab.digest()}")
    cfg = ModelConfig(meta["emb"], meta["hidden"], meta["layers"], meta["init_scale"], meta.get("precision", "float64"))
    model = Seq2SeqModel(vocab or stored, cfg)
    if set(arrays) != set(model.params):
        raise ContainerError(f"{path}: parameter set does not match the architecture")
    for k, arr in arrays.items():
        if arr.shape != model.params[k].value.shape:
            raise ContainerError(f"{path}: {k} has shape {arr.shape}, expected {model.params[k].value.shape}")
        model.params[k].value = arr.astype(model.dtype)
    model.trained = bool(meta.get("trained", True))
    return model


def config_dict(model_config: ModelConfig, training: TrainingConfig) -> dict:
    return {"model": asdict(model_config), "training": asdict(training)}
