"""Acceptance criteria, one test each, at their stated tolerances.

Each test prints a single PASS/FAIL line (with the measured value) straight
to the terminal, then asserts.  Criteria 5, 6 and 9 share one pair of
full-pipeline runs and take the longest.
"""

import time

import numpy as np
import pytest

from seqdeobf import experiment as ex
from seqdeobf.generator import dataset_seeds, generate_random_dnn, small_config
from seqdeobf.graph import LayerSequence, build_vocabulary, conv2d, encode_sequence, fc, unary
from seqdeobf.interp import equivalence_check, init_params
from seqdeobf.metrics import distance_batch, edit_distance, ler
from seqdeobf.nmt import ModelConfig, Seq2SeqModel, TrainingConfig, gradient_check, sequence_accuracy, train_nmt
from seqdeobf.obfuscators import Attacker, ea_obfuscate, random_plan, redlock_obfuscate, sample_layer_ops
from seqdeobf.passes import applicable_ops, apply_plan, branch_layer, deepen_layer, skip_layer, target_nodes
from seqdeobf.scas import ScasConfig, predict_many, recover_dimensions, train_scas
from seqdeobf.trace import CostModelConfig, graph_latency, simulate_trace

# Full pipeline settings for criteria 5, 6 and 9.
FULL_RUN = {
    "seed": 0,
    "n_a": 300,
    "n_b": 200,
    "train_fraction": 0.8,
    "include_benchmarks": False,
    "nmt": {"epochs": 120, "optimizer": "adam", "lr": 0.003, "batch_size": 4, "lr_decay": 0.97, "decay_start": 60},
    "nmt_model": {"emb": 78, "hidden": 128, "precision": "float32"},
}


@pytest.fixture
def say(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}", flush=True)

    return emit


def elapsed(start):
    return time.perf_counter() - start


# ---------------------------------------------------------------------------
# 1. function preservation

PASSES = {
    "skip": (lambda g, n, p: skip_layer(g, n, p), "skip", 0.0),
    "deepen": (lambda g, n, p: deepen_layer(g, n, p), "deepen", 0.0),
    "output-branch": (lambda g, n, p: branch_layer(g, n, "output", p), "branch_out", 0.0),
    "input-branch": (lambda g, n, p: branch_layer(g, n, "input", p), "branch_in", 1e-12),
}


def test_c01_function_preservation(say):
    start = time.perf_counter()
    worst = dict.fromkeys(PASSES, 0.0)
    applied = dict.fromkeys(PASSES, 0)
    for seed in range(100):
        g0 = generate_random_dnn(small_config(), seed)
        p0 = init_params(g0, seed)
        for i, (name, (fn, op, _)) in enumerate(PASSES.items()):
            rng = np.random.default_rng([seed, i])
            g, p = g0, p0
            for _ in range(3):
                sites = [n for n in target_nodes(g) if op in applicable_ops(g, n)]
                if not sites:
                    break
                g, p = fn(g, sites[int(rng.integers(len(sites)))], p)
                applied[name] += 1
            rep = equivalence_check((g0, p0), (g, p), trials=20, seed=seed)
            worst[name] = max(worst[name], rep.max_rel_err)
    secs = elapsed(start)
    ok = all(worst[k] <= PASSES[k][2] for k in PASSES) and secs <= 120
    detail = ", ".join(f"{k} {worst[k]:.2e} ({applied[k]} rewrites)" for k in PASSES) + f"; {secs:.0f}s"
    say(1, "function preservation", ok, detail)
    for k in PASSES:
        assert worst[k] <= PASSES[k][2], k
    assert secs <= 120


# ---------------------------------------------------------------------------
# 2. edit-distance oracle


def all_sequences(max_len, alphabet):
    """Digit arrays per length; row n of length p encodes n in base ``alphabet``, most significant first."""
    out = []
    for p in range(max_len + 1):
        n = np.arange(alphabet**p)
        out.append(np.stack([(n // alphabet ** (p - 1 - k)) % alphabet for k in range(p)], axis=1) if p else np.zeros((1, 0), int))
    return out


def recursion_table(max_len, alphabet):
    """d(x, y) from the first-symbol recursion, memoized per (len x, len y) block."""
    sizes = [alphabet**p for p in range(max_len + 1)]
    D = {}
    for p in range(max_len + 1):
        for q in range(max_len + 1):
            if p == 0 or q == 0:
                D[p, q] = np.full((sizes[p], sizes[q]), max(p, q), dtype=np.int16)
                continue
            tp, hp = np.arange(sizes[p]) % sizes[p - 1], np.arange(sizes[p]) // sizes[p - 1]
            tq, hq = np.arange(sizes[q]) % sizes[q - 1], np.arange(sizes[q]) // sizes[q - 1]
            delete = D[p - 1, q][tp] + 1
            insert = D[p, q - 1][:, tq] + 1
            sub = D[p - 1, q - 1][tp][:, tq] + (hp[:, None] != hq[None, :])
            D[p, q] = np.minimum(np.minimum(delete, insert), sub)
    return D


def test_c02_edit_distance_oracle(say):
    start = time.perf_counter()
    max_len, alphabet = 6, 4
    seqs = all_sequences(max_len, alphabet)
    table = recursion_table(max_len, alphabet)
    pairs = mismatches = 0
    chunk = 1 << 20
    for p in range(max_len + 1):
        for q in range(max_len + 1):
            A, B = seqs[p], seqs[q]
            want = table[p, q].reshape(-1)
            ia, ib = np.divmod(np.arange(len(A) * len(B)), len(B))
            for lo in range(0, len(ia), chunk):
                a, b = ia[lo : lo + chunk], ib[lo : lo + chunk]
                Ap = np.pad(A[a].astype(np.int8), ((0, 0), (0, max_len - p)), constant_values=-1)
                Bp = np.pad(B[b].astype(np.int8), ((0, 0), (0, max_len - q)), constant_values=-2)
                got = distance_batch(Ap, np.full(len(a), p), Bp, np.full(len(b), q))
                mismatches += int(np.sum(got != want[lo : lo + chunk]))
                pairs += len(a)
    # the word-level entry point on a random sample of the same pairs
    words = ["conv2d 4 4 3 1 1", "relu 4 4 0 0 0", "fc 4 8 0 0 0", "add 4 4 0 0 0"]
    rng = np.random.default_rng(0)
    for _ in range(5000):
        p, q = rng.integers(max_len + 1, size=2)
        i, j = rng.integers(alphabet**p), rng.integers(alphabet**q)
        a, b = [words[k] for k in seqs[p][i]], [words[k] for k in seqs[q][j]]
        mismatches += int(edit_distance(a, b) != table[p, q][i, j])
    secs = elapsed(start)
    ok = mismatches == 0 and secs <= 60
    say(2, "edit-distance oracle", ok, f"{pairs} pairs + 5000 word-level samples, {mismatches} mismatches; {secs:.0f}s")
    assert mismatches == 0
    assert secs <= 60


# ---------------------------------------------------------------------------
# 3. gradient fidelity


def test_c03_gradient_fidelity(say):
    start = time.perf_counter()
    g = generate_random_dnn(seed=1)
    obf = apply_plan(g, random_plan(g, np.random.default_rng(1), 1))[0]
    src = LayerSequence(encode_sequence(obf).words[:8])
    tgt = LayerSequence(encode_sequence(g).words[:5])
    vocab = build_vocabulary([src, tgt])
    model = Seq2SeqModel(vocab, ModelConfig(hidden=16), seed=0)
    pair = (vocab.encode(src), vocab.encode(tgt))
    worst = {}
    for i, comp in enumerate(("embedding", "encoder", "decoder", "attention", "output")):
        worst[comp] = gradient_check(model, pair, n_params=200, seed=i, component=comp)
    secs = elapsed(start)
    top = max(worst.values())
    ok = top <= 1e-4 and secs <= 120
    say(3, "gradient fidelity", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {secs:.0f}s")
    assert top <= 1e-4
    assert secs <= 120


# ---------------------------------------------------------------------------
# 4. SCAS baseline


def test_c04_scas_baseline(say):
    start = time.perf_counter()
    cost = CostModelConfig(noise_sigma=0.0)
    graphs = [generate_random_dnn(seed=s) for s in dataset_seeds(250, 4)]
    traces = [simulate_trace(g, cost) for g in graphs]
    truth = [encode_sequence(g) for g in graphs]
    model = train_scas(traces[:200], [[w.kind for w in t] for t in truth[:200]], ScasConfig(seed=4))
    kinds = predict_many(model, traces[200:])
    lers = []
    for k, tr, g, t in zip(kinds, traces[200:], graphs[200:], truth[200:]):
        lers.append(ler(recover_dimensions(k, tr, cost, g.input_shape), t))
    mean = float(np.mean(lers))
    secs = elapsed(start)
    ok = mean <= 0.15 and secs <= 900
    say(4, "SCAS baseline (sigma 0)", ok, f"held-out mean LER {mean:.4f} (limit 0.15, hardware reference 0.08); {secs:.0f}s")
    assert mean <= 0.15
    assert secs <= 900


# ---------------------------------------------------------------------------
# 5, 6, 9. full pipeline


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    cfg = ex.config_from_mapping(FULL_RUN)
    out = []
    for tag in ("first", "second"):
        d = tmp_path_factory.mktemp(tag)
        start = time.perf_counter()
        report = ex.run_experiment(cfg, d)
        out.append((report, d, elapsed(start)))
    return out


def test_c05_ea_deobfuscation(say, full_runs):
    report, _, secs = full_runs[0]
    ler1, ler2 = report.aggregate("ea", "ler1"), report.aggregate("ea", "ler2")
    ok = ler2 <= 0.6 * ler1 and secs <= 7200
    detail = f"mean ler1 {ler1:.3f}, mean ler2 {ler2:.3f}, ratio {ler2 / ler1:.3f} (limit 0.6, reference 0.32); run {secs / 60:.0f} min"
    say(5, "EA de-obfuscation", ok, detail)
    assert ler2 <= 0.6 * ler1
    assert secs <= 7200


def test_c06_redlock_resilience(say, full_runs):
    report, _, _ = full_runs[0]
    ratio = report.aggregate("all", "resilience_ratio")
    detail = (
        f"ler2 redlock {report.aggregate('redlock', 'ler2'):.3f} / ea {report.aggregate('ea', 'ler2'):.3f}"
        f" = {ratio:.3f} (limit 1.5, reference 2.16)"
    )
    say(6, "ReDLock resilience", ratio >= 1.5, detail)
    assert ratio >= 1.5


def test_c09_reproducibility(say, full_runs):
    (_, a, _), (_, b, _) = full_runs
    same = (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    say(9, "reproducibility", same, "report.json byte-identical across two runs" if same else "report.json differs")
    assert same


# ---------------------------------------------------------------------------
# 7. ReDLock probability law


def test_c07_redlock_probability_law(say):
    start = time.perf_counter()
    drawn = np.zeros(4)
    capped = np.zeros(4)
    seed = 0
    while drawn.sum() < 10_000:
        g = generate_random_dnn(seed=seed)
        rng = np.random.default_rng([seed, 1])
        for _ in target_nodes(g):
            drawn[len(sample_layer_ops(rng))] += 1
        for _, ops in random_plan(g, np.random.default_rng(seed), seed).targets:
            capped[len(ops)] += 1
        seed += 1
    frac = drawn / drawn.sum()
    want = np.array([0.125, 0.375, 0.375, 0.125])
    secs = elapsed(start)
    ok = bool(np.all(np.abs(frac - want) <= 0.02)) and secs <= 60
    detail = (
        f"{int(drawn.sum())} layers: {np.round(100 * frac, 2).tolist()}%"
        f" (after token cap {np.round(100 * capped / capped.sum(), 1).tolist()}%); {secs:.0f}s"
    )
    say(7, "ReDLock probability law", ok, detail)
    assert np.all(np.abs(frac - want) <= 0.02)
    assert secs <= 60


# ---------------------------------------------------------------------------
# 8. latency trend


def test_c08_latency_trend(say):
    start = time.perf_counter()
    cost = CostModelConfig(noise_sigma=0.0)
    train = [generate_random_dnn(seed=s) for s in dataset_seeds(60, 8)]
    traces = [simulate_trace(g, CostModelConfig(seed=i)) for i, g in enumerate(train)]
    model = train_scas(traces, [[w.kind for w in encode_sequence(g)] for g in train], ScasConfig(widths=(64, 128), seed=8))
    attacker = Attacker(model, CostModelConfig())
    ratios = {"ea": [], "redlock": []}
    for i, s in enumerate(dataset_seeds(12, 9)):
        g = generate_random_dnn(seed=s)
        base = graph_latency(g, cost)
        obf, _ = ea_obfuscate(g, attacker, seed=i)
        ratios["ea"].append(graph_latency(obf, cost) / base)
        obf, _ = redlock_obfuscate(g, i, attacker)
        ratios["redlock"].append(graph_latency(obf, cost) / base)
    ea, rl = float(np.mean(ratios["ea"])), float(np.mean(ratios["redlock"]))
    secs = elapsed(start)
    ok = ea > 1 and rl > 1 and secs <= 300
    say(8, "latency trend", ok, f"EA {ea:.3f}x (reference 1.37x), ReDLock {rl:.3f}x (reference 2x); {secs:.0f}s")
    assert ea > 1 and rl > 1
    assert secs <= 300


# ---------------------------------------------------------------------------
# 10. NMT learnability

WORD_POOL = (
    [conv2d(a, b) for a in (16, 32, 64) for b in (16, 32, 64)]
    + [unary(k, c) for k in ("relu", "bn") for c in (16, 32, 64)]
    + [fc(a, b) for a in (64, 128) for b in (10, 16)]
)
COPY_MODEL = {"emb": 78, "hidden": 256, "precision": "float32"}
COPY_TRAIN = {"epochs": 25, "optimizer": "adam", "lr": 0.002, "batch_size": 8, "lr_decay": 0.9, "decay_start": 10}


def random_sequences(n, seed):
    rng = np.random.default_rng(seed)
    return [
        LayerSequence(tuple(WORD_POOL[i] for i in rng.integers(len(WORD_POOL), size=int(rng.integers(3, 7)))))
        for _ in range(n)
    ]


def toy_obfuscate(seq):
    """Follow every conv word with an inserted relu + 3x3 conv pair."""
    out = []
    for w in seq:
        out.append(w)
        if w.kind == "conv2d":
            out += [unary("relu", w.out_ch), conv2d(w.out_ch, w.out_ch, 3, 1, 1)]
    return LayerSequence(tuple(out))


def held_out_accuracy(pairs, seed):
    vocab = build_vocabulary([s for p in pairs for s in p])
    cfg = TrainingConfig(seed=seed, **COPY_TRAIN)
    model, _ = train_nmt(pairs[:500], vocab, cfg, ModelConfig(**COPY_MODEL))
    return sequence_accuracy(model, pairs[500:])


def test_c10_nmt_learnability(say):
    start = time.perf_counter()
    seqs = random_sequences(600, 10)
    copy = held_out_accuracy([(s, s) for s in seqs], 10)
    seqs = random_sequences(600, 11)
    toy = held_out_accuracy([(toy_obfuscate(s), s) for s in seqs], 11)
    secs = elapsed(start)
    ok = copy >= 0.99 and toy >= 0.9 and secs <= 1200
    say(10, "NMT learnability", ok, f"copy {copy:.3f} (limit 0.99), toy obfuscation {toy:.3f} (limit 0.90); {secs:.0f}s")
    assert copy >= 0.99
    assert toy >= 0.9
    assert secs <= 1200
