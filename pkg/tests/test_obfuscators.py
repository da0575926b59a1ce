import numpy as np
import pytest

from seqdeobf.generator import generate_random_dnn, small_config
from seqdeobf.graph import MAX_TOKENS, encode_sequence, validate_graph
from seqdeobf.obfuscators import (
    Attacker,
    EAConfig,
    ObfuscationError,
    _gene_choices,
    ea_obfuscate,
    random_plan,
    redlock_obfuscate,
    sample_layer_ops,
    verify,
)
from seqdeobf.passes import apply_plan, target_nodes
from seqdeobf.scas import ScasConfig, train_scas
from seqdeobf.trace import CostModelConfig, simulate_trace

QUICK_EA = EAConfig(population=6, generations=3)


@pytest.fixture(scope="module")
def attacker():
    gs = [generate_random_dnn(seed=s) for s in range(30)]
    traces = [simulate_trace(g, CostModelConfig(seed=s)) for s, g in enumerate(gs)]
    labels = [[w.kind for w in encode_sequence(g)] for g in gs]
    return Attacker(train_scas(traces, labels, ScasConfig(widths=(16,), epochs=5, lr=0.01)))


def test_layer_op_count_law():
    rng = np.random.default_rng(0)
    counts = np.bincount([len(sample_layer_ops(rng)) for _ in range(20000)], minlength=4)
    assert np.allclose(counts / counts.sum(), [0.125, 0.375, 0.375, 0.125], atol=0.02)


def test_branch_axis_is_uniform():
    rng = np.random.default_rng(1)
    draws = [op for _ in range(20000) for op in sample_layer_ops(rng) if op.startswith("branch")]
    assert abs(draws.count("branch_in") / len(draws) - 0.5) < 0.02


def test_random_plans_fit_the_cap():
    for seed in range(20):
        g = generate_random_dnn(seed=seed)
        obf = apply_plan(g, random_plan(g, np.random.default_rng(seed), seed))[0]
        assert validate_graph(obf).ok
        assert encode_sequence(obf).token_count() <= MAX_TOKENS


def test_tight_cap_drops_ops():
    g = generate_random_dnn(seed=2)
    n = len(encode_sequence(g))
    cap = 6 * (n + 3) + 2
    plan = random_plan(g, np.random.default_rng(0), 0, max_tokens=cap)
    obf = apply_plan(g, plan)[0]
    assert encode_sequence(obf).token_count() <= cap


def test_redlock_scores_every_trial(attacker):
    g = generate_random_dnn(seed=4)
    obf, rep = redlock_obfuscate(g, 7, attacker, trials=20)
    assert len(rep.candidates) == 20
    lers = [c.ler for c in rep.candidates]
    assert rep.best.ler == max(lers)
    assert rep.chosen == lers.index(max(lers))
    assert obf.to_json() == rep.best.graph.to_json()


def test_redlock_is_deterministic(attacker):
    g = generate_random_dnn(seed=4)
    a, ra = redlock_obfuscate(g, 3, attacker, trials=5)
    b, rb = redlock_obfuscate(g, 3, attacker, trials=5)
    assert a.to_json() == b.to_json()
    assert [c.ler for c in ra.candidates] == [c.ler for c in rb.candidates]


def test_redlock_needs_a_trial(attacker):
    with pytest.raises(ObfuscationError):
        redlock_obfuscate(generate_random_dnn(seed=0), 0, attacker, trials=0)


def test_ea_history_is_monotone(attacker):
    g = generate_random_dnn(seed=5)
    obf, rep = ea_obfuscate(g, attacker, QUICK_EA, seed=1)
    h = rep.history
    assert len(h) == QUICK_EA.generations + 1
    assert all(b >= a for a, b in zip(h, h[1:]))
    best = rep.best
    over = max(0.0, best.latency_ratio - QUICK_EA.latency_budget)
    assert h[-1] == pytest.approx(best.ler - QUICK_EA.penalty * over)
    assert validate_graph(obf).ok


def test_ea_starts_from_the_empty_plan(attacker):
    g = generate_random_dnn(seed=5)
    _, rep = ea_obfuscate(g, attacker, QUICK_EA, seed=1)
    assert rep.candidates[0].plan.op_count == 0
    assert rep.candidates[0].latency_ratio == pytest.approx(1.0)


def test_ea_is_deterministic(attacker):
    g = generate_random_dnn(seed=6)
    a, ra = ea_obfuscate(g, attacker, QUICK_EA, seed=2)
    b, rb = ea_obfuscate(g, attacker, QUICK_EA, seed=2)
    assert a.to_json() == b.to_json() and ra.history == rb.history


def test_gene_choices_cover_legal_combinations():
    g = generate_random_dnn(seed=7)
    for n in target_nodes(g):
        ch = _gene_choices(g, n)
        assert ch[0] == ()
        assert len(set(ch)) == len(ch)
        assert all(not ("branch_in" in c and "branch_out" in c) for c in ch)


def test_ea_config_checks():
    with pytest.raises(ValueError):
        EAConfig(population=0)
    with pytest.raises(ValueError):
        EAConfig(elitism=20, population=4)


def test_report_csv(attacker, tmp_path):
    _, rep = redlock_obfuscate(generate_random_dnn(seed=8), 0, attacker, trials=3)
    rep.save(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "candidate,ler,latency_ratio,chosen"
    assert sum(line.endswith(",1") for line in lines[1:]) == 1


def test_plans_preserve_function_on_small_graphs():
    for seed in range(5):
        g = generate_random_dnn(small_config(), seed)
        plan = random_plan(g, np.random.default_rng(seed), seed)
        obf = apply_plan(g, plan)[0]
        rep = verify(g, obf, plan, trials=3, seed=seed)
        assert rep.passed, rep.max_rel_err
