from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdeobf.generator import generate_random_dnn, small_config
from seqdeobf.graph import chain, conv2d, encode_sequence, fc, unary
from seqdeobf.obfuscators import random_plan
from seqdeobf.passes import apply_plan
from seqdeobf.trace import (
    CostModelConfig,
    RuntimeTrace,
    graph_costs,
    graph_latency,
    latency_of,
    load_labels,
    op_cost,
    save_labels,
    simulate_trace,
)

QUIET = CostModelConfig(noise_sigma=0.0)


def loop_nest_macs(cin, cout, k, s, p, h):
    """Count multiply-accumulates by walking the convolution loop nest."""
    ho = (h + 2 * p - k) // s + 1
    n = 0
    for _o in range(cout):
        for _y in range(ho):
            for _x in range(ho):
                for _c in range(cin):
                    for _a in range(k):
                        for _b in range(k):
                            n += 1
    return n, ho


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(4, 9))
def test_conv_work_matches_loop_nest(cin, cout, k, s, h):
    p = k // 2
    macs, ho = loop_nest_macs(cin, cout, k, s, p, h)
    c = op_cost(conv2d(cin, cout, k, s, p), [(cin, h, h)], (cout, ho, ho))
    assert c.work == macs
    assert c.weight_volume == cout * cin * k * k + cout
    assert c.input_volume == cin * h * h and c.output_volume == cout * ho * ho


def test_fc_work():
    c = op_cost(fc(20, 7), [(20,)], (7,))
    assert c.work == 140 and c.weight_volume == 147


def test_trace_length_and_rows():
    g = generate_random_dnn(seed=1)
    t = simulate_trace(g, QUIET)
    assert len(t) == len(encode_sequence(g))
    assert t.as_array().shape == (len(t), 4)
    assert np.all((t.cache_hit_rate > 0) & (t.cache_hit_rate <= 1))


def test_noise_free_cycles_are_exact():
    g = chain([conv2d(3, 8), unary("relu", 8), fc(8 * 32 * 32, 10)])
    t = simulate_trace(g, QUIET)
    works = [c.work for c in graph_costs(g)]
    assert np.allclose(t.cycles, 500 + 0.25 * np.array(works))
    assert np.allclose(t.dram_writes, 4 * np.array([c.output_volume for c in graph_costs(g)]))


def test_noise_is_lognormal_with_requested_sigma():
    g = generate_random_dnn(seed=2)
    clean = simulate_trace(g, QUIET).cycles
    logs = np.concatenate(
        [np.log(simulate_trace(g, CostModelConfig(noise_sigma=0.1, seed=s)).cycles / clean) for s in range(60)]
    )
    assert abs(logs.mean()) < 0.01
    assert abs(logs.std() - 0.1) < 0.01


def test_noise_leaves_memory_columns_alone():
    g = generate_random_dnn(seed=2)
    a, b = simulate_trace(g, QUIET), simulate_trace(g, CostModelConfig(noise_sigma=0.2, seed=3))
    assert np.array_equal(a.dram_reads, b.dram_reads)
    assert np.array_equal(a.dram_writes, b.dram_writes)


def test_seeded_noise_is_reproducible():
    g = generate_random_dnn(seed=3)
    cfg = CostModelConfig(seed=9)
    assert np.array_equal(simulate_trace(g, cfg).cycles, simulate_trace(g, cfg).cycles)
    assert not np.array_equal(simulate_trace(g, cfg).cycles, simulate_trace(g, replace(cfg, seed=10)).cycles)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_more_channels_cost_more(seed, factor):
    cin, cout = 4, 4 * factor
    a = op_cost(conv2d(cin, cout), [(cin, 8, 8)], (cout, 8, 8))
    b = op_cost(conv2d(cin, cout + 4), [(cin, 8, 8)], (cout + 4, 8, 8))
    assert b.work > a.work


def test_obfuscation_raises_latency():
    worse = 0
    for seed in range(50):
        g = generate_random_dnn(seed=seed)
        plan = random_plan(g, np.random.default_rng(seed), seed)
        obf, _, applied = apply_plan(g, plan)
        if applied:
            worse += graph_latency(obf, QUIET) > graph_latency(g, QUIET)
        else:
            worse += 1
    assert worse == 50


def test_trace_csv_round_trip(tmp_path):
    t = simulate_trace(generate_random_dnn(seed=4), CostModelConfig(seed=1))
    t.save(tmp_path / "t.csv")
    u = RuntimeTrace.load(tmp_path / "t.csv")
    assert np.array_equal(t.as_array(), u.as_array())


def test_labels_round_trip(tmp_path):
    words = encode_sequence(generate_random_dnn(seed=4)).words
    save_labels(tmp_path / "l.csv", words)
    assert tuple(load_labels(tmp_path / "l.csv")) == tuple(words)


def test_empty_trace_has_no_latency():
    with pytest.raises(ValueError):
        latency_of(RuntimeTrace(*(np.zeros(0) for _ in range(4))))


def test_bad_cost_config():
    with pytest.raises(ValueError):
        CostModelConfig(cycles_per_mac=0)
    with pytest.raises(ValueError):
        CostModelConfig(noise_sigma=-1)
