import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import decode, toy
from moedllm.decoder import DecodeConfig, decode_block_vanilla, decode_response
from moedllm.metrics import (
    ComparisonError,
    CostModel,
    InstrumentationError,
    aggregate,
    apt_from,
    concentration,
    estimate_cost,
    expert_timeline,
    format_value,
    hidden_similarity,
    min_similarity_at_acceptance,
    routing_histogram,
    summarize,
    write_csv,
)
from moedllm.model import ModelConfig, ScriptEntry, ScriptSpec, build_scripted_model
from moedllm.team import TeamConfig, team_block_decoder
from moedllm.trace import Accepted, LayerTrace, Route, StepTrace

# (benchmark, method): (APF, TPF, APT) as published
PUBLISHED = {
    ("HumanEval", "vanilla"): (53.34, 2.91, 18.33),
    ("HumanEval", "team"): (34.48, 5.07, 6.80),
    ("MBPP", "vanilla"): (49.59, 2.74, 18.10),
    ("MBPP", "team"): (30.92, 4.56, 6.78),
    ("GSM8K", "vanilla"): (59.11, 3.16, 18.71),
    ("GSM8K", "team"): (36.20, 4.79, 7.56),
    ("Math-500", "vanilla"): (57.90, 3.74, 15.48),
    ("Math-500", "team"): (36.31, 5.57, 6.52),
}


@pytest.mark.parametrize("row", sorted(PUBLISHED))
def test_published_apt_arithmetic(row):
    apf, tpf, apt = PUBLISHED[row]
    assert abs(apt_from(apf, tpf) - apt) <= 0.02


def test_humaneval_vanilla_within_001():
    assert abs(apt_from(53.34, 2.91) - 18.33) <= 0.01


def synthetic_step(iteration, experts_per_layer, accepted, layers=2, active=None, block=0):
    """A step whose every layer activates ``experts_per_layer`` distinct experts."""
    routes = [Route(0, i, "masked", (i,), (1.0,), False) for i in range(experts_per_layer)]
    lts = [LayerTrace(l, list(routes)) for l in range(layers)]
    acc = [Accepted(p, 1, 0.99) for p in range(accepted)]
    act = tuple(range(active if active is not None else max(experts_per_layer, accepted)))
    return StepTrace(block, iteration, act, acc, [[]], lts)


def test_two_forward_example():
    s = summarize([synthetic_step(0, 10, 1), synthetic_step(1, 20, 3)])
    assert (s.apf, s.tpf, s.apt) == (15.0, 2.0, 7.5)
    assert s.total_forwards == 2 and s.total_tokens == 4


def test_single_forward_whole_block():
    s = summarize([synthetic_step(0, 8, 32)])
    assert (s.apf, s.tpf, s.apt) == (8.0, 32.0, 0.25)


def test_zero_tokens_gives_nan_with_warning():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        s = summarize([synthetic_step(0, 4, 0)])
    assert math.isnan(s.apt)
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)
    with pytest.raises(ValueError):
        summarize([])


@given(st.lists(st.tuples(st.integers(1, 16), st.integers(0, 8)), min_size=1, max_size=12), st.randoms())
def test_summary_is_order_insensitive(steps, rnd):
    traces = [synthetic_step(i, e, a) for i, (e, a) in enumerate(steps)]
    if sum(a for _, a in steps) == 0:
        return
    a = summarize(traces)
    shuffled = list(traces)
    rnd.shuffle(shuffled)
    b = summarize(shuffled)
    assert (a.apf, a.tpf, a.apt, a.expert_activations) == (b.apf, b.tpf, b.apt, b.expert_activations)
    assert abs(a.apt - a.apf / a.tpf) <= 1e-9


def test_branch_iteration_counts_once_with_union():
    lt = LayerTrace(0, [Route(0, 0, "hot", (1, 2), (0.5, 0.5), False),
                        Route(1, 0, "hot", (2, 3), (0.5, 0.5), False)])
    t = StepTrace(0, 0, (0,), [Accepted(0, 1, 0.99)], [[], []], [lt], branches=[(), ((1, 4),)])
    s = summarize([t])
    assert s.total_forwards == 1 and s.apf == 3.0
    assert s.active_positions == 2  # one position, two branches


# -- cost model -------------------------------------------------------------------------------


CFG = ModelConfig(vocab_size=32, hidden_dim=16, num_layers=2, num_experts=16, block_size=8, max_blocks=1)


def test_cost_identical_runs():
    s = summarize([synthetic_step(0, 6, 2)], CFG)
    assert estimate_cost(s, CFG, baseline=s).speedup == 1.0


def test_cost_halving_experts_doubles_speed():
    cost = CostModel(expert_param_cost=5.0, attention_token_cost=0.0, shared_cost=0.0)
    full = summarize([synthetic_step(i, 8, 1) for i in range(3)], CFG)
    half = summarize([synthetic_step(i, 4, 1) for i in range(3)], CFG)
    assert estimate_cost(half, CFG, cost, baseline=full).speedup == 2.0


def test_cost_formula():
    cost = CostModel(expert_param_cost=2.0, attention_token_cost=3.0, shared_cost=7.0)
    traces = [synthetic_step(0, 4, 1, active=5), synthetic_step(1, 2, 1, active=3)]
    s = summarize(traces, CFG)
    expected = (7 + 2 * (4 * 2 + 5 * 3)) + (7 + 2 * (2 * 2 + 3 * 3))
    assert estimate_cost(s, CFG, cost).cost_units == expected


def test_cost_linearity():
    cost = CostModel.default_for(CFG)
    base = summarize([synthetic_step(0, 8, 1), synthetic_step(1, 8, 2)], CFG)
    run = summarize([synthetic_step(0, 5, 3)], CFG)
    a = estimate_cost(run, CFG, cost, base)
    b = estimate_cost(run, CFG, cost.scaled(2.0), base)
    assert b.cost_units == 2 * a.cost_units
    assert abs(a.speedup - b.speedup) <= 1e-12


def test_cost_rejects_mismatched_models():
    s = summarize([synthetic_step(0, 4, 1)], CFG)
    other = ModelConfig(vocab_size=32, hidden_dim=16, num_layers=2, num_experts=8, block_size=8)
    with pytest.raises(ComparisonError):
        estimate_cost(s, other)
    with pytest.raises(ValueError):
        CostModel(-1.0, 0.0, 0.0)


def test_default_cost_coefficients():
    c = CostModel.default_for(CFG)
    d, ff = 16, 64
    assert c.expert_param_cost == 2 * d * ff
    assert c.attention_token_cost > 0 and c.shared_cost > 0


# -- timeline and histograms ------------------------------------------------------------------


def growing_script(L=6, E=16):
    """Masked inputs route to expert 0; decoded position p routes to expert 1 + p."""
    spec = ScriptSpec(16, L, 1, E, 1, masked_experts=((0,),))
    for t in range(L):
        entries = []
        for p in range(L):
            experts = ((0,),) if p >= t else ((1 + p,),)
            entries.append(ScriptEntry(p, 1 + p, 0.99 if p == t else 0.2, experts=experts))
        spec.add(0, t, entries)
    return spec


def test_timeline_decoded_contribution_grows():
    L = 6
    out = decode_response(build_scripted_model(growing_script(L)), DecodeConfig(block_size=L, max_blocks=1))
    series = expert_timeline(out.traces, [0])[0]
    assert [p.decoded_contrib for p in series] == list(range(L))
    assert all(p.masked_contrib == 1 for p in series)
    assert all(p.total_experts <= p.decoded_contrib + p.masked_contrib for p in series)


def test_timeline_under_delayed_caching():
    L = 6
    out = decode_response(build_scripted_model(growing_script(L)), DecodeConfig(block_size=L, max_blocks=1),
                          team_block_decoder(TeamConfig(dcd_enabled=True)))
    series = expert_timeline(out.traces, [0])[0]
    assert [p.decoded_contrib for p in series] == [0] + [1] * (L - 1)


def test_timeline_single_iteration_and_bad_layer():
    spec = ScriptSpec(16, 4, 2, 8, 2).add(0, 0, [ScriptEntry(p, 1 + p, 0.99) for p in range(4)])
    out = decode_response(build_scripted_model(spec), DecodeConfig(block_size=4, max_blocks=1))
    tl = expert_timeline(out.traces, [0, 1])
    assert len(tl[0]) == len(tl[1]) == 1
    with pytest.raises(ValueError):
        expert_timeline(out.traces, [5])


def test_histogram_scripted_step():
    spec = ScriptSpec(16, 4, 1, 8, 2, masked_experts=((3, 4),))
    spec.add(0, 0, [ScriptEntry(p, 1 + p, 0.2) for p in range(4)])
    spec.add(0, 1, [ScriptEntry(p, 1 + p, 0.99) for p in range(4)])
    out = decode_response(build_scripted_model(spec), DecodeConfig(block_size=4, max_blocks=1))
    decoded, masked = routing_histogram(out.traces[0], 0, 8)
    assert masked.tolist() == [0, 0, 0, 4, 4, 0, 0, 0]
    assert decoded.sum() == 0


def test_histogram_empty_step():
    t = StepTrace(0, 0, (), [], [[]], [LayerTrace(0, [])])
    decoded, masked = routing_histogram(t, 0, 8)
    assert decoded.tolist() == masked.tolist() == [0] * 8
    assert concentration(masked) == 0.0


def test_clustered_mask_routes_are_more_concentrated():
    wins = n = 0
    for seed in range(20):
        model = toy(seed, clustering_strength=5.0)
        out = decode(model)
        dec_tot = np.zeros(16, dtype=np.int64)
        mask_tot = np.zeros(16, dtype=np.int64)
        for t in out.traces:
            for layer in range(model.cfg.num_layers):
                d, m = routing_histogram(t, layer, 16)
                dec_tot += d
                mask_tot += m
        if dec_tot.sum() and mask_tot.sum():
            n += 1
            wins += concentration(mask_tot) > concentration(dec_tot)
    assert wins >= 0.9 * n


def test_split_covers_experts():
    out = decode(toy(2), TeamConfig.full())
    for t in out.traces:
        for lt in t.layers:
            split = set().union(*lt.split().values()) if lt.routes else set()
            assert split == lt.experts


# -- hidden similarity ------------------------------------------------------------------------


def test_similarity_constant_hidden_is_one():
    L = 4
    spec = ScriptSpec(16, L, 2, 8, 2)
    for t in range(L):
        spec.add(0, t, [ScriptEntry(p, 1 + p, 0.99 if p == t else 0.1) for p in range(t, L)])
    model = build_scripted_model(spec)
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1),
                          lambda m, c, d, b: decode_block_vanilla(m, c, d, b, hidden_layers=(1,)))
    sim = hidden_similarity(out.traces, 1)[0].similarity
    assert sim.shape == (L, L - 1)
    np.testing.assert_allclose(sim, 1.0, atol=1e-12)


def test_similarity_not_applicable_after_caching():
    L = 6
    model = build_scripted_model(growing_script(L))
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1),
                          team_block_decoder(TeamConfig(dcd_enabled=True), hidden_layers=(0,)))
    m = hidden_similarity(out.traces, 0)[0]
    # position 0 is accepted at iteration 0, recomputed once at iteration 1, then cached
    assert not np.isnan(m.similarity[0, 0])
    assert np.all(np.isnan(m.similarity[0, 1:]))
    assert m.accepted_at == list(range(L))


def test_similarity_requires_snapshots():
    with pytest.raises(InstrumentationError):
        hidden_similarity(decode(toy(0)).traces, 0)


def test_similarity_dips_at_acceptance_on_toy():
    model = toy(3, clustering_strength=1.0)
    out = decode(model, hidden_layers=(0, 2))
    hits, eligible = min_similarity_at_acceptance(hidden_similarity(out.traces, 2))
    assert eligible > 0 and hits / eligible >= 0.7


# -- output helpers ---------------------------------------------------------------------------


def test_csv_formatting(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, ["a", "b", "c", "d"], [{"a": 1 / 3, "b": 7, "c": None, "d": True}])
    rows = list(csv.reader(open(path)))
    assert rows == [["a", "b", "c", "d"], ["0.333333333", "7", "", "true"]]
    assert format_value(2.0) == "2"


def test_aggregate_means():
    s1 = summarize([synthetic_step(0, 10, 1)])
    s2 = summarize([synthetic_step(0, 20, 4)])
    agg = aggregate([s1, s2], [1.0, 2.0])
    assert (agg.apf, agg.tpf, agg.speedup, agg.n) == (15.0, 2.5, 1.5, 2)
    assert aggregate([s1]).speedup is None
