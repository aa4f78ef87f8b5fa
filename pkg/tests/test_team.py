import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import decode, toy
from moedllm.decoder import BlockState, DecodeConfig, decode_response
from moedllm.model import ForwardResult, ScriptEntry, ScriptSpec, build_scripted_model, left_to_right_script
from moedllm.team import (
    BranchSet,
    TeamConfig,
    VerificationInputError,
    classify_masked,
    dcd_active_positions,
    lac_two_round_route,
    seh_build_branches,
    seh_verify,
    team_block_decoder,
)
from moedllm.trace import serialize

MASK = 15


def state_with(L, decoded=(), conf=None, accepted_at=None):
    s = BlockState.fresh(L, MASK)
    for p in decoded:
        s.accept(p, 1, (accepted_at or {}).get(p, 0))
    if conf:
        for p, c in conf.items():
            s.confidence_last[p] = c
    return s


def fake_result(conf, pred=None):
    positions = tuple(sorted(conf))
    preds = [(pred or {}).get(p, 7) for p in positions]
    z = np.zeros((len(positions), 1, 1))
    return ForwardResult(positions, np.zeros((len(positions), 16)),
                         np.array([conf[p] for p in positions]), np.array(preds), [], z, z)


# -- config -----------------------------------------------------------------------------------


def test_team_config_defaults_and_validation():
    t = TeamConfig()
    assert (t.num_branches, t.tau_hot, t.l_hot, t.refresh_interval) == (4, 0.7, 3, None)
    assert not (t.dcd_enabled or t.seh_enabled or t.lac_enabled)
    for bad in (dict(num_branches=0), dict(l_hot=0), dict(tau_hot=0.0), dict(refresh_interval=0),
                dict(e_a_mode="sum")):
        with pytest.raises(ValueError):
            TeamConfig(**bad)
    with pytest.raises(ValueError):
        TeamConfig(tau_hot=0.96).check_against(DecodeConfig())


# -- classification ---------------------------------------------------------------------------


def test_classify_distance_clause():
    s = state_with(8, decoded=(0, 1), conf={p: 0.1 for p in range(2, 8)})
    c = classify_masked(s, TeamConfig())
    assert c.hot == (2, 3)
    assert c.cold == (4, 5, 6, 7)


def test_classify_confidence_clause():
    s = state_with(16, decoded=(0,), conf={10: 0.71})
    c = classify_masked(s, TeamConfig())
    assert 10 in c.hot


def test_classify_fresh_block():
    c = classify_masked(state_with(8), TeamConfig(l_hot=3))
    assert c.hot == (0, 1, 2) and c.cold == (3, 4, 5, 6, 7)


def test_classify_uses_nearest_decoded_token():
    # far-away decoded tokens do not stop a neighbour from being hot
    s = state_with(16, decoded=(0, 15))
    c = classify_masked(s, TeamConfig(l_hot=3))
    assert set(c.hot) == {1, 2, 13, 14}


def test_classify_grace_bookkeeping():
    s = state_with(8, decoded=(0, 1, 2), accepted_at={0: 0, 1: 1, 2: 1})
    c = classify_masked(s, TeamConfig(), iteration=2)
    assert c.newly_accepted == (1, 2) and c.cached == (0,)


@given(st.sets(st.integers(0, 11)), st.lists(st.floats(0, 1), min_size=12, max_size=12),
       st.floats(0.05, 0.9), st.integers(1, 6))
def test_hot_cold_partition(decoded, conf, tau_hot, l_hot):
    s = state_with(12, decoded=sorted(decoded), conf=dict(enumerate(conf)))
    c = classify_masked(s, TeamConfig(tau_hot=tau_hot, l_hot=l_hot))
    assert set(c.hot) | set(c.cold) == set(s.masked_positions())
    assert not set(c.hot) & set(c.cold)


def test_fresh_block_seed_in_pipeline():
    L = 6
    model = build_scripted_model(left_to_right_script(L))
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1),
                          team_block_decoder(TeamConfig(lac_enabled=True)))
    first = out.traces[0]
    assert first.classes == {"hot": (0, 1, 2), "cold": (3, 4, 5)}


# -- delayed caching --------------------------------------------------------------------------


def test_dcd_active_positions_example():
    s = state_with(8, decoded=(0, 1, 2, 3, 4), accepted_at={0: 0, 1: 1, 2: 1, 3: 2, 4: 2})
    active, refresh = dcd_active_positions(s, 3, TeamConfig(dcd_enabled=True))
    assert active == [3, 4, 5, 6, 7] and not refresh


def test_dcd_scheduled_refresh():
    s = state_with(8, decoded=(0, 1), accepted_at={0: 0, 1: 1})
    active, refresh = dcd_active_positions(s, 4, TeamConfig(dcd_enabled=True, refresh_interval=4))
    assert active == list(range(8)) and refresh
    active, refresh = dcd_active_positions(s, 0, TeamConfig(dcd_enabled=True, refresh_interval=4))
    assert not refresh


def test_dcd_off_is_full_block():
    s = state_with(8, decoded=(0,))
    assert dcd_active_positions(s, 3, TeamConfig()) == (list(range(8)), False)


def test_refresh_flag_in_trace():
    L = 8
    model = build_scripted_model(left_to_right_script(L))
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1),
                          team_block_decoder(TeamConfig(dcd_enabled=True, refresh_interval=4)))
    flagged = [t.iteration for t in out.traces if t.refresh]
    assert flagged == [4]
    assert out.traces[4].active_positions == tuple(range(L))
    assert out.traces[3].cache_reads == (0, 1)


# -- speculative exploration ------------------------------------------------------------------


def test_branch_construction_example():
    prev = fake_result({0: 0.99, 2: 0.9, 3: 0.8, 4: 0.72, 5: 0.2}, pred={2: 11, 3: 12, 4: 13})
    classes = SimpleNamespace(hot=(2, 3, 4), cold=(5, 6, 7))
    b = seh_build_branches(prev, classes, TeamConfig(seh_enabled=True), 0.95)
    assert b.branches == ((), ((2, 11),), ((2, 11), (3, 12)), ((2, 11), (3, 12), (4, 13)))
    assert b.candidates == (2, 3, 4)


def test_branch_candidates_exclude_above_threshold_and_cold():
    prev = fake_result({2: 0.97, 3: 0.8, 4: 0.75})
    classes = SimpleNamespace(hot=(2, 3), cold=(4,))
    b = seh_build_branches(prev, classes, TeamConfig(seh_enabled=True), 0.95)
    assert b.candidates == (3,)
    assert len(b) == 2


def test_branch_ties_go_left():
    prev = fake_result({5: 0.8, 3: 0.8})
    b = seh_build_branches(prev, SimpleNamespace(hot=(3, 5), cold=()), TeamConfig(seh_enabled=True), 0.95)
    assert b.candidates == (3, 5)


def test_branch_degenerate_cases():
    prev = fake_result({2: 0.8})
    assert len(seh_build_branches(prev, SimpleNamespace(hot=(), cold=(2,)),
                                  TeamConfig(seh_enabled=True), 0.95)) == 1
    assert len(seh_build_branches(prev, SimpleNamespace(hot=(2,), cold=()),
                                  TeamConfig(seh_enabled=True, num_branches=1), 0.95)) == 1


def test_verify_longest_prefix():
    branches = BranchSet(((), ((2, 11),), ((2, 11), (3, 12))), (2, 3))
    r0 = fake_result({2: 0.97, 3: 0.5}, pred={2: 11, 3: 12})
    r1 = fake_result({3: 0.99}, pred={3: 4})  # mismatched prediction for p3
    r2 = fake_result({})
    out = seh_verify([r0, r1, r2], branches, 0.95)
    assert out.longest_valid_prefix == 1 and out.committed_branch == 1
    assert out.confirmed_speculations == ((2, 11),)


def test_verify_nothing_confirmed():
    branches = BranchSet(((), ((2, 11),)), (2,))
    out = seh_verify([fake_result({2: 0.95}, {2: 11}), fake_result({})], branches, 0.95)
    assert out.committed_branch == 0 and out.confirmed_speculations == ()


def test_verify_needs_one_result_per_branch():
    with pytest.raises(VerificationInputError):
        seh_verify([fake_result({})], BranchSet(((), ((2, 11),)), (2,)), 0.95)


def chain_script(L):
    """Per iteration: the front position clears tau on its own, the next two
    are speculated from the previous pass and confirm each other."""
    spec = ScriptSpec(16, L, 2, 8, 2, max_blocks=1)

    def tok(p):
        return 1 + p % 13

    t = 0
    f = 0
    while f < L:
        entries = [ScriptEntry(f, tok(f), 0.99)]
        if f + 1 < L:
            entries.append(ScriptEntry(f + 1, tok(f + 1), 0.99))
        if f + 2 < L:
            if t == 0:
                entries.append(ScriptEntry(f + 2, tok(f + 2), 0.99))
            else:
                entries.append(ScriptEntry(f + 2, tok(f + 2), 0.99, requires=(f + 1,), confidence_unmet=0.5))
        for off, c in ((3, 0.75), (4, 0.9), (5, 0.8)):
            if f + off < L:
                entries.append(ScriptEntry(f + off, tok(f + off), c))
        entries += [ScriptEntry(p, tok(p), 0.1) for p in range(f + 6, L)]
        spec.add(0, t, entries)
        f += 3
        t += 1
    return spec


@pytest.mark.parametrize("L", [9, 12, 32])
def test_two_confirmed_speculations_per_iteration(L):
    model = build_scripted_model(chain_script(L))
    team = TeamConfig(seh_enabled=True, num_branches=3)
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1), team_block_decoder(team))
    assert len(out.traces) <= math.ceil(L / 3)
    assert out.response == [1 + p % 13 for p in range(L)]
    full = [t for t in out.traces if t.num_branches == 3]
    assert len(full) >= len(out.traces) - 2
    for t in full:
        assert sum(a.speculated for a in t.accepted) == 2
        assert t.committed_branch == 2


def test_num_branches_one_never_branches():
    model = toy(1)
    out = decode(model, TeamConfig(seh_enabled=True, num_branches=1))
    assert all(t.num_branches == 1 for t in out.traces)


# -- limited activation -----------------------------------------------------------------------


def lac_model(E=10, k=1):
    return SimpleNamespace(cfg=SimpleNamespace(experts_per_token=k, num_experts=E))


def one_hot(E, *pairs):
    v = np.zeros(E)
    for e, x in pairs:
        v[e] = x
    return v


def test_lac_containment_example():
    E = 10
    logits = {0: one_hot(E, (7, 5.0)), 1: one_hot(E, (1, 5.0)), 2: one_hot(E, (2, 5.0)),
              3: one_hot(E, (5, 5.0)), 4: one_hot(E, (9, 8.0), (2, 1.0))}
    roles = {0: "new", 1: "hot", 2: "hot", 3: "hot", 4: "cold"}
    records, e_a, fallback = lac_two_round_route(lac_model(E), 0, logits, roles, TeamConfig(lac_enabled=True))
    assert e_a == (1, 2, 5, 7) and not fallback
    cold = [r for r in records if r.token_position == 4][0]
    assert cold.restricted and cold.expert_ids == (2,)
    assert 9 not in cold.expert_ids


def test_lac_all_hot_equals_unrestricted():
    E = 8
    rng = np.random.default_rng(0)
    logits = {p: rng.normal(size=E) for p in range(5)}
    roles = {p: "hot" for p in range(5)}
    lac, _, _ = lac_two_round_route(lac_model(E, 2), 0, logits, roles, TeamConfig(lac_enabled=True))
    from moedllm.model import route_logits
    for r in lac:
        ids, w = route_logits(logits[r.token_position], 2)
        assert r.expert_ids == tuple(ids) and not r.restricted


def test_lac_restricted_weights():
    E = 8
    hot = one_hot(E, (2, 6.0), (3, 5.0))
    cold = one_hot(E, (2, math.log(0.98)), (3, math.log(0.02)), (6, 9.0))
    records, e_a, _ = lac_two_round_route(lac_model(E, 2), 0, {0: hot, 1: cold}, {0: "hot", 1: "cold"},
                                          TeamConfig(lac_enabled=True))
    assert e_a == (2, 3)
    r = [r for r in records if r.token_position == 1][0]
    assert r.expert_ids == (2, 3)
    np.testing.assert_allclose(r.gate_weights, [0.98, 0.02], atol=1e-12)


def test_lac_fallback_when_nothing_necessary():
    E = 8
    records, e_a, fallback = lac_two_round_route(
        lac_model(E, 2), 0, {0: one_hot(E, (4, 3.0)), 1: one_hot(E, (6, 3.0))},
        {0: "cold", 1: "decoded"}, TeamConfig(lac_enabled=True))
    assert fallback and e_a == ()
    assert not any(r.restricted for r in records)


def test_lac_decoded_tokens_do_not_feed_necessary_set():
    E = 8
    records, e_a, _ = lac_two_round_route(
        lac_model(E, 1), 0, {0: one_hot(E, (4, 3.0)), 1: one_hot(E, (6, 3.0)), 2: one_hot(E, (6, 3.0))},
        {0: "decoded", 1: "hot", 2: "cold"}, TeamConfig(lac_enabled=True))
    assert e_a == (6,)


def test_lac_aggregate_mode_limits_size():
    E = 8
    rng = np.random.default_rng(1)
    logits = {p: rng.normal(size=E) for p in range(6)}
    roles = {0: "new", 1: "hot", 2: "hot", 3: "cold", 4: "cold", 5: "cold"}
    _, e_a, _ = lac_two_round_route(lac_model(E, 2), 0, logits, roles,
                                    TeamConfig(lac_enabled=True, e_a_mode="aggregate"))
    assert len(e_a) == 2


@given(st.integers(0, 2**31), st.lists(st.sampled_from(["new", "hot", "cold", "decoded", "spec"]),
                                       min_size=1, max_size=10), st.integers(1, 3))
def test_lac_never_adds_experts(seed, roles, k):
    E = 12
    rng = np.random.default_rng(seed)
    logits = {p: rng.normal(size=E) * 3 for p in range(len(roles))}
    role_map = dict(enumerate(roles))
    records, e_a, fallback = lac_two_round_route(lac_model(E, k), 0, logits, role_map,
                                                 TeamConfig(lac_enabled=True))
    from moedllm.model import route_logits
    plain = {e for p in logits for e in route_logits(logits[p], k)[0]}
    with_lac = {e for r in records for e in r.expert_ids}
    assert len(with_lac) <= len(plain)
    for r in records:
        assert abs(sum(r.gate_weights) - 1.0) <= 1e-9
        if role_map[r.token_position] == "cold" and not fallback:
            assert r.restricted and set(r.expert_ids) <= set(e_a)
    assert fallback == ("cold" in roles and not any(x in ("new", "hot", "spec") for x in roles))


# -- composed decoding ------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_identities_against_vanilla(seed):
    model = toy(seed)
    ref = serialize(decode(model).traces)
    assert serialize(decode(model, TeamConfig()).traces) == ref
    assert serialize(decode(model, TeamConfig(seh_enabled=True, num_branches=1)).traces) == ref
    assert serialize(decode(model, TeamConfig(dcd_enabled=True, refresh_interval=1)).traces) == ref


def _grace_violations(traces):
    bad = []
    blocks = {}
    for t in traces:
        blocks.setdefault(t.block_index, []).append(t)
    for steps in blocks.values():
        last = steps[-1].iteration
        for t in steps:
            for a in t.accepted:
                if t.iteration == last:
                    continue
                later = [u for u in steps if u.iteration > t.iteration]
                hits = [u.iteration for u in later if a.position in u.active_positions]
                if hits != [t.iteration + 1]:
                    bad.append((t.block_index, a.position, t.iteration, hits))
    return bad


@pytest.mark.parametrize("team", [TeamConfig(dcd_enabled=True), TeamConfig.full()])
@pytest.mark.parametrize("seed", range(4))
def test_one_step_grace(team, seed):
    out = decode(toy(seed, clustering_strength=2.0, planted_gain=9.0), team)
    assert _grace_violations(out.traces) == []


def test_grace_on_script():
    L = 8
    model = build_scripted_model(left_to_right_script(L))
    out = decode_response(model, DecodeConfig(block_size=L, max_blocks=1),
                          team_block_decoder(TeamConfig(dcd_enabled=True)))
    assert _grace_violations(out.traces) == []
    assert [t.active_positions for t in out.traces[:3]] == [tuple(range(8)), tuple(range(8)), tuple(range(1, 8))]


@pytest.mark.parametrize("seed", range(4))
def test_full_team_trace_invariants(seed):
    model = toy(seed, clustering_strength=2.0, planted_gain=9.0)
    out = decode(model, TeamConfig.full())
    ref = decode(model)
    assert model.cfg.mask_id not in out.response
    decoded_before = {}
    for t in out.traces:
        seen = decoded_before.setdefault(t.block_index, set())
        masked = set(range(model.cfg.block_size)) - seen
        assert set(t.classes["hot"]) | set(t.classes["cold"]) == masked
        for a in t.accepted:
            if a.speculated:
                pred, conf = t.output(a.verify_branch, a.position)
                assert pred == a.token and conf > 0.95
        seen |= set(t.accepted_positions)
    # tokens may differ from vanilla (caching is approximate) but the block structure does not
    assert len(out.response) == len(ref.response)
