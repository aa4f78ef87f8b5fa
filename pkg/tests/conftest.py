import functools

import pytest
from hypothesis import HealthCheck, settings

from moedllm.decoder import DecodeConfig, decode_block_vanilla, decode_response
from moedllm.model import ModelConfig, build_toy_model
from moedllm.team import TeamConfig, team_block_decoder

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def small_cfg(seed=0, **kw):
    base = dict(vocab_size=32, hidden_dim=16, num_layers=4, num_experts=16, experts_per_token=2,
                block_size=8, max_blocks=2, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


@functools.lru_cache(maxsize=None)
def toy(seed=0, **kw):
    return build_toy_model(small_cfg(seed, **kw))


def decode(model, team=None, hidden_layers=(), **decode_kw):
    cfg = DecodeConfig(block_size=model.cfg.block_size, max_blocks=model.cfg.max_blocks, **decode_kw)
    if team is None:
        return decode_response(model, cfg, functools.partial(decode_block_vanilla, hidden_layers=hidden_layers))
    return decode_response(model, cfg, team_block_decoder(team, hidden_layers))


# Toy setting where TEAM's strategies have something to work with: clustered
# mask routing and a planted signal that makes acceptance run roughly left to right.
CLUSTERED = dict(num_experts=16, block_size=32, max_blocks=2, clustering_strength=2.0,
                 planted_gain=12.0, planted_decay=0.7)


@pytest.fixture
def full_team():
    return TeamConfig.full()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
