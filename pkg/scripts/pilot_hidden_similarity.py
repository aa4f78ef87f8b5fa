"""Pilot: how often does a position's lowest step-to-step hidden similarity
land on the iteration where it was accepted?

Writes a markdown table to stdout. The acceptance test asserts the fraction
against the threshold recorded in docs/pilot_hidden_similarity.md.
"""

import argparse

from moedllm.decoder import DecodeConfig, decode_block_vanilla, decode_response
from moedllm.metrics import hidden_similarity, min_similarity_at_acceptance
from moedllm.model import ModelConfig, build_toy_model

LAYERS = (0, 1, 2, 3)


def measure(clustering, gain, decay, seeds):
    hits = {l: 0 for l in LAYERS}
    eligible = {l: 0 for l in LAYERS}
    for seed in seeds:
        cfg = ModelConfig(num_experts=16, block_size=32, max_blocks=2, seed=seed,
                          clustering_strength=clustering, planted_gain=gain, planted_decay=decay)
        model = build_toy_model(cfg)
        out = decode_response(model, DecodeConfig(block_size=32, max_blocks=2),
                              lambda m, c, d, b: decode_block_vanilla(m, c, d, b, hidden_layers=LAYERS))
        for l in LAYERS:
            h, e = min_similarity_at_acceptance(hidden_similarity(out.traces, l))
            hits[l] += h
            eligible[l] += e
    return hits, eligible


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=20)
    args = p.parse_args()
    print("| clustering | planted gain | decay | " + " | ".join(f"layer {l}" for l in LAYERS) + " |")
    print("|---|---|---|" + "---|" * len(LAYERS))
    for clustering, gain, decay in [(1.0, 12.0, 0.7), (2.0, 12.0, 0.7), (1.0, 0.0, 0.5), (2.0, 9.0, 0.5)]:
        hits, eligible = measure(clustering, gain, decay, range(args.seeds))
        cells = [f"{hits[l]}/{eligible[l]} = {hits[l] / eligible[l]:.3f}" for l in LAYERS]
        print(f"| {clustering:g} | {gain:g} | {decay:g} | " + " | ".join(cells) + " |")


if __name__ == "__main__":
    main()
