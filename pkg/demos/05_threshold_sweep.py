#!/usr/bin/env python3
"""How does the difference threshold reshape a merge?

Plants three diff levels into a variant (shared experts 0.001, attention
0.002, routed experts 0.003), then sweeps delta across them: each step of
the threshold knocks out one more category, without executing any merge.

Equivalent CLI:  moemerge sweep --recipe recipe.json --deltas 0,0.0015,0.0025,0.0035
"""

from pathlib import Path

import moemerge as mm

OUT = Path(__file__).parent / "demo_out" / "05_sweep"


def main():
    spec = mm.FixtureSpec(
        layers=5, dense_layers=2, experts=4, vocab=256, hidden=64,
        intermediate=96, moe_intermediate=32, q_lora_rank=16,
        kv_lora_rank=16, attn_inner=64, seed=13,
    )
    base, _ = mm.generate_base(spec, OUT / "base")
    variant, _ = mm.generate_variant(
        spec,
        [
            mm.PerturbationSpec("shared_expert_mlp", "shift", 0.001),
            mm.PerturbationSpec("attention", "shift", 0.002),
            mm.PerturbationSpec("routed_expert_mlp", "shift", 0.003),
        ],
        OUT / "variant",
    )

    diffs = mm.compute_diffs([base, variant])
    config = mm.MergeConfig(
        models=(str(OUT / "base"), str(OUT / "variant")), lambdas=(0.5, 0.5)
    )
    deltas = [0.0, 0.0015, 0.0025, 0.0035]
    rows = mm.threshold_sweep(diffs, config, deltas)

    groups = ["shared_expert_mlp", "attention", "routed_expert_mlp"]
    print(f"{'delta':>8} | " + " | ".join(f"{g:>18}" for g in groups) + " | total")
    for row in rows:
        cells = " | ".join(f"{row.by_group[g]:>18}" for g in groups)
        print(f"{row.delta:>8} | {cells} | {row.total:>5}")
    print("\nraising delta excludes shared experts first, then attention, "
          "then the routed experts themselves; totals never increase.")


if __name__ == "__main__":
    main()
