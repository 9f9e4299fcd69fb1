#!/usr/bin/env python3
"""Where do two sibling checkpoints actually differ?

Computes per-tensor normalized Frobenius differences between two parents,
prints a per-category summary, and emits the layer-by-subgroup heatmap and
per-category histogram tables as CSV.

Equivalent CLI:
  moemerge diff base/ variant/ --out diffs.json
  moemerge report --diffs diffs.json --kind heatmap --out heatmap.csv
  moemerge report --diffs diffs.json --kind histogram --out histogram.csv
"""

import statistics
from pathlib import Path

import moemerge as mm

OUT = Path(__file__).parent / "demo_out" / "02_diffs"


def main():
    spec = mm.FixtureSpec(
        layers=6, dense_layers=3, experts=8, vocab=256, hidden=64,
        intermediate=96, moe_intermediate=32, q_lora_rank=16,
        kv_lora_rank=16, attn_inner=64, seed=7,
    )
    base, _ = mm.generate_base(spec, OUT / "base")
    variant, _ = mm.generate_variant(
        spec,
        [
            mm.PerturbationSpec("routed_expert_mlp", "gaussian", 0.02),
            mm.PerturbationSpec("shared_expert_mlp", "shift", 0.004),
            mm.PerturbationSpec("attention", "shift", 0.008),
        ],
        OUT / "variant",
    )

    diffs = mm.compute_diffs([base, variant], workers=4)
    mm.save_diff_cache(diffs, OUT / "diffs.json", [base.fingerprint(), variant.fingerprint()])

    print("per-category diff summary (normalized Frobenius):")
    by_group = {}
    for r in diffs:
        by_group.setdefault(r.category.group.value, []).append(r.max_diff)
    for group, values in sorted(by_group.items()):
        print(
            f"  {group:<22} n={len(values):<4} median={statistics.median(values):.5f} "
            f"max={max(values):.5f}"
        )

    table = mm.emit_heatmap(diffs, aggregate="mean")
    (OUT / "heatmap.csv").write_text(table.to_csv())
    print(f"\nheatmap: {len(table.layers)} layers x {len(table.columns)} subgroups "
          f"-> {OUT / 'heatmap.csv'}")
    print("  columns:", ", ".join(table.columns[:5]), "...")

    hist = mm.emit_histogram(
        diffs, mm.HistogramSpec(edges=(0.001, 0.005, 0.01, 0.05), cutoff=1e-3)
    )
    (OUT / "histogram.csv").write_text(hist.to_csv())
    print(f"histogram rows: {len(hist.rows)}, excluded below cutoff: "
          f"{hist.excluded_below_cutoff} -> {OUT / 'histogram.csv'}")

    rows = mm.census(base)
    routed = sum(r.tensors for r in rows if r.group is mm.TensorGroup.ROUTED_EXPERT_MLP)
    print(f"\ncensus: {routed} routed-expert tensors "
          f"({spec.layers - spec.dense_layers} layers x {spec.experts} experts x 3 projections)")


if __name__ == "__main__":
    main()
