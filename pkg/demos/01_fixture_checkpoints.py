#!/usr/bin/env python3
"""Generate a miniature MoE checkpoint pair and look inside it.

Builds a DeepSeek-shaped base model (5 decoder layers, the first 2 dense,
4 routed experts per expert layer) plus a "fine-tuned sibling" whose
routed experts were nudged by a known amount, then inspects the files:
shard layout, per-tensor header entries, the manifest, and a validation
scan.

Equivalent CLI:  moemerge fixture --spec spec.json --out base/
"""

from pathlib import Path

import moemerge as mm

OUT = Path(__file__).parent / "demo_out" / "01_fixtures"


def main():
    spec = mm.FixtureSpec(
        layers=5, dense_layers=2, experts=4, shared_experts=1,
        vocab=512, hidden=64, intermediate=96, moe_intermediate=32,
        q_lora_rank=16, kv_lora_rank=16, attn_inner=64,
        seed=2024, max_shard_bytes=256 * 1024,
    )
    base, manifest = mm.generate_base(spec, OUT / "base")
    print(f"base checkpoint: {len(base.tensors)} tensors in {len(base.shards)} shards")
    for shard in base.shards:
        print(f"  {shard.name}: data region {shard.data_size:,} bytes")

    print("\nfirst few header entries:")
    for name in base.layout_names()[:6]:
        info = base.tensors[name]
        print(f"  {name}  {info.dtype.code} {list(info.shape)}  bytes {info.data_offsets}")

    # The sibling gets a constant +0.01 on every routed-expert element, so
    # its normalized Frobenius difference vs the base is exactly 0.01 there.
    variant, expected = mm.generate_variant(
        spec, [mm.PerturbationSpec("routed_expert_mlp", "shift", 0.01)], OUT / "variant"
    )
    planted = {n: e for n, e in expected.items() if e["kind"] != "none"}
    print(f"\nvariant planted diffs on {len(planted)} routed-expert tensors")

    issues = mm.validate_checkpoint(OUT / "base")
    print(f"validation issues in base: {len(issues)} (expected 0)")

    # generation is a pure function of the spec: regenerating is byte-identical
    again, _ = mm.generate_base(spec, OUT / "base_again")
    identical = all(
        a.path.read_bytes() == b.path.read_bytes()
        for a, b in zip(base.shards, again.shards)
    )
    print(f"regeneration byte-identical: {identical}")


if __name__ == "__main__":
    main()
