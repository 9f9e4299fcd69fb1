#!/usr/bin/env python3
"""Classify transcripts as reasoning-style by their closing think tags.

A model that emits chain-of-thought wraps it in <think> ... </think>; the
fraction of responses containing the closing tag is a cheap behavioral
signal for where a merged model landed between its parents. This demo
synthesizes three transcripts (a reasoning parent, a plain parent, and a
mixed child) and measures each.

Equivalent CLI:  moemerge think-freq transcript.ndjson
"""

import json
from pathlib import Path

import moemerge as mm

OUT = Path(__file__).parent / "demo_out" / "06_transcripts"


def write_transcript(path, responses):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "\n".join(
            json.dumps({"id": f"q{i}", "response": r}) for i, r in enumerate(responses)
        )
    )
    return path


def main():
    reasoning = ["<think>step by step...</think> The answer is 42."] * 10
    plain = ["The answer is 42."] * 10
    mixed = reasoning[:6] + plain[:4]

    for label, responses in [("reasoning parent", reasoning),
                             ("plain parent", plain),
                             ("merged child", mixed)]:
        path = write_transcript(OUT / f"{label.split()[0]}.ndjson", responses)
        with open(path, encoding="utf-8") as f:
            stats = mm.reasoning_frequency(f)
        print(f"{label:<17} frequency={stats.frequency:.3f} "
              f"({stats.with_closing_tag}/{stats.total} responses closed their think block)")

    # positions of the first closing tag, when present
    path = write_transcript(OUT / "positions.ndjson", ["abc</think>xyz", "<think>hi</think>"])
    with open(path, encoding="utf-8") as f:
        stats = mm.reasoning_frequency(f)
    print("first close-tag character offsets:", stats.close_positions)


if __name__ == "__main__":
    main()
