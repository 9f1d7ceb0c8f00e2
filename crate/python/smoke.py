"""Smoke test for the Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke.py [RUN_DIR]`. With a run directory written by
`refinedial train`, it also samples responses from the trained model.
"""

import math
import sys
import tempfile

import refinedial


def main() -> int:
    assert abs(refinedial.bleu("the cat", "the cat sat", 1) - math.exp(-0.5)) < 1e-4
    assert abs(refinedial.rouge_l("a b c", "a x c") - 2 / 3) < 1e-9
    assert abs(refinedial.distinct(["the the the"], 1) - 1 / 3) < 1e-9
    assert abs(refinedial.persona_f1("a b", ["b c d"]) - 0.4) < 1e-9

    with tempfile.TemporaryDirectory() as out:
        stats = refinedial.synthesize(out, users=20, pairs_per_user=10, vocab_size=800, seed=3)
        assert stats["users"] == 20, stats
        print("corpus:", stats)

    if len(sys.argv) > 1:
        run = refinedial.Run(sys.argv[1])
        replies = run.respond([(None, "q0_1 q0_2 q0_3")], seed=1)
        assert len(replies) == 1 and isinstance(replies[0]["response"], str)
        print("response:", replies[0]["response"])

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
