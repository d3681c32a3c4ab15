"""Freeze reference logits for the golden-file regression test.

    python tools/make_golden.py [--out tests/fixtures/golden_logits.npy]

Bundle: ``init_bundle(GOLDEN_TOPOLOGY, seed=7, scale=0.2)``; window: 16 tokens
drawn with ``default_rng(11)``. Both are reproduced by the test.
"""

import argparse

import numpy as np

from autoprune.model import forward, init_bundle
from autoprune.tensor import Topology

GOLDEN_TOPOLOGY = Topology(vocab_size=64, d_model=32, n_heads=2, n_blocks=2, d_mlp=64, max_seq_len=64)
GOLDEN_SEED = 7
GOLDEN_SCALE = 0.2


def golden_case():
    bundle = init_bundle(GOLDEN_TOPOLOGY, seed=GOLDEN_SEED, scale=GOLDEN_SCALE)
    window = np.random.default_rng(11).integers(0, GOLDEN_TOPOLOGY.vocab_size, 16)
    return bundle, window


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tests/fixtures/golden_logits.npy")
    args = ap.parse_args(argv)
    bundle, window = golden_case()
    np.save(args.out, forward(bundle, window))


if __name__ == "__main__":
    main()
