"""Train the tiny fixture bundle and write it (plus corpora) under tests/fixtures.

One-off offline script; torch is only needed here, never by the library.

    python tools/make_fixture.py [--out tests/fixtures] [--steps 3000]

Corpus: a sparse first-order Markov chain over 64 tokens (four successors per
token, Zipf-like probabilities) where, with probability 0.25, the next token
instead repeats the token eight positions back. The bigram part is learnable
through the MLPs, the copy part only through attention.

After training, outlier structure is planted with transformations that leave
the network function (and per-row Wanda masks) unchanged: a layer gets a
handful of input columns scaled up, compensated in the preceding layer-norm
scale/bias, or output rows scaled up, compensated in the consuming
projection. Either makes its weight-magnitude distribution strongly
right-skewed. ``scale_query_key`` is kept for building other fixtures.
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from autoprune.model import perplexity
from autoprune.stats import magnitude_skewness
from autoprune.tensor import LAYER_KINDS, ModelBundle, TokenCorpus, Topology, layer_name, save_bundle, save_corpus

TOPOLOGY = Topology(vocab_size=64, d_model=32, n_heads=2, n_blocks=2, d_mlp=64, max_seq_len=64)
SEQ_LEN = 64
COPY_LAG = 8
COPY_PROB = 0.25


def markov_corpus(n_tokens, rng, table):
    toks = np.empty(n_tokens, dtype=np.int64)
    toks[:COPY_LAG] = rng.integers(0, TOPOLOGY.vocab_size, COPY_LAG)
    probs = np.array([0.55, 0.25, 0.13, 0.07])
    for i in range(COPY_LAG, n_tokens):
        if rng.random() < COPY_PROB:
            toks[i] = toks[i - COPY_LAG]
        else:
            toks[i] = table[toks[i - 1], rng.choice(4, p=probs)]
    return toks


class TinyGPT(torch.nn.Module):
    def __init__(self, t):
        super().__init__()
        self.t = t
        d = t.d_model
        self.embedding = torch.nn.Parameter(torch.randn(t.vocab_size, d) / d**0.5)
        self.pos_embedding = torch.nn.Parameter(torch.randn(t.max_seq_len, d) * 0.02)
        self.blocks = torch.nn.ModuleList()
        for _ in range(t.n_blocks):
            blk = torch.nn.ModuleDict(
                {
                    "ln1": torch.nn.LayerNorm(d, eps=1e-5),
                    "ln2": torch.nn.LayerNorm(d, eps=1e-5),
                    "attention_q": torch.nn.Linear(d, d, bias=False),
                    "attention_k": torch.nn.Linear(d, d, bias=False),
                    "attention_v": torch.nn.Linear(d, d, bias=False),
                    "attention_o": torch.nn.Linear(d, d, bias=False),
                    "mlp_in": torch.nn.Linear(d, t.d_mlp, bias=False),
                    "mlp_out": torch.nn.Linear(t.d_mlp, d, bias=False),
                }
            )
            self.blocks.append(blk)
        self.final_norm = torch.nn.LayerNorm(d, eps=1e-5)
        self.head = torch.nn.Linear(d, t.vocab_size, bias=False)

    def forward(self, idx):
        B, T = idx.shape
        nh, dh = self.t.n_heads, self.t.d_model // self.t.n_heads
        h = self.embedding[idx] + self.pos_embedding[:T]
        mask = torch.triu(torch.ones(T, T, dtype=torch.bool), 1)
        for blk in self.blocks:
            x = blk["ln1"](h)
            q = blk["attention_q"](x).view(B, T, nh, dh).transpose(1, 2)
            k = blk["attention_k"](x).view(B, T, nh, dh).transpose(1, 2)
            v = blk["attention_v"](x).view(B, T, nh, dh).transpose(1, 2)
            att = (q @ k.transpose(-1, -2)) / dh**0.5
            att = att.masked_fill(mask, float("-inf")).softmax(-1)
            ctx = (att @ v).transpose(1, 2).reshape(B, T, -1)
            h = h + blk["attention_o"](ctx)
            x2 = blk["ln2"](h)
            h = h + blk["mlp_out"](torch.nn.functional.gelu(blk["mlp_in"](x2), approximate="tanh"))
        return self.head(self.final_norm(h))


def to_bundle(model):
    sd = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    layers = [sd[f"blocks.{b}.{k}.weight"] for b in range(TOPOLOGY.n_blocks) for k in LAYER_KINDS]
    aux = {
        "embedding": sd["embedding"],
        "pos_embedding": sd["pos_embedding"],
        "final_norm.scale": sd["final_norm.weight"],
        "final_norm.bias": sd["final_norm.bias"],
        "head": sd["head.weight"],
    }
    for b in range(TOPOLOGY.n_blocks):
        for ln in ("ln1", "ln2"):
            aux[f"blocks.{b}.{ln}.scale"] = sd[f"blocks.{b}.{ln}.weight"]
            aux[f"blocks.{b}.{ln}.bias"] = sd[f"blocks.{b}.{ln}.bias"]
    return ModelBundle(TOPOLOGY, layers, aux)


def train(tokens, steps, seed):
    torch.manual_seed(seed)
    model = TinyGPT(TOPOLOGY)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    data = torch.from_numpy(tokens)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        starts = torch.randint(0, data.numel() - SEQ_LEN - 1, (32,), generator=gen)
        batch = torch.stack([data[s:s + SEQ_LEN + 1] for s in starts])
        logits = model(batch[:, :-1])
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, TOPOLOGY.vocab_size), batch[:, 1:].reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0 or step == steps - 1:
            print(f"step {step:5d} loss {loss.item():.4f}")
    return model


def scale_input_columns(weights, aux, block, ln, kinds, cols, factor):
    """Scale columns of the layers fed by ``ln`` and undo it in the layer norm."""
    for k in kinds:
        w = weights[layer_name(block, k)].copy()
        w[:, cols] *= factor
        weights[layer_name(block, k)] = w
    for part in ("scale", "bias"):
        v = aux[f"blocks.{block}.{ln}.{part}"].copy()
        v[cols] /= factor
        aux[f"blocks.{block}.{ln}.{part}"] = v


def scale_value_rows(weights, block, rows, factor):
    v = weights[layer_name(block, "attention_v")].copy()
    o = weights[layer_name(block, "attention_o")].copy()
    v[rows, :] *= factor
    o[:, rows] /= factor
    weights[layer_name(block, "attention_v")] = v
    weights[layer_name(block, "attention_o")] = o


def scale_query_key(weights, block, factor):
    q = weights[layer_name(block, "attention_q")] * factor
    k = weights[layer_name(block, "attention_k")] / factor
    weights[layer_name(block, "attention_q")] = q
    weights[layer_name(block, "attention_k")] = k


def plant(bundle, rng, plan):
    weights = {r.name: r.weight.copy() for r in bundle.layers}
    aux = bundle.aux
    for op in plan:
        kind = op["op"]
        if kind == "columns":
            cols = rng.choice(TOPOLOGY.d_model, op["count"], replace=False)
            scale_input_columns(weights, aux, op["block"], op["ln"], op["kinds"], cols, op["factor"])
        elif kind == "value_rows":
            rows = rng.choice(TOPOLOGY.d_model, op["count"], replace=False)
            scale_value_rows(weights, op["block"], rows, op["factor"])
        elif kind == "query_key":
            scale_query_key(weights, op["block"], op["factor"])
    layers = [weights[r.name] for r in bundle.layers]
    return ModelBundle(TOPOLOGY, layers, aux)


# blocks.0.mlp_in is the layer whose relaxation lowers perplexity the most in
# the dense model, so it is the one given outlier columns.
PLANT = [
    {"op": "columns", "block": 0, "ln": "ln2", "kinds": ["mlp_in"], "count": 3, "factor": 6.0},
]


def main(argv=None):
    torch.set_num_threads(1)
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tests/fixtures")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    table = np.stack([rng.choice(TOPOLOGY.vocab_size, 4, replace=False) for _ in range(TOPOLOGY.vocab_size)])
    train_tokens = markov_corpus(200_000, rng, table)
    calib_tokens = markov_corpus(128 * SEQ_LEN, rng, table)
    eval_tokens = markov_corpus(16 * SEQ_LEN + 1, rng, table)

    model = train(train_tokens, args.steps, args.seed)
    dense = to_bundle(model)
    planted = plant(dense, np.random.default_rng(args.seed + 1), PLANT)

    eval_corpus = TokenCorpus(eval_tokens)
    print("dense ppl", perplexity(dense, eval_corpus, SEQ_LEN))
    print("planted ppl", perplexity(planted, eval_corpus, SEQ_LEN))
    for rec in planted.layers:
        print(f"{rec.name:28s} skew dense {magnitude_skewness(dense.layer(rec.name).weight):7.3f}"
              f" planted {magnitude_skewness(rec.weight):7.3f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(planted, out / "tiny_bundle")
    save_corpus(TokenCorpus(calib_tokens), out / "calib.tok")
    save_corpus(eval_corpus, out / "eval.tok")
    (out / "fixture_meta.json").write_text(
        json.dumps({"seed": args.seed, "steps": args.steps, "seq_len": SEQ_LEN, "plant": PLANT}, indent=2) + "\n"
    )


if __name__ == "__main__":
    main()
