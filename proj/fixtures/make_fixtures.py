#!/usr/bin/env python3
"""Regenerate the committed test fixtures under fixtures/data/.

Trains a toy pre-norm transformer on a synthetic Markov-chain corpus and
exports training checkpoints, a fine-tuned variant (shifted chain), linear
residual fixtures, corpus statistics and probe logits in the .jetm archive
format read by libjetx.

    python3 fixtures/make_fixtures.py --out fixtures/data

Everything is seeded; rerunning reproduces the same files on the same torch
build.
"""

import argparse
import hashlib
import json
import math
import os
import struct

import numpy as np
import torch

VOCAB = 256
DIM = 64
HEADS = 4
MLP_HIDDEN = 256
MAX_POS = 64
SEQ = 32
BATCH = 32
STEPS = 3000
CHECKPOINTS = [0, 50, 100, 200, 400, 800, 1600, 3000]
TUNE_STEPS = 400
EPS = 1e-5
LAYER_DROP = 0.5
CORPUS = 1_000_000


# ---------------------------------------------------------------- vocabulary
def make_vocab(rng):
    onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"]
    vowels = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
    codas = ["", "n", "r", "s", "l", "k", "m", "x"]
    words = set()
    out = []
    while len(out) < VOCAB:
        w = rng.choice(onsets) + rng.choice(vowels) + rng.choice(codas)
        if rng.random() < 0.5:
            w += rng.choice(onsets) + rng.choice(vowels)
        if w not in words:
            words.add(w)
            out.append(w)
    return out


# -------------------------------------------------------------- markov chain
def transition_matrix(rng, boosted=4, sigma=1.5, boost=3.0):
    logits = rng.normal(0.0, sigma, size=(VOCAB, VOCAB))
    for v in range(VOCAB):
        succ = rng.choice(VOCAB, size=boosted, replace=False)
        logits[v, succ] += boost
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def shifted_matrix(rng, base, rows=64):
    out = base.copy()
    changed = rng.choice(VOCAB, size=rows, replace=False)
    fresh = transition_matrix(rng)
    out[changed] = fresh[changed]
    return out, sorted(int(r) for r in changed)


def sample_corpus(rng, trans, length):
    cdf = np.cumsum(trans, axis=1)
    toks = np.empty(length, dtype=np.int64)
    toks[0] = rng.integers(VOCAB)
    u = rng.random(length)
    for i in range(1, length):
        toks[i] = min(int(np.searchsorted(cdf[toks[i - 1]], u[i])), VOCAB - 1)
    return toks


# --------------------------------------------------------------------- model
class Net(torch.nn.Module):
    """Attention / MLP alternating pre-norm residual transformer."""

    def __init__(self, kinds, layer_drop=0.0):
        super().__init__()
        self.kinds = kinds
        self.layer_drop = layer_drop
        p = {}
        p["embed.E"] = torch.nn.Parameter(torch.randn(VOCAB, DIM) * 0.5)
        p["pos.table"] = torch.nn.Parameter(torch.randn(MAX_POS, DIM) * 0.02)
        hd = DIM // HEADS
        for l, kind in enumerate(kinds, start=1):
            p[f"block.{l}.norm.scale"] = torch.nn.Parameter(torch.ones(DIM))
            p[f"block.{l}.norm.bias"] = torch.nn.Parameter(torch.zeros(DIM))
            if kind == "attention":
                for n in ("wq", "wk", "wv"):
                    p[f"block.{l}.attn.{n}"] = torch.nn.Parameter(torch.randn(DIM, HEADS * hd) / math.sqrt(DIM))
                    p[f"block.{l}.attn.b{n[1]}"] = torch.nn.Parameter(torch.zeros(HEADS * hd))
                p[f"block.{l}.attn.wo"] = torch.nn.Parameter(torch.randn(HEADS * hd, DIM) / math.sqrt(DIM) * 0.5)
                p[f"block.{l}.attn.bo"] = torch.nn.Parameter(torch.zeros(DIM))
            else:
                p[f"block.{l}.mlp.win"] = torch.nn.Parameter(torch.randn(DIM, MLP_HIDDEN) / math.sqrt(DIM))
                p[f"block.{l}.mlp.bin"] = torch.nn.Parameter(torch.zeros(MLP_HIDDEN))
                p[f"block.{l}.mlp.wout"] = torch.nn.Parameter(torch.randn(MLP_HIDDEN, DIM) / math.sqrt(MLP_HIDDEN) * 0.5)
                p[f"block.{l}.mlp.bout"] = torch.nn.Parameter(torch.zeros(DIM))
        p["final_norm.scale"] = torch.nn.Parameter(torch.ones(DIM))
        p["final_norm.bias"] = torch.nn.Parameter(torch.zeros(DIM))
        p["unembed.U"] = torch.nn.Parameter(torch.randn(VOCAB, DIM) / math.sqrt(DIM))
        for name, param in p.items():
            self.register_parameter(name.replace(".", "__"), param)
        self.p = p

    def _norm(self, x, prefix):
        return torch.nn.functional.layer_norm(x, (DIM,), self.p[prefix + ".scale"], self.p[prefix + ".bias"], EPS)

    def forward(self, ids):
        p = self.p
        b, t = ids.shape
        h = p["embed.E"][ids] + p["pos.table"][:t]
        hd = DIM // HEADS
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        for l, kind in enumerate(self.kinds, start=1):
            x = self._norm(h, f"block.{l}.norm")
            keep = 1.0
            if self.training and self.layer_drop > 0:
                keep = (torch.rand(b, 1, 1) >= self.layer_drop).to(h.dtype)
            if kind == "attention":
                a = f"block.{l}.attn."
                q = (x @ p[a + "wq"] + p[a + "bq"]).view(b, t, HEADS, hd).transpose(1, 2)
                k = (x @ p[a + "wk"] + p[a + "bk"]).view(b, t, HEADS, hd).transpose(1, 2)
                v = (x @ p[a + "wv"] + p[a + "bv"]).view(b, t, HEADS, hd).transpose(1, 2)
                s = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
                s = s.masked_fill(mask, float("-inf"))
                o = (torch.softmax(s, dim=-1) @ v).transpose(1, 2).reshape(b, t, HEADS * hd)
                h = h + keep * (o @ p[a + "wo"] + p[a + "bo"])
            else:
                m = f"block.{l}.mlp."
                u = torch.nn.functional.gelu(x @ p[m + "win"] + p[m + "bin"])
                h = h + keep * (u @ p[m + "wout"] + p[m + "bout"])
        return self._norm(h, "final_norm") @ p["unembed.U"].T


# ------------------------------------------------------------------- archive
def write_archive(path, tensors, metadata):
    header = {"__metadata__": metadata}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr, dtype = tensors[name]
        arr = np.ascontiguousarray(arr, dtype="<f4" if dtype == "F32" else "<f8")
        raw = arr.tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * ((8 - len(text) % 8) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for raw in blobs:
            f.write(raw)


def norm_meta(kind="layernorm"):
    return {"kind": kind, "eps": EPS}


def export_net(net, path, model_id, vocab, step):
    blocks = []
    for kind in net.kinds:
        if kind == "attention":
            blocks.append({"kind": "attention", "num_heads": HEADS, "head_dim": DIM // HEADS, "norm": norm_meta()})
        else:
            blocks.append({"kind": "mlp", "hidden_dim": MLP_HIDDEN, "activation": "gelu", "norm": norm_meta()})
    meta = {
        "format": "jetm",
        "version": 1,
        "model_id": model_id,
        "step": step,
        "architecture": {
            "vocab_size": VOCAB,
            "hidden_dim": DIM,
            "blocks": blocks,
            "final_norm": norm_meta(),
            "max_positions": MAX_POS,
            "tied_embeddings": False,
        },
        "vocab": vocab,
    }
    tensors = {k: (v.detach().cpu().numpy(), "F32") for k, v in net.p.items()}
    write_archive(path, tensors, meta)


def export_linear(path, model_id, L, d, c, seed):
    rng = np.random.default_rng(seed)
    tensors = {
        "embed.E": (rng.normal(0, 1, (c, d)), "F64"),
        "unembed.U": (rng.normal(0, 1, (c, d)) / math.sqrt(d), "F64"),
    }
    blocks = []
    for l in range(1, L + 1):
        hidden = d
        tensors[f"block.{l}.mlp.win"] = (rng.normal(0, 1, (d, hidden)) / math.sqrt(d), "F64")
        tensors[f"block.{l}.mlp.wout"] = (rng.normal(0, 1, (hidden, d)) / math.sqrt(hidden) * 0.7, "F64")
        blocks.append({"kind": "mlp", "hidden_dim": hidden, "activation": "identity", "norm": {"kind": "none"}})
    meta = {
        "format": "jetm",
        "version": 1,
        "model_id": model_id,
        "architecture": {
            "vocab_size": c,
            "hidden_dim": d,
            "blocks": blocks,
            "final_norm": {"kind": "none"},
            "max_positions": 0,
            "tied_embeddings": False,
        },
        "vocab": [f"w{i}" for i in range(c)],
    }
    write_archive(path, tensors, meta)


# ------------------------------------------------------------------ training
def batches(rng, corpus):
    starts = rng.integers(0, len(corpus) - SEQ - 1, size=BATCH)
    x = np.stack([corpus[s:s + SEQ] for s in starts])
    y = np.stack([corpus[s + 1:s + SEQ + 1] for s in starts])
    return torch.from_numpy(x), torch.from_numpy(y)


def train(net, corpus, steps, lr, rng, on_step=None):
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.01)
    losses = []
    for step in range(1, steps + 1):
        x, y = batches(rng, corpus)
        logits = net(x)
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, VOCAB), y.reshape(-1))
        if not torch.isfinite(loss):
            raise SystemExit(f"training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if on_step:
            on_step(step, float(loss))
    return losses


def eval_loss(net, corpus):
    net.eval()
    with torch.no_grad():
        n = (len(corpus) - 1) // SEQ
        x = torch.from_numpy(corpus[: n * SEQ].reshape(n, SEQ))
        y = torch.from_numpy(corpus[1: n * SEQ + 1].reshape(n, SEQ))
        loss = float(torch.nn.functional.cross_entropy(net(x).reshape(-1, VOCAB), y.reshape(-1)))
    net.train()
    return loss


def sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "data"))
    args = ap.parse_args()
    out = args.out
    os.makedirs(os.path.join(out, "ckpt"), exist_ok=True)

    torch.manual_seed(1234)
    torch.set_num_threads(1)
    rng = np.random.default_rng(20240611)

    vocab = make_vocab(rng)
    trans = transition_matrix(rng)
    shifted, changed_rows = shifted_matrix(rng, trans)
    corpus = sample_corpus(rng, trans, CORPUS)
    heldout = sample_corpus(rng, trans, 8_192)
    tune_corpus = sample_corpus(rng, shifted, 200_000)

    uni = np.bincount(corpus, minlength=VOCAB).astype(np.float64)
    uni /= uni.sum()
    big = np.zeros((VOCAB, VOCAB), dtype=np.int64)
    np.add.at(big, (corpus[:-1], corpus[1:]), 1)

    with open(os.path.join(out, "unigrams.json"), "w") as f:
        json.dump({vocab[i]: float(uni[i]) for i in range(VOCAB)}, f, indent=0, sort_keys=True)
    with open(os.path.join(out, "bigram_counts.json"), "w") as f:
        json.dump({"vocab": vocab, "counts": big.tolist()}, f, separators=(",", ":"))
    with open(os.path.join(out, "markov.json"), "w") as f:
        json.dump({"vocab": vocab, "transition": np.round(trans, 10).tolist(),
                   "shifted_transition": np.round(shifted, 10).tolist(),
                   "shifted_rows": changed_rows}, f, separators=(",", ":"))

    probe_rng = np.random.default_rng(7)
    with open(os.path.join(out, "probe_sentences.txt"), "w") as f:
        f.write("# 100 held-out sentences sampled from the generating chain\n")
        for _ in range(100):
            n = int(probe_rng.integers(6, 17))
            toks = sample_corpus(probe_rng, trans, n)
            f.write(" ".join(vocab[t] for t in toks) + "\n")

    kinds = ["attention", "mlp", "attention", "mlp"]
    net = Net(kinds, layer_drop=LAYER_DROP)
    report = {"checkpoints": []}

    def save_ckpt(step, loss):
        if step in CHECKPOINTS:
            path = os.path.join(out, "ckpt", f"step_{step:05d}.jetm")
            export_net(net, path, f"toy-markov-L4@{step}", vocab, step)
            report["checkpoints"].append({"step": step, "train_loss": loss, "heldout_loss": eval_loss(net, heldout)})
            print(f"step {step:5d} loss {loss:.4f}", flush=True)

    save_ckpt(0, eval_loss(net, heldout))
    train(net, corpus, STEPS, 3e-3, rng, save_ckpt)
    export_net(net, os.path.join(out, "toy-markov-L4.jetm"), "toy-markov-L4", vocab, STEPS)

    # probe logits from a float64 copy of the exported (float32-rounded) weights
    probes = []
    ref = Net(kinds)
    with torch.no_grad():
        for k, v in net.p.items():
            ref.p[k].data = v.detach().double().clone()
        prng = np.random.default_rng(99)
        for _ in range(16):
            ids = sample_corpus(prng, trans, 8)
            logits = ref(torch.from_numpy(ids)[None])[0]
            ce = float(torch.nn.functional.cross_entropy(logits[:-1], torch.from_numpy(ids[1:])))
            probes.append({"ids": ids.tolist(), "logits": logits.tolist(), "cross_entropy": ce})
    with open(os.path.join(out, "probe_logits.json"), "w") as f:
        json.dump({"model": "toy-markov-L4.jetm", "probes": probes}, f, separators=(",", ":"))

    # fine-tune on the shifted chain
    train(net, tune_corpus, TUNE_STEPS, 1e-3, rng)
    export_net(net, os.path.join(out, "toy-markov-L4-tuned.jetm"), "toy-markov-L4-tuned", vocab, STEPS + TUNE_STEPS)
    report["tuned_heldout_loss_on_base_chain"] = eval_loss(net, heldout)

    export_linear(os.path.join(out, "lin.jetm"), "linear-L3", 3, 8, 16, 5)
    export_linear(os.path.join(out, "lin-L4.jetm"), "linear-L4", 4, 16, 24, 6)
    export_linear(os.path.join(out, "toy-L13.jetm"), "linear-L13", 13, 2, 4, 7)

    with open(os.path.join(out, "keywords.txt"), "w") as f:
        f.write("# keyword patterns, one per line; '*' matches any run of characters\n")
        for w in vocab[:6]:
            f.write(w + "\n")
        f.write("sh*\n")
        f.write("qqqq\n")

    with open(os.path.join(out, "training_report.json"), "w") as f:
        json.dump(report, f, indent=1)

    manifest = {}
    for root, _, files in os.walk(out):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            full = os.path.join(root, name)
            manifest[os.path.relpath(full, out)] = sha256(full)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(dict(sorted(manifest.items())), f, indent=1)


if __name__ == "__main__":
    main()
