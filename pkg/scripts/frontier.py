"""Sparsity-KL frontier on the toy transformer: train each architecture at each
k, substitute reconstructions, and write a CSV of mean L0, KL and NMSE."""

import argparse
import tempfile
from pathlib import Path

from routesae import evalsuite, toy_lm, trainer
from routesae.evalsuite import Artifact
from routesae.toy_lm import ToyLmConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", default="topk,route-hard,route-soft,route-random")
    ap.add_argument("--ks", default="8,16,32,64")
    ap.add_argument("--M", type=int, default=128)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--n-layers", type=int, default=8)
    ap.add_argument("--n-seqs", type=int, default=160)
    ap.add_argument("--seq-len", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="frontier.csv")
    args = ap.parse_args()

    lm = toy_lm.init_toy_lm(ToyLmConfig(n_layers=args.n_layers, max_seq=args.seq_len, seed=args.seed))
    layers = toy_lm.routing_range(args.n_layers)
    held = toy_lm.synthetic_token_stream(8, args.seq_len, seed=args.seed + 1)
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        shard = Path(tmp) / "train.rsae"
        toy_lm.harvest(lm, toy_lm.synthetic_token_stream(args.n_seqs, args.seq_len, seed=args.seed), layers, shard)
        for arch in args.archs.split(","):
            arts = {}
            for k in (int(v) for v in args.ks.split(",")):
                cfg = trainer.TrainConfig(architecture=arch, M=args.M, k=k, total_steps=args.steps, seed=args.seed)
                ckpt, _ = trainer.train(cfg, [shard])
                arts[k] = Artifact.from_checkpoint(ckpt)
            for row in evalsuite.kl_frontier(lm, arts, held, label=arch):
                print(f"{row.label:13s} k={row.k:3d} L0={row.mean_l0:6.2f} KL={row.mean_kl:.4f} NMSE={row.nmse:.4f}")
                rows.append(row)
    evalsuite.write_frontier_csv(rows, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
